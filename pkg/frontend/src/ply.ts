// Minimal binary-little-endian PLY reader for the meshes served by the
// review service: float32 vertex properties x,y,z (optionally nx,ny,nz)
// followed by faces stored as a uchar count (always 3) and three int32
// vertex indices.

export interface PlyMesh {
  vertices: Float32Array; // flat [x0,y0,z0, x1,...]
  normals: Float32Array | null;
  faces: Int32Array; // flat triangle indices
}

const VERTEX_PROPS = ["x", "y", "z", "nx", "ny", "nz"];

export function parsePly(buffer: ArrayBuffer): PlyMesh {
  const bytes = new Uint8Array(buffer);
  // Header is ASCII terminated by "end_header\n".
  const marker = "end_header\n";
  const headerLimit = Math.min(bytes.length, 4096);
  let headerText = "";
  for (let i = 0; i < headerLimit; i++) headerText += String.fromCharCode(bytes[i]);
  const end = headerText.indexOf(marker);
  if (end < 0) throw new Error("not a PLY file: missing end_header");
  const header = headerText.slice(0, end).split("\n");
  if (header[0] !== "ply") throw new Error("not a PLY file: bad magic");
  if (!header.some((l) => l === "format binary_little_endian 1.0")) {
    throw new Error("unsupported PLY format: expected binary_little_endian 1.0");
  }

  let vertexCount = 0;
  let faceCount = 0;
  const vertexProps: string[] = [];
  let element = "";
  for (const line of header.slice(1)) {
    const parts = line.trim().split(/\s+/);
    if (parts[0] === "element") {
      element = parts[1];
      if (element === "vertex") vertexCount = parseInt(parts[2], 10);
      else if (element === "face") faceCount = parseInt(parts[2], 10);
    } else if (parts[0] === "property" && element === "vertex") {
      if (parts[1] !== "float") throw new Error(`unsupported vertex property type: ${parts[1]}`);
      vertexProps.push(parts[2]);
    }
  }
  if (vertexProps.length < 3 || vertexProps.slice(0, 3).join(",") !== "x,y,z") {
    throw new Error("unsupported vertex layout: expected x,y,z first");
  }
  for (const p of vertexProps) {
    if (!VERTEX_PROPS.includes(p)) throw new Error(`unsupported vertex property: ${p}`);
  }
  const hasNormals = vertexProps.length === 6;

  const stride = vertexProps.length * 4;
  let offset = end + marker.length;
  if (offset + vertexCount * stride > bytes.length) throw new Error("truncated PLY vertex data");

  const view = new DataView(buffer);
  const vertices = new Float32Array(vertexCount * 3);
  const normals = hasNormals ? new Float32Array(vertexCount * 3) : null;
  for (let i = 0; i < vertexCount; i++) {
    const base = offset + i * stride;
    for (let j = 0; j < 3; j++) vertices[i * 3 + j] = view.getFloat32(base + j * 4, true);
    if (normals) {
      for (let j = 0; j < 3; j++) normals[i * 3 + j] = view.getFloat32(base + 12 + j * 4, true);
    }
  }
  offset += vertexCount * stride;

  const faces = new Int32Array(faceCount * 3);
  for (let i = 0; i < faceCount; i++) {
    if (offset + 13 > bytes.length) throw new Error("truncated PLY face data");
    const n = view.getUint8(offset);
    if (n !== 3) throw new Error(`non-triangular face with ${n} vertices`);
    for (let j = 0; j < 3; j++) faces[i * 3 + j] = view.getInt32(offset + 1 + j * 4, true);
    offset += 13;
  }
  return { vertices, normals, faces };
}
