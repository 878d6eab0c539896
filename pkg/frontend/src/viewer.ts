// three.js scene pieces kept separate from DOM wiring so the geometry
// construction and keyboard mapping stay unit-testable.

import * as THREE from "three";

import { vertexColors } from "./colormap.js";
import { PlyMesh } from "./ply.js";

export function buildGeometry(mesh: PlyMesh, errors: (number | null)[]): THREE.BufferGeometry {
  const n = mesh.vertices.length / 3;
  if (errors.length !== n) {
    throw new Error(`errors length ${errors.length} does not match ${n} vertices`);
  }
  const geom = new THREE.BufferGeometry();
  geom.setAttribute("position", new THREE.BufferAttribute(mesh.vertices, 3));
  geom.setAttribute("color", new THREE.BufferAttribute(vertexColors(errors), 3));
  geom.setIndex(new THREE.BufferAttribute(new Uint32Array(mesh.faces), 1));
  if (mesh.normals) geom.setAttribute("normal", new THREE.BufferAttribute(mesh.normals, 3));
  else geom.computeVertexNormals();
  return geom;
}

export type ReviewAction = "accept" | "reject" | "next" | "prev" | null;

export function actionForKey(key: string): ReviewAction {
  switch (key) {
    case "a":
      return "accept";
    case "r":
    case "x":
      return "reject";
    case "ArrowRight":
    case "j":
      return "next";
    case "ArrowLeft":
    case "k":
      return "prev";
    default:
      return null;
  }
}

export function createScene(geometry: THREE.BufferGeometry): {
  scene: THREE.Scene;
  camera: THREE.PerspectiveCamera;
  mesh: THREE.Mesh;
} {
  const scene = new THREE.Scene();
  scene.background = new THREE.Color(0x18181c);
  const material = new THREE.MeshLambertMaterial({ vertexColors: true, side: THREE.DoubleSide });
  const mesh = new THREE.Mesh(geometry, material);
  scene.add(mesh);
  scene.add(new THREE.AmbientLight(0xffffff, 0.55));
  const key = new THREE.DirectionalLight(0xffffff, 0.9);
  key.position.set(1, 1, 2);
  scene.add(key);

  geometry.computeBoundingSphere();
  const sphere = geometry.boundingSphere!;
  const camera = new THREE.PerspectiveCamera(40, 1, sphere.radius * 0.01, sphere.radius * 20);
  camera.position.copy(sphere.center).add(new THREE.Vector3(0, 0, sphere.radius * 3.2));
  camera.lookAt(sphere.center);
  return { scene, camera, mesh };
}
