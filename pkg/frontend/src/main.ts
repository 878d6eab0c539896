// Browser entry point: loads the pending queue for a round, renders each
// mesh with its error heatmap, and records accept/reject verdicts with
// keyboard shortcuts (a = accept, r/x = reject, arrows = navigate).

import * as THREE from "three";

import { PendingRecord, ReviewClient } from "./api.js";
import { ERROR_SCALE_MAX_MM } from "./colormap.js";
import { parsePly } from "./ply.js";
import { LocalStorageQueue, VerdictQueue } from "./queue.js";
import { actionForKey, buildGeometry, createScene } from "./viewer.js";

const params = new URLSearchParams(window.location.search);
const baseUrl = params.get("service") ?? "http://127.0.0.1:8321";
const roundIndex = parseInt(params.get("round") ?? "0", 10);
const author = params.get("author") ?? "reviewer";

const client = new ReviewClient(baseUrl);
const queue = new VerdictQueue(client, new LocalStorageQueue());

const status = document.getElementById("status")!;
const canvasHost = document.getElementById("canvas")!;
const renderer = new THREE.WebGLRenderer({ antialias: true });
canvasHost.appendChild(renderer.domElement);

let records: PendingRecord[] = [];
let index = 0;
let current: { scene: THREE.Scene; camera: THREE.PerspectiveCamera; mesh: THREE.Mesh } | null =
  null;

function setStatus(text: string) {
  const parked = queue.pendingCount;
  status.textContent = parked > 0 ? `${text} — ${parked} verdict(s) queued offline` : text;
}

function resize() {
  const w = canvasHost.clientWidth || 800;
  const h = canvasHost.clientHeight || 600;
  renderer.setSize(w, h);
  if (current) {
    current.camera.aspect = w / h;
    current.camera.updateProjectionMatrix();
  }
}

async function show(i: number) {
  if (records.length === 0) {
    setStatus(`round ${roundIndex}: nothing pending`);
    return;
  }
  index = ((i % records.length) + records.length) % records.length;
  const rec = records[index];
  setStatus(`loading ${rec.record_id}…`);
  const [meshBuf, errors] = await Promise.all([client.mesh(rec.record_id), client.errors(rec.record_id)]);
  const geometry = buildGeometry(parsePly(meshBuf), errors);
  current = createScene(geometry);
  resize();
  renderer.render(current.scene, current.camera);
  const mean = rec.summary["mean_error_mm"];
  setStatus(
    `${index + 1}/${records.length} ${rec.record_id} (scan ${rec.scan_id}, mean ${mean} mm, ` +
      `scale 0–${ERROR_SCALE_MAX_MM} mm)`,
  );
}

async function decide(verdict: "accepted" | "rejected") {
  const rec = records[index];
  if (!rec) return;
  const delivered = await queue.submit(rec.record_id, verdict, author);
  records.splice(index, 1);
  setStatus(delivered ? `${rec.record_id}: ${verdict}` : `${rec.record_id}: ${verdict} (queued)`);
  await show(index);
}

window.addEventListener("keydown", async (ev) => {
  const action = actionForKey(ev.key);
  if (action === "accept") await decide("accepted");
  else if (action === "reject") await decide("rejected");
  else if (action === "next") await show(index + 1);
  else if (action === "prev") await show(index - 1);
});

window.addEventListener("resize", () => {
  resize();
  if (current) renderer.render(current.scene, current.camera);
});

window.addEventListener("online", async () => {
  const delivered = await queue.flush();
  if (delivered > 0) setStatus(`retried ${delivered} queued verdict(s)`);
});

(async () => {
  await queue.flush();
  records = (await client.pending(roundIndex)).filter(
    (r) => r.verdict == null || r.verdict === "pending",
  );
  await show(0);
})().catch((err) => setStatus(`error: ${err}`));
