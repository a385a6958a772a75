/** Browser entry point: viewer canvas, legend, counters and keyboard flow. */

import * as THREE from "three";
import { OrbitControls } from "three/examples/jsm/controls/OrbitControls.js";

import { CurationClient } from "./api";
import { createVoxelGroup, renderScenePanel, type SceneView } from "./render";
import { ReviewSession } from "./review";

const SERVICE_URL =
  new URLSearchParams(location.search).get("service") ?? "http://127.0.0.1:8781";

const app = document.getElementById("app")!;
app.innerHTML = `
  <header>
    <span id="scene-title">loading…</span>
    <span id="status-host"></span>
    <span id="counters"></span>
  </header>
  <main><canvas id="viewer"></canvas></main>
  <aside id="legend"></aside>
  <footer>
    <button id="btn-reject" title="R">✗ reject</button>
    <button id="btn-accept" title="A">✓ accept</button>
    <span class="hint">A accept · R reject · ←/→ navigate</span>
    <span id="error-host"></span>
  </footer>
`;

const canvas = document.getElementById("viewer") as HTMLCanvasElement;
const renderer = new THREE.WebGLRenderer({ canvas, antialias: true });
const scene3d = new THREE.Scene();
scene3d.background = new THREE.Color(0x10131a);
const camera = new THREE.PerspectiveCamera(55, 1, 0.05, 500);
scene3d.add(new THREE.AmbientLight(0xffffff, 0.55));
const sun = new THREE.DirectionalLight(0xffffff, 1.2);
sun.position.set(1, 1, 2);
scene3d.add(sun);
const controls = new OrbitControls(camera, canvas);
let currentGroup: THREE.Group | null = null;

function resize(): void {
  const w = canvas.clientWidth || canvas.parentElement!.clientWidth || 800;
  const h = canvas.clientHeight || canvas.parentElement!.clientHeight || 600;
  renderer.setSize(w, h, false);
  camera.aspect = w / h;
  camera.updateProjectionMatrix();
}
window.addEventListener("resize", resize);

function showView(view: SceneView): void {
  if (currentGroup) {
    scene3d.remove(currentGroup);
    currentGroup.traverse((obj) => {
      const mesh = obj as THREE.Mesh;
      mesh.geometry?.dispose();
      (mesh.material as THREE.Material | undefined)?.dispose?.();
    });
  }
  const { group } = createVoxelGroup(view);
  currentGroup = group;
  scene3d.add(group);
  const [cx, cy, cz] = view.center;
  controls.target.set(cx, cy, cz);
  camera.position.set(cx, cy - 40 * view.voxelSize * 8, cz + 30 * view.voxelSize * 8);
  camera.lookAt(cx, cy, cz);
  controls.update();
}

function showLegend(view: SceneView | null): void {
  const legend = document.getElementById("legend")!;
  legend.innerHTML = "";
  if (!view) return;
  for (const entry of view.legend) {
    const row = document.createElement("div");
    row.className = "legend-entry";
    const swatch = document.createElement("span");
    swatch.className = "swatch";
    swatch.style.background = `rgb(${entry.color.join(",")})`;
    row.appendChild(swatch);
    row.appendChild(
      document.createTextNode(` class ${entry.classId} — ${entry.count.toLocaleString()}`),
    );
    legend.appendChild(row);
  }
}

const client = new CurationClient(SERVICE_URL);
const session = new ReviewSession(client, "browser");

async function loadCurrent(): Promise<void> {
  const statusHost = document.getElementById("status-host")!;
  const title = document.getElementById("scene-title")!;
  const current = session.current;
  if (!current) {
    title.textContent = "no pending scenes";
    showLegend(null);
    return;
  }
  title.textContent = `${current.id} (${current.source})`;
  let raw: unknown;
  try {
    raw = await client.getScene(current.id);
  } catch (err) {
    statusHost.innerHTML = `<div class="error-banner">${String(err)}</div>`;
    return;
  }
  const { view } = renderScenePanel(raw, statusHost);
  showLegend(view);
  if (view) showView(view);
}

function showCounters(): void {
  const { pending, accepted, rejected } = session.progress;
  document.getElementById("counters")!.textContent =
    `pending ${pending} · accepted ${accepted} · rejected ${rejected}`;
  const errorHost = document.getElementById("error-host")!;
  errorHost.textContent = session.lastError ?? "";
  errorHost.className = session.lastError ? "error-banner" : "";
}

session.onChange(() => {
  showCounters();
  void loadCurrent();
});

async function decide(decision: "accepted" | "rejected"): Promise<void> {
  await session.decide(decision);
}

document.getElementById("btn-accept")!.addEventListener("click", () => void decide("accepted"));
document.getElementById("btn-reject")!.addEventListener("click", () => void decide("rejected"));
window.addEventListener("keydown", (event) => {
  if (event.key === "a" || event.key === "A") void decide("accepted");
  else if (event.key === "r" || event.key === "R") void decide("rejected");
  else if (event.key === "ArrowRight") session.next();
  else if (event.key === "ArrowLeft") session.previous();
});

function animate(): void {
  requestAnimationFrame(animate);
  controls.update();
  renderer.render(scene3d, camera);
}

resize();
void session.refresh().catch((err) => {
  document.getElementById("error-host")!.innerHTML =
    `<div class="error-banner">service unreachable: ${String(err)} — retry with ?service=URL</div>`;
});
animate();
