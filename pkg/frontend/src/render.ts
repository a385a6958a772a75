/**
 * Scene-view construction and three.js mesh assembly.
 *
 * buildSceneView is pure data (instance positions, colors, legend,
 * decimation) so tests can assert on rendered voxel counts without WebGL;
 * createVoxelGroup turns a view into instanced cubes plus an optional
 * condition-point overlay.
 */

import * as THREE from "three";

import { SchemaError, parseScenePayload, type ScenePayload } from "./types";

export const DECIMATION_THRESHOLD = 200_000;

export interface LegendEntry {
  classId: number;
  color: [number, number, number];
  count: number;
}

export interface SceneView {
  id: string;
  /** voxels actually rendered (after decimation, if any) */
  voxelCount: number;
  /** voxels present in the payload */
  recordCount: number;
  decimated: boolean;
  decimationStep: number;
  positions: Float32Array; // metric voxel centers, xyz per instance
  colors: Float32Array; // rgb in [0,1] per instance
  voxelSize: number;
  center: [number, number, number];
  legend: LegendEntry[];
  conditionPoints: Float32Array | null;
}

export function buildSceneView(
  payload: ScenePayload,
  decimationThreshold = DECIMATION_THRESHOLD,
): SceneView {
  const { grid, coords, labels, palette } = payload;
  const step = coords.length > decimationThreshold ? Math.ceil(coords.length / decimationThreshold) : 1;
  const kept = step === 1 ? coords.length : Math.ceil(coords.length / step);

  const positions = new Float32Array(kept * 3);
  const colors = new Float32Array(kept * 3);
  const counts = new Map<number, number>();
  let out = 0;
  for (let i = 0; i < coords.length; i++) {
    counts.set(labels[i], (counts.get(labels[i]) ?? 0) + 1);
    if (i % step !== 0) continue;
    const [x, y, z] = coords[i];
    positions[out * 3] = grid.min_corner[0] + (x + 0.5) * grid.resolution;
    positions[out * 3 + 1] = grid.min_corner[1] + (y + 0.5) * grid.resolution;
    positions[out * 3 + 2] = grid.min_corner[2] + (z + 0.5) * grid.resolution;
    const rgb = palette[String(labels[i])];
    colors[out * 3] = rgb[0] / 255;
    colors[out * 3 + 1] = rgb[1] / 255;
    colors[out * 3 + 2] = rgb[2] / 255;
    out++;
  }

  const legend = [...counts.entries()]
    .sort((a, b) => a[0] - b[0])
    .map(([classId, count]) => ({
      classId,
      color: palette[String(classId)],
      count,
    }));

  let conditionPoints: Float32Array | null = null;
  if (payload.condition_points && payload.condition_points.length) {
    conditionPoints = new Float32Array(payload.condition_points.length * 3);
    payload.condition_points.forEach(([x, y, z], i) => {
      conditionPoints![i * 3] = x;
      conditionPoints![i * 3 + 1] = y;
      conditionPoints![i * 3 + 2] = z;
    });
  }

  return {
    id: payload.id,
    voxelCount: out,
    recordCount: coords.length,
    decimated: step > 1,
    decimationStep: step,
    positions,
    colors,
    voxelSize: grid.resolution,
    center: [
      (grid.min_corner[0] + grid.max_corner[0]) / 2,
      (grid.min_corner[1] + grid.max_corner[1]) / 2,
      (grid.min_corner[2] + grid.max_corner[2]) / 2,
    ],
    legend,
    conditionPoints,
  };
}

/** Instanced cubes (plus condition overlay) for a built view. */
export function createVoxelGroup(view: SceneView): { group: THREE.Group; mesh: THREE.InstancedMesh } {
  const geometry = new THREE.BoxGeometry(view.voxelSize, view.voxelSize, view.voxelSize);
  const material = new THREE.MeshLambertMaterial({ vertexColors: false });
  const mesh = new THREE.InstancedMesh(geometry, material, view.voxelCount);
  const matrix = new THREE.Matrix4();
  const color = new THREE.Color();
  for (let i = 0; i < view.voxelCount; i++) {
    matrix.setPosition(
      view.positions[i * 3],
      view.positions[i * 3 + 1],
      view.positions[i * 3 + 2],
    );
    mesh.setMatrixAt(i, matrix);
    color.setRGB(view.colors[i * 3], view.colors[i * 3 + 1], view.colors[i * 3 + 2]);
    mesh.setColorAt(i, color);
  }
  mesh.instanceMatrix.needsUpdate = true;
  if (mesh.instanceColor) mesh.instanceColor.needsUpdate = true;

  const group = new THREE.Group();
  group.add(mesh);
  if (view.conditionPoints) {
    const pointsGeo = new THREE.BufferGeometry();
    pointsGeo.setAttribute("position", new THREE.BufferAttribute(view.conditionPoints, 3));
    const points = new THREE.Points(
      pointsGeo,
      new THREE.PointsMaterial({ color: 0xffffff, size: view.voxelSize }),
    );
    points.name = "condition-overlay";
    group.add(points);
  }
  return { group, mesh };
}

export interface RenderResult {
  view: SceneView | null;
  error: string | null;
}

/**
 * Validate + build a view, updating the status DOM: an error banner on
 * schema mismatch (and no partial view), a voxel-count badge and a
 * "decimated" badge otherwise.
 */
export function renderScenePanel(raw: unknown, statusHost: HTMLElement): RenderResult {
  statusHost.querySelectorAll(".error-banner, .badge").forEach((el) => el.remove());
  let payload: ScenePayload;
  try {
    payload = parseScenePayload(raw);
  } catch (err) {
    const banner = statusHost.ownerDocument.createElement("div");
    banner.className = "error-banner";
    banner.textContent = err instanceof SchemaError ? err.message : String(err);
    statusHost.appendChild(banner);
    return { view: null, error: banner.textContent };
  }
  const view = buildSceneView(payload);
  const badge = statusHost.ownerDocument.createElement("span");
  badge.className = "badge badge-count";
  badge.textContent = `${view.voxelCount.toLocaleString()} voxels`;
  statusHost.appendChild(badge);
  if (view.decimated) {
    const dec = statusHost.ownerDocument.createElement("span");
    dec.className = "badge badge-decimated";
    dec.textContent = `decimated 1/${view.decimationStep}`;
    statusHost.appendChild(dec);
  }
  return { view, error: null };
}
