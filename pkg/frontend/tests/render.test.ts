// @vitest-environment happy-dom
import { describe, expect, it } from "vitest";

import { buildSceneView, createVoxelGroup, renderScenePanel } from "../src/render";
import { SchemaError, parseScenePayload, type ScenePayload } from "../src/types";

function makePayload(count: number): ScenePayload {
  const coords: [number, number, number][] = [];
  const labels: number[] = [];
  // distinct coordinates through a 64x64x16 grid
  for (let i = 0; i < count; i++) {
    const x = i % 64;
    const y = Math.floor(i / 64) % 64;
    const z = Math.floor(i / (64 * 64)) % 16;
    coords.push([x, y, z]);
    labels.push((i % 3) + 1);
  }
  return {
    schema_version: "v1",
    id: `scene_${count}`,
    grid: {
      min_corner: [0, 0, 0],
      max_corner: [6.4, 6.4, 1.6],
      resolution: 0.1,
      dims: [64, 64, 16],
    },
    class_count: 3,
    coords,
    labels,
    palette: { "1": [255, 0, 0], "2": [0, 255, 0], "3": [0, 0, 255] },
    condition_points: null,
    decision: "pending",
    source: "unconditional",
  };
}

describe("payload parsing", () => {
  it("accepts a valid v1 payload", () => {
    const parsed = parseScenePayload(makePayload(5));
    expect(parsed.coords).toHaveLength(5);
  });

  it("rejects wrong schema versions", () => {
    const bad = { ...makePayload(1), schema_version: "v2" };
    expect(() => parseScenePayload(bad)).toThrow(SchemaError);
  });

  it("rejects label/coord mismatches and missing palette entries", () => {
    const short = { ...makePayload(3), labels: [1, 2] };
    expect(() => parseScenePayload(short)).toThrow(SchemaError);
    const holes = { ...makePayload(3), palette: { "1": [1, 2, 3] } };
    expect(() => parseScenePayload(holes)).toThrow(SchemaError);
  });
});

describe("scene view", () => {
  it.each([0, 1, 10_000])("renders exactly the payload records (%i voxels)", (count) => {
    const view = buildSceneView(makePayload(count));
    expect(view.voxelCount).toBe(count);
    expect(view.recordCount).toBe(count);
    expect(view.decimated).toBe(false);
    expect(view.positions).toHaveLength(count * 3);
    const { mesh } = createVoxelGroup(view);
    expect(mesh.count).toBe(count);
  });

  it("places cubes at metric voxel centers", () => {
    const view = buildSceneView(makePayload(1));
    for (const value of view.positions) {
      expect(value).toBeCloseTo(0.05, 6);
    }
  });

  it("legend covers every class present with counts", () => {
    const view = buildSceneView(makePayload(10));
    expect(view.legend.map((e) => e.classId)).toEqual([1, 2, 3]);
    expect(view.legend.reduce((acc, e) => acc + e.count, 0)).toBe(10);
    expect(view.legend[0].color).toEqual([255, 0, 0]);
  });

  it("decimates above the threshold and says so", () => {
    const view = buildSceneView(makePayload(1000), 100);
    expect(view.decimated).toBe(true);
    expect(view.voxelCount).toBeLessThanOrEqual(100);
    expect(view.recordCount).toBe(1000);
    expect(view.voxelCount).toBe(Math.ceil(1000 / view.decimationStep));
  });

  it("carries condition points into the overlay", () => {
    const payload = { ...makePayload(2), condition_points: [[1, 2, 3]] as [number, number, number][] };
    const view = buildSceneView(payload);
    expect(view.conditionPoints).toHaveLength(3);
    const { group } = createVoxelGroup(view);
    expect(group.getObjectByName("condition-overlay")).toBeTruthy();
  });
});

describe("render panel DOM", () => {
  it("shows a voxel-count badge for good payloads", () => {
    const host = document.createElement("div");
    const { view, error } = renderScenePanel(makePayload(7), host);
    expect(error).toBeNull();
    expect(view?.voxelCount).toBe(7);
    expect(host.querySelector(".badge-count")?.textContent).toContain("7");
    expect(host.querySelector(".error-banner")).toBeNull();
  });

  it("zero-voxel payload renders an explicit zero badge", () => {
    const host = document.createElement("div");
    const { view } = renderScenePanel(makePayload(0), host);
    expect(view?.voxelCount).toBe(0);
    expect(host.querySelector(".badge-count")?.textContent).toContain("0");
  });

  it("schema mismatch shows the banner and renders nothing", () => {
    const host = document.createElement("div");
    const bad = { ...makePayload(4), schema_version: "v0" };
    const { view, error } = renderScenePanel(bad, host);
    expect(view).toBeNull();
    expect(error).toMatch(/schema version/);
    expect(host.querySelector(".error-banner")).toBeTruthy();
    expect(host.querySelector(".badge-count")).toBeNull();
  });
});
