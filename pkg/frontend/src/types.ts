/** Scene payload schema ("v1") served by the curation service. */

export const SCHEMA_VERSION = "v1";

export type Decision = "pending" | "accepted" | "rejected";

export interface GridInfo {
  min_corner: [number, number, number];
  max_corner: [number, number, number];
  resolution: number;
  dims: [number, number, number];
}

export interface ScenePayload {
  schema_version: string;
  id: string;
  grid: GridInfo;
  class_count: number;
  coords: [number, number, number][];
  labels: number[];
  palette: Record<string, [number, number, number]>;
  condition_points: [number, number, number][] | null;
  decision: Decision;
  source: string;
}

export interface SceneSummary {
  id: string;
  decision: Decision;
  source: string;
}

export interface SceneListPage {
  total: number;
  page: number;
  page_size: number;
  scenes: SceneSummary[];
}

export class SchemaError extends Error {}

function isVec3(value: unknown): value is [number, number, number] {
  return Array.isArray(value) && value.length === 3 && value.every((v) => typeof v === "number");
}

/**
 * Validate a raw service response into a ScenePayload.
 *
 * Throws SchemaError on a version mismatch or malformed payload so the
 * caller can show an error banner instead of a partial render.
 */
export function parseScenePayload(raw: unknown): ScenePayload {
  if (typeof raw !== "object" || raw === null) {
    throw new SchemaError("payload is not an object");
  }
  const data = raw as Record<string, unknown>;
  if (data.schema_version !== SCHEMA_VERSION) {
    throw new SchemaError(
      `unsupported schema version ${String(data.schema_version)} (expected ${SCHEMA_VERSION})`,
    );
  }
  if (typeof data.id !== "string") throw new SchemaError("missing scene id");
  const grid = data.grid as GridInfo | undefined;
  if (
    !grid ||
    !isVec3(grid.min_corner) ||
    !isVec3(grid.max_corner) ||
    typeof grid.resolution !== "number" ||
    !isVec3(grid.dims)
  ) {
    throw new SchemaError("malformed grid spec");
  }
  const coords = data.coords;
  const labels = data.labels;
  if (!Array.isArray(coords) || !Array.isArray(labels) || coords.length !== labels.length) {
    throw new SchemaError("coords/labels missing or length mismatch");
  }
  const palette = (data.palette ?? {}) as Record<string, [number, number, number]>;
  for (const label of labels as number[]) {
    if (!(String(label) in palette)) {
      throw new SchemaError(`palette has no color for class ${label}`);
    }
  }
  const cond = data.condition_points;
  if (cond !== null && cond !== undefined && !Array.isArray(cond)) {
    throw new SchemaError("condition_points must be a list or null");
  }
  return {
    schema_version: SCHEMA_VERSION,
    id: data.id,
    grid,
    class_count: (data.class_count as number) ?? 0,
    coords: coords as [number, number, number][],
    labels: labels as number[],
    palette,
    condition_points: (cond ?? null) as ScenePayload["condition_points"],
    decision: (data.decision as Decision) ?? "pending",
    source: (data.source as string) ?? "unconditional",
  };
}
