/** Thin client for the curation HTTP API. */

import { parseScenePayload, type Decision, type SceneListPage, type ScenePayload } from "./types";

export class ApiError extends Error {
  constructor(
    public readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

type FetchLike = typeof fetch;

export class CurationClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchImpl: FetchLike = fetch,
  ) {}

  private async request(path: string, init?: RequestInit): Promise<unknown> {
    const response = await this.fetchImpl(`${this.baseUrl}${path}`, init);
    const body = await response.json().catch(() => ({}));
    if (!response.ok) {
      const detail = (body as { error?: string }).error ?? response.statusText;
      throw new ApiError(response.status, detail);
    }
    return body;
  }

  async listScenes(page = 0, pageSize = 500, status?: Decision): Promise<SceneListPage> {
    const filter = status ? `&status=${status}` : "";
    return (await this.request(
      `/scenes?page=${page}&page_size=${pageSize}${filter}`,
    )) as SceneListPage;
  }

  /** Every scene summary, following pagination to the end. */
  async listAllScenes(status?: Decision): Promise<SceneListPage["scenes"]> {
    const out: SceneListPage["scenes"] = [];
    for (let page = 0; ; page++) {
      const batch = await this.listScenes(page, 500, status);
      out.push(...batch.scenes);
      if (out.length >= batch.total || batch.scenes.length === 0) return out;
    }
  }

  async getScene(id: string): Promise<ScenePayload> {
    return parseScenePayload(await this.request(`/scenes/${id}`));
  }

  async postDecision(id: string, decision: "accepted" | "rejected", reviewer = ""): Promise<void> {
    await this.request(`/scenes/${id}/decision`, {
      method: "POST",
      headers: { "Content-Type": "application/json" },
      body: JSON.stringify({ decision, reviewer }),
    });
  }

  async exportAccepted(): Promise<string[]> {
    const body = (await this.request("/export")) as { accepted: string[] };
    return body.accepted;
  }
}
