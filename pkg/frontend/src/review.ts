/**
 * Review session state machine.
 *
 * The server is the source of truth: the queue and counters come from
 * GET /scenes, decisions are the only mutations, and an optimistic update
 * rolls back whenever its POST fails so the UI never shows a decision the
 * server has not acknowledged.
 */

import type { CurationClient } from "./api";
import type { Decision, SceneSummary } from "./types";

export interface ReviewCounts {
  pending: number;
  accepted: number;
  rejected: number;
}

export type SessionListener = () => void;

export class ReviewSession {
  private queue: SceneSummary[] = [];
  private cursor = 0;
  private counts: ReviewCounts = { pending: 0, accepted: 0, rejected: 0 };
  private listeners: SessionListener[] = [];
  lastError: string | null = null;

  constructor(
    private readonly client: CurationClient,
    private readonly reviewer = "",
  ) {}

  onChange(listener: SessionListener): void {
    this.listeners.push(listener);
  }

  private emit(): void {
    for (const listener of this.listeners) listener();
  }

  /** Sync queue and counters with the server. */
  async refresh(): Promise<void> {
    const all = await this.client.listAllScenes();
    this.counts = { pending: 0, accepted: 0, rejected: 0 };
    for (const scene of all) this.counts[scene.decision]++;
    this.queue = all.filter((s) => s.decision === "pending");
    this.cursor = Math.min(this.cursor, Math.max(this.queue.length - 1, 0));
    this.lastError = null;
    this.emit();
  }

  get current(): SceneSummary | null {
    return this.queue[this.cursor] ?? null;
  }

  get progress(): ReviewCounts {
    return { ...this.counts };
  }

  get remaining(): number {
    return this.queue.length;
  }

  next(): void {
    if (this.cursor < this.queue.length - 1) {
      this.cursor++;
      this.emit();
    }
  }

  previous(): void {
    if (this.cursor > 0) {
      this.cursor--;
      this.emit();
    }
  }

  /**
   * Decide the current scene. The local state advances immediately; a failed
   * POST restores the scene at its queue position and surfaces the error.
   */
  async decide(decision: "accepted" | "rejected"): Promise<boolean> {
    const scene = this.current;
    if (!scene) return false;
    const position = this.cursor;
    this.queue.splice(position, 1);
    this.counts.pending--;
    this.counts[decision]++;
    if (this.cursor >= this.queue.length) this.cursor = Math.max(this.queue.length - 1, 0);
    this.lastError = null;
    this.emit();
    try {
      await this.client.postDecision(scene.id, decision, this.reviewer);
      return true;
    } catch (err) {
      this.queue.splice(position, 0, scene);
      this.cursor = position;
      this.counts.pending++;
      this.counts[decision]--;
      this.lastError = `decision for ${scene.id} failed: ${String(err)}`;
      this.emit();
      return false;
    }
  }
}
