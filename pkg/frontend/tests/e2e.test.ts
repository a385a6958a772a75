// @vitest-environment node
//
// Full round trip against the real curation service: generate 100 scenes,
// accept 37 through the review session, check the export, restart the
// service and check the decisions survived.

import { type ChildProcess, execFileSync, spawn } from "node:child_process";
import { mkdtempSync, rmSync } from "node:fs";
import { tmpdir } from "node:os";
import { join, resolve } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { CurationClient } from "../src/api";
import { ReviewSession } from "../src/review";

const REPO_ROOT = resolve(import.meta.dirname, "..", "..");
const PYTHON = process.env.PYTHON ?? "python3";

let workDir: string;
let scenesDir: string;
let recordsPath: string;
let service: ChildProcess | null = null;
let baseUrl = "";

function generateScenes(dir: string, count: number): void {
  const script = `
import sys
from scenediff.scenes import write_scene
from scenediff.synthetic import toy_scene
out, n = sys.argv[1], int(sys.argv[2])
for i in range(n):
    write_scene(toy_scene(i, dims=(16, 16, 8)), f"{out}/scene_{i:03d}.vsc1")
print("ok")
`;
  execFileSync(PYTHON, ["-c", script, dir, String(count)], { cwd: REPO_ROOT, timeout: 120_000 });
}

async function startService(): Promise<void> {
  service = spawn(
    PYTHON,
    [
      "-m",
      "scenediff.cli",
      "serve-curation",
      "--scenes",
      scenesDir,
      "--records",
      recordsPath,
      "--bind",
      "127.0.0.1:0",
    ],
    { cwd: REPO_ROOT, stdio: ["ignore", "pipe", "pipe"] },
  );
  baseUrl = await new Promise<string>((resolvePromise, rejectPromise) => {
    const timer = setTimeout(() => rejectPromise(new Error("service start timeout")), 60_000);
    let buffer = "";
    service!.stdout!.on("data", (chunk: Buffer) => {
      buffer += chunk.toString();
      const match = buffer.match(/curation service on (http:\/\/[\d.]+:\d+)/);
      if (match) {
        clearTimeout(timer);
        resolvePromise(match[1]);
      }
    });
    service!.stderr!.on("data", (chunk: Buffer) => process.stderr.write(chunk));
    service!.on("exit", (code) => rejectPromise(new Error(`service exited early (${code})`)));
  });
  for (let attempt = 0; ; attempt++) {
    try {
      const res = await fetch(`${baseUrl}/healthz`);
      if (res.ok) return;
    } catch {
      if (attempt > 50) throw new Error("service never became healthy");
    }
    await new Promise((r) => setTimeout(r, 100));
  }
}

async function stopService(): Promise<void> {
  if (!service) return;
  const proc = service;
  service = null;
  proc.removeAllListeners("exit");
  const done = new Promise((r) => proc.once("exit", r));
  proc.kill("SIGTERM");
  await done;
}

beforeAll(async () => {
  workDir = mkdtempSync(join(tmpdir(), "curation-e2e-"));
  scenesDir = join(workDir, "scenes");
  recordsPath = join(workDir, "records.jsonl");
  execFileSync("mkdir", ["-p", scenesDir]);
  generateScenes(scenesDir, 100);
  await startService();
}, 240_000);

afterAll(async () => {
  await stopService();
  rmSync(workDir, { recursive: true, force: true });
});

describe("curation round trip", () => {
  it("accepts 37 of 100 scenes and the export matches exactly", async () => {
    const client = new CurationClient(baseUrl);
    const session = new ReviewSession(client, "e2e");
    await session.refresh();
    expect(session.progress.pending).toBe(100);

    const all = (await client.listAllScenes()).map((s) => s.id);
    const acceptSet = new Set(all.filter((_, i) => i % 8 < 3).slice(0, 37));
    expect(acceptSet.size).toBe(37);

    while (session.current) {
      const id = session.current.id;
      const ok = await session.decide(acceptSet.has(id) ? "accepted" : "rejected");
      expect(ok).toBe(true);
    }
    expect(session.progress).toEqual({ pending: 0, accepted: 37, rejected: 63 });

    const exported = await client.exportAccepted();
    expect(exported).toEqual([...acceptSet].sort());

    // status round-trips through GET /scenes
    await session.refresh();
    expect(session.progress).toEqual({ pending: 0, accepted: 37, rejected: 63 });
  }, 240_000);

  it("decisions survive a service restart", async () => {
    const before = await new CurationClient(baseUrl).exportAccepted();
    expect(before).toHaveLength(37);
    await stopService();
    await startService();
    const after = await new CurationClient(baseUrl).exportAccepted();
    expect(after).toEqual(before);
  }, 240_000);

  it("serves renderable payloads for the exported scenes", async () => {
    const client = new CurationClient(baseUrl);
    const [first] = await client.exportAccepted();
    const payload = await client.getScene(first);
    expect(payload.schema_version).toBe("v1");
    expect(payload.coords.length).toBe(payload.labels.length);
    expect(payload.coords.length).toBeGreaterThan(0);
    expect(payload.decision).toBe("accepted");
  }, 60_000);
});
