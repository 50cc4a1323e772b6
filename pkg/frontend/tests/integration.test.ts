// Scripted three-annotator session against the live annotation service:
// six pair tasks (one four-candidate set), a forced mid-session reload for
// one annotator, and an export check at the end.

import { spawn, type ChildProcess } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import { tmpdir } from "node:os";
import { join } from "node:path";
import { afterAll, beforeAll, describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { AnnotationController } from "../src/controller.js";
import { MemoryStorage, PendingStore } from "../src/session.js";
import type { Winner } from "../src/types.js";

const PORT = 8397;
const BASE = `http://127.0.0.1:${PORT}`;

let server: ChildProcess;
let storePath: string;

async function waitForServer(): Promise<void> {
  const api = new ApiClient(BASE);
  for (let attempt = 0; attempt < 100; attempt++) {
    try {
      await api.progress("a1");
      return;
    } catch {
      await new Promise((resolve) => setTimeout(resolve, 150));
    }
  }
  throw new Error("fixture server did not come up");
}

beforeAll(async () => {
  storePath = join(mkdtempSync(join(tmpdir(), "memecap-ui-")), "responses.jsonl");
  server = spawn(
    "python3",
    [join(__dirname, "fixture_server.py"), "--port", String(PORT), "--store", storePath],
    { stdio: "inherit" },
  );
  await waitForServer();
}, 30_000);

afterAll(() => {
  server.kill();
});

// Every annotator prefers the lexicographically later candidate, so the
// scripted consensus ordering (worst to best) is c0 < c1 < c2 < c3.
function scriptedWinner(candidateIds: string[]): Winner {
  return candidateIds[1]! > candidateIds[0]! ? "second" : "first";
}

async function runSession(
  annotator: string,
  storage: MemoryStorage,
  opts: { reloadAfter?: number } = {},
): Promise<number> {
  let api = new ApiClient(BASE);
  let controller = new AnnotationController(api, annotator, new PendingStore(storage, annotator));
  await controller.start();
  let answered = 0;
  while (controller.getState().screen === "task") {
    const task = controller.getState().task!;
    expect(task.kind).toBe("pair");
    controller.selectWinner(scriptedWinner(task.candidate_ids));

    if (opts.reloadAfter !== undefined && answered === opts.reloadAfter) {
      // Forced mid-session reload: the choice is parked (exactly what the
      // submit path does first) but the tab dies before the POST. A fresh
      // controller over the same session storage must deliver it.
      new PendingStore(storage, annotator).park({
        task_id: task.task_id,
        winner: scriptedWinner(task.candidate_ids),
      });
      controller = new AnnotationController(api, annotator, new PendingStore(storage, annotator));
      await controller.start(); // resubmits the parked choice, advances
      answered += 1;
      continue;
    }

    await controller.submit();
    answered += 1;
  }
  return answered;
}

describe("scripted annotation session", () => {
  it("three annotators complete six tasks each; export matches the script; no responses lost", async () => {
    const counts: Record<string, number> = {};
    counts.a1 = await runSession("a1", new MemoryStorage());
    counts.a2 = await runSession("a2", new MemoryStorage(), { reloadAfter: 2 });
    counts.a3 = await runSession("a3", new MemoryStorage());

    expect(counts).toEqual({ a1: 6, a2: 6, a3: 6 });

    const api = new ApiClient(BASE);
    for (const annotator of ["a1", "a2", "a3"]) {
      const progress = await api.progress(annotator);
      expect(progress.completed).toBe(6);
      expect(progress.remaining).toBe(0);
    }

    const exported = await api.exportPreferences();
    expect(exported).toHaveLength(1);
    expect(exported[0]).toMatchObject({
      meme_id: "meme_fixture",
      ordering: ["c0", "c1", "c2", "c3"],
      source: "human",
    });
    expect(exported[0]!.agreement).toBeCloseTo(1.0, 9);

    // zero lost responses: the durable store holds exactly 18 acknowledged
    // lines (3 annotators x 6 tasks), each task answered once per annotator
    const lines = readFileSync(storePath, "utf-8").trim().split("\n");
    expect(lines).toHaveLength(18);
    const seen = new Set(lines.map((line) => {
      const row = JSON.parse(line) as { task_id: string; annotator_id: string };
      return `${row.task_id}|${row.annotator_id}`;
    }));
    expect(seen.size).toBe(18);
  }, 60_000);
});
