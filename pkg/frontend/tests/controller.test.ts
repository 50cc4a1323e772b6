import { describe, expect, it } from "vitest";

import { ApiClient, type FetchLike } from "../src/api.js";
import { AnnotationController } from "../src/controller.js";
import { MemoryStorage, PendingStore } from "../src/session.js";
import type { AnnotationTask } from "../src/types.js";

function pairTask(id: string, captions: [string, string]): AnnotationTask {
  return {
    task_id: id,
    kind: "pair",
    meme_id: "m0",
    candidate_ids: ["cA", "cB"],
    captions,
    image_url: "/memes/m0/image",
  };
}

function rubricTask(id: string): AnnotationTask {
  return {
    task_id: id,
    kind: "rubric",
    meme_id: "m0",
    candidate_ids: ["cA"],
    captions: ["a caption"],
    image_url: "/memes/m0/image",
    criteria: {
      informativeness: { "1": "Score 1 - lowest" },
      relevance: { "1": "Score 1 - lowest" },
      creativity: { "1": "Score 1 - lowest" },
      humor: { "1": "Score 1 - lowest" },
    },
  };
}

/** In-memory stand-in for the annotation service. */
class FakeService {
  submissions: Array<Record<string, unknown>> = [];
  private answered = new Set<string>();

  constructor(
    private queue: AnnotationTask[],
    readonly conflictOn: Set<string> = new Set(),
  ) {}

  fetch: FetchLike = async (input, init) => {
    const url = new URL(input, "http://svc");
    if (url.pathname === "/tasks/next") {
      const next = this.queue.find((t) => !this.answered.has(t.task_id)) ?? null;
      return { status: 200, json: async () => ({ task: next }) };
    }
    if (url.pathname === "/progress") {
      const completed = this.answered.size;
      return {
        status: 200,
        json: async () => ({ completed, remaining: this.queue.length - completed, pending_sets: 0 }),
      };
    }
    if (url.pathname === "/responses" && init?.method === "POST") {
      const body = JSON.parse(init.body ?? "{}") as Record<string, unknown>;
      const taskId = body.task_id as string;
      if (this.answered.has(taskId) || this.conflictOn.has(taskId)) {
        this.answered.add(taskId);
        return { status: 409, json: async () => ({ detail: "duplicate" }) };
      }
      this.answered.add(taskId);
      this.submissions.push(body);
      return { status: 200, json: async () => ({ status: "ok", task_id: taskId }) };
    }
    return { status: 404, json: async () => ({ detail: "not found" }) };
  };
}

function controllerFor(service: FakeService, storage = new MemoryStorage(), annotator = "a1") {
  const api = new ApiClient("", service.fetch);
  return new AnnotationController(api, annotator, new PendingStore(storage, annotator));
}

describe("pair tasks", () => {
  it("starts with neither caption preselected and submit blocked", async () => {
    const service = new FakeService([pairTask("t1", ["left", "right"])]);
    const controller = controllerFor(service);
    await controller.start();
    const state = controller.getState();
    expect(state.screen).toBe("task");
    expect(state.winner).toBeNull();
    expect(controller.canSubmit()).toBe(false);
  });

  it("selecting candidate B posts winner=second", async () => {
    const service = new FakeService([pairTask("t1", ["left", "right"])]);
    const controller = controllerFor(service);
    await controller.start();
    controller.selectWinner("second");
    expect(controller.canSubmit()).toBe(true);
    await controller.submit();
    expect(service.submissions).toHaveLength(1);
    expect(service.submissions[0]).toMatchObject({ task_id: "t1", annotator_id: "a1", winner: "second" });
    expect(controller.getState().screen).toBe("done");
  });

  it("keyboard 1/2 select and Enter submits", async () => {
    const service = new FakeService([pairTask("t1", ["left", "right"])]);
    const controller = controllerFor(service);
    await controller.start();
    expect(await controller.handleKey("Enter")).toBe(false); // incomplete
    expect(await controller.handleKey("2")).toBe(true);
    expect(controller.getState().winner).toBe("second");
    expect(await controller.handleKey("1")).toBe(true);
    expect(controller.getState().winner).toBe("first");
    expect(await controller.handleKey("Enter")).toBe(true);
    expect(service.submissions[0]).toMatchObject({ winner: "first" });
  });
});

describe("rubric tasks", () => {
  it("submits only when all four dimensions are scored, body carries the integers", async () => {
    const service = new FakeService([rubricTask("r1")]);
    const controller = controllerFor(service);
    await controller.start();
    controller.setRubricScore("informativeness", 4);
    controller.setRubricScore("relevance", 3);
    controller.setRubricScore("creativity", 5);
    expect(controller.canSubmit()).toBe(false);
    controller.setRubricScore("humor", 2);
    expect(controller.canSubmit()).toBe(true);
    await controller.submit();
    expect(service.submissions[0]).toMatchObject({
      task_id: "r1",
      rubric: { informativeness: 4, relevance: 3, creativity: 5, humor: 2 },
    });
  });

  it("digit keys score the active dimension and advance it", async () => {
    const service = new FakeService([rubricTask("r1")]);
    const controller = controllerFor(service);
    await controller.start();
    for (const key of ["4", "3", "5", "2"]) {
      expect(await controller.handleKey(key)).toBe(true);
    }
    expect(controller.getState().rubric).toEqual({
      informativeness: 4,
      relevance: 3,
      creativity: 5,
      humor: 2,
    });
  });
});

describe("queue handling", () => {
  it("empty queue lands on the done screen with counts", async () => {
    const service = new FakeService([]);
    const controller = controllerFor(service);
    await controller.start();
    const state = controller.getState();
    expect(state.screen).toBe("done");
    expect(state.progress).toMatchObject({ completed: 0, remaining: 0 });
  });

  it("conflict replies skip forward with a notice and keep the session alive", async () => {
    const service = new FakeService(
      [pairTask("t1", ["a", "b"]), pairTask("t2", ["c", "d"])],
      new Set(["t1"]),
    );
    const controller = controllerFor(service);
    await controller.start();
    controller.selectWinner("first");
    await controller.submit();
    const state = controller.getState();
    expect(state.notice).toMatch(/already recorded/);
    expect(state.task?.task_id).toBe("t2");
    expect(service.submissions).toHaveLength(0); // t1 never counted twice
  });
});

describe("pending-choice durability", () => {
  it("a parked choice survives a reload and is delivered exactly once", async () => {
    const storage = new MemoryStorage();
    const service = new FakeService([pairTask("t1", ["a", "b"]), pairTask("t2", ["c", "d"])]);
    // park without delivering: the moment between click and ack
    new PendingStore(storage, "a1").park({ task_id: "t1", winner: "second" });
    const revived = controllerFor(service, storage);
    await revived.start();
    expect(service.submissions).toHaveLength(1);
    expect(service.submissions[0]).toMatchObject({ task_id: "t1", winner: "second" });
    expect(revived.getState().task?.task_id).toBe("t2");
    expect(new PendingStore(storage, "a1").peek()).toBeNull();
  });

  it("a parked choice already recorded server-side clears without double-count", async () => {
    const storage = new MemoryStorage();
    const service = new FakeService([pairTask("t2", ["c", "d"])], new Set(["t1"]));
    new PendingStore(storage, "a1").park({ task_id: "t1", winner: "first" });
    const revived = controllerFor(service, storage);
    await revived.start();
    expect(service.submissions).toHaveLength(0);
    expect(new PendingStore(storage, "a1").peek()).toBeNull();
    expect(revived.getState().task?.task_id).toBe("t2");
  });
});

describe("progress staleness", () => {
  it("flags progress older than 30 seconds", async () => {
    let clock = 1_000;
    const service = new FakeService([pairTask("t1", ["a", "b"])]);
    const api = new ApiClient("", service.fetch);
    const controller = new AnnotationController(
      api,
      "a1",
      new PendingStore(new MemoryStorage(), "a1"),
      () => clock,
    );
    await controller.start();
    expect(controller.progressIsStale()).toBe(false);
    clock += 31_000;
    expect(controller.progressIsStale()).toBe(true);
    await controller.refreshProgress();
    expect(controller.progressIsStale()).toBe(false);
  });
});
