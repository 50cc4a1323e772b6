import { ApiClient, ApiError } from "./api.js";
import { PendingStore } from "./session.js";
import type {
  AnnotationTask,
  PendingChoice,
  Progress,
  RubricDimension,
  Winner,
} from "./types.js";
import { RUBRIC_DIMENSIONS } from "./types.js";

export type Screen = "loading" | "task" | "done" | "error";

export interface ControllerState {
  screen: Screen;
  task: AnnotationTask | null;
  winner: Winner | null;
  rubric: Partial<Record<RubricDimension, number>>;
  activeDimension: RubricDimension;
  progress: Progress | null;
  progressAt: number | null; // epoch ms of the last progress refresh
  notice: string | null;
  errorMessage: string | null;
}

const STALE_AFTER_MS = 30_000;

/** Headless annotation session: fetch next task, collect a complete choice,
 * submit, advance. All server mutation goes through the injected ApiClient;
 * the unsent choice is parked in PendingStore until the server acknowledges
 * it, so a reload between park and ack re-submits instead of losing it. */
export class AnnotationController {
  private state: ControllerState = {
    screen: "loading",
    task: null,
    winner: null,
    rubric: {},
    activeDimension: RUBRIC_DIMENSIONS[0],
    progress: null,
    progressAt: null,
    notice: null,
    errorMessage: null,
  };

  private listeners: Array<(s: ControllerState) => void> = [];

  constructor(
    private readonly api: ApiClient,
    private readonly annotator: string,
    private readonly pending: PendingStore,
    private readonly now: () => number = () => Date.now(),
  ) {}

  getState(): ControllerState {
    return { ...this.state, rubric: { ...this.state.rubric } };
  }

  onChange(listener: (s: ControllerState) => void): void {
    this.listeners.push(listener);
  }

  private update(patch: Partial<ControllerState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) listener(this.getState());
  }

  /** Resume a parked choice (if any), then pull the next task. */
  async start(): Promise<void> {
    const parked = this.pending.peek();
    if (parked !== null) {
      await this.deliver(parked, "recovered an unsent response");
    }
    await this.advance();
  }

  private async deliver(choice: PendingChoice, notice: string | null): Promise<void> {
    try {
      await this.api.submit({
        task_id: choice.task_id,
        annotator_id: this.annotator,
        ...(choice.winner !== undefined ? { winner: choice.winner } : {}),
        ...(choice.rubric !== undefined ? { rubric: choice.rubric } : {}),
      });
      this.pending.clear();
      if (notice) this.update({ notice });
    } catch (err) {
      if (err instanceof ApiError && err.status === 409) {
        // already recorded server-side: the response is safe, move on
        this.pending.clear();
        this.update({ notice: "response was already recorded; skipping forward" });
        return;
      }
      throw err;
    }
  }

  private async advance(): Promise<void> {
    try {
      const [reply, progress] = await Promise.all([
        this.api.nextTask(this.annotator),
        this.api.progress(this.annotator),
      ]);
      this.update({
        screen: reply.task === null ? "done" : "task",
        task: reply.task,
        winner: null,
        rubric: {},
        activeDimension: RUBRIC_DIMENSIONS[0],
        progress,
        progressAt: this.now(),
      });
    } catch (err) {
      this.update({ screen: "error", errorMessage: err instanceof Error ? err.message : String(err) });
    }
  }

  async refreshProgress(): Promise<void> {
    const progress = await this.api.progress(this.annotator);
    this.update({ progress, progressAt: this.now() });
  }

  progressIsStale(): boolean {
    return this.state.progressAt !== null && this.now() - this.state.progressAt > STALE_AFTER_MS;
  }

  selectWinner(winner: Winner): void {
    if (this.state.task?.kind === "pair") this.update({ winner, notice: null });
  }

  setRubricScore(dimension: RubricDimension, score: number): void {
    if (this.state.task?.kind !== "rubric" || score < 1 || score > 5) return;
    const rubric = { ...this.state.rubric, [dimension]: score };
    const nextIndex = RUBRIC_DIMENSIONS.indexOf(dimension) + 1;
    this.update({
      rubric,
      activeDimension: RUBRIC_DIMENSIONS[Math.min(nextIndex, RUBRIC_DIMENSIONS.length - 1)]!,
      notice: null,
    });
  }

  setActiveDimension(dimension: RubricDimension): void {
    this.update({ activeDimension: dimension });
  }

  canSubmit(): boolean {
    const { task, winner, rubric } = this.state;
    if (task === null) return false;
    if (task.kind === "pair") return winner !== null;
    return RUBRIC_DIMENSIONS.every((d) => typeof rubric[d] === "number");
  }

  /** Park the complete choice, deliver it, advance to the next task. */
  async submit(): Promise<void> {
    if (!this.canSubmit() || this.state.task === null) return;
    const task = this.state.task;
    const choice: PendingChoice =
      task.kind === "pair"
        ? { task_id: task.task_id, winner: this.state.winner! }
        : { task_id: task.task_id, rubric: { ...(this.state.rubric as Record<RubricDimension, number>) } };
    this.pending.park(choice);
    await this.deliver(choice, null);
    await this.advance();
  }

  /** Keyboard shortcuts: 1/2 pick a pair winner, 1-5 score the active rubric
   * dimension, Enter submits a complete choice. Returns true when handled. */
  async handleKey(key: string): Promise<boolean> {
    const task = this.state.task;
    if (task === null) return false;
    if (key === "Enter") {
      if (this.canSubmit()) {
        await this.submit();
        return true;
      }
      return false;
    }
    if (task.kind === "pair") {
      if (key === "1") {
        this.selectWinner("first");
        return true;
      }
      if (key === "2") {
        this.selectWinner("second");
        return true;
      }
      return false;
    }
    if (/^[1-5]$/.test(key)) {
      this.setRubricScore(this.state.activeDimension, Number(key));
      return true;
    }
    return false;
  }
}
