import { ApiClient } from "./api.js";
import { AnnotationController, type ControllerState } from "./controller.js";
import { PendingStore, type StorageLike } from "./session.js";
import { RUBRIC_DIMENSIONS } from "./types.js";

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className?: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  if (className) node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function annotatorId(): string {
  const fromQuery = new URLSearchParams(window.location.search).get("annotator");
  if (fromQuery) {
    window.sessionStorage.setItem("memecap.annotator", fromQuery);
    return fromQuery;
  }
  const saved = window.sessionStorage.getItem("memecap.annotator");
  if (saved) return saved;
  const typed = window.prompt("annotator id:") ?? "a1";
  window.sessionStorage.setItem("memecap.annotator", typed);
  return typed;
}

function renderProgress(state: ControllerState, stale: boolean): HTMLElement {
  const bar = el("div", "progress");
  if (state.progress) {
    const { completed, remaining, pending_sets } = state.progress;
    bar.append(
      el("span", "stat", `done ${completed}`),
      el("span", "stat", `left ${remaining}`),
      el("span", "stat", `sets waiting for a third annotator: ${pending_sets}`),
    );
  }
  if (stale) bar.append(el("span", "stale", "progress may be stale"));
  return bar;
}

function renderPair(state: ControllerState, controller: AnnotationController): HTMLElement {
  const wrap = el("div", "pair");
  state.task!.captions.forEach((caption, i) => {
    const which = i === 0 ? "first" : "second";
    const card = el("button", "caption-card" + (state.winner === which ? " selected" : ""));
    card.append(el("kbd", "key", String(i + 1)), el("p", "caption", caption));
    card.addEventListener("click", () => controller.selectWinner(which));
    wrap.append(card);
  });
  return wrap;
}

function renderRubric(state: ControllerState, controller: AnnotationController): HTMLElement {
  const wrap = el("div", "rubric");
  wrap.append(el("p", "caption", state.task!.captions[0] ?? ""));
  for (const dimension of RUBRIC_DIMENSIONS) {
    const row = el("details", "dimension" + (state.activeDimension === dimension ? " active" : ""));
    const summary = el("summary", undefined, dimension);
    row.append(summary);
    const criteria = state.task!.criteria?.[dimension] ?? {};
    const list = el("ul", "criteria");
    for (const score of ["1", "2", "3", "4", "5"]) {
      if (criteria[score]) list.append(el("li", undefined, criteria[score]!));
    }
    row.append(list);
    const buttons = el("div", "scores");
    for (let score = 1; score <= 5; score++) {
      const btn = el(
        "button",
        "score" + (state.rubric[dimension] === score ? " selected" : ""),
        String(score),
      );
      btn.addEventListener("click", () => controller.setRubricScore(dimension, score));
      buttons.append(btn);
    }
    summary.addEventListener("click", () => controller.setActiveDimension(dimension));
    row.append(buttons);
    wrap.append(row);
  }
  return wrap;
}

function render(root: HTMLElement, controller: AnnotationController): void {
  const state = controller.getState();
  root.replaceChildren();
  root.append(renderProgress(state, controller.progressIsStale()));
  if (state.notice) root.append(el("div", "notice", state.notice));

  if (state.screen === "loading") {
    root.append(el("p", "status", "loading…"));
    return;
  }
  if (state.screen === "error") {
    const banner = el("div", "retry-banner");
    banner.append(el("p", undefined, `connection trouble: ${state.errorMessage ?? "unknown"}`));
    const retry = el("button", undefined, "retry");
    retry.addEventListener("click", () => void controller.start());
    banner.append(retry);
    root.append(banner);
    return;
  }
  if (state.screen === "done") {
    const done = el("div", "done");
    done.append(el("h2", undefined, "all tasks answered"));
    if (state.progress) {
      done.append(el("p", undefined, `completed ${state.progress.completed} tasks in this queue`));
    }
    root.append(done);
    return;
  }

  const task = state.task!;
  const img = el("img", "meme");
  img.src = task.image_url;
  img.alt = `meme ${task.meme_id}`;
  root.append(img);
  root.append(task.kind === "pair" ? renderPair(state, controller) : renderRubric(state, controller));

  const submit = el("button", "submit", "submit");
  submit.disabled = !controller.canSubmit();
  submit.addEventListener("click", () => void controller.submit());
  root.append(submit);
}

export function boot(root: HTMLElement, storage: StorageLike = window.sessionStorage): AnnotationController {
  const annotator = annotatorId();
  const api = new ApiClient("");
  const controller = new AnnotationController(api, annotator, new PendingStore(storage, annotator));
  controller.onChange(() => render(root, controller));
  document.addEventListener("keydown", (event) => {
    void controller.handleKey(event.key);
  });
  window.setInterval(() => void controller.refreshProgress().catch(() => undefined), 10_000);
  void controller.start();
  render(root, controller);
  return controller;
}

// boot immediately in a browser; vitest imports this module with no DOM
if (typeof document !== "undefined" && document.getElementById("app") !== null) {
  boot(document.getElementById("app")!);
}
