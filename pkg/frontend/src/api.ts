import type {
  AnnotationResponseBody,
  NextTaskReply,
  PreferenceRecord,
  Progress,
  SubmitReply,
} from "./types.js";

export type FetchLike = (
  input: string,
  init?: { method?: string; headers?: Record<string, string>; body?: string },
) => Promise<{ status: number; json(): Promise<unknown> }>;

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
  }
}

/** Thin typed client over the annotation service; fetch is injectable so the
 * controller can be exercised without a browser or a live server. */
export class ApiClient {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private async request<T>(path: string, init?: Parameters<FetchLike>[1]): Promise<T> {
    const reply = await this.fetchFn(`${this.baseUrl}${path}`, init);
    if (reply.status >= 400) {
      let detail = `HTTP ${reply.status}`;
      try {
        const body = (await reply.json()) as { detail?: string };
        if (body && typeof body.detail === "string") detail = body.detail;
      } catch {
        // keep the status-only message
      }
      throw new ApiError(reply.status, detail);
    }
    return (await reply.json()) as T;
  }

  nextTask(annotator: string): Promise<NextTaskReply> {
    return this.request<NextTaskReply>(`/tasks/next?annotator=${encodeURIComponent(annotator)}`);
  }

  submit(body: AnnotationResponseBody): Promise<SubmitReply> {
    return this.request<SubmitReply>("/responses", {
      method: "POST",
      headers: { "content-type": "application/json" },
      body: JSON.stringify(body),
    });
  }

  progress(annotator: string): Promise<Progress> {
    return this.request<Progress>(`/progress?annotator=${encodeURIComponent(annotator)}`);
  }

  exportPreferences(): Promise<PreferenceRecord[]> {
    return this.request<PreferenceRecord[]>("/export/preferences");
  }
}
