// Wire types mirroring the annotation service's HTTP payloads.

export type TaskKind = "pair" | "rubric";

export const RUBRIC_DIMENSIONS = [
  "informativeness",
  "relevance",
  "creativity",
  "humor",
] as const;

export type RubricDimension = (typeof RUBRIC_DIMENSIONS)[number];

export interface AnnotationTask {
  task_id: string;
  kind: TaskKind;
  meme_id: string;
  candidate_ids: string[];
  captions: string[];
  image_url: string;
  criteria?: Record<RubricDimension, Record<string, string>>;
}

export interface NextTaskReply {
  task: AnnotationTask | null;
}

export type Winner = "first" | "second";

export interface AnnotationResponseBody {
  task_id: string;
  annotator_id: string;
  winner?: Winner;
  rubric?: Record<RubricDimension, number>;
}

export interface SubmitReply {
  status: string;
  task_id: string;
}

export interface Progress {
  completed: number;
  remaining: number;
  pending_sets: number;
}

export interface PreferenceRecord {
  meme_id: string;
  ordering: string[];
  source: "human" | "attention" | "fused";
  agreement: number | null;
}

// A complete choice for the current task: exactly one of winner / rubric.
export interface PendingChoice {
  task_id: string;
  winner?: Winner;
  rubric?: Record<RubricDimension, number>;
}
