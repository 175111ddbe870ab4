// Wire types for the rating service API. The served item payload carries
// exactly these three keys; anything else is treated as a schema mismatch
// and blocks rendering.

export const COMPONENTS = ["D", "R", "W", "B", "Q", "Y"] as const;
export type ComponentId = (typeof COMPONENTS)[number];

export const COMPONENT_LABELS: Record<ComponentId, string> = {
  D: "Clinical evidence",
  R: "Differential diagnosis",
  W: "Pathophysiological rationale",
  B: "Principled justification",
  Q: "Certainty assessment",
  Y: "Final diagnosis",
};

// Rubric anchors shown as tooltips on the Likert buttons, shared wording
// with the automated judge rubric.
export const RUBRIC_ANCHORS: Record<ComponentId, string> = {
  D: "Are all key facts correctly extracted without errors or omissions?",
  R: "Are the major alternative diagnoses addressed with specific reasoning for exclusion?",
  W: "Is the chain from data to hypothesis clear, sound, and medically valid?",
  B: "Are cited guidelines or medical knowledge accurate and relevant?",
  Q: "Does the output appropriately calibrate confidence, uncertainty, and missing information?",
  Y: "5 = exact match; 4 = near-synonym/variant; 3 = partially correct; 2 = mostly incorrect; 1 = incorrect.",
};

export const REVISION_MARKER = "[Evidence-Based Revision]";

export interface DifferentialEntry {
  dx: string;
  rank: number;
  reason: string;
}

export interface QualifierView {
  confidence: "low" | "medium" | "high";
  uncertainty: string[];
  missing_info: string[];
}

export interface TrajectoryView {
  D: string[];
  R: DifferentialEntry[];
  W: string;
  B: string;
  Q: QualifierView;
  Y: string;
}

export interface ItemPayload {
  item_index: number;
  presentation: string;
  trajectory: TrajectoryView;
}

export interface SessionStatus {
  cursor: number;
  total: number;
  complete: boolean;
}

export interface RatingAck {
  ok: boolean;
  cursor: number;
  total: number;
}

export interface ApiError {
  code: string;
  message: string;
}

export type Scores = Record<ComponentId, number>;

export interface RatingSubmission {
  item_index: number;
  scores: Scores;
  comment: string;
}
