// Rating form state machine. Submit becomes reachable only once all six
// Likert selections are set; there is no code path that produces a partial
// submission payload.

import { COMPONENTS, type ComponentId, type RatingSubmission, type Scores } from "./types";

export interface FormState {
  selections: Partial<Scores>;
  comment: string;
}

export function emptyForm(): FormState {
  return { selections: {}, comment: "" };
}

export function setScore(state: FormState, component: ComponentId, value: number): FormState {
  if (!Number.isInteger(value) || value < 1 || value > 5) {
    throw new RangeError(`likert value must be an integer in [1, 5], got ${value}`);
  }
  return { selections: { ...state.selections, [component]: value }, comment: state.comment };
}

export function setComment(state: FormState, comment: string): FormState {
  return { selections: state.selections, comment };
}

export function submitEnabled(state: FormState): boolean {
  return COMPONENTS.every((c) => typeof state.selections[c] === "number");
}

export function toSubmission(state: FormState, itemIndex: number): RatingSubmission | null {
  if (!submitEnabled(state)) return null;
  const scores = {} as Scores;
  for (const c of COMPONENTS) scores[c] = state.selections[c]!;
  return { item_index: itemIndex, scores, comment: state.comment };
}
