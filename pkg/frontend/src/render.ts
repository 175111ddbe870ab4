// Blinded item rendering. The payload is validated against the exact wire
// schema first; any mismatch (missing field, unknown extra key, malformed
// trajectory) produces an error card with no partial render.

import {
  COMPONENT_LABELS,
  REVISION_MARKER,
  type ItemPayload,
  type TrajectoryView,
} from "./types";

const ITEM_KEYS = ["item_index", "presentation", "trajectory"];
const TRAJECTORY_KEYS = ["D", "R", "W", "B", "Q", "Y"];
const QUALIFIER_KEYS = ["confidence", "uncertainty", "missing_info"];

export function validateItem(payload: unknown): string[] {
  const errors: string[] = [];
  if (typeof payload !== "object" || payload === null || Array.isArray(payload)) {
    return ["payload is not an object"];
  }
  const record = payload as Record<string, unknown>;
  for (const key of Object.keys(record)) {
    if (!ITEM_KEYS.includes(key)) errors.push(`unknown payload key: ${key}`);
  }
  for (const key of ITEM_KEYS) {
    if (!(key in record)) errors.push(`missing payload key: ${key}`);
  }
  if (errors.length) return errors;
  if (typeof record.item_index !== "number") errors.push("item_index must be a number");
  if (typeof record.presentation !== "string") errors.push("presentation must be a string");
  const traj = record.trajectory as Record<string, unknown>;
  if (typeof traj !== "object" || traj === null) return [...errors, "trajectory must be an object"];
  for (const key of Object.keys(traj)) {
    if (!TRAJECTORY_KEYS.includes(key)) errors.push(`unknown trajectory key: ${key}`);
  }
  for (const key of TRAJECTORY_KEYS) {
    if (!(key in traj)) errors.push(`missing trajectory key: ${key}`);
  }
  if (errors.length) return errors;
  if (!Array.isArray(traj.D)) errors.push("D must be a list");
  if (!Array.isArray(traj.R)) errors.push("R must be a list");
  if (typeof traj.W !== "string") errors.push("W must be a string");
  if (typeof traj.B !== "string") errors.push("B must be a string");
  if (typeof traj.Y !== "string") errors.push("Y must be a string");
  const q = traj.Q as Record<string, unknown>;
  if (typeof q !== "object" || q === null) {
    errors.push("Q must be an object");
  } else {
    for (const key of Object.keys(q)) {
      if (!QUALIFIER_KEYS.includes(key)) errors.push(`unknown qualifier key: ${key}`);
    }
    for (const key of QUALIFIER_KEYS) {
      if (!(key in q)) errors.push(`missing qualifier key: ${key}`);
    }
  }
  return errors;
}

export function hasRevisionMarker(trajectory: TrajectoryView): boolean {
  return trajectory.Q.uncertainty.length > 0 && trajectory.Q.uncertainty[0].startsWith(REVISION_MARKER);
}

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  className: string,
  text?: string,
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  node.className = className;
  if (text !== undefined) node.textContent = text;
  return node;
}

function section(name: string, label: string): HTMLElement {
  const wrapper = el("section", `component component-${name}`);
  wrapper.appendChild(el("h3", "component-label", `${name} — ${label}`));
  return wrapper;
}

export function renderErrorCard(container: HTMLElement, errors: string[]): void {
  container.textContent = "";
  const card = el("div", "error-card");
  card.appendChild(el("h2", "error-title", "This item cannot be displayed"));
  const list = el("ul", "error-list");
  for (const message of errors) list.appendChild(el("li", "error-item", message));
  card.appendChild(list);
  container.appendChild(card);
}

export function renderTrajectory(container: HTMLElement, item: ItemPayload, progress: string): void {
  container.textContent = "";
  const view = el("article", "item-view");
  view.appendChild(el("div", "progress", progress));

  const pres = section("case", "Case presentation");
  pres.appendChild(el("p", "presentation", item.presentation));
  view.appendChild(pres);

  const traj = item.trajectory;

  const dSec = section("D", COMPONENT_LABELS.D);
  const dList = el("ul", "evidence-list");
  for (const evidence of traj.D) dList.appendChild(el("li", "evidence-item", evidence));
  dSec.appendChild(dList);
  view.appendChild(dSec);

  const rSec = section("R", COMPONENT_LABELS.R);
  const table = el("table", "differential-table");
  const head = el("tr", "differential-head");
  for (const title of ["Rank", "Diagnosis", "Reasoning"]) head.appendChild(el("th", "", title));
  table.appendChild(head);
  for (const entry of [...traj.R].sort((a, b) => a.rank - b.rank)) {
    const row = el("tr", "differential-row");
    row.appendChild(el("td", "rank", String(entry.rank)));
    row.appendChild(el("td", "dx", entry.dx));
    row.appendChild(el("td", "reason", entry.reason));
    table.appendChild(row);
  }
  rSec.appendChild(table);
  view.appendChild(rSec);

  const wSec = section("W", COMPONENT_LABELS.W);
  wSec.appendChild(el("p", "prose", traj.W));
  view.appendChild(wSec);

  const bSec = section("B", COMPONENT_LABELS.B);
  bSec.appendChild(el("p", "prose", traj.B));
  view.appendChild(bSec);

  const qSec = section("Q", COMPONENT_LABELS.Q);
  qSec.appendChild(el("span", `confidence-badge confidence-${traj.Q.confidence}`, traj.Q.confidence));
  if (hasRevisionMarker(traj)) {
    qSec.appendChild(el("span", "revision-badge", "Evidence-based revision"));
  }
  const uList = el("ul", "uncertainty-list");
  for (const note of traj.Q.uncertainty) uList.appendChild(el("li", "uncertainty-item", note));
  qSec.appendChild(uList);
  const mList = el("ul", "missing-info-list");
  for (const missing of traj.Q.missing_info) mList.appendChild(el("li", "missing-item", missing));
  qSec.appendChild(mList);
  view.appendChild(qSec);

  const ySec = section("Y", COMPONENT_LABELS.Y);
  ySec.appendChild(el("p", "claim", traj.Y));
  view.appendChild(ySec);

  container.appendChild(view);
}

export function renderCompletion(container: HTMLElement, submitted: number): void {
  container.textContent = "";
  const card = el("div", "completion-card");
  card.appendChild(el("h2", "completion-title", "Session complete"));
  card.appendChild(el("p", "completion-count", `Ratings submitted: ${submitted}`));
  container.appendChild(card);
}
