// Session flow: fetch the next blinded item, render it with the six Likert
// widgets, require every selection before submit, post the rating, advance.
// The queue and cursor live entirely server-side; a network failure shows a
// retry banner and preserves the form state.

import { ApiRequestError, NetworkError, RatingApi } from "./api";
import { renderCompletion, renderErrorCard, renderTrajectory, validateItem } from "./render";
import { emptyForm, setComment, setScore, submitEnabled, toSubmission, type FormState } from "./state";
import { COMPONENTS, COMPONENT_LABELS, RUBRIC_ANCHORS, type ComponentId, type ItemPayload } from "./types";

export class SessionController {
  private form: FormState = emptyForm();
  private item: ItemPayload | null = null;

  constructor(
    private readonly api: RatingApi,
    private readonly sessionId: string,
    private readonly root: HTMLElement,
  ) {}

  async start(): Promise<void> {
    await this.loadNext();
  }

  async loadNext(): Promise<void> {
    let result;
    try {
      result = await this.api.nextItem(this.sessionId);
    } catch (err) {
      this.showRetryBanner(err, () => this.loadNext());
      return;
    }
    if (result.kind === "complete") {
      const status = await this.api.sessionStatus(this.sessionId).catch(() => null);
      renderCompletion(this.root, status ? status.cursor : 0);
      return;
    }
    const errors = validateItem(result.item);
    if (errors.length) {
      renderErrorCard(this.root, errors);
      return;
    }
    this.item = result.item;
    this.form = emptyForm();
    await this.renderCurrent();
  }

  private async renderCurrent(): Promise<void> {
    if (!this.item) return;
    const status = await this.api.sessionStatus(this.sessionId).catch(() => null);
    const progress = status ? `Item ${this.item.item_index + 1} of ${status.total}` : `Item ${this.item.item_index + 1}`;
    renderTrajectory(this.root, this.item, progress);
    this.root.appendChild(this.buildForm());
  }

  private buildForm(): HTMLElement {
    const form = document.createElement("form");
    form.className = "rating-form";
    form.addEventListener("submit", (event) => event.preventDefault());

    for (const component of COMPONENTS) {
      form.appendChild(this.buildLikertRow(component));
    }

    const comment = document.createElement("textarea");
    comment.className = "comment-box";
    comment.placeholder = "Optional comment";
    comment.value = this.form.comment;
    comment.addEventListener("input", () => {
      this.form = setComment(this.form, comment.value);
    });
    form.appendChild(comment);

    const submit = document.createElement("button");
    submit.type = "button";
    submit.className = "submit-button";
    submit.textContent = "Submit ratings";
    submit.disabled = !submitEnabled(this.form);
    submit.addEventListener("click", () => void this.submit());
    form.appendChild(submit);
    return form;
  }

  private buildLikertRow(component: ComponentId): HTMLElement {
    const row = document.createElement("fieldset");
    row.className = `likert-row likert-${component}`;
    const legend = document.createElement("legend");
    legend.textContent = `${component} — ${COMPONENT_LABELS[component]}`;
    legend.title = RUBRIC_ANCHORS[component];
    row.appendChild(legend);
    for (let value = 1; value <= 5; value += 1) {
      const button = document.createElement("button");
      button.type = "button";
      button.className = "likert-button";
      button.dataset.component = component;
      button.dataset.value = String(value);
      button.textContent = String(value);
      button.title = RUBRIC_ANCHORS[component];
      button.setAttribute("aria-pressed", this.form.selections[component] === value ? "true" : "false");
      button.addEventListener("click", () => {
        this.form = setScore(this.form, component, value);
        this.refreshFormControls();
      });
      row.appendChild(button);
    }
    return row;
  }

  private refreshFormControls(): void {
    for (const button of Array.from(this.root.querySelectorAll<HTMLButtonElement>(".likert-button"))) {
      const component = button.dataset.component as ComponentId;
      const value = Number(button.dataset.value);
      button.setAttribute("aria-pressed", this.form.selections[component] === value ? "true" : "false");
    }
    const submit = this.root.querySelector<HTMLButtonElement>(".submit-button");
    if (submit) submit.disabled = !submitEnabled(this.form);
  }

  private async submit(): Promise<void> {
    if (!this.item) return;
    const submission = toSubmission(this.form, this.item.item_index);
    if (!submission) return;
    try {
      await this.api.submitRating(this.sessionId, submission);
    } catch (err) {
      if (err instanceof ApiRequestError && err.code === "SESSION_COMPLETE") {
        await this.loadNext();
        return;
      }
      this.showRetryBanner(err, () => this.submit());
      return;
    }
    await this.loadNext();
  }

  private showRetryBanner(err: unknown, retry: () => Promise<void>): void {
    const existing = this.root.querySelector(".retry-banner");
    if (existing) existing.remove();
    const banner = document.createElement("div");
    banner.className = "retry-banner";
    const label = err instanceof NetworkError ? "Network failure" : "Request failed";
    const message = document.createElement("span");
    message.textContent = `${label}: ${err instanceof Error ? err.message : String(err)}`;
    banner.appendChild(message);
    const button = document.createElement("button");
    button.type = "button";
    button.className = "retry-button";
    button.textContent = "Retry";
    button.addEventListener("click", () => {
      banner.remove();
      void retry();
    });
    banner.appendChild(button);
    // Prepend so the partially filled form below stays untouched.
    this.root.prepend(banner);
  }
}

export function bootFromLocation(root: HTMLElement, location: Location): SessionController | null {
  const params = new URLSearchParams(location.search);
  const sessionId = params.get("session");
  if (!sessionId) {
    renderErrorCard(root, ["missing ?session=<id> in the URL"]);
    return null;
  }
  const apiBase = params.get("api") ?? location.origin;
  return new SessionController(new RatingApi(apiBase), sessionId, root);
}
