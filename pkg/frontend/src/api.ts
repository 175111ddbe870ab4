// Thin typed client for the rating service. The submission body carries
// only {item_index, scores, comment}; nothing derived or identifying is
// ever transmitted.

import type { ItemPayload, RatingAck, RatingSubmission, SessionStatus } from "./types";

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class ApiRequestError extends Error {
  constructor(
    public readonly code: string,
    message: string,
    public readonly status: number,
  ) {
    super(message);
  }
}

export class NetworkError extends Error {}

export type NextItemResult =
  | { kind: "item"; item: ItemPayload }
  | { kind: "complete" };

async function parseError(response: Response): Promise<ApiRequestError> {
  let code = "UNKNOWN";
  let message = response.statusText;
  try {
    const body = (await response.json()) as { code?: string; message?: string };
    if (body.code) code = body.code;
    if (body.message) message = body.message;
  } catch {
    // non-JSON error body: keep the HTTP status text
  }
  return new ApiRequestError(code, message, response.status);
}

export class RatingApi {
  constructor(
    private readonly baseUrl: string,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {}

  private url(path: string): string {
    return `${this.baseUrl.replace(/\/$/, "")}${path}`;
  }

  private async get<T>(path: string): Promise<T> {
    let response: Response;
    try {
      response = await this.fetchFn(this.url(path));
    } catch (err) {
      throw new NetworkError(String(err));
    }
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as T;
  }

  async sessionStatus(sessionId: string): Promise<SessionStatus> {
    return this.get<SessionStatus>(`/sessions/${encodeURIComponent(sessionId)}`);
  }

  async nextItem(sessionId: string): Promise<NextItemResult> {
    let response: Response;
    try {
      response = await this.fetchFn(this.url(`/sessions/${encodeURIComponent(sessionId)}/next`));
    } catch (err) {
      throw new NetworkError(String(err));
    }
    if (response.ok) {
      return { kind: "item", item: (await response.json()) as ItemPayload };
    }
    const error = await parseError(response);
    if (error.code === "SESSION_COMPLETE") return { kind: "complete" };
    throw error;
  }

  async submitRating(sessionId: string, submission: RatingSubmission): Promise<RatingAck> {
    const body: RatingSubmission = {
      item_index: submission.item_index,
      scores: submission.scores,
      comment: submission.comment,
    };
    let response: Response;
    try {
      response = await this.fetchFn(this.url(`/sessions/${encodeURIComponent(sessionId)}/ratings`), {
        method: "POST",
        headers: { "Content-Type": "application/json" },
        body: JSON.stringify(body),
      });
    } catch (err) {
      throw new NetworkError(String(err));
    }
    if (!response.ok) throw await parseError(response);
    return (await response.json()) as RatingAck;
  }
}
