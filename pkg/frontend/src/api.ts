// Typed client for the experiment service. Every request goes through an
// injected fetch function so tests can script the server end to end.

export type VocabSize = number | "unconstrained";

export interface AssignmentItem {
  question_id: string;
  vocab_size: VocabSize;
}

export interface SessionView {
  id: string;
  participant_id: string;
  assignment: AssignmentItem[];
  cursor: number;
  state: string;
}

export interface QuestionView {
  id: string;
  category: string;
  text: string;
}

export interface CurrentView {
  session_id: string;
  cursor: number;
  state: string;
  question?: QuestionView;
  vocab_size?: VocabSize;
  buffer?: string;
}

export interface KeystrokeResult {
  accepted: boolean;
  buffer_len: number;
}

export interface SubmitReceipt {
  response_id: string;
  token: string;
  empty: boolean;
  duplicate: boolean;
}

export interface ScorePayload {
  rater_id: string;
  pair_index: number;
  question_id: string;
  source: string;
  vocab_size: VocabSize;
  score: number;
  justification?: string;
}

export interface ScoreReceipt {
  score_id: string;
  duplicate: boolean;
}

/** Server answered with a non-2xx status. */
export class ServiceError extends Error {
  constructor(readonly status: number, detail: string) {
    super(detail);
    this.name = "ServiceError";
  }
}

/** The request never reached the server (or the response never arrived). */
export class NetworkError extends Error {
  constructor(cause: string) {
    super(cause);
    this.name = "NetworkError";
  }
}

export type FetchLike = (url: string, init?: RequestInit) => Promise<Response>;

export class ServiceClient {
  private readonly baseUrl: string;
  private readonly fetchFn: FetchLike;

  constructor(baseUrl: string, fetchFn?: FetchLike) {
    this.baseUrl = baseUrl.replace(/\/+$/, "");
    this.fetchFn = fetchFn ?? ((url, init) => fetch(url, init));
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    let res: Response;
    try {
      res = await this.fetchFn(this.baseUrl + path, {
        method,
        headers: body === undefined ? undefined : { "content-type": "application/json" },
        body: body === undefined ? undefined : JSON.stringify(body),
      });
    } catch (err) {
      throw new NetworkError(String(err));
    }
    if (!res.ok) {
      let detail = `HTTP ${res.status}`;
      try {
        const parsed = (await res.json()) as { detail?: unknown };
        if (parsed.detail !== undefined) detail = String(parsed.detail);
      } catch {
        // non-JSON error body; keep the status line
      }
      throw new ServiceError(res.status, detail);
    }
    return (await res.json()) as T;
  }

  startSession(participantId: string, seed?: number): Promise<SessionView> {
    const body: Record<string, unknown> = { participant_id: participantId };
    if (seed !== undefined) body.seed = seed;
    return this.request("POST", "/v1/session", body);
  }

  current(sessionId: string): Promise<CurrentView> {
    return this.request("GET", `/v1/session/${sessionId}/current`);
  }

  keystroke(sessionId: string, questionId: string, key: string, tMs: number): Promise<KeystrokeResult> {
    return this.request("POST", `/v1/session/${sessionId}/keystroke`, {
      question_id: questionId,
      key,
      t_ms: tMs,
    });
  }

  submit(sessionId: string, questionId: string, finalText: string, tMs: number): Promise<SubmitReceipt> {
    return this.request("POST", `/v1/session/${sessionId}/submit`, {
      question_id: questionId,
      final_text: finalText,
      t_ms: tMs,
    });
  }

  score(payload: ScorePayload): Promise<ScoreReceipt> {
    return this.request("POST", "/v1/score", payload);
  }

  questions(): Promise<QuestionView[]> {
    return this.request("GET", "/v1/questions");
  }
}
