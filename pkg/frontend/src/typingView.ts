// State machine behind the constrained typing box. The server is the only
// authority: the buffer mirror changes exclusively when a keystroke round
// trip comes back accepted, and any length drift triggers a resync.

import {
  CurrentView,
  NetworkError,
  ServiceClient,
  SubmitReceipt,
  VocabSize,
} from "./api.js";
import { IdleTimer } from "./idleTimer.js";

export interface Clock {
  now(): number;
}

export interface TypingOptions {
  /** Surface the vocabulary size of the active condition. Off by default. */
  showVocabSize?: boolean;
  /** Inactivity threshold before the nudge prompt. */
  idleMs?: number;
}

export interface Flash {
  key: string;
  at: number;
}

export interface TypingSnapshot {
  sessionId: string;
  state: string;
  questionId: string | null;
  questionText: string;
  progress: { index: number; total: number };
  buffer: string;
  flash: Flash | null;
  locked: boolean;
  promptVisible: boolean;
  vocabSize?: VocabSize;
}

const DEFAULT_IDLE_MS = 90_000;

type Job =
  | { kind: "key"; key: string; resolve: (accepted: boolean) => void; reject: (err: unknown) => void }
  | { kind: "submit"; resolve: (receipt: SubmitReceipt) => void; reject: (err: unknown) => void };

export class TypingSession {
  private view: CurrentView;
  private buffer = "";
  private flash: Flash | null = null;
  private locked = false;
  private promptVisible = false;
  private readonly idle: IdleTimer;
  private readonly queue: Job[] = [];
  private pumping = false;
  private waiters: Array<() => void> = [];

  private constructor(
    private readonly client: ServiceClient,
    private readonly sessionId: string,
    private readonly total: number,
    private readonly clock: Clock,
    private readonly opts: TypingOptions,
  ) {
    this.idle = new IdleTimer(opts.idleMs ?? DEFAULT_IDLE_MS, clock.now());
    this.view = { session_id: sessionId, cursor: 0, state: "active" };
  }

  static async start(
    client: ServiceClient,
    participantId: string,
    clock: Clock,
    opts: TypingOptions = {},
  ): Promise<TypingSession> {
    const session = await client.startSession(participantId);
    const ts = new TypingSession(client, session.id, session.assignment.length, clock, opts);
    await ts.refresh();
    return ts;
  }

  private get completed(): boolean {
    return this.view.state !== "active" || this.view.question === undefined;
  }

  private async refresh(): Promise<void> {
    this.view = await this.client.current(this.sessionId);
    this.buffer = this.view.buffer ?? "";
  }

  /**
   * Route one key through the server. Resolves with the verdict once the
   * round trip lands; while a request is in flight further keys wait in
   * order. Returns false without a request when input is locked or done.
   */
  handleKey(key: string): Promise<boolean> {
    if (this.locked || this.completed) return Promise.resolve(false);
    return this.enqueueKey(key);
  }

  /** Submit the current buffer, then advance to the next question. */
  submit(): Promise<SubmitReceipt> {
    if (this.completed) return Promise.reject(new Error("session is complete"));
    return new Promise<SubmitReceipt>((resolve, reject) => {
      this.queue.push({ kind: "submit", resolve, reject });
      this.pump();
    });
  }

  /**
   * Poll the inactivity timer. Fires at most once per idle window: shows
   * the prompt and records a timeout_prompt event behind any queued keys.
   */
  tick(): boolean {
    if (this.completed || this.locked) return false;
    if (!this.idle.due(this.clock.now())) return false;
    this.promptVisible = true;
    void this.enqueueKey("timeout_prompt");
    return true;
  }

  dismissPrompt(): void {
    this.promptVisible = false;
  }

  /** Resume after a network failure; the stalled request is resent first. */
  async retry(): Promise<void> {
    if (!this.locked) return;
    this.locked = false;
    this.pump();
    await this.settle();
  }

  /** Resolve once no request is in flight and the queue has drained. */
  async settle(): Promise<void> {
    while (this.pumping) {
      await new Promise<void>((resolve) => this.waiters.push(resolve));
    }
  }

  snapshot(): TypingSnapshot {
    const index = Math.min(this.view.cursor + 1, this.total);
    const snap: TypingSnapshot = {
      sessionId: this.sessionId,
      state: this.view.state,
      questionId: this.view.question?.id ?? null,
      questionText: this.view.question?.text ?? "",
      progress: { index: this.total === 0 ? 0 : index, total: this.total },
      buffer: this.buffer,
      flash: this.flash,
      locked: this.locked,
      promptVisible: this.promptVisible,
    };
    if (this.opts.showVocabSize && this.view.vocab_size !== undefined) {
      snap.vocabSize = this.view.vocab_size;
    }
    return snap;
  }

  private enqueueKey(key: string): Promise<boolean> {
    return new Promise<boolean>((resolve, reject) => {
      this.queue.push({ kind: "key", key, resolve, reject });
      this.pump();
    });
  }

  private pump(): void {
    if (this.pumping) return;
    this.pumping = true;
    void this.drain();
  }

  private async drain(): Promise<void> {
    while (!this.locked) {
      const job = this.queue.shift();
      if (job === undefined) break;
      if (job.kind === "key") await this.processKey(job);
      else await this.processSubmit(job);
    }
    this.pumping = false;
    const waiters = this.waiters;
    this.waiters = [];
    for (const w of waiters) w();
  }

  private async processKey(job: Extract<Job, { kind: "key" }>): Promise<void> {
    const question = this.view.question;
    if (question === undefined) {
      job.resolve(false);
      return;
    }
    const t = this.clock.now();
    let res;
    try {
      res = await this.client.keystroke(this.sessionId, question.id, job.key, t);
    } catch (err) {
      if (err instanceof NetworkError) {
        // No local acceptance: the key stays queued until retry succeeds.
        this.locked = true;
        this.queue.unshift(job);
        return;
      }
      this.flash = { key: job.key, at: t };
      job.resolve(false);
      return;
    }
    if (!res.accepted) {
      this.flash = { key: job.key, at: t };
      job.resolve(false);
      return;
    }
    if (job.key === "backspace") {
      this.buffer = this.buffer.slice(0, -1);
    } else if (job.key !== "timeout_prompt") {
      this.buffer += job.key;
    }
    if (job.key !== "timeout_prompt") {
      this.idle.reset(t);
      this.promptVisible = false;
    }
    if (res.buffer_len !== this.buffer.length) await this.refresh();
    job.resolve(true);
  }

  private async processSubmit(job: Extract<Job, { kind: "submit" }>): Promise<void> {
    const question = this.view.question;
    if (question === undefined) {
      job.reject(new Error("session is complete"));
      return;
    }
    const t = this.clock.now();
    let receipt;
    try {
      receipt = await this.client.submit(this.sessionId, question.id, this.buffer, t);
    } catch (err) {
      if (err instanceof NetworkError) {
        this.locked = true;
        this.queue.unshift(job);
        return;
      }
      job.reject(err);
      return;
    }
    this.idle.reset(t);
    this.promptVisible = false;
    this.flash = null;
    await this.refresh();
    job.resolve(receipt);
  }
}
