// Norming flow: raters walk a fixed pair list, pick exactly one score on a
// 1-7 scale per pair, and each submission posts one score record. Pair order
// is the submission order; the server deduplicates on (rater, pair index).

import { ScoreReceipt, ServiceClient, VocabSize } from "./api.js";

export interface GradingPair {
  questionId: string;
  questionText: string;
  responseText: string;
  source: string;
  vocabSize: VocabSize;
}

export interface GradingSnapshot {
  index: number;
  total: number;
  questionText: string;
  responseText: string;
  rubric: string;
  selected: number | null;
  canSubmit: boolean;
  completed: boolean;
}

export const SCALE_MIN = 1;
export const SCALE_MAX = 7;

export class GradingFlow {
  private index = 0;
  private selected: number | null = null;
  readonly receipts: ScoreReceipt[] = [];

  constructor(
    private readonly client: ServiceClient,
    private readonly raterId: string,
    private readonly pairs: GradingPair[],
    private readonly rubric: string,
  ) {}

  get completed(): boolean {
    return this.index >= this.pairs.length;
  }

  /** Pick a score for the current pair; a second pick replaces the first. */
  select(score: number): void {
    if (!Number.isInteger(score) || score < SCALE_MIN || score > SCALE_MAX) {
      throw new RangeError(`score must be an integer in [${SCALE_MIN}, ${SCALE_MAX}], got ${score}`);
    }
    if (this.completed) throw new Error("grading is complete");
    this.selected = score;
  }

  async submitScore(justification = ""): Promise<ScoreReceipt> {
    if (this.completed) throw new Error("grading is complete");
    if (this.selected === null) throw new Error("no score selected");
    const pair = this.pairs[this.index];
    if (pair === undefined) throw new Error("grading is complete");
    const receipt = await this.client.score({
      rater_id: this.raterId,
      pair_index: this.index,
      question_id: pair.questionId,
      source: pair.source,
      vocab_size: pair.vocabSize,
      score: this.selected,
      justification,
    });
    this.receipts.push(receipt);
    this.index += 1;
    this.selected = null;
    return receipt;
  }

  snapshot(): GradingSnapshot {
    const pair = this.pairs[this.index];
    return {
      index: this.index,
      total: this.pairs.length,
      questionText: pair?.questionText ?? "",
      responseText: pair?.responseText ?? "",
      rubric: this.rubric,
      selected: this.selected,
      canSubmit: this.selected !== null && !this.completed,
      completed: this.completed,
    };
  }
}
