export {
  NetworkError,
  ServiceClient,
  ServiceError,
} from "./api.js";
export type {
  AssignmentItem,
  CurrentView,
  FetchLike,
  KeystrokeResult,
  QuestionView,
  ScorePayload,
  ScoreReceipt,
  SessionView,
  SubmitReceipt,
  VocabSize,
} from "./api.js";
export { IdleTimer } from "./idleTimer.js";
export { TypingSession } from "./typingView.js";
export type { Clock, Flash, TypingOptions, TypingSnapshot } from "./typingView.js";
export { GradingFlow, SCALE_MAX, SCALE_MIN } from "./gradingView.js";
export type { GradingPair, GradingSnapshot } from "./gradingView.js";
export { attachTypingBoxGuards } from "./typingBoxGuards.js";
export type { GuardTarget } from "./typingBoxGuards.js";
export { FLASH_MS, renderGrading, renderTyping } from "./dom.js";
export type { GradingElements, TypingElements } from "./dom.js";
