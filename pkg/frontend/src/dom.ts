// Minimal render helpers: project a snapshot onto fixed page elements.
// Rendering is one-way; user input reaches the state machine only through
// the guarded key handler, never through these nodes.

import { GradingSnapshot } from "./gradingView.js";
import { TypingSnapshot } from "./typingView.js";

export interface TypingElements {
  buffer: HTMLElement;
  progress: HTMLElement;
  flash: HTMLElement;
  retryBanner: HTMLElement;
  idlePrompt: HTMLElement;
}

export const FLASH_MS = 300;

export function renderTyping(
  snap: TypingSnapshot,
  els: TypingElements,
  now: number,
  flashMs: number = FLASH_MS,
): void {
  els.buffer.textContent = snap.buffer;
  els.progress.textContent = `Question ${snap.progress.index} of ${snap.progress.total}`;
  const flashing = snap.flash !== null && now - snap.flash.at < flashMs;
  els.flash.classList.toggle("flash-reject", flashing);
  els.flash.textContent = flashing && snap.flash !== null ? snap.flash.key : "";
  els.retryBanner.hidden = !snap.locked;
  els.idlePrompt.hidden = !snap.promptVisible;
}

export interface GradingElements {
  question: HTMLElement;
  response: HTMLElement;
  rubric: HTMLElement;
  progress: HTMLElement;
  submit: HTMLButtonElement;
  scale: HTMLElement[];
}

export function renderGrading(snap: GradingSnapshot, els: GradingElements): void {
  els.question.textContent = snap.questionText;
  els.response.textContent = snap.responseText;
  els.rubric.textContent = snap.rubric;
  els.progress.textContent = snap.completed
    ? "All pairs scored. Thank you!"
    : `Pair ${snap.index + 1} of ${snap.total}`;
  els.submit.disabled = !snap.canSubmit;
  els.scale.forEach((node, i) => {
    node.classList.toggle("selected", snap.selected === i + 1);
  });
}
