/**
 * One-shot inactivity trigger. `due` flips to true the first time it is
 * polled at or past the threshold, then stays false until the next reset.
 * Time comes from the caller so tests can drive a simulated clock.
 */
export class IdleTimer {
  private last: number;
  private fired = false;

  constructor(private readonly thresholdMs: number, now: number) {
    this.last = now;
  }

  /** Restart the idle window (accepted keystroke or submission). */
  reset(now: number): void {
    this.last = now;
    this.fired = false;
  }

  due(now: number): boolean {
    if (this.fired || now - this.last < this.thresholdMs) return false;
    this.fired = true;
    return true;
  }
}
