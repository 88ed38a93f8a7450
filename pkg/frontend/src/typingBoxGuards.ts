// Input hardening for the typing box. The element is display-only: no edit,
// clipboard, drag, or selection side effects ever reach it, and the only
// things forwarded upstream are printable characters and backspace. Paste
// is swallowed whole; nothing is sent for it.

export interface GuardTarget {
  onKey(key: string): void;
}

const SWALLOWED = new Set([
  "copy",
  "cut",
  "paste",
  "contextmenu",
  "drop",
  "selectstart",
]);

function isPrintable(key: string): boolean {
  // KeyboardEvent.key is the full grapheme for printable keys and a name
  // ("ArrowLeft", "Home", ...) otherwise; one code point means printable.
  return [...key].length === 1;
}

/**
 * Attach the guards to the box. Returns a detach function; after calling
 * it the element stops intercepting anything.
 */
export function attachTypingBoxGuards(el: HTMLElement, target: GuardTarget): () => void {
  const controller = new AbortController();
  const signal = controller.signal;

  const block = (ev: Event): void => {
    ev.preventDefault();
    ev.stopPropagation();
  };

  for (const type of SWALLOWED) {
    el.addEventListener(type, block, { signal });
  }
  // Allow hover feedback but never a drop target.
  el.addEventListener("dragover", (ev) => ev.preventDefault(), { signal });
  // Caret relocation and drag-selection are pointless on a server-owned
  // buffer; suppress them at the source.
  el.addEventListener("mousedown", (ev) => ev.preventDefault(), { signal });
  // The element must never self-mutate; all text arrives via re-render.
  el.addEventListener("beforeinput", block, { signal });

  el.addEventListener(
    "keydown",
    (ev: KeyboardEvent) => {
      ev.preventDefault();
      if (ev.ctrlKey || ev.metaKey || ev.altKey) return;
      if (ev.key === "Backspace") {
        target.onKey("backspace");
        return;
      }
      if (isPrintable(ev.key)) target.onKey(ev.key);
      // Navigation and function keys fall through to nothing.
    },
    { signal },
  );

  return () => controller.abort();
}
