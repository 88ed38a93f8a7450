"""Incremental lexical constraint checking.

A text buffer is segmented into word spans and separator spans. Words are
maximal runs of alphabetic characters plus word-internal apostrophes;
everything else (whitespace, digits, punctuation, stray apostrophes) is a
separator and exempt from the constraint. Hyphenated compounds therefore
split into two words at the hyphen.

``check`` classifies a buffer against a lexicon as Complete, ValidPrefix,
or Invalid, and ``keystroke_admissible`` decides whether a single appended
key keeps the buffer valid. Both are evaluated on partially typed or
partially generated strings.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Iterable

if TYPE_CHECKING:
    from .vocab import Lexicon

APOSTROPHE = "'"

BACKSPACE_KEY = "backspace"


class Kind(enum.Enum):
    WORD = "word"
    SEPARATOR = "separator"


class Status(enum.Enum):
    COMPLETE = "complete"
    VALID_PREFIX = "valid_prefix"
    INVALID = "invalid"


@dataclass(frozen=True)
class Span:
    kind: Kind
    text: str
    start: int

    @property
    def end(self) -> int:
        return self.start + len(self.text)


@dataclass(frozen=True)
class Verdict:
    status: Status
    offending: Span | None = None

    @property
    def ok(self) -> bool:
        """True for Complete or ValidPrefix."""
        return self.status is not Status.INVALID


def _is_word_char(text: str, i: int) -> bool:
    c = text[i]
    if c.isalpha():
        return True
    if c == APOSTROPHE:
        # Word-internal only: alphabetic neighbours on both sides.
        return (
            i > 0
            and i + 1 < len(text)
            and text[i - 1].isalpha()
            and text[i + 1].isalpha()
        )
    return False


def is_word_form(s: str) -> bool:
    """True iff ``s`` is a single word under the word grammar."""
    if not s:
        return False
    spans = segment(s)
    return len(spans) == 1 and spans[0].kind is Kind.WORD


def segment(text: str) -> list[Span]:
    """Split ``text`` into alternating word and separator spans."""
    spans: list[Span] = []
    i, n = 0, len(text)
    while i < n:
        start = i
        in_word = _is_word_char(text, i)
        while i < n and _is_word_char(text, i) == in_word:
            i += 1
        kind = Kind.WORD if in_word else Kind.SEPARATOR
        spans.append(Span(kind, text[start:i], start))
    return spans


class WordTrie:
    """Prefix tree over a set of word forms.

    Immutable after construction; membership and prefix queries run in time
    linear in the query length.
    """

    __slots__ = ("_children", "_terminal", "size")

    def __init__(self, forms: Iterable[str]):
        # Flat node arrays: node 0 is the root.
        self._children: list[dict[str, int]] = [{}]
        self._terminal: list[bool] = [False]
        count = 0
        for form in forms:
            node = 0
            for ch in form:
                nxt = self._children[node].get(ch)
                if nxt is None:
                    nxt = len(self._children)
                    self._children[node][ch] = nxt
                    self._children.append({})
                    self._terminal.append(False)
                node = nxt
            if not self._terminal[node]:
                self._terminal[node] = True
                count += 1
        self.size = count

    def _walk(self, s: str) -> int | None:
        node = 0
        for ch in s:
            node = self._children[node].get(ch)
            if node is None:
                return None
        return node

    def contains(self, word: str) -> bool:
        node = self._walk(word)
        return node is not None and self._terminal[node]

    def is_prefix(self, s: str) -> bool:
        """True iff some form has ``s`` as a (possibly full) prefix."""
        return self._walk(s) is not None

    def is_proper_prefix(self, s: str) -> bool:
        """True iff some strictly longer form extends ``s``."""
        node = self._walk(s)
        return node is not None and bool(self._children[node])

    @classmethod
    def from_lexicon(cls, lex: "Lexicon") -> "WordTrie":
        return cls(lex.forms)


def _trie_of(lex) -> WordTrie:
    if isinstance(lex, WordTrie):
        return lex
    # Lexicons are frozen; cache the built trie on the instance so hot
    # paths (per-keystroke checks, per-token sampling) pay for it once.
    trie = getattr(lex, "_trie_cache", None)
    if trie is None:
        trie = WordTrie.from_lexicon(lex)
        object.__setattr__(lex, "_trie_cache", trie)
    return trie


def check(text: str, lex) -> Verdict:
    """Classify ``text`` against a lexicon (or a prebuilt ``WordTrie``).

    Complete: every word span is a lexicon form (vacuously true for empty
    or word-free text). ValidPrefix: all words but the last are forms and
    the buffer ends mid-word on a proper prefix of some form. Invalid
    otherwise, carrying the first offending span. Matching is
    case-insensitive; lexicon forms are lowercase.
    """
    trie = _trie_of(lex)
    spans = segment(text)
    words = [s for s in spans if s.kind is Kind.WORD]
    if not words:
        return Verdict(Status.COMPLETE)
    for span in words[:-1]:
        if not trie.contains(span.text.lower()):
            return Verdict(Status.INVALID, offending=span)
    last = words[-1]
    surface = last.text.lower()
    if trie.contains(surface):
        return Verdict(Status.COMPLETE)
    if last.end == len(text) and trie.is_proper_prefix(surface):
        return Verdict(Status.VALID_PREFIX)
    return Verdict(Status.INVALID, offending=last)


def keystroke_admissible(buffer: str, key: str, lex) -> bool:
    """Decide whether ``key`` may be applied to a currently valid buffer.

    ``key`` is a single character or a named key. Backspace is always
    admissible; a character is admissible iff appending it keeps the
    buffer Complete or ValidPrefix. Named non-character actions
    (selection, paste, mid-buffer insertion) are never admissible.
    """
    if key == BACKSPACE_KEY:
        return True
    if len(key) != 1:
        return False
    return check(buffer + key, lex).ok
