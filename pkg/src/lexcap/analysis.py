"""Behavioral and corpus analyses over keystroke logs and generated text.

Word-deletion counting replays a question's keystroke log into a buffer
and counts words that were completed (an accepted separator keystroke or
submit sealed them) and later erased all the way back by backspaces.
Partial erasure followed by retyping does not count; rejected keystrokes
never change anything.

Corpus analyses build word-frequency rank tables under each vocabulary
condition and the rank-shift (bump) records between the largest and
smallest conditions. Group comparisons use the Mann-Whitney U test with
Bonferroni correction, and the skill split halves participants at the
median of their mean scores.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import asdict, dataclass, field
from itertools import combinations
from typing import Iterable, Mapping, Sequence

from scipy import stats

from .constraint import APOSTROPHE, BACKSPACE_KEY, Kind, segment
from .errors import CorruptLogError, FormatError

SUBMIT_KEY = "submit"
TIMEOUT_PROMPT_KEY = "timeout_prompt"

ACTION_KEYS = (BACKSPACE_KEY, SUBMIT_KEY, TIMEOUT_PROMPT_KEY)

EXACT_MWU_LIMIT = 12


@dataclass(frozen=True)
class KeystrokeEvent:
    session_id: str
    question_id: str
    t_ms: int
    key: str
    accepted: bool
    buffer_len_after: int

    def __post_init__(self):
        if len(self.key) != 1 and self.key not in ACTION_KEYS:
            raise ValueError(f"key must be a character or one of {ACTION_KEYS}")
        if self.t_ms < 0 or self.buffer_len_after < 0:
            raise ValueError("t_ms and buffer_len_after must be nonnegative")


def _apply(buffer: str, event: KeystrokeEvent) -> str:
    if not event.accepted or event.key in (SUBMIT_KEY, TIMEOUT_PROMPT_KEY):
        return buffer
    if event.key == BACKSPACE_KEY:
        return buffer[:-1]
    return buffer + event.key


def replay_buffer(events: Sequence[KeystrokeEvent]) -> str:
    """Replay a question's events into the final buffer text.

    Raises CorruptLogError when timestamps run backwards or a recorded
    buffer length disagrees with the replayed one.
    """
    buffer = ""
    last_t = -1
    for i, ev in enumerate(events):
        if ev.t_ms < last_t:
            raise CorruptLogError(f"event {i}: t_ms {ev.t_ms} after {last_t}")
        last_t = ev.t_ms
        buffer = _apply(buffer, ev)
        if ev.buffer_len_after != len(buffer):
            raise CorruptLogError(
                f"event {i}: buffer_len_after {ev.buffer_len_after}, replay "
                f"gives {len(buffer)}"
            )
    return buffer


@dataclass(frozen=True)
class _Armed:
    """A completed word span awaiting either erasure or invalidation."""

    start: int
    end: int
    word: str


def _rescan_base(buffer: str, pos: int) -> int:
    """Leftmost index that a word span touching ``pos`` could start at.

    Walks back over letters and apostrophes; an apostrophe may become
    word-internal retroactively ("cat'" + "s"), so it does not stop the
    scan. Any other character is a definite separator.
    """
    i = pos
    while i > 0 and (buffer[i - 1].isalpha() or buffer[i - 1] == APOSTROPHE):
        i -= 1
    return i


class _DeletionCounter:
    """Incremental armed-span automaton behind count_word_deletions.

    Typing reconciles only the word region around the caret; backspaces
    fire armed spans whose start the buffer has shrunk back to. The
    full-resegmentation fold in the tests is the reference for this
    bookkeeping.
    """

    def __init__(self):
        self.buffer = ""
        self.armed: dict[int, _Armed] = {}
        self.count = 0

    def _reconcile(self, base: int, sealed_end: int) -> None:
        """Re-derive armed spans starting at or after ``base``.

        ``sealed_end``: spans ending before it count as completed (the
        caret region up to it is followed by a separator or submit).
        """
        current: dict[int, _Armed] = {}
        for span in segment(self.buffer[base:]):
            if span.kind is not Kind.WORD:
                continue
            arm = _Armed(base + span.start, base + span.end, span.text)
            current[arm.start] = arm
        for start in [s for s in self.armed if s >= base]:
            if current.get(start) != self.armed[start]:
                del self.armed[start]
        for start, arm in current.items():
            if arm.end < len(self.buffer) or arm.end <= sealed_end:
                self.armed.setdefault(start, arm)

    def feed(self, event: KeystrokeEvent) -> None:
        if not event.accepted or event.key == TIMEOUT_PROMPT_KEY:
            return
        if event.key == SUBMIT_KEY:
            base = _rescan_base(self.buffer, len(self.buffer))
            self._reconcile(base, sealed_end=len(self.buffer))
            return
        if event.key == BACKSPACE_KEY:
            if not self.buffer:
                return
            self.buffer = self.buffer[:-1]
            cut = len(self.buffer)
            for start in [s for s in self.armed if s >= cut]:
                self.count += 1
                del self.armed[start]
            return
        pos = len(self.buffer)
        self.buffer += event.key
        self._reconcile(_rescan_base(self.buffer, pos), sealed_end=0)


def count_word_deletions(events: Sequence[KeystrokeEvent]) -> int:
    """Completed-then-fully-erased word count for one question's events."""
    replay_buffer(events)  # validate consistency before interpreting
    counter = _DeletionCounter()
    for ev in events:
        counter.feed(ev)
    return counter.count


@dataclass(frozen=True)
class DeletionStats:
    participant: str
    vocab_size: int | str
    responses: int
    word_deletions: int

    def __post_init__(self):
        if self.responses < 0 or self.word_deletions < 0:
            raise ValueError("counts must be nonnegative")

    @property
    def mean_per_response(self) -> float:
        return self.word_deletions / self.responses if self.responses else 0.0


def aggregate_deletions(
    question_logs: Iterable[tuple[str, int | str, Sequence[KeystrokeEvent]]],
) -> list[DeletionStats]:
    """Fold (participant, vocab_size, events-of-one-question) triples into
    per-(participant, vocab) deletion statistics."""
    responses: Counter = Counter()
    deletions: Counter = Counter()
    for participant, vocab_size, events in question_logs:
        key = (participant, vocab_size)
        responses[key] += 1
        deletions[key] += count_word_deletions(events)
    return [
        DeletionStats(
            participant=p,
            vocab_size=v,
            responses=responses[(p, v)],
            word_deletions=deletions[(p, v)],
        )
        for p, v in sorted(responses, key=lambda k: (str(k[1]), k[0]))
    ]


# ---------------------------------------------------------------------------
# Rank tables and rank shifts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RankTable:
    """word -> (count, rank); rank 1 is the most frequent word, ties in
    count broken alphabetically."""

    entries: dict[str, tuple[int, int]] = field(default_factory=dict)

    def __post_init__(self):
        ranks = sorted(rank for _, rank in self.entries.values())
        if ranks != list(range(1, len(self.entries) + 1)):
            raise ValueError("ranks must be a permutation of 1..n")
        ordered = sorted(self.entries.items(), key=lambda kv: kv[1][1])
        for (wa, (ca, _)), (wb, (cb, _)) in zip(ordered, ordered[1:]):
            if cb > ca or (cb == ca and wb < wa):
                raise ValueError("counts must be nonincreasing, ties alphabetical")

    @classmethod
    def from_texts(cls, texts: Iterable[str]) -> "RankTable":
        counts: Counter = Counter()
        for text in texts:
            for span in segment(text):
                if span.kind is Kind.WORD:
                    counts[span.text.lower()] += 1
        ordered = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
        return cls({w: (c, i + 1) for i, (w, c) in enumerate(ordered)})

    def rank_of(self, word: str, absent: int | None = None) -> int:
        if word in self.entries:
            return self.entries[word][1]
        return len(self.entries) + 1 if absent is None else absent


@dataclass(frozen=True)
class BumpRecord:
    word: str
    rank_large: int
    rank_small: int

    @property
    def delta(self) -> int:
        """Positive when the word rose in rank under the constraint."""
        return self.rank_large - self.rank_small


def rank_shift(large: RankTable, small: RankTable) -> list[BumpRecord]:
    """Bump records over the union vocabulary, largest positive delta
    first; absent words rank one past the end of their table."""
    if not large.entries or not small.entries:
        raise ValueError("both conditions must be nonempty")
    words = set(large.entries) | set(small.entries)
    records = [
        BumpRecord(word=w, rank_large=large.rank_of(w), rank_small=small.rank_of(w))
        for w in words
    ]
    records.sort(key=lambda r: (-r.delta, r.word))
    return records


def write_rank_shift(path, records: Sequence[BumpRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in records:
            fh.write(f"{r.word}\t{r.rank_large}\t{r.rank_small}\t{r.delta}\n")


# ---------------------------------------------------------------------------
# Group statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SkillSplit:
    top: tuple[str, ...]
    bottom: tuple[str, ...]


def skill_split(mean_scores: Mapping[str, float]) -> SkillSplit:
    """Median split on participant mean score.

    The bottom half takes ceil(n/2) participants, so an odd count puts
    the median participant in the bottom half; ties order by id.
    """
    if len(mean_scores) < 2:
        raise ValueError("need at least 2 participants")
    ordered = sorted(mean_scores, key=lambda p: (mean_scores[p], p))
    cut = (len(ordered) + 1) // 2
    return SkillSplit(top=tuple(ordered[cut:]), bottom=tuple(ordered[:cut]))


def mann_whitney_u(
    a: Sequence[float], b: Sequence[float], method: str = "auto"
) -> tuple[float, float]:
    """U statistic of the first sample and a two-sided p-value.

    ``auto`` uses the exact permutation distribution for tie-free samples
    with n1+n2 <= 12 and the tie- and continuity-corrected normal
    approximation otherwise.
    """
    if not len(a) or not len(b):
        raise ValueError("both samples must be nonempty")
    if method == "auto":
        tie_free = len(set(a) | set(b)) == len(a) + len(b)
        method = "exact" if tie_free and len(a) + len(b) <= EXACT_MWU_LIMIT else "approx"
    scipy_method = {"exact": "exact", "approx": "asymptotic"}[method]
    res = stats.mannwhitneyu(
        a, b, alternative="two-sided", method=scipy_method, use_continuity=True
    )
    return float(res.statistic), float(res.pvalue)


def bonferroni(ps: Sequence[float], m: int) -> list[float]:
    """min(1, p*m) elementwise; m must cover the number of tests."""
    if m < len(ps):
        raise ValueError(f"m={m} smaller than number of tests {len(ps)}")
    return [min(1.0, p * m) for p in ps]


def deletion_report(stats_rows: Sequence[DeletionStats]) -> list[dict]:
    """Pairwise vocabulary-condition comparisons of per-participant mean
    deletions: machine-readable rows with raw and Bonferroni-adjusted p."""
    by_vocab: dict[int | str, list[float]] = {}
    for row in stats_rows:
        by_vocab.setdefault(row.vocab_size, []).append(row.mean_per_response)
    conditions = sorted(by_vocab, key=str)
    pairs = list(combinations(conditions, 2))
    raw = []
    for va, vb in pairs:
        u, p = mann_whitney_u(by_vocab[va], by_vocab[vb])
        raw.append((va, vb, u, p))
    adjusted = bonferroni([p for _, _, _, p in raw], m=len(pairs)) if pairs else []
    report = []
    for (va, vb, u, p), p_adj in zip(raw, adjusted):
        report.append(
            {
                "group_a": va,
                "group_b": vb,
                "n_a": len(by_vocab[va]),
                "n_b": len(by_vocab[vb]),
                "mean_a": sum(by_vocab[va]) / len(by_vocab[va]),
                "mean_b": sum(by_vocab[vb]) / len(by_vocab[vb]),
                "u": u,
                "p_raw": p,
                "p_adjusted": p_adj,
            }
        )
    return report


# ---------------------------------------------------------------------------
# Keystroke log persistence (line-delimited)
# ---------------------------------------------------------------------------


def write_keystroke_log(path, events: Iterable[KeystrokeEvent]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for ev in events:
            fh.write(json.dumps(asdict(ev), sort_keys=True) + "\n")


def read_keystroke_log(path) -> list[KeystrokeEvent]:
    events = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                events.append(KeystrokeEvent(**json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise FormatError(
                    f"bad keystroke record: {exc}", path=str(path), line=lineno
                )
    return events
