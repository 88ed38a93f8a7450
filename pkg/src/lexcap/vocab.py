"""Capped lexicon construction.

A lexicon of size N holds the N most frequent word forms from a ranked
frequency list, closed under inflection families: if any member of a
family appears in the top N, every form in that family is included. The
standard ladder doubles from 250 up to 16,000 words.

Inflection data is a static table file, not a morphology engine, so the
same inputs always produce byte-identical lexicons.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .constraint import is_word_form
from .errors import FormatError, LadderTruncatedError

LADDER_SIZES = (250, 500, 1000, 2000, 4000, 8000, 16000)

PROVENANCE_TOP_N = "top-n"
PROVENANCE_LEMMA_CLOSURE = "lemma-closure"


@dataclass(frozen=True)
class FrequencyList:
    """Ranked word forms, most frequent first. Input order is authoritative."""

    entries: tuple[tuple[str, int], ...]

    def __post_init__(self):
        seen: set[str] = set()
        prev_rank = 0
        for i, (form, rank) in enumerate(self.entries):
            if form != form.lower():
                raise FormatError(f"form {form!r} is not lowercase", line=i + 1)
            if not is_word_form(form):
                raise FormatError(f"form {form!r} is not a single word", line=i + 1)
            if form in seen:
                raise FormatError(f"duplicate form {form!r}", line=i + 1)
            seen.add(form)
            if i == 0 and rank != 1:
                raise FormatError(f"ranks must start at 1, got {rank}", line=1)
            if rank <= prev_rank:
                raise FormatError(
                    f"ranks must be strictly increasing, got {rank} after {prev_rank}",
                    line=i + 1,
                )
            prev_rank = rank

    def __len__(self) -> int:
        return len(self.entries)

    def top(self, n: int) -> list[str]:
        return [form for form, _ in self.entries[:n]]


@dataclass(frozen=True)
class InflectionTable:
    """Disjoint lemma families; each family includes its own lemma."""

    families: dict[str, frozenset[str]]
    _form_to_lemma: dict[str, str] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        index: dict[str, str] = {}
        for lemma, forms in self.families.items():
            if lemma not in forms:
                raise FormatError(f"lemma {lemma!r} missing from its own family")
            for form in forms:
                if not is_word_form(form) or form != form.lower():
                    raise FormatError(f"bad form {form!r} in family {lemma!r}")
                other = index.get(form)
                if other is not None and other != lemma:
                    raise FormatError(
                        f"form {form!r} appears in families {other!r} and {lemma!r}"
                    )
                index[form] = lemma
        object.__setattr__(self, "_form_to_lemma", index)

    def family_of(self, form: str) -> frozenset[str] | None:
        lemma = self._form_to_lemma.get(form)
        if lemma is None:
            return None
        return self.families[lemma]


@dataclass(frozen=True)
class Lexicon:
    """Allowed word forms for one vocabulary size, after lemma closure."""

    n: int
    forms: frozenset[str]
    provenance: dict[str, str]

    def __contains__(self, form: str) -> bool:
        return form.lower() in self.forms

    def __len__(self) -> int:
        return len(self.forms)

    def sorted_forms(self) -> list[str]:
        return sorted(self.forms)

    def serialize(self) -> str:
        lines = [f"#lexicon n={self.n} count={len(self.forms)}"]
        lines.extend(self.sorted_forms())
        return "\n".join(lines) + "\n"

    def digest(self) -> str:
        """Stable identifier of the canonical serialization."""
        return hashlib.sha256(self.serialize().encode("utf-8")).hexdigest()[:16]


def build_lexicon(freq: FrequencyList, infl: InflectionTable, n: int) -> Lexicon:
    """Top-``n`` forms plus every family having a member among them.

    A form is included iff it is in the top n of the frequency list or
    shares an inflection family with a top-n form.
    """
    if n < 1:
        raise ValueError(f"lexicon size must be >= 1, got {n}")
    if len(freq) == 0:
        raise ValueError("frequency list is empty")
    provenance: dict[str, str] = {}
    for form in freq.top(n):
        provenance[form] = PROVENANCE_TOP_N
    for form in list(provenance):
        family = infl.family_of(form)
        if family is None:
            continue
        for member in family:
            provenance.setdefault(member, PROVENANCE_LEMMA_CLOSURE)
    return Lexicon(n=n, forms=frozenset(provenance), provenance=provenance)


def vocab_ladder(
    freq: FrequencyList, infl: InflectionTable, sizes: Sequence[int] = LADDER_SIZES
) -> list[Lexicon]:
    """Build the doubling ladder of lexicons (250 up to 16,000 by default)."""
    if len(freq) < max(sizes):
        achievable = [s for s in sizes if s <= len(freq)]
        raise LadderTruncatedError(len(freq), achievable)
    return [build_lexicon(freq, infl, n) for n in sizes]


# ---------------------------------------------------------------------------
# File formats
# ---------------------------------------------------------------------------

def load_frequency_list(path: str | Path) -> FrequencyList:
    """Parse a ``form<TAB>rank`` file, one entry per line."""
    entries: list[tuple[str, int]] = []
    path = Path(path)
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 2:
            raise FormatError("expected form<TAB>rank", path=str(path), line=lineno)
        form, rank_text = parts
        try:
            rank = int(rank_text)
        except ValueError:
            raise FormatError(
                f"rank {rank_text!r} is not an integer", path=str(path), line=lineno
            ) from None
        if rank < 1:
            raise FormatError(f"rank must be positive, got {rank}", path=str(path), line=lineno)
        entries.append((form.strip().lower(), rank))
    try:
        return FrequencyList(tuple(entries))
    except FormatError as exc:
        raise FormatError(str(exc), path=str(path)) from None


def load_inflection_table(path: str | Path) -> InflectionTable:
    """Parse a ``lemma<TAB>form1,form2,...`` file, one family per line."""
    families: dict[str, frozenset[str]] = {}
    path = Path(path)
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
        if not raw.strip():
            continue
        parts = raw.split("\t")
        if len(parts) != 2:
            raise FormatError(
                "expected lemma<TAB>form1,form2,...", path=str(path), line=lineno
            )
        lemma = parts[0].strip().lower()
        forms = frozenset(
            f.strip().lower() for f in parts[1].split(",") if f.strip()
        ) | {lemma}
        if lemma in families:
            raise FormatError(f"duplicate family {lemma!r}", path=str(path), line=lineno)
        families[lemma] = forms
    try:
        return InflectionTable(families)
    except FormatError as exc:
        raise FormatError(str(exc), path=str(path)) from None


def write_lexicon(lex: Lexicon, path: str | Path) -> None:
    Path(path).write_text(lex.serialize(), encoding="utf-8")


def load_lexicon(path: str | Path) -> Lexicon:
    """Read a serialized lexicon. Provenance is not stored in the file."""
    path = Path(path)
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines or not lines[0].startswith("#lexicon "):
        raise FormatError("missing #lexicon header", path=str(path), line=1)
    header = lines[0][len("#lexicon "):].split()
    fields = dict(part.split("=", 1) for part in header if "=" in part)
    try:
        n = int(fields["n"])
        count = int(fields["count"])
    except (KeyError, ValueError):
        raise FormatError("malformed #lexicon header", path=str(path), line=1) from None
    forms = frozenset(line.strip() for line in lines[1:] if line.strip())
    if len(forms) != count:
        raise FormatError(
            f"header count={count} but file has {len(forms)} forms", path=str(path)
        )
    return Lexicon(n=n, forms=forms, provenance={})


def lexicon_nesting_holds(ladder: Iterable[Lexicon]) -> bool:
    """True iff every lexicon's forms are contained in the next one's."""
    ladder = list(ladder)
    return all(a.forms <= b.forms for a, b in zip(ladder, ladder[1:]))
