"""Weighted response-quality evaluation.

Responses are scored on a 7-point scale by a judge backend: either a
remote scorer speaking a small wire protocol, or a deterministic stub
for pipeline tests. Sampled responses carry probability weights, so a
question's quality estimate is the weighted mean of its scores; human
responses get equal weights. Question-level means aggregate into a mean
with a normal-approximation 95% confidence interval, and grader norming
uses Spearman rank correlation.
"""

from __future__ import annotations

import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from importlib import resources
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np
from scipy import stats

from .errors import FormatError, ProtocolError, RetryableTransportError
from .lm import tokenize

UNCONSTRAINED = "unconstrained"

SCORE_MIN = 1
SCORE_MAX = 7

WEIGHT_SUM_TOL = 1e-6


def default_rubric() -> str:
    return (
        resources.files("lexcap").joinpath("assets/rubric_v1.txt").read_text("utf-8")
    )


@dataclass(frozen=True)
class ScoreRecord:
    """One judged response with its probability weight within its group.

    A group is one (question_id, source, vocab_size) cell; weights within
    a group must sum to 1, which ``weighted_mean`` enforces.
    """

    question_id: str
    source: str
    vocab_size: int | str
    score: int
    justification: str
    weight: float

    def __post_init__(self):
        if isinstance(self.vocab_size, str) and self.vocab_size != UNCONSTRAINED:
            raise ValueError(f"vocab_size must be an integer or {UNCONSTRAINED!r}")
        if not SCORE_MIN <= self.score <= SCORE_MAX or not isinstance(self.score, int):
            raise ValueError(f"score must be an integer in 1-7, got {self.score!r}")
        if not 0.0 <= self.weight <= 1.0:
            raise ValueError(f"weight {self.weight} outside [0, 1]")


class JudgeBackend(Protocol):
    def score(self, question: str, response: str) -> tuple[int, str]: ...


class StubJudge:
    """Deterministic judge for pipeline tests: 1 + distinct keyword hits.

    Keywords come from a per-question mapping when provided, otherwise
    from the question's own words, so coverage of the question's content
    raises the score. Capped at 6 hits; an empty response scores 1.
    No claim of real quality measurement is attached.
    """

    def __init__(self, keywords: dict[str, Sequence[str]] | None = None):
        self._keywords = {
            q: frozenset(w.lower() for w in words)
            for q, words in (keywords or {}).items()
        }

    def score(self, question: str, response: str) -> tuple[int, str]:
        keys = self._keywords.get(question)
        if keys is None:
            keys = frozenset(tokenize(question)) - {".", ",", "?", "!"}
        hits = sorted(set(tokenize(response)) & keys)
        n = min(6, len(hits))
        shown = ", ".join(hits[:6]) if hits else "none"
        return 1 + n, f"matched {n} keyword(s): {shown}"


class RemoteJudge:
    """Client for ``POST {endpoint}/v1/score`` with {question, response,
    rubric}; expects {score: integer 1-7, justification: string}."""

    def __init__(
        self,
        endpoint: str,
        rubric: str | None = None,
        timeout: float = 30.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.rubric = default_rubric() if rubric is None else rubric
        self._client = client or httpx.Client(timeout=timeout)

    def score(self, question: str, response: str) -> tuple[int, str]:
        body = {"question": question, "response": response, "rubric": self.rubric}
        try:
            resp = self._client.post(self.endpoint + "/v1/score", json=body)
        except httpx.HTTPError as exc:
            raise RetryableTransportError(f"score request failed: {exc}") from exc
        if resp.status_code >= 500:
            raise RetryableTransportError(f"judge returned {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"judge returned {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"judge response is not JSON: {exc}") from exc
        score = payload.get("score") if isinstance(payload, dict) else None
        if not isinstance(score, int) or not SCORE_MIN <= score <= SCORE_MAX:
            raise ProtocolError(f"judge score {score!r} outside 1-7")
        justification = payload.get("justification", "")
        if not isinstance(justification, str):
            raise ProtocolError("judge justification must be a string")
        return score, justification


def judge(question: str, response: str, backend: JudgeBackend) -> tuple[int, str]:
    """Score one response against its question."""
    if not question.strip():
        raise ValueError("question must be nonempty")
    return backend.score(question, response)


def judge_many(
    pairs: Sequence[tuple[str, str]], backend: JudgeBackend, max_in_flight: int = 4
) -> list[tuple[int, str]]:
    """Score many (question, response) pairs, preserving input order."""
    with ThreadPoolExecutor(max_workers=max_in_flight) as pool:
        return list(pool.map(lambda qr: judge(qr[0], qr[1], backend), pairs))


def weighted_mean(records: Sequence[ScoreRecord]) -> float:
    """Σ score·weight over one group; weights must sum to 1."""
    total = sum(r.weight for r in records)
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        raise ValueError(f"group weights sum to {total!r}, expected 1")
    return sum(r.score * r.weight for r in records)


@dataclass(frozen=True)
class Aggregate:
    mean: float
    ci_low: float
    ci_high: float
    n: int

    @property
    def half_width(self) -> float:
        return (self.ci_high - self.ci_low) / 2


def aggregate(values: Sequence[float]) -> Aggregate:
    """Mean of per-question values with a 1.96·SE confidence interval."""
    if len(values) < 2:
        raise ValueError("confidence interval needs at least 2 values")
    arr = np.asarray(values, dtype=float)
    mean = float(arr.mean())
    half = 1.96 * float(arr.std(ddof=1)) / math.sqrt(arr.size)
    return Aggregate(mean=mean, ci_low=mean - half, ci_high=mean + half, n=arr.size)


def spearman(xs: Sequence[float], ys: Sequence[float]) -> float:
    """Rank correlation: Pearson correlation of mid-ranks."""
    if len(xs) != len(ys):
        raise ValueError("inputs must have equal length")
    if len(xs) < 2:
        raise ValueError("need at least 2 pairs")
    if len(set(xs)) == 1 or len(set(ys)) == 1:
        raise ValueError("rank correlation of a constant vector is undefined")
    rho = stats.spearmanr(xs, ys).statistic
    return float(rho)


# ---------------------------------------------------------------------------
# Score-record persistence (line-delimited)
# ---------------------------------------------------------------------------


def write_scores(path, records: Iterable[ScoreRecord]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(asdict(rec), sort_keys=True) + "\n")


def read_scores(path) -> list[ScoreRecord]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(ScoreRecord(**json.loads(line)))
            except (json.JSONDecodeError, TypeError, ValueError) as exc:
                raise FormatError(
                    f"bad score record: {exc}", path=str(path), line=lineno
                )
    return records
