"""Autoregressive language models over word-level tokens.

The built-in backend is a deterministic add-k n-gram model whose tokens
follow the constraint module's word grammar, with punctuation marks as
standalone tokens. Token surfaces carry their own separators (words render
with a leading space, the end marker renders as a newline), so any token
sequence concatenates directly into text and a partially generated string
can be constraint-checked after every append.

A remote-logits client speaks the same next-token contract over HTTP for
plugging in external models.

All probability arithmetic is carried in log space.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Iterable, Protocol, Sequence

import httpx
import numpy as np
from scipy.special import logsumexp

from .constraint import Kind, segment
from .errors import ProtocolError, RetryableTransportError, UnknownTokenError

BOS = "<s>"
EOS = "</s>"

NORMALIZATION_TOL = 1e-9


def tokenize(text: str) -> list[str]:
    """Lowercased word tokens plus single-character punctuation tokens."""
    tokens: list[str] = []
    for span in segment(text):
        if span.kind is Kind.WORD:
            tokens.append(span.text.lower())
        else:
            tokens.extend(c for c in span.text if not c.isspace())
    return tokens


@dataclass(frozen=True)
class TokenInventory:
    """Ordered token surfaces with distinguished BOS and EOS markers.

    BOS is context padding only and is never predicted; EOS renders as a
    newline so that sampling it forces the final word to be complete.
    """

    tokens: tuple[str, ...]
    index: dict[str, int] = field(repr=False, default_factory=dict)

    def __post_init__(self):
        index = {tok: i for i, tok in enumerate(self.tokens)}
        if len(index) != len(self.tokens):
            raise ValueError("token surfaces must be unique")
        if EOS not in index:
            raise ValueError("inventory must contain the EOS marker")
        object.__setattr__(self, "index", index)

    @classmethod
    def from_corpus_tokens(cls, tokens: Iterable[str]) -> "TokenInventory":
        surfaces = sorted(set(tokens) - {BOS, EOS})
        return cls((BOS, EOS) + tuple(surfaces))

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.index

    @property
    def bos_id(self) -> int | None:
        return self.index.get(BOS)

    @property
    def eos_id(self) -> int:
        return self.index[EOS]

    def surface(self, token: str) -> str:
        """Renderable text of one token, separator included."""
        if token == BOS:
            return ""
        if token == EOS:
            return "\n"
        if token[0].isalpha():
            return " " + token
        return token

    def render(self, tokens: Sequence[str]) -> str:
        return "".join(self.surface(t) for t in tokens)


@dataclass(frozen=True)
class NextTokenDistribution:
    """One-step distribution over an inventory, held as log-probabilities."""

    inventory: TokenInventory
    log_probs: np.ndarray

    def __post_init__(self):
        lp = np.asarray(self.log_probs, dtype=float)
        if lp.shape != (len(self.inventory),):
            raise ValueError("log_probs must align with the inventory")
        if np.any(np.isnan(lp)) or np.any(lp > 1e-12):
            raise ValueError("log-probabilities must be finite and <= 0, or -inf")
        total = float(np.exp(logsumexp(lp)))
        if abs(total - 1.0) > NORMALIZATION_TOL:
            raise ValueError(f"distribution sums to {total!r}, expected 1")
        lp.flags.writeable = False
        object.__setattr__(self, "log_probs", lp)

    @classmethod
    def from_log_weights(
        cls, inventory: TokenInventory, log_weights: np.ndarray
    ) -> "NextTokenDistribution":
        """Normalize unnormalized log-weights into a distribution."""
        lw = np.asarray(log_weights, dtype=float)
        return cls(inventory, lw - logsumexp(lw))

    @classmethod
    def from_probs(
        cls, inventory: TokenInventory, probs: np.ndarray
    ) -> "NextTokenDistribution":
        p = np.asarray(probs, dtype=float)
        with np.errstate(divide="ignore"):
            return cls(inventory, np.log(p))

    def prob(self, token: str) -> float:
        return float(np.exp(self.log_probs[self.inventory.index[token]]))

    def probs(self) -> np.ndarray:
        return np.exp(self.log_probs)


class Model(Protocol):
    """What the sampling layers need from any backend."""

    inventory: TokenInventory

    def next_dist(self, context: Sequence[str]) -> NextTokenDistribution: ...


class NgramModel:
    """Order-n model with add-k smoothing over a fixed inventory.

    P(t | ctx) = (count(ctx, t) + k) / (count(ctx) + k * V) where V counts
    the predictable tokens (everything but BOS). With k > 0 an unseen
    context falls back to the uniform smoothed table; with k = 0 it has no
    defined distribution and is reported as an error.
    """

    def __init__(self, inventory: TokenInventory, order: int, k: float):
        if order < 1:
            raise ValueError(f"order must be >= 1, got {order}")
        if k < 0:
            raise ValueError(f"smoothing k must be >= 0, got {k}")
        self.inventory = inventory
        self.order = order
        self.k = float(k)
        self._support = np.ones(len(inventory), dtype=bool)
        if inventory.bos_id is not None:
            self._support[inventory.bos_id] = False
        self._counts: dict[tuple[str, ...], np.ndarray] = defaultdict(
            lambda: np.zeros(len(self.inventory), dtype=np.int64)
        )
        self._totals: dict[tuple[str, ...], int] = defaultdict(int)

    @property
    def vocab_size(self) -> int:
        """Predictable-token count V used by the smoothing denominator."""
        return int(self._support.sum())

    def _observe(self, context: tuple[str, ...], token: str) -> None:
        self._counts[context][self.inventory.index[token]] += 1
        self._totals[context] += 1

    def _pad(self, context: Sequence[str]) -> tuple[str, ...]:
        ctx = (BOS,) * (self.order - 1) + tuple(context)
        return ctx[len(ctx) - (self.order - 1):] if self.order > 1 else ()

    def next_dist(self, context: Sequence[str]) -> NextTokenDistribution:
        for tok in context:
            if tok not in self.inventory:
                raise UnknownTokenError(tok)
        ctx = self._pad(context)
        counts = self._counts.get(ctx)
        total = self._totals.get(ctx, 0)
        if counts is None:
            counts = np.zeros(len(self.inventory), dtype=np.int64)
        if total == 0 and self.k == 0.0:
            raise ValueError(
                f"context {ctx!r} unseen and k=0 leaves the distribution undefined"
            )
        v = self.vocab_size
        probs = np.zeros(len(self.inventory), dtype=float)
        denom = total + self.k * v
        probs[self._support] = (counts[self._support] + self.k) / denom
        return NextTokenDistribution.from_probs(self.inventory, probs)


def train_ngram(
    corpus: Sequence[Sequence[str]],
    order: int = 3,
    k: float = 0.1,
    inventory: TokenInventory | None = None,
) -> NgramModel:
    """Count transitions over BOS-padded, EOS-terminated token sequences."""
    sequences = [tuple(seq) for seq in corpus]
    if not sequences:
        raise ValueError("corpus is empty")
    if inventory is None:
        inventory = TokenInventory.from_corpus_tokens(
            tok for seq in sequences for tok in seq
        )
    model = NgramModel(inventory, order, k)
    for seq in sequences:
        for tok in seq:
            if tok not in inventory:
                raise UnknownTokenError(tok)
        padded = (BOS,) * (order - 1) + seq + (EOS,)
        for i in range(order - 1, len(padded)):
            ctx = padded[i - (order - 1): i] if order > 1 else ()
            model._observe(tuple(ctx), padded[i])
    return model


def train_ngram_from_text(
    texts: Sequence[str], order: int = 3, k: float = 0.1
) -> NgramModel:
    return train_ngram([tokenize(t) for t in texts], order=order, k=k)


# ---------------------------------------------------------------------------
# Remote logits protocol
# ---------------------------------------------------------------------------

LOGPROBS_PATH = "/v1/logprobs"


class RemoteModel:
    """Client for an external next-token endpoint.

    Sends ``POST {endpoint}/v1/logprobs`` with ``{"context": [...],
    "top_k": n?}`` and expects ``{"tokens": [...], "logprobs": [...]}``
    covering the full inventory, or a top-k subset plus a ``rest_mass``
    probability shared uniformly by the unlisted tokens. Returned logprobs
    may be unnormalized; the client renormalizes.
    """

    def __init__(
        self,
        endpoint: str,
        inventory: TokenInventory,
        top_k: int | None = None,
        timeout: float = 10.0,
        client: httpx.Client | None = None,
    ):
        self.endpoint = endpoint.rstrip("/")
        self.inventory = inventory
        self.top_k = top_k
        self._client = client or httpx.Client(timeout=timeout)

    def next_dist(self, context: Sequence[str]) -> NextTokenDistribution:
        for tok in context:
            if tok not in self.inventory:
                raise UnknownTokenError(tok)
        body: dict = {"context": list(context)}
        if self.top_k is not None:
            body["top_k"] = self.top_k
        try:
            resp = self._client.post(self.endpoint + LOGPROBS_PATH, json=body)
        except httpx.HTTPError as exc:
            raise RetryableTransportError(f"logprobs request failed: {exc}") from exc
        if resp.status_code >= 500:
            raise RetryableTransportError(f"logprobs endpoint returned {resp.status_code}")
        if resp.status_code != 200:
            raise ProtocolError(f"logprobs endpoint returned {resp.status_code}")
        try:
            payload = resp.json()
        except ValueError as exc:
            raise ProtocolError(f"logprobs response is not JSON: {exc}") from exc
        return self._parse(payload)

    def _parse(self, payload: dict) -> NextTokenDistribution:
        if not isinstance(payload, dict):
            raise ProtocolError("logprobs payload must be an object")
        tokens = payload.get("tokens")
        logprobs = payload.get("logprobs")
        if not isinstance(tokens, list) or not isinstance(logprobs, list):
            raise ProtocolError("logprobs payload missing tokens/logprobs lists")
        if len(tokens) != len(logprobs) or not tokens:
            raise ProtocolError("tokens and logprobs must be nonempty and aligned")
        ids = []
        for tok in tokens:
            if tok == BOS or tok not in self.inventory:
                raise ProtocolError(f"response token {tok!r} not predictable")
            ids.append(self.inventory.index[tok])
        if len(set(ids)) != len(ids):
            raise ProtocolError("response lists a token twice")
        try:
            lw = np.array([float(x) for x in logprobs], dtype=float)
        except (TypeError, ValueError) as exc:
            raise ProtocolError(f"non-numeric logprob: {exc}") from exc

        n = len(self.inventory)
        support = np.ones(n, dtype=bool)
        if self.inventory.bos_id is not None:
            support[self.inventory.bos_id] = False
        listed = np.zeros(n, dtype=bool)
        listed[ids] = True
        unlisted = support & ~listed

        probs = np.zeros(n, dtype=float)
        head = np.exp(lw - logsumexp(lw))
        if not unlisted.any():
            probs[ids] = head
            return NextTokenDistribution.from_probs(self.inventory, probs)
        rest = payload.get("rest_mass")
        if rest is None:
            raise ProtocolError("partial token list without rest_mass")
        rest = float(rest)
        if not 0.0 <= rest <= 1.0:
            raise ProtocolError(f"rest_mass {rest} outside [0, 1]")
        probs[ids] = head * (1.0 - rest)
        probs[unlisted] = rest / int(unlisted.sum())
        return NextTokenDistribution.from_probs(self.inventory, probs)


def remote_next_dist(
    endpoint: str, context: Sequence[str], inventory: TokenInventory, **kwargs
) -> NextTokenDistribution:
    return RemoteModel(endpoint, inventory, **kwargs).next_dist(context)
