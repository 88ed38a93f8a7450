"""One-step constrained token sampling.

``filter_exact`` evaluates the constraint on every candidate token and is
the exact (but expensive) reference. ``adaptive_step`` samples from the
same conditional while touching far fewer tokens: it draws without
replacement from the proposal until a token passes the constraint, then
spends one extra draw on an unbiased estimate of the allowed mass Z,
which becomes the step's importance weight.

Unbiasedness of the estimator: after accepting t with rejected set R,
the remaining support S' is drawn from proportionally to q, so
E[1[u allowed]] = q(allowed ∩ S') / q(S'). With coefficient
q(S') = 1 - q(R) - q(t) the expectation of
w = q(t) + (1 - q(R) - q(t)) * 1[u allowed] is q(t) + q(allowed ∩ S'),
which is exactly Z because every member of R is disallowed.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from scipy.special import logsumexp

from . import constraint
from .lm import NextTokenDistribution


@dataclass(frozen=True)
class StepOutcome:
    """Result of one adaptive sampling step.

    ``weight_estimate`` is an unbiased estimate of the allowed proposal
    mass; a dead end (no allowed token with positive mass) carries weight
    zero and no token.
    """

    token: str | None
    weight_estimate: float
    constraint_calls: int
    dead_end: bool

    def __post_init__(self):
        if self.dead_end and self.weight_estimate != 0.0:
            raise ValueError("dead ends carry zero weight")
        if self.constraint_calls < 1:
            raise ValueError("at least one constraint call is made")


def _require_extendable_prefix(prefix: str, lex) -> None:
    verdict = constraint.check(prefix, lex)
    if not verdict.ok:
        raise ValueError(f"prefix is not valid under the lexicon: {verdict}")


def _token_allowed(dist: NextTokenDistribution, token: str, prefix: str, lex) -> bool:
    return constraint.check(prefix + dist.inventory.surface(token), lex).ok


def filter_exact(
    dist: NextTokenDistribution, prefix: str, lex
) -> tuple[dict[str, float], float]:
    """Constrained conditional and allowed mass, by checking every token.

    Only tokens with positive proposal probability are examined; the rest
    cannot contribute mass. Returns ({token: renormalized prob}, Z); a
    dead end is ({}, 0.0), not an error.
    """
    _require_extendable_prefix(prefix, lex)
    probs = dist.probs()
    allowed: dict[str, float] = {}
    z = 0.0
    for i in np.flatnonzero(probs > 0.0):
        token = dist.inventory.tokens[i]
        if _token_allowed(dist, token, prefix, lex):
            allowed[token] = float(probs[i])
            z += float(probs[i])
    return {t: p / z for t, p in allowed.items()}, z


def adaptive_step(
    dist: NextTokenDistribution, prefix: str, lex, rng
) -> StepOutcome:
    """Sample one allowed token and estimate the allowed mass.

    Tokens are drawn without replacement, renormalizing in log space over
    the shrinking support, until one passes the constraint; each draw
    costs one constraint call. One further draw prices the rest of the
    support (skipped when nothing remains). Zero-probability tokens are
    never drawn and never checked.
    """
    _require_extendable_prefix(prefix, lex)
    log_q = dist.log_probs
    q = dist.probs()
    remaining = list(np.flatnonzero(q > 0.0))

    rejected_mass = 0.0
    calls = 0
    while remaining:
        lp = log_q[remaining]
        cum = np.cumsum(np.exp(lp - logsumexp(lp)))
        pick = int(np.searchsorted(cum, rng.random(), side="right"))
        pick = min(pick, len(remaining) - 1)  # guard the fp edge at cum ~ 1
        idx = remaining.pop(pick)
        token = dist.inventory.tokens[idx]
        calls += 1
        if not _token_allowed(dist, token, prefix, lex):
            rejected_mass += q[idx]
            continue

        weight = float(q[idx])
        if remaining:
            lp = log_q[remaining]
            cum = np.cumsum(np.exp(lp - logsumexp(lp)))
            extra_pick = int(np.searchsorted(cum, rng.random(), side="right"))
            extra_pick = min(extra_pick, len(remaining) - 1)
            extra = dist.inventory.tokens[remaining[extra_pick]]
            calls += 1
            if _token_allowed(dist, extra, prefix, lex):
                weight += 1.0 - rejected_mass - float(q[idx])
        return StepOutcome(
            token=token, weight_estimate=weight, constraint_calls=calls, dead_end=False
        )

    return StepOutcome(
        token=None, weight_estimate=0.0, constraint_calls=calls, dead_end=True
    )
