"""Sequential Monte Carlo over constraint-weighted particles.

Each particle extends its token sequence one adaptive sampling step at a
time, multiplying the step's allowed-mass estimate into its importance
weight. When the effective sample size of the weights drops below a set
fraction of the particle count, systematic resampling replaces the
population and equalizes weights while preserving their mean (so the
run's normalizing-constant estimate survives resampling).

A single particle degenerates to plain iterated adaptive sampling: its
ESS is always 1, so resampling never triggers and the trajectory is the
sampler's own, step for step.

Randomness is split from the master seed by (particle index, step index)
counters, making runs reproducible regardless of evaluation order.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Iterable, Sequence

import numpy as np
from scipy.special import logsumexp

from . import constraint
from .errors import FormatError
from .lm import EOS, Model, tokenize
from .sampler import adaptive_step

logger = logging.getLogger(__name__)

RESAMPLE_TOL = 1e-6


@dataclass(frozen=True)
class SmcConfig:
    n_particles: int
    max_tokens: int = 100
    ess_threshold_fraction: float = 0.5

    def __post_init__(self):
        if self.n_particles < 1:
            raise ValueError(f"n_particles must be >= 1, got {self.n_particles}")
        if self.max_tokens < 1:
            raise ValueError(f"max_tokens must be >= 1, got {self.max_tokens}")
        if not 0.0 <= self.ess_threshold_fraction <= 1.0:
            raise ValueError("ess_threshold_fraction must lie in [0, 1]")


@dataclass
class Particle:
    """One weighted hypothesis; text mirrors tokens rendered as surfaces."""

    tokens: list[str] = field(default_factory=list)
    text: str = ""
    log_weight: float = 0.0
    finished: bool = False
    steps: int = 0
    step_log_weights: list[float] = field(default_factory=list)

    @property
    def dead(self) -> bool:
        return self.log_weight == -math.inf

    def clone(self) -> "Particle":
        return replace(
            self,
            tokens=list(self.tokens),
            step_log_weights=list(self.step_log_weights),
        )


@dataclass(frozen=True)
class WeightedCompletion:
    text: str
    normalized_weight: float

    def __post_init__(self):
        if not 0.0 <= self.normalized_weight <= 1.0 + 1e-12:
            raise ValueError(f"weight {self.normalized_weight} outside [0, 1]")


@dataclass(frozen=True)
class SmcRun:
    """Outcome of one SMC run plus bookkeeping for pooling and audits."""

    completions: tuple[WeightedCompletion, ...]
    dead_run: bool
    seed: int
    config: SmcConfig
    n_resamples: int
    steps_taken: int
    log_z: float
    particles: tuple[Particle, ...]


def step_rng(seed: int, particle_index: int, step_index: int) -> np.random.Generator:
    """Independent stream for one (particle, step) cell of a run."""
    ss = np.random.SeedSequence(seed, spawn_key=(particle_index, step_index))
    return np.random.Generator(np.random.PCG64(ss))


def _resample_rng(seed: int, n_particles: int, step_index: int) -> np.random.Generator:
    # Particle indices occupy 0..n-1, so n is free for the resampling stream.
    ss = np.random.SeedSequence(seed, spawn_key=(n_particles, step_index))
    return np.random.Generator(np.random.PCG64(ss))


def ess(weights: Sequence[float]) -> float:
    """Effective sample size (Σw)² / Σw² of nonnegative weights."""
    w = np.asarray(weights, dtype=float)
    if w.size == 0 or np.any(w < 0):
        raise ValueError("weights must be nonnegative and nonempty")
    total = w.sum()
    if total == 0:
        raise ValueError("all weights are zero")
    return float(total * total / np.sum(w * w))


def resample_systematic(weights: Sequence[float], rng, n: int | None = None) -> np.ndarray:
    """n ancestor indices from one uniform offset and n evenly spaced points.

    ``n`` defaults to the number of weights; expected copy count of index
    i is n * w_i, and systematic stratification pins the actual count to
    one of the two integers bracketing it.
    """
    w = np.asarray(weights, dtype=float)
    if abs(w.sum() - 1.0) > RESAMPLE_TOL:
        raise ValueError(f"weights must be normalized, sum to {w.sum()!r}")
    if n is None:
        n = w.size
    positions = (rng.random() + np.arange(n)) / n
    indices = np.searchsorted(np.cumsum(w), positions, side="right")
    return np.minimum(indices, w.size - 1)


def floor_filter(
    completions: Sequence[WeightedCompletion], floor: float
) -> tuple[WeightedCompletion, ...]:
    """Drop completions below the weight floor and renormalize the rest."""
    if completions:
        total = sum(c.normalized_weight for c in completions)
        if abs(total - 1.0) > RESAMPLE_TOL:
            raise ValueError(f"input weights must be normalized, sum to {total!r}")
    kept = [c for c in completions if c.normalized_weight >= floor]
    if len(kept) == len(completions):
        return tuple(completions)
    if not kept:
        logger.warning("weight floor %g removed every completion", floor)
        return ()
    norm = sum(c.normalized_weight for c in kept)
    return tuple(
        WeightedCompletion(c.text, c.normalized_weight / norm) for c in kept
    )


def run_smc(
    model: Model, lex, prompt: str, config: SmcConfig, seed: int
) -> SmcRun:
    """Generate lexicon-constrained completions of ``prompt``.

    The prompt conditions the model but is not itself constrained; checks
    apply to the generated text only. Particles finish by sampling EOS;
    at the step budget a particle survives only if its text is already
    Complete. Returns finished completions, merged by text, with weights
    normalized over the run.
    """
    prompt_tokens = tokenize(prompt)
    trie = constraint._trie_of(lex)
    particles = [Particle() for _ in range(config.n_particles)]
    n_resamples = 0
    steps_taken = 0

    for step in range(config.max_tokens):
        active = [
            (i, p) for i, p in enumerate(particles) if not p.finished and not p.dead
        ]
        if not active:
            break
        steps_taken = step + 1
        for i, p in active:
            dist = model.next_dist(prompt_tokens + p.tokens)
            out = adaptive_step(dist, p.text, trie, step_rng(seed, i, step))
            p.steps += 1
            if out.dead_end:
                p.log_weight = -math.inf
                continue
            p.tokens.append(out.token)
            p.text += dist.inventory.surface(out.token)
            lw = math.log(out.weight_estimate)
            p.log_weight += lw
            p.step_log_weights.append(lw)
            if out.token == EOS:
                p.finished = True

        log_ws = np.array([p.log_weight for p in particles])
        if np.all(np.isinf(log_ws)):
            break
        weights = np.exp(log_ws - logsumexp(log_ws))
        if ess(weights) < config.ess_threshold_fraction * config.n_particles:
            ancestors = resample_systematic(
                weights, _resample_rng(seed, config.n_particles, step)
            )
            log_mean = float(logsumexp(log_ws) - math.log(config.n_particles))
            fresh = []
            for a in ancestors:
                q = particles[a].clone()
                q.log_weight = log_mean
                q.step_log_weights = [log_mean]
                fresh.append(q)
            particles = fresh
            n_resamples += 1

    for p in particles:
        if p.finished or p.dead:
            continue
        if constraint.check(p.text, trie).status is constraint.Status.COMPLETE:
            p.finished = True
        else:
            p.log_weight = -math.inf

    log_ws = np.array([p.log_weight for p in particles])
    log_z = float(logsumexp(log_ws) - math.log(config.n_particles))
    survivors = [p for p in particles if p.finished and not p.dead]
    if not survivors:
        logger.warning("dead run: every particle died (seed=%d)", seed)
        return SmcRun(
            completions=(),
            dead_run=True,
            seed=seed,
            config=config,
            n_resamples=n_resamples,
            steps_taken=steps_taken,
            log_z=-math.inf,
            particles=tuple(particles),
        )

    live = np.array([p.log_weight for p in survivors])
    norm = np.exp(live - logsumexp(live))
    by_text: dict[str, float] = {}
    for p, w in zip(survivors, norm):
        by_text[p.text.strip()] = by_text.get(p.text.strip(), 0.0) + float(w)
    ordered = sorted(by_text.items(), key=lambda kv: (-kv[1], kv[0]))
    completions = tuple(WeightedCompletion(t, w) for t, w in ordered)
    return SmcRun(
        completions=completions,
        dead_run=False,
        seed=seed,
        config=config,
        n_resamples=n_resamples,
        steps_taken=steps_taken,
        log_z=log_z,
        particles=tuple(particles),
    )


# ---------------------------------------------------------------------------
# Run manifests
# ---------------------------------------------------------------------------


def manifest_record(run: SmcRun, lexicon_id: str, prompt: str) -> dict:
    """One line-delimited record describing a finished run."""
    return {
        "seed": run.seed,
        "config": {
            "n_particles": run.config.n_particles,
            "max_tokens": run.config.max_tokens,
            "ess_threshold_fraction": run.config.ess_threshold_fraction,
        },
        "lexicon_id": lexicon_id,
        "prompt_sha256": hashlib.sha256(prompt.encode("utf-8")).hexdigest(),
        "dead_run": run.dead_run,
        "log_z": run.log_z,
        "completions": [
            {"text": c.text, "weight": c.normalized_weight} for c in run.completions
        ],
    }


def write_manifest(path, records: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


def read_manifest(path) -> list[dict]:
    records = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise FormatError(f"bad manifest line: {exc}", path=str(path), line=lineno)
    return records
