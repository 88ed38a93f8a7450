"""HTTP service for the live typing experiment and batch generation.

A session walks one participant through 16 questions: 4 unconstrained,
then 4 each at vocabulary sizes 4000, 1000, and 250. Questions come out
of an assignment plan that wants every (question, vocabulary) cell
answered by three distinct participants; session creation greedily takes
the least-filled open cells, breaking ties with the session seed.

Every keystroke, accepted or rejected, is appended to a line-delimited
store, and a submission is accepted only when replaying its keystroke
log reproduces the submitted text byte for byte. Submits are idempotent:
repeating one returns the original receipt. The 90-second inactivity
prompt is client-fired; the server records the event and never advances
a session on its own.

Generation wraps the particle sampler plus the weight floor behind one
endpoint and appends a manifest record per run. Norming graders post
score records through /v1/score, idempotent per (rater, pair index).
"""

from __future__ import annotations

import hashlib
import json
import math
import random
import threading
from dataclasses import asdict, dataclass
from importlib import resources
from pathlib import Path
from typing import Iterable, Mapping

from fastapi import FastAPI, HTTPException
from pydantic import BaseModel

from . import analysis, constraint, smc
from .analysis import BACKSPACE_KEY, SUBMIT_KEY, TIMEOUT_PROMPT_KEY, KeystrokeEvent
from .errors import (
    ConflictError,
    FormatError,
    IntegrityError,
    LexcapError,
    NoCapacityError,
    RetryableTransportError,
)
from .eval import UNCONSTRAINED, ScoreRecord
from .lm import Model

CATEGORIES = ("Why", "How", "ExplainSimple", "RedditELI5")

# Condition of each of the 16 session positions, in order.
SESSION_CONDITIONS = (UNCONSTRAINED,) * 4 + (4000,) * 4 + (1000,) * 4 + (250,) * 4

SLOTS_PER_CELL = 3

SESSION_STATES = ("active", "complete", "abandoned")


@dataclass(frozen=True)
class Question:
    id: str
    category: str
    text: str

    def __post_init__(self):
        if self.category not in CATEGORIES:
            raise ValueError(f"category must be one of {CATEGORIES}, got {self.category!r}")
        if not self.id or not self.text:
            raise ValueError("question id and text must be nonempty")


def load_questions(path: str | Path) -> list[Question]:
    """Parse a line-delimited question corpus of {id, category, text}."""
    questions: list[Question] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                question = Question(rec["id"], rec["category"], rec["text"])
            except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
                raise FormatError(f"bad question record: {exc}", path=str(path), line=lineno)
            if question.id in seen:
                raise FormatError(f"duplicate question id {question.id!r}", path=str(path), line=lineno)
            seen.add(question.id)
            questions.append(question)
    return questions


def default_questions() -> list[Question]:
    """The packaged sample question corpus."""
    source = resources.files("lexcap").joinpath("assets/questions_sample.jsonl")
    with resources.as_file(source) as path:
        return load_questions(path)


@dataclass
class Session:
    id: str
    participant_id: str
    assignment: tuple[tuple[str, int | str], ...]
    cursor: int = 0
    state: str = "active"

    def __post_init__(self):
        if tuple(v for _, v in self.assignment) != SESSION_CONDITIONS:
            raise ValueError("assignment must run 4 unconstrained, then 4 each at 4000, 1000, 250")
        question_ids = [q for q, _ in self.assignment]
        if len(set(question_ids)) != len(question_ids):
            raise ValueError("assignment repeats a question")
        if not 0 <= self.cursor <= len(self.assignment):
            raise ValueError(f"cursor {self.cursor} out of range")
        if self.state not in SESSION_STATES:
            raise ValueError(f"state must be one of {SESSION_STATES}, got {self.state!r}")

    @property
    def current_item(self) -> tuple[str, int | str] | None:
        """The (question_id, vocab_size) awaiting a response, if any."""
        if self.state != "active" or self.cursor >= len(self.assignment):
            return None
        return self.assignment[self.cursor]


class AssignmentPlan:
    """Fill state of every (question, vocabulary) cell.

    Each cell holds ``slots_per_cell`` slots that must go to distinct
    participants. Mutations happen under ``lock``; ``create_session``
    holds it across its whole pick-then-reserve transaction.
    """

    def __init__(
        self,
        question_ids: Iterable[str],
        conditions: tuple[int | str, ...] = (UNCONSTRAINED, 4000, 1000, 250),
        slots_per_cell: int = SLOTS_PER_CELL,
    ):
        self.question_ids = tuple(question_ids)
        if len(set(self.question_ids)) != len(self.question_ids) or not self.question_ids:
            raise ValueError("question ids must be nonempty and unique")
        if slots_per_cell < 1:
            raise ValueError("slots_per_cell must be >= 1")
        self.conditions = tuple(conditions)
        self.slots_per_cell = slots_per_cell
        self._filled: dict[tuple[str, int | str], list[str]] = {
            (q, c): [] for q in self.question_ids for c in self.conditions
        }
        self.lock = threading.Lock()

    def participants(self, question_id: str, condition: int | str) -> tuple[str, ...]:
        return tuple(self._filled[(question_id, condition)])

    def remaining(self, question_id: str, condition: int | str) -> int:
        return self.slots_per_cell - len(self._filled[(question_id, condition)])

    def reserve(self, question_id: str, condition: int | str, participant_id: str) -> None:
        cell = self._filled[(question_id, condition)]
        if len(cell) >= self.slots_per_cell:
            raise NoCapacityError(f"cell ({question_id}, {condition}) is full")
        if participant_id in cell:
            raise ValueError(f"participant {participant_id!r} already fills ({question_id}, {condition})")
        cell.append(participant_id)

    def shortfall(self) -> dict[tuple[str, int | str], int]:
        """Cells still owed responses, with their remaining capacity."""
        return {
            cell: self.slots_per_cell - len(got)
            for cell, got in self._filled.items()
            if len(got) < self.slots_per_cell
        }

    @property
    def total_remaining(self) -> int:
        return sum(self.shortfall().values())

    @property
    def complete(self) -> bool:
        return not self.shortfall()


def create_session(
    participant_id: str,
    plan: AssignmentPlan,
    seed: int,
    session_id: str | None = None,
) -> Session:
    """Assign 16 questions to a new session from the plan's open slots.

    Greedy per position: among questions not yet used in this session
    whose cell at the position's condition has room and does not already
    contain this participant, take one with the most remaining capacity,
    seed-randomized across ties. Either all 16 slots are reserved or,
    when some position has no candidate, nothing is.
    """
    rng = random.Random(seed)
    with plan.lock:
        used: set[str] = set()
        picks: list[tuple[str, int | str]] = []
        for condition in SESSION_CONDITIONS:
            best: list[str] = []
            best_remaining = 0
            for q in plan.question_ids:
                if q in used:
                    continue
                r = plan.remaining(q, condition)
                if r <= 0 or participant_id in plan.participants(q, condition):
                    continue
                if r > best_remaining:
                    best_remaining, best = r, [q]
                elif r == best_remaining:
                    best.append(q)
            if not best:
                raise NoCapacityError(
                    f"no open ({condition!r}) slot left for participant {participant_id!r}"
                )
            q = rng.choice(best)
            used.add(q)
            picks.append((q, condition))
        for q, condition in picks:
            plan.reserve(q, condition, participant_id)
    return Session(
        id=session_id or f"s-{participant_id}",
        participant_id=participant_id,
        assignment=tuple(picks),
    )


def _advance_buffer(buffer: str, key: str, accepted: bool) -> str:
    if not accepted or key in (SUBMIT_KEY, TIMEOUT_PROMPT_KEY):
        return buffer
    if key == BACKSPACE_KEY:
        return buffer[:-1]
    return buffer + key


class ExperimentStore:
    """Append-only JSONL record log with in-memory indexes.

    Records are replayed on open, so a restarted service resumes with
    identical sessions, buffers, and receipts.
    """

    def __init__(self, path: str | Path):
        self.path = Path(path)
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.sessions: dict[str, Session] = {}
        self.events: dict[tuple[str, str], list[KeystrokeEvent]] = {}
        self.buffers: dict[tuple[str, str], str] = {}
        self.responses: dict[tuple[str, str], dict] = {}
        self.grades: dict[tuple[str, int], dict] = {}
        self.n_responses = 0
        if self.path.exists():
            self._load()

    def _load(self) -> None:
        with open(self.path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                try:
                    rec = json.loads(line)
                    self._apply(rec)
                except (json.JSONDecodeError, TypeError, KeyError, ValueError) as exc:
                    raise FormatError(f"bad store record: {exc}", path=str(self.path), line=lineno)

    def _apply(self, rec: dict) -> None:
        kind = rec["kind"]
        if kind == "session":
            assignment = tuple((q, v) for q, v in rec["assignment"])
            session = Session(rec["id"], rec["participant_id"], assignment)
            self.sessions[session.id] = session
        elif kind == "keystroke":
            ev = KeystrokeEvent(**rec["event"])
            key = (ev.session_id, ev.question_id)
            self.events.setdefault(key, []).append(ev)
            self.buffers[key] = _advance_buffer(self.buffers.get(key, ""), ev.key, ev.accepted)
        elif kind == "response":
            self._index_response(rec)
        elif kind == "score":
            self.grades[(rec["rater_id"], rec["pair_index"])] = rec
        elif kind != "integrity_error":
            raise ValueError(f"unknown record kind {kind!r}")

    def _index_response(self, rec: dict) -> None:
        session = self.sessions[rec["session_id"]]
        self.responses[(rec["session_id"], rec["question_id"])] = rec
        self.n_responses += 1
        session.cursor += 1
        if session.cursor == len(session.assignment):
            session.state = "complete"

    def _write(self, rec: dict) -> None:
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")

    def buffer(self, session_id: str, question_id: str) -> str:
        return self.buffers.get((session_id, question_id), "")

    def add_session(self, session: Session, seed: int) -> None:
        if session.id in self.sessions:
            raise ValueError(f"duplicate session id {session.id!r}")
        self._write(
            {
                "kind": "session",
                "id": session.id,
                "participant_id": session.participant_id,
                "assignment": [list(item) for item in session.assignment],
                "seed": seed,
            }
        )
        self.sessions[session.id] = session

    def add_event(self, ev: KeystrokeEvent, buffer_after: str) -> None:
        self._write({"kind": "keystroke", "event": asdict(ev)})
        key = (ev.session_id, ev.question_id)
        self.events.setdefault(key, []).append(ev)
        self.buffers[key] = buffer_after

    def add_response(
        self, session_id: str, question_id: str, vocab_size: int | str, text: str, token: str
    ) -> dict:
        rec = {
            "kind": "response",
            "response_id": f"r{self.n_responses + 1:04d}",
            "session_id": session_id,
            "question_id": question_id,
            "vocab_size": vocab_size,
            "text": text,
            "token": token,
            "empty": not text.strip(),
        }
        self._write(rec)
        self._index_response(rec)
        return rec

    def add_score(
        self,
        rater_id: str,
        pair_index: int,
        question_id: str,
        source: str,
        vocab_size: int | str,
        score: int,
        justification: str,
    ) -> dict:
        rec = {
            "kind": "score",
            "score_id": f"g{len(self.grades) + 1:04d}",
            "rater_id": rater_id,
            "pair_index": pair_index,
            "question_id": question_id,
            "source": source,
            "vocab_size": vocab_size,
            "score": score,
            "justification": justification,
        }
        self._write(rec)
        self.grades[(rater_id, pair_index)] = rec
        return rec

    def add_integrity_error(
        self, session_id: str, question_id: str, final_text: str, replayed: str
    ) -> None:
        self._write(
            {
                "kind": "integrity_error",
                "session_id": session_id,
                "question_id": question_id,
                "final_text": final_text,
                "replayed": replayed,
            }
        )


def session_view(session: Session) -> dict:
    return {
        "id": session.id,
        "participant_id": session.participant_id,
        "assignment": [
            {"question_id": q, "vocab_size": v} for q, v in session.assignment
        ],
        "cursor": session.cursor,
        "state": session.state,
    }


class ExperimentService:
    """Experiment state machine behind the HTTP endpoints."""

    def __init__(
        self,
        questions: Iterable[Question],
        lexicons: Mapping[int, object],
        store: ExperimentStore,
        plan: AssignmentPlan | None = None,
        model: Model | None = None,
        runs_path: str | Path | None = None,
    ):
        self.questions = {q.id: q for q in questions}
        self.lexicons = dict(lexicons)
        self.store = store
        self.plan = plan or AssignmentPlan(tuple(self.questions))
        self.model = model
        self.runs_path = Path(runs_path) if runs_path else store.path.with_name("runs.jsonl")
        self._lock = threading.RLock()
        # A reopened store re-reserves its sessions' plan slots.
        with self.plan.lock:
            for session in self.store.sessions.values():
                for q, v in session.assignment:
                    if q not in self.questions:
                        raise ValueError(f"stored session {session.id} uses unknown question {q!r}")
                    self.plan.reserve(q, v, session.participant_id)

    def _lexicon(self, vocab_size: int | str):
        return self.lexicons[vocab_size]

    def _lexicon_id(self, vocab_size: int) -> str:
        digest = getattr(self._lexicon(vocab_size), "digest", None)
        return digest() if callable(digest) else f"lexicon-{vocab_size}"

    def start_session(self, participant_id: str, seed: int | None = None) -> dict:
        if not participant_id:
            raise ValueError("participant_id must be nonempty")
        if seed is None:
            seed = int.from_bytes(hashlib.sha256(participant_id.encode("utf-8")).digest()[:4], "big")
        with self._lock:
            session_id = f"s{len(self.store.sessions) + 1:04d}"
            session = create_session(participant_id, self.plan, seed, session_id=session_id)
            self.store.add_session(session, seed)
            return session_view(session)

    def current(self, session_id: str) -> dict:
        with self._lock:
            session = self.store.sessions[session_id]
            view = {"session_id": session.id, "cursor": session.cursor, "state": session.state}
            item = session.current_item
            if item is not None:
                question_id, vocab_size = item
                question = self.questions[question_id]
                view["question"] = {
                    "id": question.id,
                    "category": question.category,
                    "text": question.text,
                }
                view["vocab_size"] = vocab_size
                view["buffer"] = self.store.buffer(session_id, question_id)
            return view

    def keystroke(self, session_id: str, question_id: str, key: str, t_ms: int) -> dict:
        with self._lock:
            session = self.store.sessions[session_id]
            item = session.current_item
            if item is None or item[0] != question_id:
                raise ConflictError(f"question {question_id!r} is not current in session {session_id}")
            if key == SUBMIT_KEY:
                raise ValueError("submission goes through the submit endpoint")
            if len(key) != 1 and key not in (BACKSPACE_KEY, TIMEOUT_PROMPT_KEY):
                raise ValueError(f"unsupported key {key!r}")
            events = self.store.events.get((session_id, question_id), [])
            if events and t_ms < events[-1].t_ms:
                raise ValueError("t_ms must not decrease within a question")
            buffer = self.store.buffer(session_id, question_id)
            vocab_size = item[1]
            if key == TIMEOUT_PROMPT_KEY:
                accepted = True
            elif vocab_size == UNCONSTRAINED:
                accepted = key == BACKSPACE_KEY or key.isprintable()
            else:
                accepted = constraint.keystroke_admissible(buffer, key, self._lexicon(vocab_size))
            new_buffer = _advance_buffer(buffer, key, accepted)
            ev = KeystrokeEvent(session_id, question_id, t_ms, key, accepted, len(new_buffer))
            self.store.add_event(ev, new_buffer)
            return {"accepted": accepted, "buffer_len": len(new_buffer)}

    def submit(self, session_id: str, question_id: str, final_text: str, t_ms: int) -> dict:
        with self._lock:
            session = self.store.sessions[session_id]
            existing = self.store.responses.get((session_id, question_id))
            if existing is not None:
                if existing["text"] == final_text:
                    return {
                        "response_id": existing["response_id"],
                        "token": existing["token"],
                        "empty": existing["empty"],
                        "duplicate": True,
                    }
                raise ConflictError(f"question {question_id!r} already has a different response")
            item = session.current_item
            if item is None or item[0] != question_id:
                raise ConflictError(f"question {question_id!r} is not current in session {session_id}")
            events = self.store.events.get((session_id, question_id), [])
            if events and t_ms < events[-1].t_ms:
                raise ValueError("t_ms must not decrease within a question")
            replayed = analysis.replay_buffer(events)
            if replayed != final_text:
                self.store.add_integrity_error(session_id, question_id, final_text, replayed)
                raise IntegrityError(
                    f"replay yields {replayed!r} but the submission carries {final_text!r}"
                )
            ev = KeystrokeEvent(session_id, question_id, t_ms, SUBMIT_KEY, True, len(final_text))
            self.store.add_event(ev, final_text)
            token = hashlib.sha256(
                f"{session_id}\n{question_id}\n{final_text}".encode("utf-8")
            ).hexdigest()[:16]
            rec = self.store.add_response(session_id, question_id, item[1], final_text, token)
            return {
                "response_id": rec["response_id"],
                "token": token,
                "empty": rec["empty"],
                "duplicate": False,
            }

    def generate(
        self,
        question_id: str,
        vocab_size: int,
        n_particles: int = 16,
        seed: int = 0,
        max_tokens: int = 100,
        ess_threshold_fraction: float = 0.5,
        weight_floor: float = 0.01,
    ) -> dict:
        question = self.questions[question_id]
        lex = self._lexicon(vocab_size)
        if self.model is None:
            raise RetryableTransportError("no generation backend configured")
        config = smc.SmcConfig(
            n_particles=n_particles,
            max_tokens=max_tokens,
            ess_threshold_fraction=ess_threshold_fraction,
        )
        run = smc.run_smc(self.model, lex, question.text, config, seed)
        kept = smc.floor_filter(run.completions, weight_floor)
        record = smc.manifest_record(run, self._lexicon_id(vocab_size), question.text)
        record["question_id"] = question_id
        record["weight_floor"] = weight_floor
        with self._lock:
            with open(self.runs_path, "a", encoding="utf-8") as fh:
                fh.write(json.dumps(record, sort_keys=True) + "\n")
        out = {
            "completions": [
                {"text": c.text, "weight": c.normalized_weight} for c in kept
            ],
            "dead_run": run.dead_run,
            # Strict JSON has no -inf; a dead run reports null.
            "log_z": run.log_z if math.isfinite(run.log_z) else None,
        }
        if run.dead_run:
            out["diagnostic"] = "every particle died before completing"
        return out

    def record_score(
        self,
        rater_id: str,
        pair_index: int,
        question_id: str,
        source: str,
        vocab_size: int | str,
        score: int,
        justification: str = "",
    ) -> dict:
        if not rater_id:
            raise ValueError("rater_id must be nonempty")
        if pair_index < 0:
            raise ValueError("pair_index must be >= 0")
        self.questions[question_id]  # unknown question -> 404
        ScoreRecord(question_id, source, vocab_size, score, justification, 1.0)
        with self._lock:
            existing = self.store.grades.get((rater_id, pair_index))
            if existing is not None:
                same = (
                    existing["question_id"] == question_id
                    and existing["score"] == score
                )
                if not same:
                    raise ConflictError(
                        f"pair {pair_index} of rater {rater_id!r} already scored differently"
                    )
                return {"score_id": existing["score_id"], "duplicate": True}
            rec = self.store.add_score(
                rater_id, pair_index, question_id, source, vocab_size, score, justification
            )
        return {"score_id": rec["score_id"], "duplicate": False}

    def lexicon_check(self, vocab_size: int, prefix: str) -> dict:
        verdict = constraint.check(prefix, self._lexicon(vocab_size))
        return {"status": verdict.status.value, "ok": verdict.ok}

    def questions_view(self) -> list[dict]:
        return [
            {"id": q.id, "category": q.category, "text": q.text}
            for q in self.questions.values()
        ]


# ---------------------------------------------------------------------------
# HTTP layer
# ---------------------------------------------------------------------------


class SessionRequest(BaseModel):
    participant_id: str
    seed: int | None = None


class KeystrokeRequest(BaseModel):
    question_id: str
    key: str
    t_ms: int


class SubmitRequest(BaseModel):
    question_id: str
    final_text: str
    t_ms: int


class GenerateRequest(BaseModel):
    question_id: str
    vocab_size: int
    n_particles: int = 16
    seed: int = 0
    max_tokens: int = 100
    ess_threshold_fraction: float = 0.5
    weight_floor: float = 0.01


class ScoreRequest(BaseModel):
    rater_id: str
    pair_index: int
    question_id: str
    source: str
    vocab_size: int | str
    score: int
    justification: str = ""


def _call(fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except KeyError as exc:
        raise HTTPException(status_code=404, detail=f"not found: {exc}")
    except (ConflictError, NoCapacityError, IntegrityError) as exc:
        raise HTTPException(status_code=409, detail=str(exc))
    except RetryableTransportError as exc:
        raise HTTPException(status_code=503, detail=str(exc))
    except (ValueError, LexcapError) as exc:
        raise HTTPException(status_code=400, detail=str(exc))


def create_app(service: ExperimentService) -> FastAPI:
    app = FastAPI(title="lexcap experiment service")

    @app.post("/v1/session")
    def post_session(body: SessionRequest):
        return _call(service.start_session, body.participant_id, body.seed)

    @app.get("/v1/session/{session_id}/current")
    def get_current(session_id: str):
        return _call(service.current, session_id)

    @app.post("/v1/session/{session_id}/keystroke")
    def post_keystroke(session_id: str, body: KeystrokeRequest):
        return _call(service.keystroke, session_id, body.question_id, body.key, body.t_ms)

    @app.post("/v1/session/{session_id}/submit")
    def post_submit(session_id: str, body: SubmitRequest):
        return _call(service.submit, session_id, body.question_id, body.final_text, body.t_ms)

    @app.post("/v1/generate")
    def post_generate(body: GenerateRequest):
        return _call(
            service.generate,
            body.question_id,
            body.vocab_size,
            n_particles=body.n_particles,
            seed=body.seed,
            max_tokens=body.max_tokens,
            ess_threshold_fraction=body.ess_threshold_fraction,
            weight_floor=body.weight_floor,
        )

    @app.post("/v1/score")
    def post_score(body: ScoreRequest):
        return _call(
            service.record_score,
            body.rater_id,
            body.pair_index,
            body.question_id,
            body.source,
            body.vocab_size,
            body.score,
            body.justification,
        )

    @app.get("/v1/lexicon/{vocab_size}/check")
    def get_lexicon_check(vocab_size: int, prefix: str = ""):
        return _call(service.lexicon_check, vocab_size, prefix)

    @app.get("/v1/questions")
    def get_questions():
        return service.questions_view()

    return app
