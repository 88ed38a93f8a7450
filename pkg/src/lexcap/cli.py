"""Batch entry points wiring the toolkit into pipelines.

Subcommands: build-vocab (frequency list + inflections -> lexicon size
ladder), generate (constrained completions per question and vocabulary
size, one manifest each), evaluate (judge scores and per-condition
tables from run manifests or plain responses), analyze (word-deletion
statistics, rank-shift table, and group tests from keystroke logs), and
serve (the HTTP experiment service).

Every command is deterministic given its inputs and --seed; outputs are
written atomically. Exit codes: 0 success, 1 validation error, 2 backend
error, 3 partial failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from . import analysis, lm, smc, vocab
from . import eval as evaluation
from . import service as service_mod
from .errors import (
    CorruptLogError,
    LexcapError,
    ProtocolError,
    RetryableTransportError,
)

EXIT_OK = 0
EXIT_VALIDATION = 1
EXIT_BACKEND = 2
EXIT_PARTIAL = 3

RETRY_ATTEMPTS = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; 2 is reserved for backend errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_VALIDATION, f"{self.prog}: error: {message}\n")


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text, encoding="utf-8")
    os.replace(tmp, path)


def _write_tsv(path: Path, rows: Sequence[Sequence]) -> None:
    body = "".join("\t".join(str(c) for c in row) + "\n" for row in rows)
    _atomic_write(path, body)


def _fmt(x: float) -> str:
    return f"{x:.6g}"


def _vocab_order(vocab_size) -> float:
    """Sort key placing the unconstrained condition above every size."""
    if vocab_size == evaluation.UNCONSTRAINED:
        return float("inf")
    return float(vocab_size)


def _derive_seed(base: int, question_id: str, vocab_size) -> int:
    payload = f"{base}:{question_id}:{vocab_size}".encode("utf-8")
    return int.from_bytes(hashlib.sha256(payload).digest()[:4], "big")


def _with_retries(fn, attempts: int = RETRY_ATTEMPTS):
    for attempt in range(attempts):
        try:
            return fn()
        except RetryableTransportError:
            if attempt == attempts - 1:
                raise


def _build_backend(descriptor: str) -> lm.Model:
    """ngram:CORPUS[:ORDER[:K]] trains locally; remote:URL:CORPUS proxies
    a logprob endpoint over the corpus-derived inventory."""
    kind, _, rest = descriptor.partition(":")
    if kind == "ngram":
        parts = rest.split(":")
        if not parts[0]:
            raise ValueError(f"backend {descriptor!r} names no corpus file")
        order = int(parts[1]) if len(parts) > 1 else 3
        k = float(parts[2]) if len(parts) > 2 else 0.1
        texts = [t for t in Path(parts[0]).read_text(encoding="utf-8").splitlines() if t.strip()]
        return lm.train_ngram_from_text(texts, order=order, k=k)
    if kind == "remote":
        url, _, corpus = rest.rpartition(":")
        if not url or not corpus:
            raise ValueError("remote backend descriptor is remote:URL:corpus_path")
        tokens = lm.tokenize(Path(corpus).read_text(encoding="utf-8"))
        return lm.RemoteModel(url, lm.TokenInventory.from_corpus_tokens(tokens))
    raise ValueError(f"unknown backend kind {kind!r}")


def _build_judge(descriptor: str):
    if descriptor == "stub":
        return evaluation.StubJudge()
    kind, _, url = descriptor.partition(":")
    if kind == "remote" and url:
        return evaluation.RemoteJudge(url)
    raise ValueError(f"unknown judge {descriptor!r}")


def _read_jsonl_records(path: Path) -> list[dict]:
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    records = []
    for file in files:
        records.extend(smc.read_manifest(file))
    return records


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_build_vocab(args) -> int:
    freq = vocab.load_frequency_list(args.freq)
    infl = vocab.load_inflection_table(args.inflections)
    ladder = vocab.vocab_ladder(freq, infl)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {"sizes": [], "files": {}, "digests": {}, "counts": {}}
    for lex in ladder:
        name = f"lexicon-{lex.n}.txt"
        _atomic_write(out / name, lex.serialize())
        manifest["sizes"].append(lex.n)
        manifest["files"][str(lex.n)] = name
        manifest["digests"][str(lex.n)] = lex.digest()
        manifest["counts"][str(lex.n)] = len(lex)
    _atomic_write(out / "manifest.json", json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(ladder)} lexicons to {out}")
    return EXIT_OK


def cmd_generate(args) -> int:
    questions = service_mod.load_questions(args.questions)
    model = _build_backend(args.backend)
    lexicons = {
        size: vocab.load_lexicon(Path(args.lexicon_dir) / f"lexicon-{size}.txt")
        for size in args.vocab_size
    }
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = smc.SmcConfig(
        n_particles=args.particles,
        max_tokens=args.max_tokens,
        ess_threshold_fraction=args.ess_frac,
    )

    def run_one(question, size):
        seed = _derive_seed(args.seed, question.id, size)
        run = _with_retries(
            lambda: smc.run_smc(model, lexicons[size], question.text, config, seed)
        )
        rec = smc.manifest_record(run, lexicons[size].digest(), question.text)
        rec.update(
            question_id=question.id,
            vocab_size=size,
            weight_floor=args.weight_floor,
            backend=args.backend,
        )
        _atomic_write(out / f"{question.id}-{size}.jsonl", json.dumps(rec, sort_keys=True) + "\n")

    jobs = [(q, size) for q in questions for size in args.vocab_size]
    failures = []
    with ThreadPoolExecutor(max_workers=args.jobs) as pool:
        futures = {pool.submit(run_one, q, size): (q.id, size) for q, size in jobs}
        for future, (qid, size) in futures.items():
            try:
                future.result()
            except (LexcapError, ValueError) as exc:
                failures.append((qid, size, str(exc)))
    for qid, size, message in failures:
        print(f"generate failed for {qid} at {size}: {message}", file=sys.stderr)
    if failures:
        return EXIT_BACKEND if len(failures) == len(jobs) else EXIT_PARTIAL
    print(f"wrote {len(jobs)} run manifests to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    questions = {q.id: q for q in service_mod.load_questions(args.questions)}
    records = _read_jsonl_records(Path(args.runs))
    judge_backend = _build_judge(args.judge)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    scores: list[evaluation.ScoreRecord] = []
    means: list[tuple[str, object, float]] = []
    errors: list[tuple[str, str]] = []
    for rec in records:
        label = f"{rec.get('question_id', '?')}/{rec.get('vocab_size', '?')}"
        try:
            question = questions[rec["question_id"]]
            if "completions" in rec:
                comps = smc.floor_filter(
                    [smc.WeightedCompletion(c["text"], c["weight"]) for c in rec["completions"]],
                    rec.get("weight_floor", 0.0),
                )
                source = rec.get("source", "smc")
            else:
                comps = (smc.WeightedCompletion(rec["text"], 1.0),)
                source = rec.get("source", "human")
            if not comps:
                continue  # a dead run contributes no scores
            group = []
            for c in comps:
                score, justification = evaluation.judge(question.text, c.text, judge_backend)
                group.append(
                    evaluation.ScoreRecord(
                        rec["question_id"], source, rec["vocab_size"], score, justification,
                        c.normalized_weight,
                    )
                )
            scores.extend(group)
            means.append((rec["question_id"], rec["vocab_size"], evaluation.weighted_mean(group)))
        except (KeyError, TypeError, ValueError, ProtocolError, RetryableTransportError) as exc:
            errors.append((label, str(exc)))

    evaluation.write_scores(out / "scores.jsonl", scores)
    means.sort(key=lambda m: (m[0], _vocab_order(m[1])))
    _write_tsv(out / "means.tsv", [(q, v, _fmt(m)) for q, v, m in means])

    by_condition: dict[object, list[float]] = {}
    for _, vocab_size, mean in means:
        by_condition.setdefault(vocab_size, []).append(mean)
    table = []
    for condition in sorted(by_condition, key=_vocab_order):
        values = by_condition[condition]
        if len(values) >= 2:
            agg = evaluation.aggregate(values)
            table.append((condition, agg.n, _fmt(agg.mean), _fmt(agg.ci_low), _fmt(agg.ci_high)))
        else:
            table.append((condition, 1, _fmt(values[0]), "", ""))
    _write_tsv(out / "table.tsv", table)
    _write_tsv(out / "errors.tsv", errors)

    for label, message in errors:
        print(f"evaluate failed for {label}: {message}", file=sys.stderr)
    if errors:
        return EXIT_PARTIAL if means else EXIT_BACKEND
    return EXIT_OK


def _read_events(path: Path) -> list[analysis.KeystrokeEvent]:
    files = sorted(path.glob("*.jsonl")) if path.is_dir() else [path]
    events: list[analysis.KeystrokeEvent] = []
    for file in files:
        events.extend(analysis.read_keystroke_log(file))
    return events


def cmd_analyze(args) -> int:
    events = _read_events(Path(args.logs))
    responses = _read_jsonl_records(Path(args.responses))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    grouped: dict[tuple[str, str], list[analysis.KeystrokeEvent]] = {}
    for ev in events:
        grouped.setdefault((ev.session_id, ev.question_id), []).append(ev)

    triples = []
    texts_by_condition: dict[object, list[str]] = {}
    errors: list[tuple[str, str, str]] = []
    for rec in responses:
        key = (rec["session_id"], rec["question_id"])
        evs = grouped.get(key, [])
        try:
            analysis.replay_buffer(evs)
        except CorruptLogError as exc:
            errors.append((key[0], key[1], str(exc)))
            continue
        triples.append((rec["participant_id"], rec["vocab_size"], evs))
        texts_by_condition.setdefault(rec["vocab_size"], []).append(rec["text"])

    rows = analysis.aggregate_deletions(triples)
    _write_tsv(
        out / "deletions.tsv",
        [
            (r.participant, r.vocab_size, r.responses, r.word_deletions, _fmt(r.mean_per_response))
            for r in rows
        ],
    )

    if len({r.vocab_size for r in rows}) >= 2:
        report = analysis.deletion_report(rows)
    else:
        report = []
    _write_tsv(
        out / "deletion_tests.tsv",
        [
            (
                e["group_a"], e["group_b"], e["n_a"], e["n_b"],
                _fmt(e["mean_a"]), _fmt(e["mean_b"]),
                _fmt(e["u"]), _fmt(e["p_raw"]), _fmt(e["p_adjusted"]),
            )
            for e in report
        ],
    )

    bump_records = []
    conditions = sorted(texts_by_condition, key=_vocab_order)
    if len(conditions) >= 2:
        large = analysis.RankTable.from_texts(texts_by_condition[conditions[-1]])
        small = analysis.RankTable.from_texts(texts_by_condition[conditions[0]])
        if large.entries and small.entries:
            bump_records = analysis.rank_shift(large, small)
    analysis.write_rank_shift(out / "bump.tsv", bump_records)

    _write_tsv(out / "errors.tsv", errors)
    for session_id, question_id, message in errors:
        print(f"quarantined log {session_id}/{question_id}: {message}", file=sys.stderr)
    return EXIT_PARTIAL if errors else EXIT_OK


def cmd_serve(args) -> int:
    questions = service_mod.load_questions(args.questions)
    lexicons = {}
    for path in sorted(Path(args.lexicon_dir).glob("lexicon-*.txt")):
        lex = vocab.load_lexicon(path)
        lexicons[lex.n] = lex
    if not lexicons:
        raise ValueError(f"no lexicon-*.txt files under {args.lexicon_dir}")
    model = _build_backend(args.backend) if args.backend else None
    store = service_mod.ExperimentStore(args.store)
    app = service_mod.create_app(
        service_mod.ExperimentService(questions, lexicons, store, model=model)
    )
    import uvicorn

    uvicorn.run(app, host=args.host, port=args.port)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="lexcap", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    b = sub.add_parser("build-vocab", help="build the lexicon size ladder")
    b.add_argument("--freq", required=True, help="form<TAB>rank frequency list")
    b.add_argument("--inflections", required=True, help="lemma family file")
    b.add_argument("--out", required=True, help="output directory")
    b.set_defaults(func=cmd_build_vocab)

    g = sub.add_parser("generate", help="generate constrained completions")
    g.add_argument("--questions", required=True)
    g.add_argument("--lexicon-dir", required=True)
    g.add_argument("--out", required=True)
    g.add_argument("--backend", required=True, help="ngram:CORPUS[:ORDER[:K]] or remote:URL:CORPUS")
    g.add_argument("--vocab-size", type=int, action="append", required=True)
    g.add_argument("--particles", type=int, default=16)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--max-tokens", type=int, default=100)
    g.add_argument("--ess-frac", type=float, default=0.5)
    g.add_argument("--weight-floor", type=float, default=0.01)
    g.add_argument("--jobs", type=int, default=1)
    g.set_defaults(func=cmd_generate)

    e = sub.add_parser("evaluate", help="judge completions and build score tables")
    e.add_argument("--runs", required=True, help="manifest/response file or directory")
    e.add_argument("--questions", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--judge", default="stub", help="stub or remote:URL")
    e.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("analyze", help="deletion stats, rank shifts, group tests")
    a.add_argument("--logs", required=True, help="keystroke log file or directory")
    a.add_argument("--responses", required=True, help="response records file or directory")
    a.add_argument("--out", required=True)
    a.set_defaults(func=cmd_analyze)

    s = sub.add_parser("serve", help="run the experiment HTTP service")
    s.add_argument("--questions", required=True)
    s.add_argument("--lexicon-dir", required=True)
    s.add_argument("--store", required=True)
    s.add_argument("--backend", default=None)
    s.add_argument("--host", default="127.0.0.1")
    s.add_argument("--port", type=int, default=8000)
    s.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING)
    try:
        return args.func(args)
    except RetryableTransportError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_BACKEND
    except (LexcapError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
