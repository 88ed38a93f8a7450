"""End-to-end tests of the command-line pipelines.

Each test drives ``main`` in-process against real files under tmp_path,
so exit codes, outputs, and stderr are all asserted directly.
"""

import json

import pytest

from lexcap import vocab
from lexcap.analysis import KeystrokeEvent, write_keystroke_log
from lexcap.cli import main
from lexcap.eval import StubJudge, judge, read_scores
from lexcap.smc import read_manifest
from test_analysis import LogBuilder


def base26(i):
    word = ""
    for _ in range(4):
        word = chr(ord("a") + i % 26) + word
        i //= 26
    return word


def write_freq(path, n):
    path.write_text(
        "".join(f"{base26(i)}\t{i + 1}\n" for i in range(n)), encoding="utf-8"
    )


def write_inflections(path):
    path.write_text(f"{base26(0)}\t{base26(1)},{base26(2)}\n", encoding="utf-8")


def write_questions(path, ids, text="we go"):
    recs = [{"id": qid, "category": "Why", "text": text} for qid in ids]
    path.write_text("".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8")


def write_gen_lexicons(dirpath, sizes=(250, 1000)):
    dirpath.mkdir(parents=True, exist_ok=True)
    freq = vocab.FrequencyList(
        (("we", 1), ("go", 2), ("far", 3), ("stay", 4), ("you", 5))
    )
    infl = vocab.InflectionTable({})
    for n in sizes:
        vocab.write_lexicon(vocab.build_lexicon(freq, infl, n), dirpath / f"lexicon-{n}.txt")


def write_corpus(path):
    path.write_text(
        "we go far\nwe stay\nwe go\nwe go far\nyou go far\n", encoding="utf-8"
    )


def snapshot(dirpath):
    return {p.name: p.read_bytes() for p in sorted(dirpath.iterdir()) if p.is_file()}


def tsv_rows(path):
    return [line.split("\t") for line in path.read_text(encoding="utf-8").splitlines()]


class TestBuildVocab:
    def test_full_ladder(self, tmp_path):
        freq, infl, out = tmp_path / "freq.tsv", tmp_path / "infl.tsv", tmp_path / "lex"
        write_freq(freq, 16000)
        write_inflections(infl)
        rc = main(
            ["build-vocab", "--freq", str(freq), "--inflections", str(infl), "--out", str(out)]
        )
        assert rc == 0
        expected = sorted([f"lexicon-{n}.txt" for n in vocab.LADDER_SIZES] + ["manifest.json"])
        assert sorted(p.name for p in out.iterdir()) == expected

        manifest = json.loads((out / "manifest.json").read_text(encoding="utf-8"))
        assert manifest["sizes"] == list(vocab.LADDER_SIZES)
        for n in vocab.LADDER_SIZES:
            lex = vocab.load_lexicon(out / f"lexicon-{n}.txt")
            assert lex.n == n
            assert len(lex) >= n
            assert manifest["digests"][str(n)] == lex.digest()
            assert manifest["counts"][str(n)] == len(lex)

    def test_rerun_byte_identical(self, tmp_path):
        freq, infl, out = tmp_path / "freq.tsv", tmp_path / "infl.tsv", tmp_path / "lex"
        write_freq(freq, 16000)
        write_inflections(infl)
        argv = ["build-vocab", "--freq", str(freq), "--inflections", str(infl), "--out", str(out)]
        assert main(argv) == 0
        first = snapshot(out)
        assert main(argv) == 0
        assert snapshot(out) == first

    def test_short_list_fails(self, tmp_path, capsys):
        freq, infl, out = tmp_path / "freq.tsv", tmp_path / "infl.tsv", tmp_path / "lex"
        write_freq(freq, 300)
        write_inflections(infl)
        rc = main(
            ["build-vocab", "--freq", str(freq), "--inflections", str(infl), "--out", str(out)]
        )
        assert rc == 1
        err = capsys.readouterr().err
        assert "300" in err and "250" in err
        assert not (out / "manifest.json").exists()


class TestGenerate:
    def _setup(self, tmp_path, ids=("qa", "qb")):
        questions = tmp_path / "questions.jsonl"
        corpus = tmp_path / "corpus.txt"
        lexdir = tmp_path / "lexicons"
        write_questions(questions, ids)
        write_corpus(corpus)
        write_gen_lexicons(lexdir)
        return questions, corpus, lexdir

    def _argv(self, questions, corpus, lexdir, out, **overrides):
        argv = [
            "generate",
            "--questions", str(questions),
            "--lexicon-dir", str(lexdir),
            "--out", str(out),
            "--backend", f"ngram:{corpus}:2:0.1",
            "--vocab-size", "250",
            "--vocab-size", "1000",
            "--particles", "4",
            "--max-tokens", "6",
            "--seed", "7",
        ]
        for key, value in overrides.items():
            argv.extend([f"--{key}", str(value)])
        return argv

    def test_manifest_per_question_and_size(self, tmp_path):
        questions, corpus, lexdir = self._setup(tmp_path)
        out = tmp_path / "runs"
        assert main(self._argv(questions, corpus, lexdir, out)) == 0
        names = sorted(p.name for p in out.iterdir())
        assert names == ["qa-1000.jsonl", "qa-250.jsonl", "qb-1000.jsonl", "qb-250.jsonl"]

        (rec,) = read_manifest(out / "qa-250.jsonl")
        assert rec["question_id"] == "qa"
        assert rec["vocab_size"] == 250
        assert rec["weight_floor"] == 0.01
        assert rec["backend"].startswith("ngram:")
        assert rec["config"] == {
            "n_particles": 4, "max_tokens": 6, "ess_threshold_fraction": 0.5,
        }
        # Smoothed model plus a lexicon covering the corpus: never a dead run.
        assert not rec["dead_run"]
        assert rec["completions"]
        assert sum(c["weight"] for c in rec["completions"]) == pytest.approx(1.0)

    def test_rerun_byte_identical(self, tmp_path):
        questions, corpus, lexdir = self._setup(tmp_path)
        out1, out2 = tmp_path / "runs1", tmp_path / "runs2"
        assert main(self._argv(questions, corpus, lexdir, out1)) == 0
        assert main(self._argv(questions, corpus, lexdir, out2)) == 0
        assert snapshot(out1) == snapshot(out2)

    def test_parallel_jobs_match_serial(self, tmp_path):
        questions, corpus, lexdir = self._setup(tmp_path)
        out1, out2 = tmp_path / "runs1", tmp_path / "runs2"
        assert main(self._argv(questions, corpus, lexdir, out1, jobs=1)) == 0
        assert main(self._argv(questions, corpus, lexdir, out2, jobs=4)) == 0
        assert snapshot(out1) == snapshot(out2)

    def test_single_particle_single_completion(self, tmp_path):
        questions, corpus, lexdir = self._setup(tmp_path, ids=("qa",))
        out = tmp_path / "runs"
        assert main(self._argv(questions, corpus, lexdir, out, particles=1)) == 0
        for path in out.iterdir():
            (rec,) = read_manifest(path)
            assert len(rec["completions"]) == 1
            assert rec["completions"][0]["weight"] == 1.0

    def test_unreachable_remote_backend(self, tmp_path, capsys):
        questions, corpus, lexdir = self._setup(tmp_path)
        out = tmp_path / "runs"
        argv = self._argv(questions, corpus, lexdir, out)
        argv[argv.index("--backend") + 1] = f"remote:http://127.0.0.1:9:{corpus}"
        assert main(argv) == 2
        err = capsys.readouterr().err
        assert "qa" in err and "qb" in err
        assert not list(out.glob("*.jsonl"))

    def test_unknown_backend_kind(self, tmp_path, capsys):
        questions, corpus, lexdir = self._setup(tmp_path)
        out = tmp_path / "runs"
        argv = self._argv(questions, corpus, lexdir, out)
        argv[argv.index("--backend") + 1] = "magic:beans"
        assert main(argv) == 1
        assert "magic" in capsys.readouterr().err


class TestEvaluate:
    QUESTION_TEXT = "we go far"

    def _write_runs(self, dirpath, qids=("qa", "qb")):
        dirpath.mkdir(parents=True, exist_ok=True)
        for qid in qids:
            recs = [
                {
                    "question_id": qid, "vocab_size": 250, "weight_floor": 0.0,
                    "completions": [
                        {"text": "we go", "weight": 0.6},
                        {"text": "we stay", "weight": 0.4},
                    ],
                },
                {
                    "question_id": qid, "vocab_size": 1000, "weight_floor": 0.0,
                    "completions": [{"text": "we go far", "weight": 1.0}],
                },
            ]
            (dirpath / f"{qid}.jsonl").write_text(
                "".join(json.dumps(r) + "\n" for r in recs), encoding="utf-8"
            )

    def _argv(self, runs, questions, out, judge_spec="stub"):
        return [
            "evaluate",
            "--runs", str(runs),
            "--questions", str(questions),
            "--out", str(out),
            "--judge", judge_spec,
        ]

    def _questions(self, tmp_path, ids=("qa", "qb")):
        path = tmp_path / "questions.jsonl"
        write_questions(path, ids, text=self.QUESTION_TEXT)
        return path

    def test_tables_from_manifests_and_responses(self, tmp_path):
        runs = tmp_path / "runs"
        self._write_runs(runs)
        with open(runs / "qa.jsonl", "a", encoding="utf-8") as fh:
            fh.write(
                json.dumps(
                    {"question_id": "qa", "vocab_size": "unconstrained", "text": "we go far"}
                )
                + "\n"
            )
        out = tmp_path / "eval"
        assert main(self._argv(runs, self._questions(tmp_path), out)) == 0

        stub = StubJudge()
        s_wego = judge(self.QUESTION_TEXT, "we go", stub)[0]
        s_westay = judge(self.QUESTION_TEXT, "we stay", stub)[0]
        s_full = judge(self.QUESTION_TEXT, "we go far", stub)[0]
        mean_250 = 0.6 * s_wego + 0.4 * s_westay

        assert tsv_rows(out / "means.tsv") == [
            ["qa", "250", f"{mean_250:.6g}"],
            ["qa", "1000", f"{s_full:.6g}"],
            ["qa", "unconstrained", f"{s_full:.6g}"],
            ["qb", "250", f"{mean_250:.6g}"],
            ["qb", "1000", f"{s_full:.6g}"],
        ]
        table = tsv_rows(out / "table.tsv")
        assert [row[:2] for row in table] == [
            ["250", "2"], ["1000", "2"], ["unconstrained", "1"],
        ]
        # Two identical per-question means: zero-width interval around them.
        assert table[0][2] == f"{mean_250:.6g}"
        assert table[0][3] == table[0][4] == f"{mean_250:.6g}"
        assert table[2][3] == table[2][4] == ""

        scores = read_scores(out / "scores.jsonl")
        assert len(scores) == 7
        human = [s for s in scores if s.source == "human"]
        assert len(human) == 1 and human[0].weight == 1.0 and human[0].score == s_full
        assert (out / "errors.tsv").read_text(encoding="utf-8") == ""

    def test_rerun_byte_identical(self, tmp_path):
        runs = tmp_path / "runs"
        self._write_runs(runs)
        questions = self._questions(tmp_path)
        out1, out2 = tmp_path / "eval1", tmp_path / "eval2"
        assert main(self._argv(runs, questions, out1)) == 0
        assert main(self._argv(runs, questions, out2)) == 0
        assert snapshot(out1) == snapshot(out2)

    def test_weight_floor_refilters(self, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        rec = {
            "question_id": "qa", "vocab_size": 250, "weight_floor": 0.25,
            "completions": [
                {"text": "we go", "weight": 0.9},
                {"text": "stay", "weight": 0.1},
            ],
        }
        (runs / "r.jsonl").write_text(json.dumps(rec) + "\n", encoding="utf-8")
        out = tmp_path / "eval"
        assert main(self._argv(runs, self._questions(tmp_path), out)) == 0
        scores = read_scores(out / "scores.jsonl")
        assert [s.weight for s in scores] == [1.0]
        expected = judge(self.QUESTION_TEXT, "we go", StubJudge())[0]
        assert tsv_rows(out / "means.tsv") == [["qa", "250", f"{expected:.6g}"]]

    def test_dead_run_contributes_nothing(self, tmp_path):
        runs = tmp_path / "runs"
        self._write_runs(runs, qids=("qa",))
        rec = {"question_id": "qa", "vocab_size": 500, "weight_floor": 0.0, "completions": []}
        (runs / "dead.jsonl").write_text(json.dumps(rec) + "\n", encoding="utf-8")
        out = tmp_path / "eval"
        assert main(self._argv(runs, self._questions(tmp_path), out)) == 0
        assert all(row[1] != "500" for row in tsv_rows(out / "means.tsv"))
        assert (out / "errors.tsv").read_text(encoding="utf-8") == ""

    def test_unknown_question_is_partial(self, tmp_path, capsys):
        runs = tmp_path / "runs"
        self._write_runs(runs, qids=("qa",))
        rec = {"question_id": "zz", "vocab_size": 250, "weight_floor": 0.0,
               "completions": [{"text": "we", "weight": 1.0}]}
        (runs / "zz.jsonl").write_text(json.dumps(rec) + "\n", encoding="utf-8")
        out = tmp_path / "eval"
        assert main(self._argv(runs, self._questions(tmp_path), out)) == 3
        assert "zz/250" in capsys.readouterr().err
        errors = tsv_rows(out / "errors.tsv")
        assert len(errors) == 1 and errors[0][0] == "zz/250"
        assert len(tsv_rows(out / "means.tsv")) == 2

    def test_every_record_failing_is_backend_error(self, tmp_path):
        runs = tmp_path / "runs"
        runs.mkdir()
        rec = {"question_id": "zz", "vocab_size": 250, "weight_floor": 0.0,
               "completions": [{"text": "we", "weight": 1.0}]}
        (runs / "zz.jsonl").write_text(json.dumps(rec) + "\n", encoding="utf-8")
        out = tmp_path / "eval"
        assert main(self._argv(runs, self._questions(tmp_path), out)) == 2

    def test_unknown_judge(self, tmp_path, capsys):
        runs = tmp_path / "runs"
        self._write_runs(runs, qids=("qa",))
        out = tmp_path / "eval"
        rc = main(self._argv(runs, self._questions(tmp_path), out, judge_spec="weird"))
        assert rc == 1
        assert "weird" in capsys.readouterr().err

    def test_pipeline_from_generate(self, tmp_path):
        questions = tmp_path / "questions.jsonl"
        corpus = tmp_path / "corpus.txt"
        lexdir = tmp_path / "lexicons"
        write_questions(questions, ("qa", "qb"))
        write_corpus(corpus)
        write_gen_lexicons(lexdir)
        runs = tmp_path / "runs"
        assert main([
            "generate",
            "--questions", str(questions),
            "--lexicon-dir", str(lexdir),
            "--out", str(runs),
            "--backend", f"ngram:{corpus}:2:0.1",
            "--vocab-size", "250",
            "--vocab-size", "1000",
            "--particles", "4",
            "--max-tokens", "6",
        ]) == 0
        out = tmp_path / "eval"
        assert main(self._argv(runs, questions, out)) == 0
        assert len(tsv_rows(out / "means.tsv")) == 4
        assert [row[:2] for row in tsv_rows(out / "table.tsv")] == [
            ["250", "2"], ["1000", "2"],
        ]


class TestAnalyze:
    def _write_inputs(self, tmp_path):
        logs = tmp_path / "logs.jsonl"
        responses = tmp_path / "responses.jsonl"
        events = []
        rows = []

        def record(sid, pid, qid, vocab_size, builder):
            events.extend(builder.events)
            rows.append({
                "session_id": sid, "participant_id": pid, "question_id": qid,
                "vocab_size": vocab_size, "text": builder.buffer,
            })

        record("sa", "pa", "q1", 250, LogBuilder("sa", "q1").type("cat ").bs(4))
        record("sa", "pa", "q2", 250, LogBuilder("sa", "q2").type("dog "))
        record("sb", "pb", "q3", 250, LogBuilder("sb", "q3").type("we go ").bs(6))
        record("sb", "pb", "q4", 250, LogBuilder("sb", "q4").type("go "))
        record("sc", "pc", "q5", "unconstrained", LogBuilder("sc", "q5").type("help me "))
        record("sd", "pd", "q6", "unconstrained", LogBuilder("sd", "q6").type("the end ").bs(1))
        write_keystroke_log(logs, events)
        responses.write_text(
            "".join(json.dumps(r) + "\n" for r in rows), encoding="utf-8"
        )
        return logs, responses

    def _argv(self, logs, responses, out):
        return [
            "analyze",
            "--logs", str(logs),
            "--responses", str(responses),
            "--out", str(out),
        ]

    def test_deletions_tests_and_bump(self, tmp_path):
        logs, responses = self._write_inputs(tmp_path)
        out = tmp_path / "analysis"
        assert main(self._argv(logs, responses, out)) == 0

        assert tsv_rows(out / "deletions.tsv") == [
            ["pa", "250", "2", "1", "0.5"],
            ["pb", "250", "2", "2", "1"],
            ["pc", "unconstrained", "1", "0", "0"],
            ["pd", "unconstrained", "1", "0", "0"],
        ]

        tests = tsv_rows(out / "deletion_tests.tsv")
        assert len(tests) == 1
        row = tests[0]
        assert row[:6] == ["250", "unconstrained", "2", "2", "0.75", "0"]
        assert 0.0 < float(row[7]) <= 1.0
        assert float(row[8]) >= float(row[7])

        # Unconstrained responses: "help me " and "the end"; 250 responses:
        # "dog " and "go ". Absent words rank one past the table end.
        assert tsv_rows(out / "bump.tsv") == [
            ["dog", "5", "1", "4"],
            ["go", "5", "2", "3"],
            ["the", "4", "3", "1"],
            ["me", "3", "3", "0"],
            ["help", "2", "3", "-1"],
            ["end", "1", "3", "-2"],
        ]
        assert (out / "errors.tsv").read_text(encoding="utf-8") == ""

    def test_rerun_byte_identical(self, tmp_path):
        logs, responses = self._write_inputs(tmp_path)
        out1, out2 = tmp_path / "a1", tmp_path / "a2"
        assert main(self._argv(logs, responses, out1)) == 0
        assert main(self._argv(logs, responses, out2)) == 0
        assert snapshot(out1) == snapshot(out2)

    def test_corrupt_log_quarantined(self, tmp_path, capsys):
        logs, responses = self._write_inputs(tmp_path)
        bad = KeystrokeEvent("se", "q7", 5, "a", True, 3)
        with open(logs, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "session_id": bad.session_id, "question_id": bad.question_id,
                "t_ms": bad.t_ms, "key": bad.key, "accepted": bad.accepted,
                "buffer_len_after": bad.buffer_len_after,
            }) + "\n")
        with open(responses, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "session_id": "se", "participant_id": "pe", "question_id": "q7",
                "vocab_size": 250, "text": "a",
            }) + "\n")
        out = tmp_path / "analysis"
        assert main(self._argv(logs, responses, out)) == 3
        assert "quarantined log se/q7" in capsys.readouterr().err
        errors = tsv_rows(out / "errors.tsv")
        assert len(errors) == 1 and errors[0][:2] == ["se", "q7"]
        # The healthy sessions still analyze.
        assert len(tsv_rows(out / "deletions.tsv")) == 4
        assert len(tsv_rows(out / "bump.tsv")) == 6

    def test_response_without_log_counts_zero(self, tmp_path):
        logs, responses = self._write_inputs(tmp_path)
        with open(responses, "a", encoding="utf-8") as fh:
            fh.write(json.dumps({
                "session_id": "sf", "participant_id": "pf", "question_id": "q8",
                "vocab_size": 250, "text": "silent",
            }) + "\n")
        out = tmp_path / "analysis"
        assert main(self._argv(logs, responses, out)) == 0
        rows = tsv_rows(out / "deletions.tsv")
        assert ["pf", "250", "1", "0", "0"] in rows

    def test_empty_inputs(self, tmp_path):
        logs = tmp_path / "logs.jsonl"
        responses = tmp_path / "responses.jsonl"
        logs.write_text("", encoding="utf-8")
        responses.write_text("", encoding="utf-8")
        out = tmp_path / "analysis"
        assert main(self._argv(logs, responses, out)) == 0
        for name in ("deletions.tsv", "deletion_tests.tsv", "bump.tsv", "errors.tsv"):
            assert (out / name).read_text(encoding="utf-8") == ""

    def test_single_condition_skips_tests_and_bump(self, tmp_path):
        logs = tmp_path / "logs.jsonl"
        responses = tmp_path / "responses.jsonl"
        builder = LogBuilder("sa", "q1").type("cat ").bs(4)
        write_keystroke_log(logs, builder.events)
        responses.write_text(json.dumps({
            "session_id": "sa", "participant_id": "pa", "question_id": "q1",
            "vocab_size": 250, "text": "",
        }) + "\n", encoding="utf-8")
        out = tmp_path / "analysis"
        assert main(self._argv(logs, responses, out)) == 0
        assert tsv_rows(out / "deletions.tsv") == [["pa", "250", "1", "1", "1"]]
        assert (out / "deletion_tests.tsv").read_text(encoding="utf-8") == ""
        assert (out / "bump.tsv").read_text(encoding="utf-8") == ""


class TestServe:
    def _setup(self, tmp_path):
        questions = tmp_path / "questions.jsonl"
        write_questions(questions, [f"q{i:02d}" for i in range(16)])
        lexdir = tmp_path / "lexicons"
        write_gen_lexicons(lexdir, sizes=(250,))
        return questions, lexdir

    def test_starts_uvicorn_with_app(self, tmp_path, monkeypatch):
        import uvicorn
        from fastapi import FastAPI

        questions, lexdir = self._setup(tmp_path)
        captured = {}
        monkeypatch.setattr(
            uvicorn, "run",
            lambda app, host, port: captured.update(app=app, host=host, port=port),
        )
        rc = main([
            "serve",
            "--questions", str(questions),
            "--lexicon-dir", str(lexdir),
            "--store", str(tmp_path / "store" / "store.jsonl"),
            "--port", "9321",
        ])
        assert rc == 0
        assert captured["port"] == 9321
        assert captured["host"] == "127.0.0.1"
        assert isinstance(captured["app"], FastAPI)

    def test_missing_lexicons(self, tmp_path, capsys, monkeypatch):
        import uvicorn

        questions, _ = self._setup(tmp_path)
        empty = tmp_path / "empty"
        empty.mkdir()
        monkeypatch.setattr(uvicorn, "run", lambda *a, **k: None)
        rc = main([
            "serve",
            "--questions", str(questions),
            "--lexicon-dir", str(empty),
            "--store", str(tmp_path / "store.jsonl"),
        ])
        assert rc == 1
        assert "lexicon" in capsys.readouterr().err


class TestParser:
    def test_unknown_subcommand_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main(["frobnicate"])
        assert exc.value.code == 1

    def test_no_arguments_exits_1(self):
        with pytest.raises(SystemExit) as exc:
            main([])
        assert exc.value.code == 1

    def test_missing_input_file_returns_1(self, tmp_path, capsys):
        rc = main([
            "build-vocab",
            "--freq", str(tmp_path / "nope.tsv"),
            "--inflections", str(tmp_path / "nope2.tsv"),
            "--out", str(tmp_path / "out"),
        ])
        assert rc == 1
        assert "error:" in capsys.readouterr().err
