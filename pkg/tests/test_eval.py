"""Tests for judging, weighted means, aggregation, and rank correlation."""

import math

import httpx
import numpy as np
import pytest
from scipy import stats

from lexcap.errors import FormatError, ProtocolError, RetryableTransportError
from lexcap.eval import (
    Aggregate,
    RemoteJudge,
    ScoreRecord,
    StubJudge,
    aggregate,
    default_rubric,
    judge,
    judge_many,
    read_scores,
    spearman,
    weighted_mean,
    write_scores,
)
from lexcap.smc import WeightedCompletion, floor_filter


def rec(score, weight, qid="q1", source="run-1", vocab=1000):
    return ScoreRecord(
        question_id=qid,
        source=source,
        vocab_size=vocab,
        score=score,
        justification="",
        weight=weight,
    )


class TestStubJudge:
    def test_deterministic(self):
        s = StubJudge()
        q = "Why is the sky blue?"
        r = "The sky looks blue because of light."
        assert s.score(q, r) == s.score(q, r)

    def test_empty_response_scores_one(self):
        score, _ = judge("Why is the sky blue?", "", StubJudge())
        assert score == 1

    def test_keyword_hits_raise_score(self):
        s = StubJudge({"Q": ["light", "scatter", "blue"]})
        assert s.score("Q", "no relevant words")[0] == 1
        assert s.score("Q", "blue light")[0] == 3
        assert s.score("Q", "blue light does scatter, scatter, scatter")[0] == 4

    def test_cap_at_seven(self):
        words = [f"k{c}" for c in "abcdefghij"]
        s = StubJudge({"Q": words})
        score, _ = s.score("Q", " ".join(words))
        assert score == 7

    def test_question_words_are_default_keywords(self):
        score, _ = StubJudge().score("Why do birds sing?", "birds sing")
        assert score == 3

    def test_empty_question_rejected(self):
        with pytest.raises(ValueError):
            judge("  ", "text", StubJudge())


def scripted_judge(handler) -> RemoteJudge:
    client = httpx.Client(transport=httpx.MockTransport(handler))
    return RemoteJudge("http://judge.test", rubric="rubric text", client=client)


class TestRemoteJudge:
    def test_pass_through_score(self):
        seen = {}

        def handler(request):
            import json

            seen.update(json.loads(request.content))
            return httpx.Response(200, json={"score": 5, "justification": "fine"})

        assert scripted_judge(handler).score("Q?", "R") == (5, "fine")
        assert seen == {"question": "Q?", "response": "R", "rubric": "rubric text"}

    def test_out_of_range_score_is_protocol_error(self):
        def handler(request):
            return httpx.Response(200, json={"score": 9, "justification": ""})

        with pytest.raises(ProtocolError):
            scripted_judge(handler).score("Q?", "R")

    def test_non_integer_score_is_protocol_error(self):
        def handler(request):
            return httpx.Response(200, json={"score": "5", "justification": ""})

        with pytest.raises(ProtocolError):
            scripted_judge(handler).score("Q?", "R")

    def test_transport_failure_is_retryable(self):
        def handler(request):
            raise httpx.ReadTimeout("slow")

        with pytest.raises(RetryableTransportError):
            scripted_judge(handler).score("Q?", "R")

    def test_5xx_retryable_4xx_protocol(self):
        with pytest.raises(RetryableTransportError):
            scripted_judge(lambda r: httpx.Response(502)).score("Q?", "R")
        with pytest.raises(ProtocolError):
            scripted_judge(lambda r: httpx.Response(400)).score("Q?", "R")

    def test_default_rubric_ships(self):
        text = default_rubric()
        assert "7" in text and "1" in text
        assert "version 1" in text

    def test_judge_many_preserves_order(self):
        s = StubJudge({"Q": ["alpha", "beta"]})
        pairs = [("Q", "alpha"), ("Q", ""), ("Q", "alpha beta")]
        assert [sc for sc, _ in judge_many(pairs, s, max_in_flight=3)] == [2, 1, 3]


class TestWeightedMean:
    def test_half_half(self):
        assert weighted_mean([rec(7, 0.5), rec(1, 0.5)]) == pytest.approx(4.0)

    def test_single_record(self):
        assert weighted_mean([rec(3, 1.0)]) == pytest.approx(3.0)

    def test_three_way_hand_value(self):
        records = [rec(6, 0.8), rec(3, 0.15), rec(2, 0.05)]
        assert weighted_mean(records) == pytest.approx(5.35)

    def test_bad_weight_sum_rejected(self):
        with pytest.raises(ValueError):
            weighted_mean([rec(7, 0.5), rec(1, 0.4)])

    def test_equal_weights_match_plain_mean(self):
        rng = np.random.default_rng(8)
        scores = [int(s) for s in rng.integers(1, 8, size=12)]
        records = [rec(s, 1 / 12) for s in scores]
        assert weighted_mean(records) == pytest.approx(float(np.mean(scores)))

    def test_scale_equivariance(self):
        rng = np.random.default_rng(9)
        weights = rng.dirichlet(np.ones(6))
        scores = [int(s) for s in rng.integers(1, 8, size=6)]
        records = [rec(s, float(w)) for s, w in zip(scores, weights)]
        base = weighted_mean(records)
        # Affine transform applied to scores transforms the mean alike;
        # bypass the 1-7 bound via direct summation on transformed pairs.
        transformed = sum((2 * r.score + 3) * r.weight for r in records)
        assert transformed == pytest.approx(2 * base + 3)

    def test_weight_floor_interaction(self):
        # Mean over floored completions == mean over survivors with
        # renormalized weights; scores keyed by text stay attached.
        comps = (
            WeightedCompletion("good answer", 0.6),
            WeightedCompletion("other answer", 0.395),
            WeightedCompletion("noise", 0.005),
        )
        scores = {"good answer": 6, "other answer": 4, "noise": 1}
        floored = floor_filter(comps, 0.01)
        via_records = weighted_mean(
            [rec(scores[c.text], c.normalized_weight) for c in floored]
        )
        survivors = [c for c in comps if c.normalized_weight >= 0.01]
        norm = sum(c.normalized_weight for c in survivors)
        by_hand = sum(scores[c.text] * c.normalized_weight / norm for c in survivors)
        assert via_records == pytest.approx(by_hand)


class TestAggregate:
    def test_two_values_hand_ci(self):
        agg = aggregate([3.0, 5.0])
        assert agg.mean == pytest.approx(4.0)
        assert agg.half_width == pytest.approx(1.96)
        assert agg.ci_low == pytest.approx(4 - 1.96)
        assert agg.ci_high == pytest.approx(4 + 1.96)

    def test_equal_values_zero_width(self):
        agg = aggregate([4.2] * 10)
        assert agg.half_width == pytest.approx(0.0, abs=1e-12)
        assert agg.ci_low == pytest.approx(4.2)
        assert agg.ci_high == pytest.approx(4.2)

    def test_ci_contains_mean_on_simulated_questions(self):
        rng = np.random.default_rng(10)
        values = rng.normal(4.0, 1.0, size=192)
        agg = aggregate(list(values))
        assert agg.ci_low <= agg.mean <= agg.ci_high
        assert agg.n == 192
        # Cross-check the half-width against the formula.
        se = values.std(ddof=1) / math.sqrt(192)
        assert agg.half_width == pytest.approx(1.96 * se)

    def test_single_value_rejected(self):
        with pytest.raises(ValueError):
            aggregate([4.0])


class TestSpearman:
    def test_identical_orderings(self):
        assert spearman([1, 2, 3, 4], [10, 20, 30, 40]) == pytest.approx(1.0)

    def test_reversed(self):
        assert spearman([1, 2, 3], [3, 2, 1]) == pytest.approx(-1.0)

    def test_hand_value_half(self):
        # d = (0, 1, -1): rho = 1 - 6*2 / (3*8) = 0.5
        assert spearman([1, 2, 3], [1, 3, 2]) == pytest.approx(0.5)

    def test_midranks_for_ties(self):
        # Hand mid-rank computation cross-checked against the library.
        xs, ys = [1, 2, 2, 4], [1, 2, 3, 4]

        def midranks(v):
            order = np.argsort(v, kind="stable")
            ranks = np.empty(len(v))
            i = 0
            sv = np.asarray(v)[order]
            while i < len(v):
                j = i
                while j + 1 < len(v) and sv[j + 1] == sv[i]:
                    j += 1
                ranks[order[i : j + 1]] = (i + j) / 2 + 1
                i = j + 1
            return ranks

        expected = stats.pearsonr(midranks(xs), midranks(ys)).statistic
        assert spearman(xs, ys) == pytest.approx(float(expected))

    def test_monotone_transform_invariance(self):
        rng = np.random.default_rng(11)
        xs = list(rng.normal(size=20))
        ys = list(rng.normal(size=20))
        base = spearman(xs, ys)
        assert spearman([math.exp(x) for x in xs], ys) == pytest.approx(base)
        assert spearman(xs, [y**3 for y in ys]) == pytest.approx(base)

    def test_errors(self):
        with pytest.raises(ValueError):
            spearman([1, 2], [1, 2, 3])
        with pytest.raises(ValueError):
            spearman([1, 1, 1], [1, 2, 3])
        with pytest.raises(ValueError):
            spearman([1], [2])


class TestScoreRecordValidationAndIO:
    def test_score_bounds(self):
        with pytest.raises(ValueError):
            rec(0, 1.0)
        with pytest.raises(ValueError):
            rec(8, 1.0)

    def test_vocab_size_forms(self):
        assert rec(4, 1.0, vocab=250).vocab_size == 250
        assert rec(4, 1.0, vocab="unconstrained").vocab_size == "unconstrained"
        with pytest.raises(ValueError):
            rec(4, 1.0, vocab="small")

    def test_weight_bounds(self):
        with pytest.raises(ValueError):
            rec(4, 1.5)

    def test_round_trip(self, tmp_path):
        records = [rec(5, 0.25, qid=f"q{i}") for i in range(4)]
        path = tmp_path / "scores.jsonl"
        write_scores(path, records)
        assert read_scores(path) == records

    def test_corrupt_record_reports_line(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        path.write_text(
            '{"question_id": "q", "source": "s", "vocab_size": 250,'
            ' "score": 5, "justification": "", "weight": 1.0}\n{"score": 9}\n'
        )
        with pytest.raises(FormatError) as info:
            read_scores(path)
        assert info.value.line == 2
