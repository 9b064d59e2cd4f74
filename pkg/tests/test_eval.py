import functools
import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from glyphmatch.eval import (
    EvalReport, cer, fingerprint, levenshtein, map_to_pgm_array, mean_column_entropy, read_report,
    sample_cer, score_sample, wer,
)

from helpers import edit_distance_bfs

short = st.text(alphabet="ab", max_size=4)


def recursive_distance(a, b):
    """The textbook recurrence, memoised; independent of the row-rolling DP."""
    @functools.lru_cache(maxsize=None)
    def d(i, j):
        if i == 0 or j == 0:
            return i + j
        return min(d(i - 1, j) + 1, d(i, j - 1) + 1, d(i - 1, j - 1) + (a[i - 1] != b[j - 1]))

    return d(len(a), len(b))


class TestLevenshtein:
    def test_kitten_sitting(self):
        assert levenshtein("kitten", "sitting") == 3

    @given(short, short)
    def test_matches_breadth_first_search(self, a, b):
        assert levenshtein(a, b) == edit_distance_bfs(a, b, "ab")

    def test_metric_axioms_on_random_triples(self, rng):
        for _ in range(1000):
            a, b, c = ("".join(rng.choice(list("abc"), size=rng.integers(0, 7))) for _ in range(3))
            dab = levenshtein(a, b)
            assert dab == recursive_distance(a, b)
            assert (dab == 0) == (a == b)
            assert dab == levenshtein(b, a)
            assert levenshtein(a, c) <= dab + levenshtein(b, c)

    def test_works_on_token_lists(self):
        assert levenshtein(["the", "cat"], ["the", "hat", "sat"]) == 2


class TestRates:
    def test_cer_is_mean_of_sample_rates(self):
        assert cer(["ab", "cd"], ["ab", "cx"]) == 0.25

    def test_cer_can_exceed_one(self):
        assert sample_cer("a", "bb") == 2.0

    def test_wer_on_tokens(self):
        assert wer(["a b"], ["a c"]) == 0.5

    def test_wer_keeps_punctuation_in_tokens(self):
        assert wer(["hello, world"], ["hello world"]) == 0.5

    def test_mismatched_or_empty_inputs(self):
        with pytest.raises(ValueError):
            cer(["a"], [])
        with pytest.raises(ValueError):
            cer([], [])
        with pytest.raises(ValueError):
            sample_cer("", "x")


class TestEntropy:
    def test_uniform_is_log_classes(self):
        lp = np.full((5, 4), math.log(0.25))
        assert mean_column_entropy(lp) == pytest.approx(math.log(4))

    def test_one_hot_is_zero(self):
        lp = np.array([[0.0, -np.inf, -np.inf], [-np.inf, -np.inf, 0.0]])
        assert mean_column_entropy(lp) == 0.0

    @given(st.integers(0, 10**6))
    def test_bounds(self, seed):
        r = np.random.default_rng(seed)
        z = r.normal(size=(int(r.integers(1, 8)), int(r.integers(2, 6)))) * 3
        lp = z - np.logaddexp.reduce(z, axis=1, keepdims=True)
        h = mean_column_entropy(lp)
        assert -1e-12 <= h <= math.log(lp.shape[1]) + 1e-12


class TestReports:
    def test_aggregate_consistent_with_samples(self, tmp_path):
        rows = [score_sample("f/0", "ab", "ab", "f"), score_sample("f/1", "cd", "cx", "f"),
                score_sample("g/0", "a b", "a c", "g")]
        rep = EvalReport("R", rows, fingerprint=fingerprint(x=1))
        rep.write(tmp_path / "r.jsonl")
        samples, agg = read_report(tmp_path / "r.jsonl")
        assert samples == rows
        assert agg["n"] == 3 and agg["aggregate"] is True
        assert agg["cer"] == pytest.approx(np.mean([r["cer"] for r in rows]))
        assert agg["per_font"] == {"f": pytest.approx(0.25), "g": pytest.approx(1 / 3)}

    def test_error_cell_has_no_metrics(self):
        agg = json.loads(EvalReport("X", error="boom").to_jsonl())
        assert agg["error"] == "boom" and "cer" not in agg

    def test_fingerprint_is_order_independent(self):
        assert fingerprint(a=1, b=2) == fingerprint(b=2, a=1) != fingerprint(a=1, b=3)

    def test_heatmap_scaling(self):
        np.testing.assert_allclose(map_to_pgm_array(np.array([[-1.0, 0.0, 1.0, 3.0]])), [[0, 0.5, 1, 1]])
