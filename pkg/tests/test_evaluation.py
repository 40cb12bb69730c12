import csv
import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from crossvae import data
from crossvae.evaluation import (MetricError, MetricsReport, config_fingerprint, evaluate_predictions,
                                 ndcg_at_n, rank_items, ranking_metrics, recall_at_n, rmse,
                                 write_reports_csv, write_reports_json)


def dense_split(n_users=12, n_items=30, seed=0):
    """Fully observed integer ratings in 1..5, partitioned 70/15/15."""
    rng = np.random.default_rng(seed)
    r = rng.integers(1, 6, size=(n_users, n_items)).astype(float)
    users, items = np.nonzero(np.ones_like(r))
    m = data.SparseRatingMatrix(n_users, n_items, users, items, r[users, items])
    return r, data.split(m, seed)


class TestRmse:
    def test_examples(self):
        assert rmse([1, 2, 3], [1, 2, 3]) == 0.0
        assert rmse([0, 0], [3, 4]) == pytest.approx(math.sqrt(12.5))

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        p, t = rng.normal(size=50), rng.normal(size=50)
        total = 0.0
        for a, b in zip(p, t):
            total += (a - b) ** 2
        assert rmse(p, t) == pytest.approx(math.sqrt(total / 50), rel=1e-12)

    def test_errors(self):
        with pytest.raises(MetricError):
            rmse([], [])
        with pytest.raises(MetricError):
            rmse([1.0], [1.0, 2.0])


class TestNdcg:
    def test_perfect(self):
        assert ndcg_at_n([3, 1, 2], {3}, 20) == 1.0
        assert ndcg_at_n([3, 1, 2], {3, 1, 2}, 2) == 1.0

    def test_single_relevant_at_rank_two(self):
        assert ndcg_at_n([5, 7, 9], {7}, 20) == pytest.approx(1 / math.log2(3), abs=1e-6)

    def test_relevant_outside_cutoff(self):
        assert ndcg_at_n(list(range(10)), {9}, 5) == 0.0

    def test_errors(self):
        with pytest.raises(MetricError):
            ndcg_at_n([1, 1, 2], {1}, 5)
        with pytest.raises(MetricError):
            ndcg_at_n([1, 2], set(), 5)

    @given(st.lists(st.integers(-50, 50), min_size=2, max_size=40), st.integers(1, 30), st.data())
    def test_bounded_and_invariant_to_monotone_transforms(self, scores, n, draw):
        scores = np.array(scores, dtype=float)
        items = np.arange(len(scores))
        rel = set(draw.draw(st.sets(st.sampled_from(list(items)), min_size=1)))
        ranked = list(rank_items(items, scores))
        transformed = list(rank_items(items, scores ** 3 * 2.0 + 7.0))
        value = ndcg_at_n(ranked, rel, n)
        assert 0.0 <= value <= 1.0 + 1e-12
        assert value == ndcg_at_n(transformed, rel, n)
        assert recall_at_n(ranked, rel, n) == recall_at_n(transformed, rel, n)


class TestRecall:
    def test_examples(self):
        assert recall_at_n([1, 2, 3, 4], {2, 4}, 2) == 0.5
        assert recall_at_n([1, 2, 3, 4], {2, 4}, 4) == 1.0
        # the denominator is capped at n
        assert recall_at_n([1, 2, 3], {1, 2, 3}, 1) == 1.0

    def test_matches_set_intersection(self):
        rng = np.random.default_rng(4)
        for _ in range(200):
            ranked = list(rng.permutation(30))
            rel = set(rng.choice(30, size=rng.integers(1, 30), replace=False).tolist())
            n = int(rng.integers(1, 35))
            expected = len(set(ranked[:n]) & rel) / min(n, len(rel))
            assert recall_at_n(ranked, rel, n) == pytest.approx(expected)

    def test_errors(self):
        with pytest.raises(MetricError):
            recall_at_n([2, 2], {2}, 1)
        with pytest.raises(MetricError):
            recall_at_n([2], [], 1)

    def test_random_scores_match_hypergeometric_mean(self):
        n_users, m, r, n = 3000, 100, 10, 20
        rng = np.random.default_rng(5)
        candidates = {u: np.arange(m) for u in range(n_users)}
        relevants = {u: set(rng.choice(m, size=r, replace=False).tolist()) for u in range(n_users)}
        _, recall, count = ranking_metrics(lambda u, items: rng.random(len(items)),
                                           range(n_users), candidates, relevants, ns=(n,))
        assert count == n_users
        expected = n * r / m / r
        var_hits = n * (r / m) * (1 - r / m) * (m - n) / (m - 1)
        se = math.sqrt(var_hits) / r / math.sqrt(n_users)
        assert abs(recall[n] - expected) < 4 * se


class TestRanking:
    def test_ties_prefer_lower_index(self):
        items = np.array([4, 2, 9, 1])
        assert list(rank_items(items, np.array([1.0, 2.0, 1.0, 1.0]))) == [2, 1, 4, 9]


class TestEvaluatePredictions:
    def test_exact_predictions(self):
        r, s = dense_split()
        mu_u, mu_v = np.eye(r.shape[0]), r.T.copy()
        for part in ("train", "val", "test"):
            rep = evaluate_predictions(mu_u, mu_v, s, part)
            assert rep.rmse == pytest.approx(0.0, abs=1e-12)
            assert rep.n_users > 0
            assert all(v == pytest.approx(1.0) for v in rep.ndcg.values())
            assert all(v == pytest.approx(1.0) for v in rep.recall.values())

    def test_full_ranking_equals_test_ranking_when_everything_is_observed(self):
        r, s = dense_split(seed=1)
        rng = np.random.default_rng(0)
        mu_u, mu_v = rng.normal(size=(r.shape[0], 3)), rng.normal(size=(r.shape[1], 3))
        a = evaluate_predictions(mu_u, mu_v, s, "test", rank_over="test")
        b = evaluate_predictions(mu_u, mu_v, s, "test", rank_over="full")
        assert a.ndcg == b.ndcg and a.recall == b.recall

    def test_full_ranking_counts_unobserved_items(self):
        r, s = dense_split(n_items=30, seed=2)
        # append 5 never-rated items that outscore everything
        n_items = r.shape[1] + 5
        rebuild = lambda m: data.SparseRatingMatrix(m.n_users, n_items, m.users, m.items, m.ratings)
        s = data.DataSplit(rebuild(s.train), rebuild(s.validation), rebuild(s.test), s.seed)
        mu_u = np.eye(r.shape[0])
        mu_v = np.vstack([r.T, np.full((5, r.shape[0]), 100.0)])
        assert evaluate_predictions(mu_u, mu_v, s, "test", rank_over="test").ndcg[20] == pytest.approx(1.0)
        assert evaluate_predictions(mu_u, mu_v, s, "test", rank_over="full").ndcg[20] < 0.9

    def test_threshold_selects_relevant_items(self):
        r, s = dense_split()
        mu_u, mu_v = np.eye(r.shape[0]), r.T.copy()
        rep = evaluate_predictions(mu_u, mu_v, s, "test", threshold=10.0)
        assert rep.n_users == 0 and math.isnan(rep.ndcg[20])

    def test_bad_rank_over(self):
        r, s = dense_split()
        with pytest.raises(MetricError):
            evaluate_predictions(np.eye(r.shape[0]), r.T, s, "test", rank_over="everything")

    def test_threads_do_not_change_results(self, monkeypatch):
        r, s = dense_split(n_users=40, seed=3)
        rng = np.random.default_rng(1)
        mu_u, mu_v = rng.normal(size=(40, 4)), rng.normal(size=(r.shape[1], 4))
        single = evaluate_predictions(mu_u, mu_v, s, "test")
        monkeypatch.setenv("CROSSVAE_THREADS", "4")
        threaded = evaluate_predictions(mu_u, mu_v, s, "test")
        assert single == threaded


class TestReports:
    def test_csv_and_json(self, tmp_path):
        reports = [MetricsReport("test", 0.5, {20: 0.25, 50: 0.3}, {20: 0.1, 50: 0.2}, 7, "abc"),
                   MetricsReport("val", 0.6, {20: math.nan, 50: math.nan}, {20: math.nan, 50: math.nan}, 0)]
        write_reports_csv(reports, tmp_path / "m.csv")
        write_reports_json(reports, tmp_path / "m.json")
        rows = list(csv.reader(open(tmp_path / "m.csv")))
        assert rows[0] == list(MetricsReport.CSV_HEADER)
        assert rows[1] == ["test", "0.500000", "0.250000", "0.300000", "0.100000", "0.200000", "7"]
        assert rows[2][2] == "nan"
        loaded = json.loads((tmp_path / "m.json").read_text())
        assert loaded[0]["ndcg"] == {"20": 0.25, "50": 0.3}
        assert loaded[1]["ndcg"]["20"] is None

    def test_fingerprint_is_order_independent(self):
        assert config_fingerprint({"a": 1, "b": 2}) == config_fingerprint({"b": 2, "a": 1})
        assert config_fingerprint({"a": 1}) != config_fingerprint({"a": 2})
