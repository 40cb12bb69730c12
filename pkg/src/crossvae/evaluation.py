"""RMSE and per-user top-N ranking metrics, plus report serialization."""

from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .data import DataSplit

DEFAULT_NS = (20, 50)
RANK_OVER = ("test", "full")


class MetricError(ValueError):
    pass


def rmse(predictions, targets) -> float:
    p = np.asarray(predictions, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if p.shape != t.shape:
        raise MetricError("predictions and targets differ in length")
    if p.size == 0:
        raise MetricError("rmse of an empty list")
    return float(np.sqrt(np.mean((p - t) ** 2)))


def _check_ranked(ranked_items, relevant) -> None:
    if len(set(ranked_items)) != len(ranked_items):
        raise MetricError("ranked_items contains duplicates")
    if len(relevant) == 0:
        raise MetricError("relevant set is empty")


def ndcg_at_n(ranked_items: Sequence, relevant, n: int) -> float:
    """Binary-relevance NDCG@n with 1/log2(rank+1) discounts."""
    _check_ranked(ranked_items, relevant)
    relevant = set(relevant)
    dcg = sum(1.0 / math.log2(rank + 2)
              for rank, item in enumerate(ranked_items[:n]) if item in relevant)
    idcg = sum(1.0 / math.log2(rank + 2) for rank in range(min(n, len(relevant))))
    return dcg / idcg


def recall_at_n(ranked_items: Sequence, relevant, n: int) -> float:
    """|top-n & relevant| / min(n, |relevant|)."""
    _check_ranked(ranked_items, relevant)
    relevant = set(relevant)
    hits = sum(1 for item in ranked_items[:n] if item in relevant)
    return hits / min(n, len(relevant))


def rank_items(items: np.ndarray, scores: np.ndarray) -> np.ndarray:
    """Items by descending score; ties go to the lower item index."""
    order = np.lexsort((items, -scores))
    return items[order]


@dataclass
class MetricsReport:
    split: str
    rmse: float
    ndcg: dict = field(default_factory=dict)
    recall: dict = field(default_factory=dict)
    n_users: int = 0
    fingerprint: str = ""

    CSV_HEADER = ("split", "rmse", "ndcg@20", "ndcg@50", "recall@20", "recall@50", "n_users")

    def csv_row(self) -> list:
        return [self.split, _fmt(self.rmse), _fmt(self.ndcg.get(20)), _fmt(self.ndcg.get(50)),
                _fmt(self.recall.get(20)), _fmt(self.recall.get(50)), str(self.n_users)]

    def to_json(self) -> dict:
        def clean(x):
            return None if x is None or (isinstance(x, float) and math.isnan(x)) else x
        return {
            "split": self.split,
            "rmse": clean(self.rmse),
            "ndcg": {str(k): clean(v) for k, v in sorted(self.ndcg.items())},
            "recall": {str(k): clean(v) for k, v in sorted(self.recall.items())},
            "n_users": self.n_users,
            "fingerprint": self.fingerprint,
        }


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return "nan"
    return f"{x:.6f}"


def write_reports_csv(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MetricsReport.CSV_HEADER)
        for r in reports:
            w.writerow(r.csv_row())


def write_reports_json(reports: Sequence[MetricsReport], path) -> None:
    with open(path, "w") as fh:
        json.dump([r.to_json() for r in reports], fh, indent=2, sort_keys=True)
        fh.write("\n")


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("CROSSVAE_THREADS", "1")))
    except ValueError:
        return 1


def ranking_metrics(score_fn, users, candidates, relevants, ns=DEFAULT_NS):
    """Mean NDCG@n/Recall@n over ``users``.

    ``score_fn(user, items)`` scores one user's candidate items;
    ``candidates``/``relevants`` map user -> item array / set.
    """
    ns = tuple(ns)

    def one(u):
        items = candidates[u]
        ranked = list(rank_items(items, score_fn(u, items)))
        rel = relevants[u]
        return [ndcg_at_n(ranked, rel, n) for n in ns] + [recall_at_n(ranked, rel, n) for n in ns]

    users = list(users)
    if not users:
        nan = {n: math.nan for n in ns}
        return dict(nan), dict(nan), 0
    threads = _threads()
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            rows = list(pool.map(one, users))
    else:
        rows = [one(u) for u in users]
    means = np.mean(np.array(rows), axis=0)
    ndcg = {n: float(means[i]) for i, n in enumerate(ns)}
    recall = {n: float(means[len(ns) + i]) for i, n in enumerate(ns)}
    return ndcg, recall, len(users)


def evaluate_predictions(mu_u: np.ndarray, mu_v: np.ndarray, split: DataSplit, part: str = "test",
                         ns=DEFAULT_NS, rank_over: str = "test", threshold: float = 3.0,
                         fingerprint: str = "") -> MetricsReport:
    """Metrics for one split part from posterior-mean embeddings.

    Ranking uses users with at least two held-out items and at least one
    relevant (rating > ``threshold``) item among them.
    """
    if rank_over not in RANK_OVER:
        raise MetricError(f"rank_over must be one of {RANK_OVER}")
    target = {"train": split.train, "val": split.validation, "test": split.test}[part]
    if len(target) == 0:
        raise MetricError(f"empty {part} split")
    preds = np.einsum("nk,nk->n", mu_u[target.users], mu_v[target.items])
    err = rmse(preds, target.ratings)

    deg = target.user_degrees()
    candidates, relevants, users = {}, {}, []
    if rank_over == "full":
        seen = np.zeros((target.n_users, target.n_items), dtype=bool)
        for label, other in split.parts():
            if label != part:
                seen[other.users, other.items] = True
        all_items = np.arange(target.n_items)
    for u in np.flatnonzero(deg >= 2):
        items, ratings = target.by_user(int(u))
        rel = set(items[ratings > threshold].tolist())
        if not rel:
            continue
        users.append(int(u))
        relevants[int(u)] = rel
        candidates[int(u)] = all_items[~seen[u]] if rank_over == "full" else items
    ndcg, recall, n_users = ranking_metrics(lambda u, items: mu_v[items] @ mu_u[u],
                                            users, candidates, relevants, ns)
    return MetricsReport(part, err, ndcg, recall, n_users, fingerprint)


def evaluate(state, split: DataSplit, ns=DEFAULT_NS, rank_over: str = "test",
             threshold: float = 3.0, parts=("train", "val", "test"), fingerprint: str = ""):
    """Reports for each requested part using the state's posterior means."""
    mu_u, mu_v = state.model.posterior_means(split.train, state.user_table, state.item_table)
    return [evaluate_predictions(mu_u, mu_v, split, p, ns, rank_over, threshold, fingerprint)
            for p in parts]
