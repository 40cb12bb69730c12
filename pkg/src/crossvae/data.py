"""Rating files, dense re-indexing, splits, subsamples and batches."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

FORMATS = ("double_colon", "csv", "amazon")
SPLIT_FRACTIONS = (0.70, 0.15, 0.15)


class DataError(ValueError):
    pass


class SparseRatingMatrix:
    """Observed (user, item, rating) triples over a dense index space.

    Both CSR views are built once at construction; the object is treated
    as immutable afterwards. ``user_ids``/``item_ids`` carry the raw ids of
    the source file (index = dense position) when known.
    """

    def __init__(self, n_users: int, n_items: int, users, items, ratings,
                 user_ids: Optional[list] = None, item_ids: Optional[list] = None):
        users = np.asarray(users, dtype=np.int64).ravel()
        items = np.asarray(items, dtype=np.int64).ravel()
        ratings = np.asarray(ratings, dtype=np.float64).ravel()
        if not (users.shape == items.shape == ratings.shape):
            raise DataError("users, items and ratings must have equal length")
        if users.size:
            if users.min() < 0 or users.max() >= n_users:
                raise DataError("user index out of range")
            if items.min() < 0 or items.max() >= n_items:
                raise DataError("item index out of range")
        if not np.all(np.isfinite(ratings)):
            raise DataError("ratings must be finite")
        keys = users * n_items + items
        if np.unique(keys).size != keys.size:
            raise DataError("duplicate (user, item) pairs")

        self.n_users = int(n_users)
        self.n_items = int(n_items)
        self.users = users
        self.items = items
        self.ratings = ratings
        self.user_ids = user_ids
        self.item_ids = item_ids
        for arr in (users, items, ratings):
            arr.flags.writeable = False

        order = np.lexsort((items, users))
        self.user_indptr = _indptr(users[order], self.n_users)
        self.user_items = items[order]
        self.user_ratings = ratings[order]
        order = np.lexsort((users, items))
        self.item_indptr = _indptr(items[order], self.n_items)
        self.item_users = users[order]
        self.item_ratings = ratings[order]

    def __len__(self) -> int:
        return int(self.ratings.size)

    def __repr__(self) -> str:
        return f"SparseRatingMatrix({self.n_users} users, {self.n_items} items, {len(self)} ratings)"

    @property
    def triples(self) -> list:
        return [(int(u), int(i), float(r)) for u, i, r in zip(self.users, self.items, self.ratings)]

    def by_user(self, u: int):
        lo, hi = self.user_indptr[u], self.user_indptr[u + 1]
        return self.user_items[lo:hi], self.user_ratings[lo:hi]

    def by_item(self, i: int):
        lo, hi = self.item_indptr[i], self.item_indptr[i + 1]
        return self.item_users[lo:hi], self.item_ratings[lo:hi]

    def user_degrees(self) -> np.ndarray:
        return np.diff(self.user_indptr)

    def item_degrees(self) -> np.ndarray:
        return np.diff(self.item_indptr)

    def subset(self, positions) -> "SparseRatingMatrix":
        """Triples at ``positions`` (into the triple arrays), same index space."""
        positions = np.asarray(positions, dtype=np.int64)
        return SparseRatingMatrix(self.n_users, self.n_items, self.users[positions],
                                  self.items[positions], self.ratings[positions],
                                  self.user_ids, self.item_ids)

    def with_ratings(self, ratings) -> "SparseRatingMatrix":
        return SparseRatingMatrix(self.n_users, self.n_items, self.users, self.items,
                                  ratings, self.user_ids, self.item_ids)

    def dense(self) -> np.ndarray:
        out = np.zeros((self.n_users, self.n_items))
        out[self.users, self.items] = self.ratings
        return out

    def mask(self) -> np.ndarray:
        out = np.zeros((self.n_users, self.n_items))
        out[self.users, self.items] = 1.0
        return out


def _indptr(sorted_keys: np.ndarray, n: int) -> np.ndarray:
    counts = np.bincount(sorted_keys, minlength=n)
    return np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)


@dataclass(frozen=True)
class DataSplit:
    train: SparseRatingMatrix
    validation: SparseRatingMatrix
    test: SparseRatingMatrix
    seed: int

    def parts(self):
        return (("train", self.train), ("val", self.validation), ("test", self.test))


def _rows(path: Path, fmt: str) -> Iterable[tuple[int, list[str]]]:
    with open(path, newline="", encoding="utf-8") as fh:
        if fmt == "double_colon":
            for lineno, line in enumerate(fh, 1):
                line = line.strip()
                if line:
                    yield lineno, line.split("::")
            return
        reader = csv.reader(fh)
        for lineno, row in enumerate(reader, 1):
            if not row or not "".join(row).strip():
                continue
            if fmt == "csv" and lineno == 1:
                header = [c.strip() for c in row]
                if header[:3] != ["userId", "movieId", "rating"]:
                    raise DataError(f"line 1: expected header userId,movieId,rating,timestamp, got {row}")
                continue
            yield lineno, row


def load_ratings(path, fmt: str = "double_colon") -> SparseRatingMatrix:
    """Parse a rating file and re-index ids densely in first-appearance order.

    Timestamps are dropped; a repeated (user, item) pair keeps its last rating.
    """
    if fmt not in FORMATS:
        raise DataError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"dataset not found: {path}")
    user_index: dict[str, int] = {}
    item_index: dict[str, int] = {}
    cells: dict[tuple[int, int], float] = {}
    for lineno, row in _rows(path, fmt):
        if len(row) < 3:
            raise DataError(f"line {lineno}: expected at least 3 fields, got {len(row)}")
        raw_u, raw_i = row[0].strip(), row[1].strip()
        try:
            rating = float(row[2])
        except ValueError:
            raise DataError(f"line {lineno}: unparseable rating {row[2]!r}") from None
        if not raw_u or not raw_i or not math.isfinite(rating):
            raise DataError(f"line {lineno}: malformed row {row!r}")
        u = user_index.setdefault(raw_u, len(user_index))
        i = item_index.setdefault(raw_i, len(item_index))
        cells.pop((u, i), None)
        cells[(u, i)] = rating
    if not cells:
        raise DataError(f"{path}: no ratings")
    keys = np.array(list(cells.keys()), dtype=np.int64)
    vals = np.fromiter(cells.values(), dtype=np.float64, count=len(cells))
    return SparseRatingMatrix(len(user_index), len(item_index), keys[:, 0], keys[:, 1], vals,
                              list(user_index), list(item_index))


def reindex(m: SparseRatingMatrix) -> SparseRatingMatrix:
    """Drop zero-degree users/items and renumber densely, keeping relative order."""
    keep_u = np.flatnonzero(m.user_degrees() > 0)
    keep_i = np.flatnonzero(m.item_degrees() > 0)
    new_u = np.full(m.n_users, -1, dtype=np.int64)
    new_u[keep_u] = np.arange(keep_u.size)
    new_i = np.full(m.n_items, -1, dtype=np.int64)
    new_i[keep_i] = np.arange(keep_i.size)
    user_ids = [m.user_ids[k] for k in keep_u] if m.user_ids is not None else None
    item_ids = [m.item_ids[k] for k in keep_i] if m.item_ids is not None else None
    return SparseRatingMatrix(keep_u.size, keep_i.size, new_u[m.users], new_i[m.items],
                              m.ratings, user_ids, item_ids)


def filter_min_ratings(m: SparseRatingMatrix, min_count: int) -> SparseRatingMatrix:
    """Remove users and items with fewer than ``min_count`` ratings, to a fixed point."""
    if min_count < 1:
        raise DataError("min_count must be >= 1")
    users, items, ratings = m.users, m.items, m.ratings
    while True:
        du = np.bincount(users, minlength=m.n_users)
        di = np.bincount(items, minlength=m.n_items)
        keep = (du[users] >= min_count) & (di[items] >= min_count)
        if keep.all():
            break
        users, items, ratings = users[keep], items[keep], ratings[keep]
    if users.size == 0:
        raise DataError(f"no ratings left after filtering with min_count={min_count}")
    kept = SparseRatingMatrix(m.n_users, m.n_items, users, items, ratings, m.user_ids, m.item_ids)
    return reindex(kept)


def split(m: SparseRatingMatrix, seed: int) -> DataSplit:
    """Seeded 70/15/15 partition of the triples, blind to users and items."""
    n = len(m)
    if n < 10:
        raise DataError(f"need at least 10 ratings to split, got {n}")
    perm = np.random.default_rng(seed).permutation(n)
    n_train = int(round(SPLIT_FRACTIONS[0] * n))
    n_val = int(round(SPLIT_FRACTIONS[1] * n))
    return DataSplit(m.subset(np.sort(perm[:n_train])),
                     m.subset(np.sort(perm[n_train:n_train + n_val])),
                     m.subset(np.sort(perm[n_train + n_val:])), seed)


def binarize(m: SparseRatingMatrix, threshold: float = 3.0) -> SparseRatingMatrix:
    return m.with_ratings((m.ratings > threshold).astype(np.float64))


def subsample(m: SparseRatingMatrix, fraction: float, seed: int):
    """Seeded uniform sample of ceil(fraction*N) triples; returns (sample, rest)."""
    if not 0.0 < fraction < 1.0:
        raise DataError("fraction must lie in (0, 1)")
    n = len(m)
    # guard against 0.1*100 == 10.000000000000002
    take = math.ceil(fraction * n - 1e-9)
    perm = np.random.default_rng(seed).permutation(n)
    return m.subset(np.sort(perm[:take])), m.subset(np.sort(perm[take:]))


def split_sparse(m: SparseRatingMatrix, fraction: float, seed: int) -> DataSplit:
    """Sparse-regime split: train is a subsample, the rest halves into val/test."""
    train, rest = subsample(m, fraction, seed)
    perm = np.random.default_rng(seed + 1).permutation(len(rest))
    half = len(rest) // 2
    return DataSplit(train, rest.subset(np.sort(perm[:half])), rest.subset(np.sort(perm[half:])), seed)


def make_batches(n: int, batch_size: int, seed=None) -> list[np.ndarray]:
    """Shuffle 0..n-1 and cut into ceil(n/batch_size) batches (last may be short).

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if batch_size < 1:
        raise DataError("batch_size must be >= 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    perm = rng.permutation(n)
    return [perm[lo:lo + batch_size] for lo in range(0, n, batch_size)]


def synthetic_low_rank(n_users: int = 200, n_items: int = 300, rank: int = 5,
                       density: float = 0.2, noise: float = 0.1, seed: int = 0) -> SparseRatingMatrix:
    """Ratings U* V*^T + N(0, noise^2) on a uniformly observed subset of cells.

    Factor entries are N(0, 1)/sqrt(rank), so each clean rating has unit-order variance 1/rank.
    """
    rng = np.random.default_rng(seed)
    u_true = rng.normal(size=(n_users, rank)) / math.sqrt(rank)
    v_true = rng.normal(size=(n_items, rank)) / math.sqrt(rank)
    n_obs = int(round(density * n_users * n_items))
    cells = np.sort(rng.choice(n_users * n_items, size=n_obs, replace=False))
    users, items = cells // n_items, cells % n_items
    clean = np.einsum("nk,nk->n", u_true[users], v_true[items])
    return SparseRatingMatrix(n_users, n_items, users, items, clean + noise * rng.normal(size=n_obs))


def write_id_map(ids: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["raw_id", "dense_idx"])
        for idx, raw in enumerate(ids):
            w.writerow([raw, idx])


def write_split_manifest(s: DataSplit, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["user_idx", "item_idx", "rating", "split"])
        for label, part in s.parts():
            for u, i, r in zip(part.users, part.items, part.ratings):
                w.writerow([int(u), int(i), repr(float(r)), label])


def read_split_manifest(path, n_users: Optional[int] = None, n_items: Optional[int] = None,
                        seed: int = -1) -> DataSplit:
    cols: dict[str, list] = {"train": [], "val": [], "test": []}
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for lineno, row in enumerate(reader, 2):
            label = row.get("split")
            if label not in cols:
                raise DataError(f"line {lineno}: unknown split label {label!r}")
            try:
                cols[label].append((int(row["user_idx"]), int(row["item_idx"]), float(row["rating"])))
            except (TypeError, ValueError):
                raise DataError(f"line {lineno}: malformed manifest row") from None
    everything = [t for rows in cols.values() for t in rows]
    if not everything:
        raise DataError(f"{path}: empty manifest")
    nu = n_users if n_users is not None else max(t[0] for t in everything) + 1
    ni = n_items if n_items is not None else max(t[1] for t in everything) + 1

    def build(rows):
        arr = np.array(rows, dtype=np.float64).reshape(-1, 3)
        return SparseRatingMatrix(nu, ni, arr[:, 0].astype(np.int64), arr[:, 1].astype(np.int64), arr[:, 2])

    return DataSplit(build(cols["train"]), build(cols["val"]), build(cols["test"]), seed)
