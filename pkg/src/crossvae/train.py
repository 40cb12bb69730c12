"""Outer/inner batch iteration with cross-fed embedding refresh."""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import ndgrad as nd
from .data import DataSplit, SparseRatingMatrix, make_batches
from .model import (EmbeddingTable, Hyperparams, RatedView, VAEBMF, decode, elbo_loss,
                    init_embeddings)

log = logging.getLogger(__name__)

IMPROVEMENT = 1e-4
LARGE_CATALOG = 10_000


def default_batch_size(n_users: int, n_items: int) -> int:
    """100 for small catalogs, 1000 once both sides exceed ``LARGE_CATALOG``."""
    return 100 if min(n_users, n_items) <= LARGE_CATALOG else 1000


class TrainingError(RuntimeError):
    pass


class Adam:
    """Adam with bias correction and a per-parameter step count.

    Parameters without a gradient are skipped entirely (moments untouched).
    """

    def __init__(self, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.t: dict[str, int] = {}

    def step(self, params) -> None:
        for p in params:
            if p.grad is None:
                continue
            key = p.name
            g = p.grad
            if key not in self.m:
                self.m[key] = np.zeros_like(p.values)
                self.v[key] = np.zeros_like(p.values)
                self.t[key] = 0
            self.t[key] += 1
            t = self.t[key]
            m = self.m[key]
            v = self.v[key]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            m_hat = m / (1.0 - self.beta1 ** t)
            v_hat = v / (1.0 - self.beta2 ** t)
            p.values = p.values - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def optimizer_step(params, optimizer: Adam) -> None:
    optimizer.step(params)


@dataclass
class Block:
    """Observed training entries inside one (user batch x item batch) block."""

    user_batch: int
    item_batch: int
    rows: np.ndarray
    cols: np.ndarray
    ratings: np.ndarray
    user_kl_weights: np.ndarray
    item_kl_weights: np.ndarray


def build_blocks(train: SparseRatingMatrix, user_batches, item_batches) -> list[Block]:
    """Blocks in nested order; empty blocks are dropped."""
    user_slot = np.empty(train.n_users, dtype=np.int64)
    user_pos = np.empty(train.n_users, dtype=np.int64)
    for b, rows in enumerate(user_batches):
        user_slot[rows] = b
        user_pos[rows] = np.arange(len(rows))
    item_slot = np.empty(train.n_items, dtype=np.int64)
    item_pos = np.empty(train.n_items, dtype=np.int64)
    for b, cols in enumerate(item_batches):
        item_slot[cols] = b
        item_pos[cols] = np.arange(len(cols))
    udeg = np.maximum(train.user_degrees(), 1).astype(np.float64)
    ideg = np.maximum(train.item_degrees(), 1).astype(np.float64)
    key = user_slot[train.users] * len(item_batches) + item_slot[train.items]
    order = np.argsort(key, kind="stable")
    blocks = []
    bounds = np.searchsorted(key[order], np.arange(len(user_batches) * len(item_batches) + 1))
    for flat in range(len(user_batches) * len(item_batches)):
        sel = order[bounds[flat]:bounds[flat + 1]]
        if sel.size == 0:
            continue
        ub, ib = divmod(flat, len(item_batches))
        rows = user_pos[train.users[sel]]
        cols = item_pos[train.items[sel]]
        uw = np.bincount(rows, minlength=len(user_batches[ub])) / udeg[user_batches[ub]]
        iw = np.bincount(cols, minlength=len(item_batches[ib])) / ideg[item_batches[ib]]
        blocks.append(Block(ub, ib, rows, cols, train.ratings[sel], uw, iw))
    return blocks


@dataclass
class TrainState:
    hp: Hyperparams
    model: VAEBMF
    user_table: EmbeddingTable
    item_table: EmbeddingTable
    optimizer: Adam
    rng: np.random.Generator
    user_batches: list
    item_batches: list
    iteration: int = 0
    best_val_rmse: float = math.inf
    since_improvement: int = 0
    best_iteration: int = 0
    best: Optional[dict] = None
    history: list = field(default_factory=list)
    _blocks: Optional[list] = field(default=None, repr=False)

    def blocks(self, train: SparseRatingMatrix) -> list[Block]:
        if self._blocks is None:
            self._blocks = build_blocks(train, self.user_batches, self.item_batches)
        return self._blocks

    def snapshot(self) -> dict:
        out = {name: t.values.copy() for name, t in self.model.named_parameters().items()}
        out["table.user"] = self.user_table.matrix.copy()
        out["table.item"] = self.item_table.matrix.copy()
        return out

    def restore(self, snap: dict) -> None:
        for name, t in self.model.named_parameters().items():
            t.values = snap[name].copy()
        self.user_table = EmbeddingTable("user", snap["table.user"])
        self.item_table = EmbeddingTable("item", snap["table.item"])


def init_state(train: SparseRatingMatrix, hp: Hyperparams) -> TrainState:
    """Initial tables, fixed batches and encoder weights, all from ``hp.seed``."""
    rng = np.random.default_rng(hp.seed)
    user_table = init_embeddings(train.n_users, hp.k, hp.init_mu, hp.init_sigma, rng, "user")
    item_table = init_embeddings(train.n_items, hp.k, hp.init_mu, hp.init_sigma, rng, "item")
    user_batches = make_batches(train.n_users, hp.batch_users, rng)
    item_batches = make_batches(train.n_items, hp.batch_items, rng)
    model = VAEBMF(hp, train.n_users, train.n_items, rng)
    opt = Adam(hp.lr, hp.adam_beta1, hp.adam_beta2, hp.adam_eps)
    return TrainState(hp, model, user_table, item_table, opt, rng, user_batches, item_batches)


def _check_finite(loss, context: str) -> None:
    if not math.isfinite(loss):
        raise TrainingError(f"non-finite loss in {context}")


def _nested_pass(state: TrainState, train: SparseRatingMatrix, user_table, item_table) -> float:
    hp, model = state.hp, state.model
    params = model.parameters()
    total = 0.0
    for blk in state.blocks(train):
        ub = state.user_batches[blk.user_batch]
        ib = state.item_batches[blk.item_batch]
        target = np.zeros((len(ub), len(ib)))
        mask = np.zeros_like(target)
        target[blk.rows, blk.cols] = blk.ratings
        mask[blk.rows, blk.cols] = 1.0
        try:
            with nd.Tape():
                up = model.encode_users(ub, train, item_table, state.rng)
                ip = model.encode_items(ib, train, user_table, state.rng)
                pred = decode(up.sample, ip.sample)
                loss = elbo_loss(pred, nd.constant(target), nd.constant(mask), up, ip,
                                 hp.beta_u, hp.beta_v, blk.user_kl_weights, blk.item_kl_weights,
                                 hp.var_floor)
        except FloatingPointError as exc:
            raise TrainingError(
                f"iteration {state.iteration + 1}, block (users {blk.user_batch}, items {blk.item_batch}): {exc}"
            ) from exc
        value = loss.item()
        _check_finite(value, f"block ({blk.user_batch}, {blk.item_batch})")
        nd.zero_grads(params)
        nd.backward(loss)
        state.optimizer.step(params)
        total += value
    return total


def _sequential_pass(state: TrainState, train: SparseRatingMatrix, user_table, item_table) -> float:
    hp, model = state.hp, state.model
    total = 0.0
    sides = (
        ("user", state.user_batches, model.user, RatedView.users(train), item_table, hp.beta_u,
         lambda rows: model.encode_users(rows, train, item_table, state.rng)),
        ("item", state.item_batches, model.item, RatedView.items(train), user_table, hp.beta_v,
         lambda rows: model.encode_items(rows, train, user_table, state.rng)),
    )
    for side, batches, side_params, rated, counter, beta, encode in sides:
        params = [t for _, t in side_params.items()]
        for rows in batches:
            if np.diff(rated.rows(rows)[0]).sum() == 0:
                continue
            target = rated.dense_rows(rows)
            mask = np.zeros_like(target)
            ptr, idx, _ = rated.rows(rows)
            mask[np.repeat(np.arange(len(rows)), np.diff(ptr)), idx] = 1.0
            with nd.Tape():
                post = encode(rows)
                pred = decode(post.sample, nd.constant(counter.matrix))
                loss = elbo_loss(pred, nd.constant(target), nd.constant(mask), post, None,
                                 beta, 0.0, floor=hp.var_floor)
            value = loss.item()
            _check_finite(value, f"{side} batch")
            nd.zero_grads(params)
            nd.backward(loss)
            state.optimizer.step(params)
            total += value
    return total


def resample_tables(state: TrainState, train: SparseRatingMatrix, chunk: int = 1000):
    """Draw fresh U, V from the current encoders, both fed the previous tables."""
    model = state.model
    user_rows = [model.encode_users(np.arange(lo, min(lo + chunk, train.n_users)), train,
                                    state.item_table, state.rng).sample.values
                 for lo in range(0, train.n_users, chunk)]
    item_rows = [model.encode_items(np.arange(lo, min(lo + chunk, train.n_items)), train,
                                    state.user_table, state.rng).sample.values
                 for lo in range(0, train.n_items, chunk)]
    return EmbeddingTable("user", np.vstack(user_rows)), EmbeddingTable("item", np.vstack(item_rows))


def run_outer_iteration(state: TrainState, split: DataSplit, hp: Optional[Hyperparams] = None) -> float:
    """One outer iteration; returns the summed training objective."""
    hp = hp or state.hp
    train = split.train
    # counterpart inputs stay fixed for the whole iteration
    user_table, item_table = state.user_table, state.item_table
    if hp.sequential:
        total = _sequential_pass(state, train, user_table, item_table)
    else:
        total = _nested_pass(state, train, user_table, item_table)
    state.user_table, state.item_table = resample_tables(state, train)
    state.iteration += 1
    return total


def predict(state: TrainState, train: SparseRatingMatrix, users, items) -> np.ndarray:
    mu_u, mu_v = state.model.posterior_means(train, state.user_table, state.item_table)
    return np.einsum("nk,nk->n", mu_u[users], mu_v[items])


def split_rmse(state: TrainState, train: SparseRatingMatrix, part: SparseRatingMatrix,
               means=None) -> float:
    if len(part) == 0:
        return math.nan
    mu_u, mu_v = means if means is not None else state.model.posterior_means(
        train, state.user_table, state.item_table)
    pred = np.einsum("nk,nk->n", mu_u[part.users], mu_v[part.items])
    return float(np.sqrt(np.mean((pred - part.ratings) ** 2)))


def record_validation(state: TrainState, val_rmse: float) -> bool:
    """Update best/patience bookkeeping; returns True on improvement."""
    if val_rmse < state.best_val_rmse - IMPROVEMENT:
        state.best_val_rmse = val_rmse
        state.since_improvement = 0
        state.best_iteration = state.iteration
        state.best = state.snapshot()
        return True
    state.since_improvement += 1
    return False


def check_convergence(state: TrainState, hp: Optional[Hyperparams] = None, improved: bool = True) -> str:
    """'stop' at max_iterations, or when a non-improving iteration exhausts patience."""
    hp = hp or state.hp
    if state.iteration >= hp.max_iterations:
        return "stop"
    if not improved and state.since_improvement >= hp.patience:
        return "stop"
    return "continue"


LOG_HEADER = ["iteration", "train_loss", "val_rmse", "seconds"]


def fit(split: DataSplit, hp: Hyperparams, state: Optional[TrainState] = None,
        log_path=None, on_iteration: Optional[Callable] = None) -> TrainState:
    """Train until convergence; ``on_iteration(state, means)`` runs after each iteration."""
    state = state or init_state(split.train, hp)
    train = split.train
    n_train = max(len(train), 1)
    fh = writer = None
    if log_path is not None:
        fh = open(log_path, "a" if state.iteration else "w", newline="")
        writer = csv.writer(fh, lineterminator="\n")
        if not state.iteration:
            writer.writerow(LOG_HEADER)
    try:
        while state.iteration < hp.max_iterations:
            started = time.perf_counter()
            total = run_outer_iteration(state, split, hp)
            means = state.model.posterior_means(train, state.user_table, state.item_table)
            val = split_rmse(state, train, split.validation, means)
            improved = record_validation(state, val if math.isfinite(val) else math.inf)
            seconds = time.perf_counter() - started
            state.history.append((state.iteration, total / n_train, val))
            if writer is not None:
                writer.writerow([state.iteration, f"{total / n_train:.10g}", f"{val:.10g}", f"{seconds:.3f}"])
                fh.flush()
            log.info("iteration %d loss %.5f val_rmse %.5f (%.2fs)", state.iteration,
                     total / n_train, val, seconds)
            if on_iteration is not None:
                on_iteration(state, means)
            if check_convergence(state, hp, improved) == "stop":
                break
    finally:
        if fh is not None:
            fh.close()
    return state
