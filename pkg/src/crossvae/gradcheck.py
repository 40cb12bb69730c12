"""Central finite-difference checks for every differentiable op and the full model."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import ndgrad as nd
from .data import SparseRatingMatrix
from .model import (EmbeddingTable, Hyperparams, LatentGather, RaggedAttention, VAEBMF, decode,
                    elbo_loss, global_candidates)

OP_TOL = 1e-4
MODEL_TOL = 1e-3
STEP = 1e-5
# gradients smaller than this are compared in absolute terms
REL_FLOOR = 1e-6


@dataclass
class CheckResult:
    name: str
    max_rel_err: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tolerance


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), REL_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale)) if analytic.size else 0.0


def numeric_grad(f: Callable[[], float], t: nd.Tensor, h: float = STEP) -> np.ndarray:
    """Central differences of ``f`` w.r.t. every entry of ``t`` (perturbed in place)."""
    g = np.zeros_like(t.values)
    flat = t.values.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + h
        up = f()
        flat[idx] = orig - h
        down = f()
        flat[idx] = orig
        g.reshape(-1)[idx] = (up - down) / (2.0 * h)
    return g


def check_function(build: Callable[[], nd.Tensor], inputs: list, h: float = STEP) -> float:
    """Max relative error over all ``inputs`` for the scalar built by ``build``."""
    for t in inputs:
        t.grad = None
    with nd.Tape():
        loss = build()
    nd.backward(loss)
    worst = 0.0
    for t in inputs:
        analytic = t.grad if t.grad is not None else np.zeros_like(t.values)
        numeric = numeric_grad(lambda: build().item(), t, h)
        worst = max(worst, rel_error(analytic, numeric))
    return worst


def _projected(out: nd.Tensor, weights: np.ndarray) -> nd.Tensor:
    return nd.sum_all(nd.mul(out, nd.constant(weights)))


def _leaf(rng, shape, low=-1.0, high=1.0) -> nd.Tensor:
    return nd.Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=1e-3) -> np.ndarray:
    x = rng.uniform(-1, 1, size=shape)
    return np.where(np.abs(x) < margin, np.sign(x + 1e-12) * (margin + np.abs(x)), x)


def _op_cases(rng):
    """name -> (build-fn factory). Each factory draws one random instance."""

    def unary(fn, low=-1.0, high=1.0, values=None):
        def make():
            m, n = rng.integers(1, 5, size=2)
            a = nd.Tensor(values((m, n)) if values else rng.uniform(low, high, size=(m, n)),
                          requires_grad=True)
            w = rng.normal(size=fn(a).shape)
            return (lambda: _projected(fn(a), w)), [a]
        return make

    def binary(fn):
        def make():
            m, n = rng.integers(1, 5, size=2)
            a, b = _leaf(rng, (m, n)), _leaf(rng, (m, n))
            w = rng.normal(size=(m, n))
            return (lambda: _projected(fn(a, b), w)), [a, b]
        return make

    def matmul():
        m, k, n = rng.integers(1, 5, size=3)
        a, b = _leaf(rng, (m, k)), _leaf(rng, (k, n))
        w = rng.normal(size=(m, n))
        return (lambda: _projected(nd.matmul(a, b), w)), [a, b]

    def add_row_bias():
        m, n = rng.integers(1, 5, size=2)
        a, b = _leaf(rng, (m, n)), _leaf(rng, (1, n))
        w = rng.normal(size=(m, n))
        return (lambda: _projected(nd.add_row_bias(a, b), w)), [a, b]

    def concat_cols():
        m, p, q = rng.integers(1, 4, size=3)
        a, b = _leaf(rng, (m, p)), _leaf(rng, (m, q))
        w = rng.normal(size=(m, p + q))
        return (lambda: _projected(nd.concat_cols(a, b), w)), [a, b]

    def masked_sq_error():
        m, n = rng.integers(1, 5, size=2)
        pred = _leaf(rng, (m, n))
        target = nd.constant(rng.uniform(-1, 1, size=(m, n)))
        mask = nd.constant((rng.random((m, n)) < 0.6).astype(float))
        return (lambda: nd.masked_sq_error(pred, target, mask)), [pred]

    def latent_gather():
        n, k, m, b = 5, 2, 3, 3
        emb = rng.normal(size=(n, k))
        counts = rng.integers(0, 4, size=b)
        indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        indices = np.concatenate([rng.choice(n, size=c, replace=False) for c in counts]).astype(np.int64)
        phi0 = _leaf(rng, (n * k, m))
        w = rng.normal(size=(b, m))
        return (lambda: _projected(nd.apply(LatentGather, phi0, indptr=indptr, indices=indices, emb=emb), w)), [phi0]

    def attention(softmax):
        def make():
            n, k, b = 5, 2, 3
            emb = np.abs(rng.normal(size=(n, k))) + 0.1
            indptr, indices = global_candidates(b, n)
            p = nd.Tensor(np.abs(rng.normal(size=(b, k))) + 0.1, requires_grad=True)
            w = rng.normal(size=(b, k))
            return (lambda: _projected(nd.apply(RaggedAttention, p, emb=emb, indptr=indptr,
                                                indices=indices, softmax=softmax), w)), [p]
        return make

    return {
        "matmul": matmul,
        "add_row_bias": add_row_bias,
        "relu": unary(nd.relu, values=lambda s: _away_from_zero(rng, s)),
        "sigmoid": unary(nd.sigmoid, -4, 4),
        "concat_cols": concat_cols,
        "masked_sq_error": masked_sq_error,
        "add": binary(nd.add),
        "sub": binary(nd.sub),
        "mul": binary(nd.mul),
        "scale": unary(lambda a: nd.scale(a, 1.7)),
        "add_scalar": unary(lambda a: nd.add_scalar(a, 0.3)),
        "sqrt": unary(nd.sqrt, 0.2, 2.0),
        "log": unary(nd.log, 0.2, 2.0),
        "clamp_min": unary(lambda a: nd.clamp_min(a, 0.0), values=lambda s: _away_from_zero(rng, s)),
        "transpose": unary(nd.transpose),
        "row_sum": unary(nd.row_sum),
        "sum": unary(nd.sum_all),
        "latent_gather": latent_gather,
        "attention[ratio]": attention(False),
        "attention[softmax]": attention(True),
    }


def check_ops(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    results = []
    for name, make in _op_cases(rng).items():
        worst = 0.0
        for _ in range(instances):
            build, inputs = make()
            worst = max(worst, check_function(build, inputs))
        results.append(CheckResult(name, worst, OP_TOL))
    return results


def toy_problem(seed: int = 0, softmax: bool = True, attention: str = "local"):
    """Frozen 3-user x 4-item instance with K=2 and one hidden layer per path."""
    rng = np.random.default_rng(seed)
    users = np.array([0, 0, 1, 1, 1, 2, 2])
    items = np.array([0, 2, 1, 2, 3, 0, 3])
    ratings = rng.uniform(1, 5, size=users.size)
    train = SparseRatingMatrix(3, 4, users, items, ratings)
    hp = Hyperparams(k=2, k_prime=3, layers=1, layers_prime=1, widths=(4,), beta_u=0.5, beta_v=0.5,
                     attention=attention, attention_softmax=softmax, seed=seed)
    model = VAEBMF(hp, 3, 4, rng)
    user_table = EmbeddingTable("user", rng.normal(size=(3, 2)))
    item_table = EmbeddingTable("item", rng.normal(size=(4, 2)))
    return train, hp, model, user_table, item_table


def model_loss(train, hp, model, user_table, item_table, noise_seed: int = 1) -> nd.Tensor:
    rng = np.random.default_rng(noise_seed)
    up = model.encode_users(np.arange(3), train, item_table, rng)
    ip = model.encode_items(np.arange(4), train, user_table, rng)
    pred = decode(up.sample, ip.sample)
    return elbo_loss(pred, nd.constant(train.dense()), nd.constant(train.mask()), up, ip,
                     hp.beta_u, hp.beta_v, floor=hp.var_floor)


def check_model(seed: int = 0) -> list[CheckResult]:
    results = []
    for label, softmax in (("softmax", True), ("ratio", False)):
        train, hp, model, ut, it = toy_problem(seed, softmax)
        params = model.parameters()
        build = lambda: model_loss(train, hp, model, ut, it)  # noqa: E731
        nd.zero_grads(params)
        with nd.Tape():
            loss = build()
        nd.backward(loss)
        worst_name, worst = "", 0.0
        for p in params:
            analytic = p.grad if p.grad is not None else np.zeros_like(p.values)
            err = rel_error(analytic, numeric_grad(lambda: build().item(), p))
            if err >= worst:
                worst_name, worst = p.name, err
        results.append(CheckResult(f"model[{label}] (worst: {worst_name})", worst, MODEL_TOL))
    return results


def run(seed: int = 0, instances: int = 100) -> list[CheckResult]:
    return check_ops(seed, instances) + check_model(seed)
