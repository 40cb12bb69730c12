"""Two-path variational encoders, attention heads and the factorization decoder.

Each side (users, items) has its own encoder. For a batch of users the
encoder sees

* the observed path: the users' rating rows (unrated entries are 0),
* the latent path: the cross-fed item embeddings of the items each user
  rated, i.e. a row of the zero-masked concatenation of all item
  embeddings. That row is never materialised; its product with the first
  weight matrix is computed as a sum over the rated items' weight blocks.

The two path outputs are concatenated and fed to separate mean and
variance networks. Optional attention lets each posterior vector attend to
the cross-fed counterpart embeddings before sampling.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np

from . import _kernels as kernels
from . import ndgrad as nd
from .data import SparseRatingMatrix
from .ndgrad import Tensor

log = logging.getLogger(__name__)

ATTENTION_MODES = ("local", "global", "off")
LATENT_INPUTS = ("concat", "average")


@dataclass(frozen=True)
class Hyperparams:
    k: int = 5
    k_prime: int = 10
    layers: int = 0
    layers_prime: int = 1
    widths: tuple = (50,)
    beta_u: float = 1e-3
    beta_v: float = 1e-3
    batch_users: int = 100
    batch_items: int = 100
    attention: str = "local"
    attention_softmax: bool = True
    cross_feedback: bool = True
    data_input: bool = True
    latent_input: str = "concat"
    sequential: bool = False
    init_mu: float = 0.0
    init_sigma: float = 0.1
    var_init: float = 0.05
    var_floor: float = 1e-6
    attention_eps: float = 1e-8
    lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    max_iterations: int = 200
    patience: int = 20
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if self.attention not in ATTENTION_MODES:
            raise ValueError(f"attention must be one of {ATTENTION_MODES}")
        if self.latent_input not in LATENT_INPUTS:
            raise ValueError(f"latent_input must be one of {LATENT_INPUTS}")
        if not (self.data_input or self.cross_feedback):
            raise ValueError("at least one of data_input and cross_feedback must be enabled")
        if min(self.k, self.k_prime, self.layers + 1, self.layers_prime + 1) < 1:
            raise ValueError("dimensions must be positive and layer counts non-negative")
        if self.k > self.k_prime:
            raise ValueError("k must not exceed k_prime")
        hidden = self.hidden_widths + self.fusion_widths
        if any(w < max(self.k, self.k_prime) for w in hidden):
            raise ValueError("every hidden width must be >= k and k_prime")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be positive")
        if not 0.0 < self.var_init < 1.0:
            raise ValueError("var_init must lie in (0, 1)")
        if self.batch_users < 1 or self.batch_items < 1:
            raise ValueError("batch sizes must be >= 1")

    def _width_list(self) -> tuple:
        n = self.layers_prime + self.layers
        if len(self.widths) == 1:
            return self.widths * n
        if len(self.widths) != n:
            raise ValueError(f"widths needs 1 or {n} entries, got {len(self.widths)}")
        return self.widths

    @property
    def hidden_widths(self) -> tuple:
        return self._width_list()[: self.layers_prime]

    @property
    def fusion_widths(self) -> tuple:
        return self._width_list()[self.layers_prime:]

    @property
    def attention_on(self) -> bool:
        # attention consumes the cross-fed embeddings, so it goes with them
        return self.cross_feedback and self.attention != "off"

    def to_dict(self) -> dict:
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = list(v) if isinstance(v, tuple) else v
        return out

    @classmethod
    def from_dict(cls, d: dict) -> "Hyperparams":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**d)

    def updated(self, **kw) -> "Hyperparams":
        return replace(self, **kw)


@dataclass
class EmbeddingTable:
    entity: str
    matrix: np.ndarray

    def __post_init__(self):
        if self.entity not in ("user", "item"):
            raise ValueError("entity must be 'user' or 'item'")
        self.matrix = np.ascontiguousarray(self.matrix, dtype=np.float64)
        if not np.all(np.isfinite(self.matrix)):
            raise FloatingPointError("embedding table has non-finite entries")

    @property
    def n(self) -> int:
        return self.matrix.shape[0]

    @property
    def k(self) -> int:
        return self.matrix.shape[1]

    def fingerprint(self) -> str:
        import hashlib
        return hashlib.sha256(self.matrix.tobytes()).hexdigest()[:16]


@dataclass
class PosteriorBatch:
    mu: Tensor
    var: Tensor
    sample: Tensor
    noise: np.ndarray
    rows: np.ndarray


def init_embeddings(n: int, k: int, mu: float = 0.0, sigma: float = 0.1, seed=0,
                    entity: str = "user") -> EmbeddingTable:
    if sigma <= 0:
        raise ValueError("sigma must be positive")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    return EmbeddingTable(entity, rng.normal(mu, sigma, size=(n, k)))


# -- ragged structures ------------------------------------------------------

@dataclass(frozen=True)
class RatedView:
    """CSR view of one side of the training matrix (users->items or items->users)."""

    indptr: np.ndarray
    indices: np.ndarray
    values: np.ndarray
    n_rows: int
    n_cols: int

    @classmethod
    def users(cls, m: SparseRatingMatrix) -> "RatedView":
        return cls(m.user_indptr, m.user_items, m.user_ratings, m.n_users, m.n_items)

    @classmethod
    def items(cls, m: SparseRatingMatrix) -> "RatedView":
        return cls(m.item_indptr, m.item_users, m.item_ratings, m.n_items, m.n_users)

    def rows(self, batch: np.ndarray):
        """Sub-CSR (indptr, indices, values) restricted to ``batch`` rows, in batch order."""
        batch = np.asarray(batch, dtype=np.int64)
        lo, hi = self.indptr[batch], self.indptr[batch + 1]
        counts = hi - lo
        sub_ptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
        if counts.sum() == 0:
            return sub_ptr, np.zeros(0, dtype=np.int64), np.zeros(0)
        pos = np.repeat(lo - sub_ptr[:-1], counts) + np.arange(sub_ptr[-1])
        return sub_ptr, np.ascontiguousarray(self.indices[pos]), self.values[pos]

    def dense_rows(self, batch: np.ndarray) -> np.ndarray:
        ptr, idx, vals = self.rows(batch)
        out = np.zeros((len(batch), self.n_cols))
        out[np.repeat(np.arange(len(batch)), np.diff(ptr)), idx] = vals
        return out


def global_candidates(n_rows: int, n_counter: int):
    indptr = (np.arange(n_rows + 1) * n_counter).astype(np.int64)
    return indptr, np.tile(np.arange(n_counter, dtype=np.int64), n_rows)


# -- kernel-backed ops --------------------------------------------------------

class LatentGather(nd.Op):
    """First latent-path product: masked-concatenation row times the first weight."""

    name = "latent_gather"

    @staticmethod
    def forward(ctx, phi0, indptr=None, indices=None, emb=None):
        n, k = emb.shape
        if phi0.shape[0] != n * k:
            raise nd.DimensionError(f"latent_gather: weight has {phi0.shape[0]} rows, need {n * k}")
        ctx["args"] = (indptr, indices, emb)
        return kernels.latent_gather_forward(indptr, indices, emb, np.ascontiguousarray(phi0))

    @staticmethod
    def backward(ctx, grad):
        indptr, indices, emb = ctx["args"]
        return (kernels.latent_gather_backward(indptr, indices, emb, np.ascontiguousarray(grad)),)


class RaggedAttention(nd.Op):
    """Context vectors c_b = sum_j a_bj v_j with a_bj from scores p_b . v_j."""

    name = "attention"

    @staticmethod
    def forward(ctx, p, emb=None, indptr=None, indices=None, eps=1e-8, softmax=False, sink=None):
        context, weights, denom, uniform = kernels.attention_forward(
            np.ascontiguousarray(p), emb, indptr, indices, eps, softmax)
        ctx["args"] = (emb, indptr, indices, weights, denom, uniform, softmax)
        if sink is not None:
            sink["weights"] = weights
            sink["uniform"] = uniform
        return context

    @staticmethod
    def backward(ctx, grad):
        emb, indptr, indices, weights, denom, uniform, softmax = ctx["args"]
        return (kernels.attention_backward(np.ascontiguousarray(grad), emb, indptr, indices,
                                           weights, denom, uniform, softmax),)


# -- building blocks ----------------------------------------------------------

def _glorot(rng, fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=(fan_in, fan_out))


class SideEncoderParams:
    """All trainable tensors of one side's encoder, in a fixed order."""

    def __init__(self, side: str, n_inputs: int, n_counter: int, hp: Hyperparams, rng):
        self.side = side
        self.tensors: dict[str, Tensor] = {}
        k, kp = hp.k, hp.k_prime
        path_dims = list(hp.hidden_widths) + [kp]

        def add(name, arr):
            self.tensors[name] = Tensor(arr, requires_grad=True, name=f"{side}.{name}")

        def stack(prefix, dims_in, dims_out):
            for layer, (fi, fo) in enumerate(zip(dims_in, dims_out)):
                add(f"{prefix}.{layer}.weight", _glorot(rng, fi, fo))
                add(f"{prefix}.{layer}.bias", np.zeros((1, fo)))

        if hp.data_input:
            stack("observed", [n_inputs] + path_dims[:-1], path_dims)
        if hp.cross_feedback:
            first_in = n_counter * k if hp.latent_input == "concat" else k
            dims_in = [first_in] + path_dims[:-1]
            stack("latent", dims_in, path_dims)
        fusion_in = kp * (int(hp.data_input) + int(hp.cross_feedback))
        fusion_dims = list(hp.fusion_widths) + [k]
        stack("mean", [fusion_in] + fusion_dims[:-1], fusion_dims)
        stack("var", [fusion_in] + fusion_dims[:-1], fusion_dims)
        logit = math.log(hp.var_init / (1.0 - hp.var_init))
        self.tensors[f"var.{len(fusion_dims) - 1}.bias"].values[:] = logit
        if hp.attention_on:
            add("attention.mean", _glorot(rng, k, k))
            add("attention.var", _glorot(rng, k, k))
            for head in ("mean", "var"):
                w = np.vstack([np.eye(k), 0.01 * rng.normal(size=(k, k))])
                add(f"project.{head}.weight", w)
                add(f"project.{head}.bias", np.zeros((1, k)))
        self.n_observed = sum(1 for n in self.tensors if n.startswith("observed.")) // 2
        self.n_latent = sum(1 for n in self.tensors if n.startswith("latent.")) // 2
        self.n_fusion = len(fusion_dims)

    def __getitem__(self, name: str) -> Tensor:
        return self.tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self.tensors

    def items(self):
        return self.tensors.items()

    def layer_pairs(self, prefix: str, count: int):
        return [(self.tensors[f"{prefix}.{i}.weight"], self.tensors[f"{prefix}.{i}.bias"])
                for i in range(count)]


def mlp(x: Tensor, layers, final: str = "relu") -> Tensor:
    """Affine stack with ReLU between layers; ``final`` picks the last activation."""
    h = x
    for idx, (w, b) in enumerate(layers):
        h = nd.linear(h, w, b)
        last = idx == len(layers) - 1
        act = final if last else "relu"
        if act == "relu":
            h = nd.relu(h)
        elif act == "sigmoid":
            h = nd.sigmoid(h)
    return h


def latent_path_forward(batch_rows, counterpart: EmbeddingTable, rated: RatedView,
                        layers, mode: str = "concat") -> Tensor:
    """Encode the cross-fed counterpart embeddings of each batch row.

    ``layers`` are the (weight, bias) pairs of the latent path; in
    ``concat`` mode the first weight has one K-row block per counterpart.
    """
    batch_rows = np.asarray(batch_rows, dtype=np.int64)
    if batch_rows.size == 0:
        raise ValueError("empty batch")
    indptr, indices, _ = rated.rows(batch_rows)
    emb = counterpart.matrix
    (w0, b0), rest = layers[0], layers[1:]
    if mode == "concat":
        pre = nd.apply(LatentGather, w0, indptr=indptr, indices=indices, emb=emb)
    else:
        counts = np.maximum(np.diff(indptr), 1)[:, None]
        rows = np.repeat(np.arange(batch_rows.size), np.diff(indptr))
        avg = np.zeros((batch_rows.size, emb.shape[1]))
        np.add.at(avg, rows, emb[indices])
        pre = nd.matmul(nd.constant(avg / counts), w0)
    h = nd.relu(nd.add_row_bias(pre, b0))
    return mlp(h, rest) if rest else h


def attention_context(query: Tensor, weight: Tensor, counterpart: EmbeddingTable,
                      indptr: np.ndarray, indices: np.ndarray, eps: float = 1e-8,
                      softmax: bool = False):
    """Returns (context tensor, flat attention weights over the CSR entries)."""
    p = nd.matmul(query, weight)
    sink: dict = {}
    out = nd.apply(RaggedAttention, p, emb=counterpart.matrix, indptr=indptr,
                   indices=indices, eps=eps, softmax=softmax, sink=sink)
    return out, sink["weights"]


def candidate_sets(batch_rows, rated: RatedView, mode: str, n_counter: int):
    """Local: each row's rated counterparts (global for rows with none). Global: all."""
    batch_rows = np.asarray(batch_rows, dtype=np.int64)
    if mode == "global":
        return global_candidates(batch_rows.size, n_counter)
    indptr, indices, _ = rated.rows(batch_rows)
    counts = np.diff(indptr)
    if np.all(counts > 0):
        return indptr, indices
    log.debug("local attention: %d rows without rated counterparts use global attention",
              int(np.sum(counts == 0)))
    everything = np.arange(n_counter, dtype=np.int64)
    pieces = [indices[indptr[r]:indptr[r + 1]] if counts[r] else everything
              for r in range(batch_rows.size)]
    new_counts = np.array([p.size for p in pieces])
    new_ptr = np.concatenate([[0], np.cumsum(new_counts)]).astype(np.int64)
    return new_ptr, np.concatenate(pieces).astype(np.int64)


def attend(query: Tensor, counterpart: EmbeddingTable, weight: Tensor, projection,
           indptr: np.ndarray, indices: np.ndarray, eps: float = 1e-8,
           softmax: bool = False) -> Tensor:
    """Concatenate ``query`` with its attention context and project 2K -> K."""
    context, _ = attention_context(query, weight, counterpart, indptr, indices, eps, softmax)
    w, b = projection
    return nd.linear(nd.concat_cols(query, context), w, b)


def reparameterize(mu: Tensor, var: Tensor, noise: np.ndarray, floor: float = 1e-6) -> Tensor:
    if np.any(var.values <= 0):
        raise FloatingPointError("reparameterize: variance must be positive")
    if noise.shape != mu.shape:
        raise nd.DimensionError("noise shape must match mu")
    std = nd.sqrt(nd.clamp_min(var, floor))
    return nd.add(mu, nd.mul(std, nd.constant(noise)))


def decode(u: Tensor, v: Tensor) -> Tensor:
    if u.shape[1] != v.shape[1]:
        raise nd.DimensionError(f"decode: embedding sizes differ, {u.shape} vs {v.shape}")
    return nd.matmul(u, nd.transpose(v))


def kl_diag_gauss(mu: Tensor, var: Tensor, floor: float = 1e-6) -> Tensor:
    """Per-row KL(N(mu, diag var) || N(0, I)) as a B x 1 tensor."""
    if np.any(var.values <= 0):
        raise FloatingPointError("kl_diag_gauss: variance must be positive")
    k = mu.shape[1]
    inner = nd.sub(nd.add(var, nd.mul(mu, mu)), nd.log(nd.clamp_min(var, floor)))
    return nd.scale(nd.add_scalar(nd.row_sum(inner), -float(k)), 0.5)


def elbo_loss(pred: Tensor, target: Tensor, mask: Tensor, user_post: PosteriorBatch,
              item_post: PosteriorBatch, beta_u: float, beta_v: float,
              user_weights: Optional[np.ndarray] = None,
              item_weights: Optional[np.ndarray] = None, floor: float = 1e-6) -> Tensor:
    """Negative ELBO with unit observation variance: masked SSE + weighted KLs.

    ``user_weights``/``item_weights`` scale each row's KL (default 1).
    """
    loss = nd.masked_sq_error(pred, target, mask)
    for post, beta, w in ((user_post, beta_u, user_weights), (item_post, beta_v, item_weights)):
        if post is None or beta == 0.0:
            continue
        kl = kl_diag_gauss(post.mu, post.var, floor)
        wt = np.ones((1, kl.shape[0])) if w is None else np.asarray(w, dtype=np.float64).reshape(1, -1)
        loss = nd.add(loss, nd.scale(nd.matmul(nd.constant(wt), kl), beta))
    return loss


# -- the encoder ---------------------------------------------------------------

def encode_side(batch_rows, rated: RatedView, counterpart: Optional[EmbeddingTable],
                params: SideEncoderParams, hp: Hyperparams,
                rng: Optional[np.random.Generator] = None) -> PosteriorBatch:
    """Posterior means, variances and a reparameterized sample for ``batch_rows``.

    Without ``rng`` no noise is drawn and the sample equals the mean.
    """
    batch_rows = np.asarray(batch_rows, dtype=np.int64)
    if batch_rows.size == 0:
        raise ValueError("empty batch")
    parts = []
    if hp.data_input:
        x = nd.constant(rated.dense_rows(batch_rows))
        parts.append(mlp(x, params.layer_pairs("observed", params.n_observed)))
    if hp.cross_feedback:
        parts.append(latent_path_forward(batch_rows, counterpart, rated,
                                         params.layer_pairs("latent", params.n_latent),
                                         hp.latent_input))
    s = parts[0] if len(parts) == 1 else nd.concat_cols(parts[0], parts[1])
    mu = mlp(s, params.layer_pairs("mean", params.n_fusion), final="linear")
    logit = mlp(s, params.layer_pairs("var", params.n_fusion), final="linear")
    if hp.attention_on:
        indptr, indices = candidate_sets(batch_rows, rated, hp.attention, counterpart.n)
        mu = attend(mu, counterpart, params["attention.mean"],
                    (params["project.mean.weight"], params["project.mean.bias"]),
                    indptr, indices, hp.attention_eps, hp.attention_softmax)
        logit = attend(logit, counterpart, params["attention.var"],
                       (params["project.var.weight"], params["project.var.bias"]),
                       indptr, indices, hp.attention_eps, hp.attention_softmax)
    var = nd.sigmoid(logit)
    if rng is None:
        noise = np.zeros(mu.shape)
        sample = mu
    else:
        noise = rng.standard_normal(mu.shape)
        sample = reparameterize(mu, var, noise, hp.var_floor)
    return PosteriorBatch(mu, var, sample, noise, batch_rows)


class VAEBMF:
    """User- and item-side encoders sharing one set of hyperparameters."""

    def __init__(self, hp: Hyperparams, n_users: int, n_items: int, rng=None):
        rng = rng if isinstance(rng, np.random.Generator) else np.random.default_rng(hp.seed if rng is None else rng)
        self.hp = hp
        self.n_users = n_users
        self.n_items = n_items
        self.user = SideEncoderParams("user", n_items, n_items, hp, rng)
        self.item = SideEncoderParams("item", n_users, n_users, hp, rng)

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.user.items()] + [t for _, t in self.item.items()]

    def named_parameters(self) -> dict[str, Tensor]:
        return {t.name: t for t in self.parameters()}

    def encode_users(self, rows, train: SparseRatingMatrix, item_table, rng=None) -> PosteriorBatch:
        return encode_side(rows, RatedView.users(train), item_table, self.user, self.hp, rng)

    def encode_items(self, rows, train: SparseRatingMatrix, user_table, rng=None) -> PosteriorBatch:
        return encode_side(rows, RatedView.items(train), user_table, self.item, self.hp, rng)

    def posterior_means(self, train: SparseRatingMatrix, user_table, item_table, chunk: int = 1000):
        """Deterministic (mu_U, mu_V) over all rows; used for evaluation."""
        mu_u = np.vstack([self.encode_users(np.arange(lo, min(lo + chunk, self.n_users)), train, item_table).mu.values
                          for lo in range(0, self.n_users, chunk)])
        mu_v = np.vstack([self.encode_items(np.arange(lo, min(lo + chunk, self.n_items)), train, user_table).mu.values
                          for lo in range(0, self.n_items, chunk)])
        return mu_u, mu_v
