"""Pure numpy implementations of the ragged kernels.

Same signatures and results as the compiled ``_ckernels`` module. All
ragged structures are CSR pairs ``(indptr, indices)`` with one segment per
batch row; ``indices`` point into rows of the counterpart embedding table.
"""

import numpy as np


def _segment_sum(values, indptr, n_rows):
    out = np.zeros((n_rows,) + values.shape[1:])
    counts = np.diff(indptr)
    nonempty = counts > 0
    if values.shape[0]:
        out[nonempty] = np.add.reduceat(values, indptr[:-1][nonempty], axis=0)
    return out


def latent_gather_forward(indptr, indices, emb, phi0):
    """out[b] = sum over j in segment b of emb[j] @ phi0[j*K:(j+1)*K]."""
    n, k = emb.shape
    m = phi0.shape[1]
    n_rows = indptr.shape[0] - 1
    if indices.shape[0] == 0:
        return np.zeros((n_rows, m))
    used = np.unique(indices)
    blocks = phi0.reshape(n, k, m)[used]
    per_item = np.zeros((n, m))
    per_item[used] = np.einsum("jk,jkm->jm", emb[used], blocks)
    return _segment_sum(per_item[indices], indptr, n_rows)


def latent_gather_backward(indptr, indices, emb, grad_out):
    n, k = emb.shape
    m = grad_out.shape[1]
    grad_phi0 = np.zeros((n, k, m))
    if indices.shape[0]:
        rows = np.repeat(np.arange(indptr.shape[0] - 1), np.diff(indptr))
        order = np.argsort(indices, kind="stable")
        sorted_idx = indices[order]
        starts = np.flatnonzero(np.r_[True, sorted_idx[1:] != sorted_idx[:-1]])
        summed = np.add.reduceat(grad_out[rows[order]], starts, axis=0)
        used = sorted_idx[starts]
        grad_phi0[used] = emb[used][:, :, None] * summed[:, None, :]
    return grad_phi0.reshape(n * k, m)


def attention_forward(p, emb, indptr, indices, eps, softmax):
    """Ragged bilinear attention.

    Returns ``(context, weights, denom, uniform)`` where ``weights`` is flat
    over the CSR entries, ``denom`` the per-row normaliser and ``uniform``
    flags rows whose score sum fell below ``eps`` in magnitude.
    """
    n_rows, k = p.shape
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n_rows), counts)
    cand = emb[indices]
    scores = np.einsum("nk,nk->n", p[rows], cand)
    denom = np.zeros(n_rows)
    uniform = np.zeros(n_rows, dtype=np.int8)
    if softmax:
        peak = np.full(n_rows, -np.inf)
        np.maximum.at(peak, rows, scores)
        ex = np.exp(scores - peak[rows])
        denom = np.bincount(rows, weights=ex, minlength=n_rows)
        weights = ex / denom[rows]
    else:
        denom = np.bincount(rows, weights=scores, minlength=n_rows)
        flat = np.abs(denom) <= eps
        uniform[flat & (counts > 0)] = 1
        safe = np.where(flat, 1.0, denom)
        weights = np.where(flat[rows], 1.0 / np.maximum(counts[rows], 1), scores / safe[rows])
    context = np.zeros((n_rows, k))
    for c in range(k):
        context[:, c] = np.bincount(rows, weights=weights * cand[:, c], minlength=n_rows)
    return context, weights, denom, uniform


def attention_backward(grad_c, emb, indptr, indices, weights, denom, uniform, softmax):
    n_rows, k = grad_c.shape
    counts = np.diff(indptr)
    rows = np.repeat(np.arange(n_rows), counts)
    cand = emb[indices]
    d_weights = np.einsum("nk,nk->n", grad_c[rows], cand)
    mean = np.bincount(rows, weights=weights * d_weights, minlength=n_rows)
    if softmax:
        d_scores = weights * (d_weights - mean[rows])
    else:
        live = uniform[rows] == 0
        safe = np.where(uniform == 1, 1.0, denom)
        d_scores = np.where(live, (d_weights - mean[rows]) / safe[rows], 0.0)
    grad_p = np.zeros((n_rows, k))
    for c in range(k):
        grad_p[:, c] = np.bincount(rows, weights=d_scores * cand[:, c], minlength=n_rows)
    return grad_p
