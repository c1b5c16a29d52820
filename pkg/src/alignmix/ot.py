"""Feature-tensor alignment via entropy-regularized optimal transport.

A feature tensor (c, w, h) is flattened to a c x r matrix of per-position
feature columns (r = w*h). The squared-Euclidean cost between the columns of
two such matrices feeds a Sinkhorn-Knopp solve for the transport plan with
uniform 1/r marginals; rescaling the plan by r gives the doubly stochastic
assignment used to recombine one tensor's columns onto the other's positions.

All functions are pure and operate on plain ndarrays; solves run in float64.
The assignment matrix is returned read-only and is never part of any autodiff
graph, so gradients cannot flow through the transport solve.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import linear_sum_assignment

# Below this epsilon the similarity matrix exp(-M/eps) is too close to
# underflow for matrix scaling; iterations run in log space instead.
LOG_DOMAIN_EPSILON = 1e-2


class SinkhornUnderflowError(ArithmeticError):
    """Raised when exp(-M/eps) underflows to an all-zero row or column."""


@dataclass(frozen=True)
class SinkhornConfig:
    """Entropic-OT solver settings (training defaults: eps 0.1, 100 iters)."""

    epsilon: float = 0.1
    max_iters: int = 100
    marginal_tol: float = 1e-9

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ValueError(f"epsilon must be positive, got {self.epsilon}")
        if self.max_iters < 1:
            raise ValueError(f"max_iters must be >= 1, got {self.max_iters}")
        if not (self.marginal_tol > 0):
            raise ValueError(f"marginal_tol must be positive, got {self.marginal_tol}")


def _require_feature_tensor(t: np.ndarray) -> np.ndarray:
    t = np.asarray(t)
    if t.ndim != 3:
        raise ValueError(f"feature tensor must be (c, w, h), got shape {t.shape}")
    if not np.isfinite(t).all():
        raise ValueError("feature tensor contains non-finite entries")
    return t


def flatten_features(t: np.ndarray) -> np.ndarray:
    """Reshape a (c, w, h) tensor to a (c, r) matrix, r = w*h, C order."""
    t = _require_feature_tensor(t)
    c = t.shape[0]
    return t.reshape(c, -1)


def unflatten_features(m: np.ndarray, spatial: tuple[int, int]) -> np.ndarray:
    """Inverse of flatten_features; `spatial` is the original (w, h)."""
    m = np.asarray(m)
    w, h = spatial
    if m.ndim != 2 or m.shape[1] != w * h:
        raise ValueError(f"cannot unflatten shape {m.shape} to spatial {spatial}")
    return m.reshape(m.shape[0], w, h)


def cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise squared Euclidean distances between columns of a and b."""
    a = np.asarray(a)
    b = np.asarray(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("cost_matrix expects (c, r) matrices")
    if a.shape != b.shape:
        raise ValueError(f"column sets differ in shape: {a.shape} vs {b.shape}")
    diff = a.T[:, None, :] - b.T[None, :, :]
    return np.einsum("ijc,ijc->ij", diff, diff)


def _marginal_deviation(p: np.ndarray, inv_r: float) -> float:
    rows = np.abs(p.sum(axis=-1) - inv_r).max()
    cols = np.abs(p.sum(axis=-2) - inv_r).max()
    return max(rows, cols)


def _sinkhorn_scaling(m: np.ndarray, cfg: SinkhornConfig) -> np.ndarray:
    """Matrix-scaling iterations on exp(-M/eps); m is (..., r, r)."""
    r = m.shape[-1]
    inv_r = 1.0 / r
    scaled = m / cfg.epsilon
    k = np.exp(-(scaled - scaled.min(axis=-1, keepdims=True)))
    if (k.sum(axis=-2) == 0).any():
        raise SinkhornUnderflowError(
            "exp(-M/eps) underflowed to an all-zero column; decrease the cost "
            "scale or use a smaller epsilon (log-domain path)")
    p = k
    for _ in range(cfg.max_iters):
        p = p * (inv_r / p.sum(axis=-1, keepdims=True))
        col = p.sum(axis=-2, keepdims=True)
        if (col == 0).any():
            raise SinkhornUnderflowError("column sum underflowed to zero during scaling")
        p = p * (inv_r / col)
        if _marginal_deviation(p, inv_r) < cfg.marginal_tol:
            break
    return p


def _sinkhorn_log(m: np.ndarray, cfg: SinkhornConfig, check_every: int = 10) -> np.ndarray:
    """Log-domain iterations; m is (..., r, r). Stable for small epsilon."""
    r = m.shape[-1]
    inv_r = 1.0 / r
    log_k = -m / cfg.epsilon
    log_marg = -np.log(r)
    u = np.zeros(m.shape[:-1], dtype=m.dtype)
    v = np.zeros(m.shape[:-2] + (r,), dtype=m.dtype)
    for it in range(cfg.max_iters):
        a = log_k + v[..., None, :]
        mx = a.max(axis=-1)
        u = log_marg - (mx + np.log(np.exp(a - mx[..., None]).sum(axis=-1)))
        a = log_k + u[..., None]
        mx = a.max(axis=-2)
        v = log_marg - (mx + np.log(np.exp(a - mx[..., None, :]).sum(axis=-2)))
        if (it + 1) % check_every == 0 or it == cfg.max_iters - 1:
            p = np.exp(log_k + u[..., None] + v[..., None, :])
            if _marginal_deviation(p, inv_r) < cfg.marginal_tol:
                break
    return np.exp(log_k + u[..., None] + v[..., None, :])


def sinkhorn(m: np.ndarray, cfg: SinkhornConfig) -> np.ndarray:
    """Solve min_P <P, M> - eps*H(P) over plans with uniform 1/r marginals.

    Alternates row (first) and column normalization of exp(-M/eps) until
    `cfg.max_iters` sweeps or the largest marginal deviation drops below
    `cfg.marginal_tol`. Returns the r x r plan in float64.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 2 or m.shape[0] != m.shape[1]:
        raise ValueError(f"cost matrix must be square, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("cost matrix contains non-finite entries")
    if (m < 0).any():
        raise ValueError("cost matrix contains negative entries")
    if m.shape[0] == 1:
        return np.ones((1, 1))
    if cfg.epsilon < LOG_DOMAIN_EPSILON:
        return _sinkhorn_log(m, cfg)
    return _sinkhorn_scaling(m, cfg)


def sinkhorn_batch(m: np.ndarray, cfg: SinkhornConfig) -> np.ndarray:
    """Vectorized sinkhorn over a (batch, r, r) stack of cost matrices.

    Identical iteration to `sinkhorn`, with the early-stop criterion taken
    over the whole batch.
    """
    m = np.asarray(m, dtype=np.float64)
    if m.ndim != 3 or m.shape[1] != m.shape[2]:
        raise ValueError(f"expected (batch, r, r) cost stack, got shape {m.shape}")
    if not np.isfinite(m).all():
        raise ValueError("cost stack contains non-finite entries")
    if m.shape[1] == 1:
        return np.ones(m.shape)
    if cfg.epsilon < LOG_DOMAIN_EPSILON:
        return _sinkhorn_log(m, cfg)
    return _sinkhorn_scaling(m, cfg)


def assignment(p: np.ndarray) -> np.ndarray:
    """Rescale a transport plan to the doubly stochastic assignment r*P.

    The result is returned read-only: it is a constant with respect to any
    gradient computation (the solve happens outside the autodiff graph).
    """
    p = np.asarray(p)
    r = p.shape[-1]
    out = r * p
    out.flags.writeable = False
    return out


def plan_entropy(p: np.ndarray) -> float:
    """Shannon entropy -sum p log p of a transport plan (0 log 0 := 0)."""
    p = np.asarray(p, dtype=np.float64)
    pos = p[p > 0]
    return float(-(pos * np.log(pos)).sum())


def transport_cost(p: np.ndarray, m: np.ndarray) -> float:
    """Frobenius inner product <P, M>."""
    return float((np.asarray(p) * np.asarray(m)).sum())


def exact_assignment_cost(m: np.ndarray) -> float:
    """Minimum-cost perfect assignment total (exact LP oracle, no entropy)."""
    m = np.asarray(m)
    rows, cols = linear_sum_assignment(m)
    return float(m[rows, cols].sum())


def align(a: np.ndarray, b: np.ndarray, cfg: SinkhornConfig,
          direction: str = "to_second") -> np.ndarray:
    """Recombine one tensor's feature columns onto the other's positions.

    With assignment R = r*P from the transport between the columns of `a`
    (rows of the cost) and `b` (columns):

    - ``direction="to_second"``: returns `a` aligned to `b` -- each output
      column is the convex combination of `b`'s columns matched to the
      corresponding position of `a` (computed as B_mat @ R^T).
    - ``direction="to_first"``: returns `b` aligned to `a` (A_mat @ R).

    Output has the same (c, w, h) shape as the inputs.
    """
    a = _require_feature_tensor(a)
    b = _require_feature_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"tensors differ in shape: {a.shape} vs {b.shape}")
    if direction not in ("to_second", "to_first"):
        raise ValueError(f"unknown direction {direction!r}")
    spatial = a.shape[1:]
    am = flatten_features(a).astype(np.float64)
    bm = flatten_features(b).astype(np.float64)
    r = assignment(sinkhorn(cost_matrix(am, bm), cfg))
    aligned = bm @ r.T if direction == "to_second" else am @ r
    return unflatten_features(aligned, spatial)
