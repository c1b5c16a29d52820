"""Mixup operators: linear interpolation, mode sampling, aligned feature mixing.

Five training modes exist per mini-batch: clean (no mixing), input mixing,
latent mixing, and the two aligned feature-tensor mixes (keeping the first or
the second tensor's positions). The interpolation factor comes from a
Beta(alpha, alpha) draw; one mode and one factor apply to a whole mini-batch.

`mix_linear` evaluates lam*u + (1-lam)*v as ``v + lam*(u - v)`` (plus a
``lam == 1`` short-circuit) so that the endpoint and self-mix identities hold
bit-exactly, which the naive two-product form does not guarantee.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from . import ot
from .autodiff import Tensor


class MixMode(Enum):
    CLEAN = "clean"
    INPUT = "input"
    LATENT = "latent"
    FEAT_BASE = "feat"
    FEAT_PRIME = "feat_prime"


# Sampling order of the five-way uniform draw.
MODE_ORDER = (MixMode.CLEAN, MixMode.INPUT, MixMode.LATENT,
              MixMode.FEAT_BASE, MixMode.FEAT_PRIME)

_LAYER_MODES = {
    "x": (MixMode.INPUT,),
    "A": (MixMode.FEAT_BASE, MixMode.FEAT_PRIME),
    "z": (MixMode.LATENT,),
}


def modes_for_layers(layer_set) -> tuple[MixMode, ...]:
    """Allowed modes for a restricted layer set; clean is always allowed.

    The uniform mode draw renormalizes over the returned tuple, e.g.
    ``("x", "z")`` gives clean/input/latent each with probability 1/3.
    """
    allowed = {MixMode.CLEAN}
    for layer in layer_set:
        if layer not in _LAYER_MODES:
            raise ValueError(f"unknown mix layer {layer!r}; expected subset of x, A, z")
        allowed.update(_LAYER_MODES[layer])
    return tuple(m for m in MODE_ORDER if m in allowed)


def sample_mode(rng: np.random.Generator, allowed=None) -> MixMode:
    """Draw one mode uniformly; consumes exactly one integer from `rng`."""
    modes = MODE_ORDER if allowed is None else tuple(allowed)
    if not modes:
        raise ValueError("no modes to sample from")
    return modes[int(rng.integers(len(modes)))]


def sample_lambda(alpha: float, rng: np.random.Generator) -> float:
    """Draw the interpolation factor from Beta(alpha, alpha)."""
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    return float(rng.beta(alpha, alpha))


def mix_linear(lam: float, u, v):
    """Interpolate lam*u + (1-lam)*v elementwise (u, v ndarray or Tensor).

    Exact at the endpoints (lam 0 or 1) and under self-mix (u == v).
    """
    lam = float(lam)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if u.shape != v.shape:
        raise ValueError(f"shape mismatch: {u.shape} vs {v.shape}")
    if lam == 1.0:
        return u * 1.0
    return v + lam * (u - v)


@dataclass(frozen=True)
class PairBatch:
    """A mini-batch paired with itself through a random index permutation."""

    images: np.ndarray
    labels: np.ndarray  # one-hot, shape (b, k)
    permutation: np.ndarray = field(default=None)

    def __post_init__(self):
        b = self.images.shape[0]
        if self.labels.shape[0] != b:
            raise ValueError("images and labels disagree on batch size")
        if self.permutation is not None:
            perm = np.asarray(self.permutation)
            if sorted(perm.tolist()) != list(range(b)):
                raise ValueError("permutation is not a bijection on the batch")


def _pair_costs(a_flat: np.ndarray, b_flat: np.ndarray) -> np.ndarray:
    """Per-pair column cost matrices for a (batch, c, r) stack."""
    diff = a_flat[:, :, :, None] - b_flat[:, :, None, :]
    return np.einsum("ncij,ncij->nij", diff, diff)


def _solve_assignment(a_flat: np.ndarray, b_flat: np.ndarray,
                      cfg: ot.SinkhornConfig, plan) -> np.ndarray:
    if plan is None:
        m = np.asarray(a_flat, dtype=np.float64)
        n = np.asarray(b_flat, dtype=np.float64)
        if a_flat.ndim == 2:
            plan = ot.sinkhorn(ot.cost_matrix(m, n), cfg)
        else:
            plan = ot.sinkhorn_batch(_pair_costs(m, n), cfg)
    return ot.assignment(plan)


def aligned_mix(a, b, lam: float, cfg: ot.SinkhornConfig, side: str = "base",
                plan: np.ndarray | None = None):
    """Mix two feature tensors after aligning one onto the other's positions.

    ``side="base"`` keeps the first tensor's positions and interpolates it
    with the second tensor aligned to it; ``side="prime"`` is the symmetric
    case keeping the second tensor's positions. Inputs may be ndarrays or
    autodiff Tensors, single (c, w, h) or batched (n, c, w, h); the transport
    solve always runs on detached values, so the assignment matrix is a
    constant for gradient purposes. A precomputed `plan` skips the solve.
    """
    if side not in ("base", "prime"):
        raise ValueError(f"unknown side {side!r}")
    if isinstance(a, Tensor) or isinstance(b, Tensor):
        return _aligned_mix_tensor(a, b, lam, cfg, side, plan)
    a = np.asarray(a)
    b = np.asarray(b)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.ndim not in (3, 4):
        raise ValueError(f"expected (c, w, h) or (n, c, w, h), got {a.shape}")
    af = a.reshape(a.shape[:-2] + (-1,))
    bf = b.reshape(b.shape[:-2] + (-1,))
    r = _solve_assignment(af, bf, cfg, plan).astype(a.dtype, copy=False)
    if side == "base":
        mixed = mix_linear(lam, af, bf @ r.swapaxes(-1, -2))
    else:
        mixed = mix_linear(lam, bf, af @ r)
    return mixed.reshape(a.shape)


def _aligned_mix_tensor(a, b, lam, cfg, side, plan):
    at = a if isinstance(a, Tensor) else Tensor(np.asarray(a))
    bt = b if isinstance(b, Tensor) else Tensor(np.asarray(b))
    if at.shape != bt.shape:
        raise ValueError(f"shape mismatch: {at.shape} vs {bt.shape}")
    if at.ndim not in (3, 4):
        raise ValueError(f"expected (c, w, h) or (n, c, w, h), got {at.shape}")
    shape = at.shape
    flat = shape[:-2] + (shape[-2] * shape[-1],)
    af = at.reshape(flat)
    bf = bt.reshape(flat)
    r = _solve_assignment(af.data, bf.data, cfg, plan)
    r = np.asarray(r, dtype=at.data.dtype)
    if side == "base":
        aligned = bf @ Tensor(r.swapaxes(-1, -2))
        mixed = mix_linear(lam, af, aligned)
    else:
        aligned = af @ Tensor(r)
        mixed = mix_linear(lam, bf, aligned)
    return mixed.reshape(shape)


def mix_generic(mode: MixMode, lam: float, x: np.ndarray, x2: np.ndarray,
                model, cfg: ot.SinkhornConfig, plan: np.ndarray | None = None) -> Tensor:
    """Mixed forward pass to the latent vector for one mixing mode.

    Input mode encodes the pixel mix; latent mode mixes the two latents;
    the feature modes mix aligned feature tensors before the stage-2 encoder.
    The feat-prime mode swaps the two examples first (the caller is
    responsible for swapping labels to match). Returns the latent as a Tensor
    so losses can backpropagate into the model.
    """
    if mode == MixMode.CLEAN:
        raise ValueError("mix_generic requires a mixing mode, not clean")
    if x.shape != x2.shape:
        raise ValueError(f"shape mismatch: {x.shape} vs {x2.shape}")
    if mode == MixMode.FEAT_PRIME:
        return mix_generic(MixMode.FEAT_BASE, lam, x2, x, model, cfg, plan)
    if mode == MixMode.INPUT:
        return model.latent(mix_linear(lam, x, x2))
    if mode == MixMode.LATENT:
        return mix_linear(lam, model.latent(x), model.latent(x2))
    a = model.features(x)
    b = model.features(x2)
    return model.latent_from_features(aligned_mix(a, b, lam, cfg, side="base", plan=plan))
