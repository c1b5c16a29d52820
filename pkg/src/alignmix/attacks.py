"""Sup-norm bounded adversarial attacks on a frozen model.

Both attacks maximize the classification loss with signed input gradients.
FGSM is a single step of size epsilon; PGD iterates smaller steps, keeping a
running perturbation `delta` clipped to the epsilon-ball (so the ball bound
holds exactly) and re-clipping images to [0, 1] after every step. PGD with
one step of size epsilon and no random start reproduces FGSM bit for bit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .model import ModelBundle, NumericsError, classification_loss


@dataclass(frozen=True)
class AttackConfig:
    """Attack budget; epsilon and step_size are on the [0, 1] pixel scale.

    epsilon == 0 is allowed as the degenerate identity attack so that the
    zero-budget sanity check (robust error == clean error) can run through
    the same code path.
    """

    epsilon: float
    step_size: float | None = None
    num_steps: int = 7
    random_start: bool = True

    def __post_init__(self):
        if self.epsilon < 0:
            raise ValueError("epsilon must be >= 0")
        if self.num_steps < 1:
            raise ValueError("num_steps must be >= 1")
        if self.step_size is not None and self.step_size > self.epsilon:
            raise ValueError("PGD step_size must not exceed epsilon")

    @property
    def effective_step(self) -> float:
        return self.epsilon if self.step_size is None else self.step_size


def _validate_images(x: np.ndarray):
    if (x < 0).any() or (x > 1).any():
        raise ValueError("attack inputs must lie in [0, 1]")


def input_gradient(model: ModelBundle, x: np.ndarray, y_onehot: np.ndarray) -> np.ndarray:
    """Gradient of the summed classification loss with respect to the pixels."""
    xt = Tensor(np.asarray(x, dtype=model.config.np_dtype), requires_grad=True)
    losses = classification_loss(model.logits(model.latent(xt)), y_onehot)
    model.zero_grad()
    losses.sum().backward()
    g = xt.grad
    if g is None or not np.isfinite(g).all():
        raise NumericsError("non-finite input gradient during attack")
    model.zero_grad()
    return g


def fgsm_attack(model: ModelBundle, x: np.ndarray, y_onehot: np.ndarray,
                epsilon: float) -> np.ndarray:
    """One signed-gradient step of size epsilon, clipped back to [0, 1]."""
    x = np.asarray(x)
    _validate_images(x)
    if epsilon < 0:
        raise ValueError("epsilon must be >= 0")
    if epsilon == 0:
        return x.copy()
    g = input_gradient(model, x, y_onehot)
    return np.clip(x + epsilon * np.sign(g), 0.0, 1.0).astype(x.dtype)


def pgd_attack(model: ModelBundle, x: np.ndarray, y_onehot: np.ndarray,
               cfg: AttackConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Iterated signed-gradient attack projected onto the epsilon-ball.

    With `cfg.random_start` the perturbation is initialized uniformly inside
    the ball (pass `rng` for reproducibility; defaults to a fixed seed).
    """
    x = np.asarray(x)
    _validate_images(x)
    if cfg.epsilon == 0:
        return x.copy()
    eps = cfg.epsilon
    step = cfg.effective_step
    if cfg.random_start:
        if rng is None:
            rng = np.random.default_rng(0)
        delta = rng.uniform(-eps, eps, size=x.shape).astype(x.dtype)
    else:
        delta = np.zeros_like(x)
    for _ in range(cfg.num_steps):
        x_t = np.clip(x + delta, 0.0, 1.0)
        g = input_gradient(model, x_t, y_onehot)
        delta = np.clip(delta + step * np.sign(g), -eps, eps).astype(x.dtype)
    return np.clip(x + delta, 0.0, 1.0).astype(x.dtype)
