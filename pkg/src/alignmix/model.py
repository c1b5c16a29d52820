"""Desk-scale convolutional autoencoder-classifier and its training loop.

The bundle holds a stage-1 conv encoder producing a (c, f, f) feature tensor,
a fully connected stage-2 encoder to a latent of dimension d = c, a mirrored
transposed-conv decoder back to pixels, and a linear classifier on the latent.
Clean batches optimize reconstruction plus classification; mixed batches
optimize classification of a mixed forward pass against the mixed label, with
one mixing mode drawn uniformly per mini-batch.

Reconstruction loss is the per-example *sum* of squared pixel differences;
classification loss is cross-entropy from logits. Gradients never flow
through the transport solve: the assignment matrix enters the graph as a
constant, so the frozen-assignment gradient is bit-identical to the live one.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import metrics, ot
from .autodiff import Tensor, conv2d, conv_transpose2d
from .mixup import MixMode, PairBatch, aligned_mix, mix_generic, mix_linear, \
    modes_for_layers, sample_lambda, sample_mode


class NumericsError(RuntimeError):
    """Non-finite values appeared in activations, losses, or parameters."""


def _check_finite(name: str, data: np.ndarray):
    if not np.isfinite(data).all():
        raise NumericsError(f"non-finite values in {name}")


@dataclass(frozen=True)
class ModelConfig:
    """Architecture switches for the desk-scale bundle."""

    image_size: int = 16
    image_channels: int = 1
    num_classes: int = 4
    feature_size: int = 4       # spatial side of the stage-1 feature tensor
    feature_channels: int = 32  # c; the latent dimension d equals c
    base_channels: int = 16
    decoder_enabled: bool = True
    dtype: str = "float32"

    def __post_init__(self):
        if self.image_size < self.feature_size or self.image_size % self.feature_size:
            raise ValueError("image_size must be a multiple of feature_size")
        ratio = self.image_size // self.feature_size
        if ratio & (ratio - 1):
            raise ValueError("image_size / feature_size must be a power of two")
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")

    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def latent_dim(self) -> int:
        return self.feature_channels


class Linear:
    def __init__(self, in_dim: int, out_dim: int, rng: np.random.Generator, dtype):
        scale = np.sqrt(2.0 / in_dim)
        self.weight = Tensor((rng.normal(0.0, scale, (in_dim, out_dim))).astype(dtype),
                             requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return x @ self.weight + self.bias


class ConvBlock:
    def __init__(self, in_ch: int, out_ch: int, stride: int,
                 rng: np.random.Generator, dtype, transposed: bool = False):
        self.stride = stride
        self.transposed = transposed
        # stride-2 transposed convs use a 4x4 kernel so sizes double exactly
        k = 4 if (transposed and stride == 2) else 3
        self.padding = 1
        shape = (in_ch, out_ch, k, k) if transposed else (out_ch, in_ch, k, k)
        scale = np.sqrt(2.0 / (in_ch * k * k))
        self.weight = Tensor(rng.normal(0.0, scale, shape).astype(dtype), requires_grad=True)
        self.bias = Tensor(np.zeros(out_ch, dtype=dtype), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        if self.transposed:
            return conv_transpose2d(x, self.weight, self.bias,
                                    stride=self.stride, padding=self.padding)
        return conv2d(x, self.weight, self.bias, stride=self.stride, padding=self.padding)


class ModelBundle:
    """Parameters and topology of the encoder, latent map, decoder, classifier."""

    def __init__(self, config: ModelConfig, seed: int = 0):
        self.config = config
        dtype = config.np_dtype
        rng = np.random.default_rng(seed)

        n_down = int(np.log2(config.image_size // config.feature_size))
        n_blocks = max(3, n_down)
        strides = [2] * n_down + [1] * (n_blocks - n_down)
        channels = [min(config.base_channels * 2 ** i, config.feature_channels)
                    for i in range(n_blocks - 1)] + [config.feature_channels]

        self.encoder_blocks = []
        in_ch = config.image_channels
        for out_ch, stride in zip(channels, strides):
            self.encoder_blocks.append(ConvBlock(in_ch, out_ch, stride, rng, dtype))
            in_ch = out_ch

        flat = config.feature_channels * config.feature_size ** 2
        self.to_latent = Linear(flat, config.latent_dim, rng, dtype)
        self.classifier = Linear(config.latent_dim, config.num_classes, rng, dtype)

        self.from_latent = None
        self.decoder_blocks = []
        if config.decoder_enabled:
            self.from_latent = Linear(config.latent_dim, flat, rng, dtype)
            ins = [config.image_channels] + channels[:-1]
            for in_ch, out_ch, stride in zip(reversed(channels), reversed(ins), reversed(strides)):
                self.decoder_blocks.append(
                    ConvBlock(in_ch, out_ch, stride, rng, dtype, transposed=True))

    # -- parameter access -----------------------------------------------------

    def parameters(self) -> dict[str, Tensor]:
        params: dict[str, Tensor] = {}
        for i, blk in enumerate(self.encoder_blocks):
            params[f"encoder.block{i}.weight"] = blk.weight
            params[f"encoder.block{i}.bias"] = blk.bias
        params["to_latent.weight"] = self.to_latent.weight
        params["to_latent.bias"] = self.to_latent.bias
        params["classifier.weight"] = self.classifier.weight
        params["classifier.bias"] = self.classifier.bias
        if self.from_latent is not None:
            params["decoder.from_latent.weight"] = self.from_latent.weight
            params["decoder.from_latent.bias"] = self.from_latent.bias
            for i, blk in enumerate(self.decoder_blocks):
                params[f"decoder.block{i}.weight"] = blk.weight
                params[f"decoder.block{i}.bias"] = blk.bias
        return params

    def zero_grad(self):
        for p in self.parameters().values():
            p.zero_grad()

    # -- forward passes ---------------------------------------------------------

    def _coerce(self, x) -> Tensor:
        if isinstance(x, Tensor):
            return x
        return Tensor(np.asarray(x, dtype=self.config.np_dtype))

    def features(self, x) -> Tensor:
        """Stage-1 encoder: images (n, c_img, h, w) -> feature tensor (n, c, f, f)."""
        t = self._coerce(x)
        if t.ndim != 4:
            raise ValueError(f"expected a batched image array, got shape {t.shape}")
        for i, blk in enumerate(self.encoder_blocks):
            t = blk(t)
            _check_finite(f"encoder.block{i}", t.data)  # pre-activation: relu masks nan
            t = t.relu()
        return t

    def latent_from_features(self, a: Tensor) -> Tensor:
        """Stage-2 encoder: feature tensor (n, c, f, f) -> latent (n, d)."""
        n = a.shape[0]
        z = self.to_latent(a.reshape(n, -1))
        _check_finite("to_latent", z.data)
        return z

    def latent(self, x) -> Tensor:
        return self.latent_from_features(self.features(x))

    def logits(self, z: Tensor) -> Tensor:
        out = self.classifier(z)
        _check_finite("classifier", out.data)
        return out

    def decode(self, z: Tensor) -> Tensor:
        """Decoder: latent (n, d) -> images (n, c_img, h, w) in (0, 1)."""
        if self.from_latent is None:
            raise RuntimeError("decoder is disabled for this model")
        cfg = self.config
        t = self.from_latent(z).relu()
        t = t.reshape(z.shape[0], cfg.feature_channels, cfg.feature_size, cfg.feature_size)
        last = len(self.decoder_blocks) - 1
        for i, blk in enumerate(self.decoder_blocks):
            t = blk(t)
            _check_finite(f"decoder.block{i}", t.data)
            t = t.sigmoid() if i == last else t.relu()
        return t

    def predict_probabilities(self, images: np.ndarray, batch_size: int = 256) -> np.ndarray:
        """Softmax class probabilities, float64, shape (n, k)."""
        outs = []
        for start in range(0, images.shape[0], batch_size):
            chunk = images[start:start + batch_size]
            logits = self.logits(self.latent(chunk)).data.astype(np.float64)
            shifted = logits - logits.max(axis=1, keepdims=True)
            e = np.exp(shifted)
            outs.append(e / e.sum(axis=1, keepdims=True))
        return np.concatenate(outs, axis=0)


# -- losses ---------------------------------------------------------------------


def reconstruction_loss(x_hat: Tensor, x: np.ndarray) -> Tensor:
    """Per-example sum of squared pixel differences, shape (n,)."""
    diff = x_hat - Tensor(np.asarray(x, dtype=x_hat.data.dtype))
    return (diff * diff).sum(axis=(1, 2, 3))


def classification_loss(logits: Tensor, labels_onehot: np.ndarray) -> Tensor:
    """Per-example cross-entropy -(y * log softmax(logits)).sum, shape (n,)."""
    if logits.shape != labels_onehot.shape:
        raise ValueError(f"logits {logits.shape} vs labels {labels_onehot.shape}")
    logp = logits.log_softmax(axis=1)
    y = np.asarray(labels_onehot, dtype=logp.data.dtype)
    return -((logp * Tensor(y)).sum(axis=1))


def loss_clean(model: ModelBundle, x: np.ndarray, y: np.ndarray) -> Tensor:
    """Reconstruction + classification loss per clean example, shape (n,).

    Without a decoder the reconstruction term is dropped.
    """
    z = model.latent_from_features(model.features(x))
    lc = classification_loss(model.logits(z), y)
    if model.config.decoder_enabled:
        x_hat = model.decode(z)
        return reconstruction_loss(x_hat, x) + lc
    return lc


def loss_mixed(model: ModelBundle, mode: MixMode, lam: float,
               x: np.ndarray, x2: np.ndarray, y: np.ndarray, y2: np.ndarray,
               sinkhorn_cfg: ot.SinkhornConfig,
               plan: np.ndarray | None = None) -> Tensor:
    """Cross-entropy of the mixed forward pass against the mixed label.

    No reconstruction term is applied to mixed examples. The feat-prime mode
    swaps examples and labels together before the base-side feature mix.
    """
    if mode == MixMode.CLEAN:
        raise ValueError("loss_mixed requires a mixing mode")
    if mode == MixMode.FEAT_PRIME:
        x, x2, y, y2 = x2, x, y2, y
        mode = MixMode.FEAT_BASE
    z = mix_generic(mode, lam, x, x2, model, sinkhorn_cfg, plan=plan)
    y_mix = mix_linear(lam, np.asarray(y), np.asarray(y2))
    return classification_loss(model.logits(z), y_mix)


# -- optimizer ---------------------------------------------------------------------


def sgd_update(params: dict[str, Tensor], state: dict[str, np.ndarray],
               lr: float, momentum: float, weight_decay: float):
    """Classical momentum SGD: v <- m*v + g + wd*p, p <- p - lr*v.

    Parameters whose gradient is None (untouched by the current loss) are
    skipped entirely, as is conventional; their momentum also stays put.
    """
    for name, p in params.items():
        g = p.grad
        if g is None:
            continue
        if g.shape != p.data.shape:
            raise ValueError(f"gradient shape mismatch for {name}")
        v = momentum * state[name] + g + weight_decay * p.data
        state[name] = v
        p.data = p.data - lr * v


def schedule_lr(initial: float, decay: float, period: int, epoch: int) -> float:
    """Stepwise schedule: initial * decay ** (epoch // period)."""
    if period < 1:
        raise ValueError("decay period must be >= 1 epoch")
    return initial * decay ** (epoch // period)


@dataclass(frozen=True)
class TrainConfig:
    """Optimization settings (defaults follow the reference training recipe,
    with the schedule scaled down to the 50-epoch desk run)."""

    alpha: float = 2.0
    sinkhorn: ot.SinkhornConfig = field(default_factory=ot.SinkhornConfig)
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_epochs: int = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 128
    epochs: int = 50
    seed: int = 0
    layer_set: tuple[str, ...] = ("x", "A", "z")

    def __post_init__(self):
        if self.batch_size < 2:
            raise ValueError("batch_size must be >= 2: pairing needs a permutation")
        if not 0.0 < self.lr_decay <= 1.0:
            raise ValueError("lr_decay must lie in (0, 1]")
        if self.epochs < 0:
            raise ValueError("epochs must be >= 0")
        modes_for_layers(self.layer_set)  # validates layer names


def init_optimizer_state(model: ModelBundle) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(p.data) for name, p in model.parameters().items()}


def train_step(model: ModelBundle, images: np.ndarray, labels_onehot: np.ndarray,
               cfg: TrainConfig, rng: np.random.Generator,
               state: dict[str, np.ndarray], lr: float) -> tuple[np.ndarray, MixMode]:
    """One optimization step on a mini-batch; returns (per-example losses, mode).

    Draws one mode for the whole batch. Only mixing modes consume the pairing
    permutation and the interpolation factor from `rng`.
    """
    b = images.shape[0]
    if b < 2:
        raise ValueError("mini-batch must hold at least two examples")
    mode = sample_mode(rng, modes_for_layers(cfg.layer_set))
    model.zero_grad()
    if mode == MixMode.CLEAN:
        losses = loss_clean(model, images, labels_onehot)
    else:
        batch = PairBatch(images, labels_onehot, rng.permutation(b))
        lam = sample_lambda(cfg.alpha, rng)
        perm = batch.permutation
        losses = loss_mixed(model, mode, lam, images, images[perm],
                            labels_onehot, labels_onehot[perm], cfg.sinkhorn)
    _check_finite("loss", losses.data)
    losses.mean().backward()
    sgd_update(model.parameters(), state, lr, cfg.momentum, cfg.weight_decay)
    for name, p in model.parameters().items():
        if not np.isfinite(p.data).all():
            raise NumericsError(f"update produced non-finite values in {name} "
                                f"(lr={lr}, mode={mode.value})")
    return losses.data.copy(), mode


@dataclass(frozen=True)
class EpochStats:
    epoch: int
    mode_counts: dict
    mean_loss: float
    test_error: float
    lr: float


def train_model(model: ModelBundle, train_images: np.ndarray, train_labels: np.ndarray,
                test_images: np.ndarray, test_labels: np.ndarray,
                cfg: TrainConfig,
                state: dict[str, np.ndarray] | None = None) -> tuple[list[EpochStats], dict]:
    """Run the full training loop; returns per-epoch stats and optimizer state.

    Deterministic for a fixed (config, seed): a single generator drives the
    epoch shuffles, mode draws, pairings, and interpolation factors in order.
    """
    rng = np.random.default_rng(cfg.seed)
    if state is None:
        state = init_optimizer_state(model)
    k = model.config.num_classes
    onehot = np.eye(k, dtype=model.config.np_dtype)[train_labels]
    n = train_images.shape[0]
    history: list[EpochStats] = []
    for epoch in range(cfg.epochs):
        lr = schedule_lr(cfg.lr, cfg.lr_decay, cfg.lr_decay_epochs, epoch)
        order = rng.permutation(n)
        counts = {m: 0 for m in MixMode}
        loss_sum = 0.0
        loss_n = 0
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            if idx.shape[0] < 2:
                continue  # pairing impossible; skip a trailing singleton
            losses, mode = train_step(model, train_images[idx], onehot[idx],
                                      cfg, rng, state, lr)
            counts[mode] += 1
            loss_sum += float(losses.sum())
            loss_n += losses.shape[0]
        probs = model.predict_probabilities(test_images)
        err = metrics.error_from_probabilities(probs, test_labels)
        history.append(EpochStats(epoch, {m.value: c for m, c in counts.items()},
                                  loss_sum / max(loss_n, 1), err, lr))
    return history, state


# -- decoded interpolation (visualization only) -------------------------------------


INTERP_MODES = ("latent", "aligned_base", "aligned_prime")


def decode_interpolation(model: ModelBundle, x: np.ndarray, x2: np.ndarray,
                         mode: str, lambdas, sinkhorn_cfg: ot.SinkhornConfig | None = None
                         ) -> list[np.ndarray]:
    """Decode the mixed latent of two images over a grid of lambdas.

    `x` and `x2` are single images (c, h, w). Output images never feed any
    loss; this exists to inspect what the latent space has learned.
    """
    if model.from_latent is None:
        raise RuntimeError("decoder is disabled: cannot decode interpolations")
    if mode not in INTERP_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}")
    if sinkhorn_cfg is None:
        sinkhorn_cfg = ot.SinkhornConfig()
    xb = x[None]
    x2b = x2[None]
    a1 = model.features(xb)
    a2 = model.features(x2b)
    shape3 = a1.shape[1:]
    a1s = a1.reshape(shape3)
    a2s = a2.reshape(shape3)
    z1 = model.latent_from_features(a1)
    z2 = model.latent_from_features(a2)
    plan = None
    if mode != "latent":
        af = ot.flatten_features(np.asarray(a1s.data, dtype=np.float64))
        bf = ot.flatten_features(np.asarray(a2s.data, dtype=np.float64))
        plan = ot.sinkhorn(ot.cost_matrix(af, bf), sinkhorn_cfg)
    images = []
    for lam in lambdas:
        if mode == "latent":
            z = mix_linear(lam, z1, z2)
        else:
            side = "base" if mode == "aligned_base" else "prime"
            mixed = aligned_mix(a1s, a2s, lam, sinkhorn_cfg, side=side, plan=plan)
            z = model.latent_from_features(mixed.reshape((1,) + shape3))
        images.append(model.decode(z).data[0].copy())
    return images
