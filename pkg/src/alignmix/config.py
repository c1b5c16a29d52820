"""Plain-text run configuration: key=value files with fail-fast parsing.

Unknown and duplicate keys are errors (they are usually ablation typos).
Relative paths resolve against the config file's directory. The effective
configuration (defaults merged with the file and CLI overrides) can be
echoed back out; re-running from the echo reproduces a run bit-exactly.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace

FGSM_EPSILON = 8.0 / 255.0  # default sup-norm budgets per attack
PGD_EPSILON = 4.0 / 255.0
PGD_STEP = 2.0 / 255.0

_PATH_KEYS = ("train_data", "test_data", "output_dir")


@dataclass(frozen=True)
class RunConfig:
    # data / io
    train_data: str = ""
    test_data: str = ""
    output_dir: str = ""
    seed: int = 0
    # optimization
    epochs: int = 50
    batch_size: int = 128
    lr: float = 0.1
    lr_decay: float = 0.1
    lr_decay_epochs: int = 20
    momentum: float = 0.9
    weight_decay: float = 1e-4
    alpha: float = 2.0
    # alignment
    sinkhorn_epsilon: float = 0.1
    sinkhorn_iterations: int = 100
    sinkhorn_tol: float = 1e-9
    # mixing / architecture
    layer_set: str = "x,A,z"
    decoder_enabled: bool = True
    feature_size: int = 4
    feature_channels: int = 32
    base_channels: int = 16
    # evaluation
    ece_bins: int = 15
    attack_method: str = "fgsm"
    attack_epsilon: float = -1.0  # negative means the per-method default
    attack_step_size: float = PGD_STEP
    attack_steps: int = 7
    attack_random_start: bool = True
    ood_threshold: float = 0.5

    def layers(self) -> tuple[str, ...]:
        if not self.layer_set.strip():
            return ()
        return tuple(part.strip() for part in self.layer_set.split(",") if part.strip())

    def resolved_attack_epsilon(self) -> float:
        if self.attack_epsilon >= 0:
            return self.attack_epsilon
        return PGD_EPSILON if self.attack_method == "pgd" else FGSM_EPSILON


_TYPES = {f.name: f.type for f in fields(RunConfig)}


def _parse_value(key: str, raw: str):
    kind = _TYPES[key]
    raw = raw.strip()
    if kind == "bool":
        low = raw.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ValueError(f"config key {key}: cannot parse boolean from {raw!r}")
    if kind == "int":
        return int(raw)
    if kind == "float":
        return float(raw)
    return raw


def parse_config_text(text: str, base_dir: str = ".") -> RunConfig:
    """Parse key=value lines; '#' starts a comment, blank lines are skipped."""
    values = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.split("#", 1)[0].strip()
        if not stripped:
            continue
        if "=" not in stripped:
            raise ValueError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = stripped.split("=", 1)
        key = key.strip()
        if key not in _TYPES:
            raise ValueError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ValueError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _parse_value(key, raw)
    for key in _PATH_KEYS:
        if values.get(key):
            values[key] = os.path.abspath(os.path.join(base_dir, values[key]))
    return RunConfig(**values)


def load_config(path: str) -> RunConfig:
    with open(path, "r", encoding="utf-8") as f:
        text = f.read()
    return parse_config_text(text, base_dir=os.path.dirname(os.path.abspath(path)))


def apply_overrides(cfg: RunConfig, **overrides) -> RunConfig:
    """Replace fields whose override value is not None (CLI flags)."""
    updates = {k: v for k, v in overrides.items() if v is not None}
    for key in _PATH_KEYS:
        if key in updates:
            updates[key] = os.path.abspath(updates[key])
    return replace(cfg, **updates) if updates else cfg


def config_text(cfg: RunConfig) -> str:
    """Canonical echo of the effective configuration, one key per line."""
    lines = ["# effective configuration"]
    for f in fields(RunConfig):
        value = getattr(cfg, f.name)
        if isinstance(value, bool):
            value = "true" if value else "false"
        elif isinstance(value, float):
            value = repr(value)
        lines.append(f"{f.name}={value}")
    return "\n".join(lines) + "\n"
