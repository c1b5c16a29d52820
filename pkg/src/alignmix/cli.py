"""Command-line entry point.

Verbs: gen-synth, train, eval, attack, ood, visualize, sinkhorn-check.
Every command is deterministic under a fixed seed, writes files atomically,
and keeps timestamps out of payloads. ``train`` echoes the effective
configuration into the output directory; re-running from that echo
reproduces the log and checkpoint byte for byte.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

import numpy as np

from . import attacks, checkpoint, config as cfgmod, data, metrics, model as modelmod, ot
from .model import ModelBundle, ModelConfig, TrainConfig, decode_interpolation, train_model

LOG_COLUMNS = ("epoch", "clean", "input", "latent", "feat", "feat_prime",
               "mean_loss", "test_error", "lr")


def _fmt(value) -> str:
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_text(path: str, text: str):
    data.atomic_write_bytes(path, text.encode("utf-8"))


def _write_json(path: str, payload: dict):
    _write_text(path, json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _write_csv(path: str, columns, rows):
    lines = [",".join(columns)]
    lines.extend(",".join(_fmt(v) for v in row) for row in rows)
    _write_text(path, "\n".join(lines) + "\n")


def _load_model(path: str):
    return checkpoint.load_checkpoint(path)


def _check_compatible(bundle: ModelBundle, ds: data.Dataset, path: str):
    c, h, w = ds.image_shape
    mc = bundle.config
    if h != w:
        raise ValueError(f"{path}: only square images are supported, got {h}x{w}")
    if (c, h) != (mc.image_channels, mc.image_size) or ds.num_classes != mc.num_classes:
        raise ValueError(
            f"{path}: dataset ({c}x{h}x{w}, {ds.num_classes} classes) does not match "
            f"checkpoint ({mc.image_channels}x{mc.image_size}x{mc.image_size}, "
            f"{mc.num_classes} classes)")


def _confidences(bundle: ModelBundle, images: np.ndarray) -> np.ndarray:
    return bundle.predict_probabilities(images).max(axis=1)


# -- commands -----------------------------------------------------------------


def cmd_gen_synth(args) -> int:
    train, test = data.generate_shapes(args.classes, args.train_count, args.test_count,
                                       args.image_size, args.seed)
    os.makedirs(args.out, exist_ok=True)
    train_path = os.path.join(args.out, "train.amix")
    test_path = os.path.join(args.out, "test.amix")
    data.save_dataset(train_path, train)
    data.save_dataset(test_path, test)
    print(f"wrote {train_path} ({train.count} images) and {test_path} ({test.count} images)")
    return 0


def _run_config(args) -> cfgmod.RunConfig:
    cfg = cfgmod.load_config(args.config) if args.config else cfgmod.RunConfig()
    overrides = {key: getattr(args, key, None) for key in (
        "train_data", "test_data", "seed", "epochs", "batch_size", "lr",
        "lr_decay", "lr_decay_epochs", "momentum", "weight_decay", "alpha",
        "sinkhorn_epsilon", "sinkhorn_iterations", "sinkhorn_tol", "layer_set",
        "decoder_enabled", "feature_size", "feature_channels", "base_channels",
        "ece_bins", "attack_method", "attack_epsilon", "attack_step_size",
        "attack_steps", "attack_random_start", "ood_threshold")}
    overrides["output_dir"] = getattr(args, "out", None)
    cfg = cfgmod.apply_overrides(cfg, **overrides)
    if not cfg.output_dir:
        cfg = cfgmod.apply_overrides(cfg, output_dir="out")
    return cfg


def cmd_train(args) -> int:
    cfg = _run_config(args)
    if not cfg.train_data or not cfg.test_data:
        raise ValueError("train requires train_data and test_data (config or flags)")
    train_ds = data.load_dataset(cfg.train_data)
    test_ds = data.load_dataset(cfg.test_data)
    if train_ds.image_shape != test_ds.image_shape or train_ds.num_classes != test_ds.num_classes:
        raise ValueError("train and test datasets disagree on shape or classes")
    c, h, w = train_ds.image_shape
    if h != w:
        raise ValueError("only square images are supported")

    model_cfg = ModelConfig(image_size=h, image_channels=c, num_classes=train_ds.num_classes,
                            feature_size=cfg.feature_size, feature_channels=cfg.feature_channels,
                            base_channels=cfg.base_channels, decoder_enabled=cfg.decoder_enabled)
    bundle = ModelBundle(model_cfg, seed=cfg.seed)
    train_cfg = TrainConfig(
        alpha=cfg.alpha,
        sinkhorn=ot.SinkhornConfig(epsilon=cfg.sinkhorn_epsilon,
                                   max_iters=cfg.sinkhorn_iterations,
                                   marginal_tol=cfg.sinkhorn_tol),
        lr=cfg.lr, lr_decay=cfg.lr_decay, lr_decay_epochs=cfg.lr_decay_epochs,
        momentum=cfg.momentum, weight_decay=cfg.weight_decay,
        batch_size=cfg.batch_size, epochs=cfg.epochs, seed=cfg.seed,
        layer_set=cfg.layers())
    history, state = train_model(bundle, train_ds.images, train_ds.labels,
                                 test_ds.images, test_ds.labels, train_cfg)

    os.makedirs(cfg.output_dir, exist_ok=True)
    rows = [(s.epoch, s.mode_counts["clean"], s.mode_counts["input"], s.mode_counts["latent"],
             s.mode_counts["feat"], s.mode_counts["feat_prime"],
             s.mean_loss, s.test_error, s.lr) for s in history]
    _write_csv(os.path.join(cfg.output_dir, "train_log.csv"), LOG_COLUMNS, rows)
    checkpoint.save_checkpoint(os.path.join(cfg.output_dir, "checkpoint.amck"), bundle, state)
    _write_text(os.path.join(cfg.output_dir, "config.txt"), cfgmod.config_text(cfg))
    final = history[-1].test_error if history else float("nan")
    print(f"trained {cfg.epochs} epochs; final test error "
          f"{final if history else 'n/a'}% -> {cfg.output_dir}")
    return 0


def cmd_eval(args) -> int:
    cfg = _run_config(args)
    bundle, _ = _load_model(args.checkpoint)
    ds = data.load_dataset(args.data)
    _check_compatible(bundle, ds, args.data)
    probs = bundle.predict_probabilities(ds.images)
    records = metrics.records_from_probabilities(probs, ds.labels)
    bins = metrics.reliability_bins(records, cfg.ece_bins)
    report = {
        "count": len(records),
        "top1_error": metrics.top1_error(records),
        "ece": metrics.ece(records, cfg.ece_bins),
        "num_bins": cfg.ece_bins,
        "mean_confidence": float(np.mean([r.confidence for r in records])),
    }
    os.makedirs(cfg.output_dir, exist_ok=True)
    _write_json(os.path.join(cfg.output_dir, "metrics.json"), report)
    _write_csv(os.path.join(cfg.output_dir, "reliability.csv"),
               ("bin_lo", "bin_hi", "count", "mean_conf", "accuracy"),
               [(b.lo, b.hi, b.count, b.mean_confidence, b.accuracy) for b in bins])
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_attack(args) -> int:
    cfg = _run_config(args)
    bundle, _ = _load_model(args.checkpoint)
    ds = data.load_dataset(args.data)
    _check_compatible(bundle, ds, args.data)
    labels_onehot = data.one_hot(ds.labels, ds.num_classes, dtype=bundle.config.np_dtype)
    epsilon = cfg.resolved_attack_epsilon()

    clean_error = metrics.error_from_probabilities(
        bundle.predict_probabilities(ds.images), ds.labels)
    if cfg.attack_method == "fgsm":
        adv = attacks.fgsm_attack(bundle, ds.images, labels_onehot, epsilon)
        attack_cfg = {"epsilon": epsilon, "num_steps": 1, "random_start": False,
                      "step_size": epsilon}
    elif cfg.attack_method == "pgd":
        acfg = attacks.AttackConfig(epsilon=epsilon,
                                    step_size=min(cfg.attack_step_size, epsilon),
                                    num_steps=cfg.attack_steps,
                                    random_start=cfg.attack_random_start)
        adv = attacks.pgd_attack(bundle, ds.images, labels_onehot, acfg,
                                 rng=np.random.default_rng([cfg.seed, 17]))
        attack_cfg = {"epsilon": epsilon, "num_steps": acfg.num_steps,
                      "random_start": acfg.random_start, "step_size": acfg.effective_step}
    else:
        raise ValueError(f"unknown attack method {cfg.attack_method!r}")
    robust_error = metrics.error_from_probabilities(
        bundle.predict_probabilities(adv), ds.labels)
    report = {
        "attack": cfg.attack_method,
        **attack_cfg,
        "clean_error": clean_error,
        "robust_error": robust_error,
        "max_perturbation": float(np.abs(adv - ds.images).max()),
        "count": ds.count,
    }
    os.makedirs(cfg.output_dir, exist_ok=True)
    _write_json(os.path.join(cfg.output_dir, "attack.json"), report)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_ood(args) -> int:
    cfg = _run_config(args)
    bundle, _ = _load_model(args.checkpoint)
    id_ds = data.load_dataset(args.id_data)
    _check_compatible(bundle, id_ds, args.id_data)
    if args.ood_data:
        ood_ds = data.load_dataset(args.ood_data)
    elif args.ood_noise == "uniform":
        ood_ds = data.uniform_noise_dataset(id_ds.count, id_ds.image_shape, cfg.seed)
    elif args.ood_noise == "gaussian":
        ood_ds = data.gaussian_noise_dataset(id_ds.count, id_ds.image_shape, cfg.seed)
    else:
        raise ValueError("provide --ood-data or --ood-noise {uniform,gaussian}")
    if ood_ds.image_shape != id_ds.image_shape:
        raise ValueError("ID and OOD datasets disagree on image shape")

    scores = metrics.OODScoreSet(id_scores=_confidences(bundle, id_ds.images),
                                 ood_scores=_confidences(bundle, ood_ds.images))
    report = metrics.ood_metrics(scores, cfg.ood_threshold)
    report.update({"id_count": id_ds.count, "ood_count": ood_ds.count})
    os.makedirs(cfg.output_dir, exist_ok=True)
    _write_json(os.path.join(cfg.output_dir, "ood.json"), report)
    rows = [("id", float(s)) for s in scores.id_scores]
    rows += [("ood", float(s)) for s in scores.ood_scores]
    _write_csv(os.path.join(cfg.output_dir, "ood_scores.csv"), ("set", "score"), rows)
    print(json.dumps(report, sort_keys=True))
    return 0


def _tile_to_rgb(image: np.ndarray) -> np.ndarray:
    """(c, h, w) floats in [0,1] -> (h, w, 3) uint8."""
    c = image.shape[0]
    if c == 1:
        rgb = np.repeat(image, 3, axis=0)
    elif c == 3:
        rgb = image
    else:
        raise ValueError(f"cannot render {c}-channel images as PPM")
    return np.clip(np.round(rgb * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def write_ppm(path: str, tiles: list[np.ndarray]):
    """Write a single-row grid of equally sized tiles as binary PPM (P6)."""
    rgb = np.concatenate([_tile_to_rgb(t) for t in tiles], axis=1)
    h, w, _ = rgb.shape
    data.atomic_write_bytes(path, f"P6\n{w} {h}\n255\n".encode("ascii") + rgb.tobytes())


def cmd_visualize(args) -> int:
    cfg = _run_config(args)
    bundle, _ = _load_model(args.checkpoint)
    ds = data.load_dataset(args.data)
    _check_compatible(bundle, ds, args.data)
    lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    x = ds.images[args.index]
    x2 = ds.images[args.index2]
    decoded = decode_interpolation(
        bundle, x, x2, args.mode, lambdas,
        sinkhorn_cfg=ot.SinkhornConfig(epsilon=cfg.sinkhorn_epsilon,
                                       max_iters=cfg.sinkhorn_iterations,
                                       marginal_tol=cfg.sinkhorn_tol))
    os.makedirs(cfg.output_dir, exist_ok=True)
    out_path = os.path.join(cfg.output_dir, "interpolation.ppm")
    write_ppm(out_path, [x, x2] + decoded)
    print(f"wrote {out_path} ({len(decoded) + 2} tiles)")
    return 0


def cmd_sinkhorn_check(args) -> int:
    if args.r > 16:
        raise ValueError("r must be <= 16 for the diagnostic")
    epsilons = [float(v) for v in args.epsilons.split(",") if v.strip()]
    rng = np.random.default_rng(args.seed)
    rows = []
    for trial in range(args.trials):
        m = rng.random((args.r, args.r))
        oracle = ot.exact_assignment_cost(m) / args.r
        for eps in epsilons:
            cfg = ot.SinkhornConfig(epsilon=eps, max_iters=args.iters, marginal_tol=args.tol)
            p = ot.sinkhorn(m, cfg)
            cost = ot.transport_cost(p, m)
            dev = max(np.abs(p.sum(axis=1) - 1 / args.r).max(),
                      np.abs(p.sum(axis=0) - 1 / args.r).max())
            rows.append((trial, args.r, eps, cost, oracle,
                         abs(cost - oracle) / oracle, float(dev), ot.plan_entropy(p)))
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "sinkhorn_check.csv")
    _write_csv(out_path,
               ("trial", "r", "epsilon", "entropic_cost", "assignment_cost",
                "rel_gap", "marginal_deviation", "entropy"),
               rows)
    print(f"wrote {out_path} ({len(rows)} rows)")
    return 0


# -- argument parsing --------------------------------------------------------------


def _add_common(p: argparse.ArgumentParser):
    p.add_argument("--config", help="key=value configuration file")
    p.add_argument("--seed", type=int, default=None, help="override the run seed")
    p.add_argument("--out", default=None, help="output directory (default: config output_dir, else ./out)")


def _add_bool(p: argparse.ArgumentParser, name: str, dest: str):
    group = p.add_mutually_exclusive_group()
    group.add_argument(f"--{name}", dest=dest, action="store_true", default=None)
    group.add_argument(f"--no-{name}", dest=dest, action="store_false", default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="alignmix",
        description="Train and evaluate the aligned-feature mixup autoencoder-classifier")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-synth", help="generate a synthetic shape dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--train-count", type=int, default=2000)
    p.add_argument("--test-count", type=int, default=400)
    p.add_argument("--image-size", type=int, default=16)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train", help="run the full training loop")
    _add_common(p)
    p.add_argument("--train-data", dest="train_data")
    p.add_argument("--test-data", dest="test_data")
    for flag, typ in (("epochs", int), ("batch-size", int), ("lr", float),
                      ("lr-decay", float), ("lr-decay-epochs", int), ("momentum", float),
                      ("weight-decay", float), ("alpha", float), ("sinkhorn-epsilon", float),
                      ("sinkhorn-iterations", int), ("sinkhorn-tol", float),
                      ("feature-size", int), ("feature-channels", int), ("base-channels", int)):
        p.add_argument(f"--{flag}", dest=flag.replace("-", "_"), type=typ, default=None)
    p.add_argument("--layer-set", dest="layer_set", default=None,
                   help='comma list from {x,A,z}; empty string trains clean-only')
    _add_bool(p, "decoder", "decoder_enabled")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="top-1 error and calibration report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--bins", dest="ece_bins", type=int, default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("attack", help="adversarial robustness report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--method", dest="attack_method", choices=("fgsm", "pgd"), default=None)
    p.add_argument("--epsilon", dest="attack_epsilon", type=float, default=None)
    p.add_argument("--step-size", dest="attack_step_size", type=float, default=None)
    p.add_argument("--steps", dest="attack_steps", type=int, default=None)
    _add_bool(p, "random-start", "attack_random_start")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("ood", help="out-of-distribution detection report")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--id-data", dest="id_data", required=True)
    p.add_argument("--ood-data", dest="ood_data")
    p.add_argument("--ood-noise", dest="ood_noise", choices=("uniform", "gaussian"))
    p.add_argument("--threshold", dest="ood_threshold", type=float, default=None)
    p.set_defaults(func=cmd_ood)

    p = sub.add_parser("visualize", help="decode an interpolation grid to PPM")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--index2", type=int, default=1)
    p.add_argument("--mode", choices=modelmod.INTERP_MODES, default="aligned_base")
    p.add_argument("--lambdas", default="0.0,0.2,0.4,0.6,0.8,1.0")
    p.set_defaults(func=cmd_visualize)

    p = sub.add_parser("sinkhorn-check", help="transport-solver diagnostic CSV")
    p.add_argument("--r", type=int, default=8)
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--epsilons", default="0.001,0.01,0.1,1.0")
    p.add_argument("--iters", type=int, default=2000)
    p.add_argument("--tol", type=float, default=1e-9)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out")
    p.set_defaults(func=cmd_sinkhorn_check)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError, modelmod.NumericsError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
