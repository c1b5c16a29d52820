"""End-to-end command tests on tiny runs: files, schemas, reproducibility."""

import json
import os

import numpy as np
import pytest

from alignmix import config as cfgmod
from alignmix import data, metrics
from alignmix.cli import main

SMALL_TRAIN = ["--epochs", "2", "--batch-size", "16", "--lr", "0.002",
               "--feature-channels", "8", "--base-channels", "4",
               "--sinkhorn-iterations", "50"]


def run(argv):
    code = main(argv)
    assert code == 0, f"command failed: {argv}"


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("ws")
    dsdir = str(root / "data")
    run(["gen-synth", "--classes", "3", "--train-count", "96", "--test-count", "48",
         "--image-size", "16", "--seed", "5", "--out", dsdir])
    train = os.path.join(dsdir, "train.amix")
    test = os.path.join(dsdir, "test.amix")
    outdir = str(root / "run")
    run(["train", "--train-data", train, "--test-data", test, "--seed", "3",
         "--out", outdir] + SMALL_TRAIN)
    return {"root": root, "train": train, "test": test, "out": outdir,
            "checkpoint": os.path.join(outdir, "checkpoint.amck")}


def test_gen_synth_deterministic(tmp_path):
    a = str(tmp_path / "a")
    b = str(tmp_path / "b")
    for out in (a, b):
        run(["gen-synth", "--classes", "4", "--train-count", "20", "--test-count", "10",
             "--image-size", "16", "--seed", "9", "--out", out])
    for name in ("train.amix", "test.amix"):
        assert open(os.path.join(a, name), "rb").read() == \
            open(os.path.join(b, name), "rb").read()


def test_train_outputs_exist(workspace):
    out = workspace["out"]
    assert os.path.exists(os.path.join(out, "train_log.csv"))
    assert os.path.exists(os.path.join(out, "checkpoint.amck"))
    assert os.path.exists(os.path.join(out, "config.txt"))
    lines = open(os.path.join(out, "train_log.csv")).read().splitlines()
    assert lines[0] == "epoch,clean,input,latent,feat,feat_prime,mean_loss,test_error,lr"
    assert len(lines) == 3  # header + 2 epochs


def test_train_zero_epochs(tmp_path, workspace):
    out = str(tmp_path / "zero")
    run(["train", "--train-data", workspace["train"], "--test-data", workspace["test"],
         "--seed", "3", "--out", out, "--epochs", "0", "--feature-channels", "8",
         "--base-channels", "4"])
    lines = open(os.path.join(out, "train_log.csv")).read().splitlines()
    assert len(lines) == 1  # header only
    assert os.path.getsize(os.path.join(out, "checkpoint.amck")) > 0


def test_train_reproducible(tmp_path, workspace):
    outs = []
    for tag in ("r1", "r2"):
        out = str(tmp_path / tag)
        run(["train", "--train-data", workspace["train"], "--test-data", workspace["test"],
             "--seed", "3", "--out", out] + SMALL_TRAIN)
        outs.append(out)
    for name in ("train_log.csv", "checkpoint.amck"):
        a = open(os.path.join(outs[0], name), "rb").read()
        b = open(os.path.join(outs[1], name), "rb").read()
        assert a == b, f"{name} differs between identical runs"


def test_config_echo_round_trip(tmp_path, workspace):
    echo = os.path.join(workspace["out"], "config.txt")
    rerun = str(tmp_path / "rerun")
    run(["train", "--config", echo, "--out", rerun])
    for name in ("train_log.csv", "checkpoint.amck"):
        a = open(os.path.join(workspace["out"], name), "rb").read()
        b = open(os.path.join(rerun, name), "rb").read()
        assert a == b, f"{name} differs when re-running from the echoed config"


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs=1\nlayerset=x\n")
    assert main(["train", "--config", str(bad)]) == 2
    assert "unknown config key" in capsys.readouterr().err


def test_config_parsing_details(tmp_path):
    cfg_file = tmp_path / "run.cfg"
    cfg_file.write_text("# comment\nepochs=7\ntrain_data=rel/train.amix\n"
                        "decoder_enabled=false\nlayer_set=x,z\n")
    cfg = cfgmod.load_config(str(cfg_file))
    assert cfg.epochs == 7
    assert cfg.train_data == str(tmp_path / "rel" / "train.amix")
    assert cfg.decoder_enabled is False
    assert cfg.layers() == ("x", "z")
    with pytest.raises(ValueError, match="duplicate"):
        cfgmod.parse_config_text("epochs=1\nepochs=2\n")


def test_eval_json_and_reliability_csv(tmp_path, workspace):
    out = str(tmp_path / "eval")
    run(["eval", "--checkpoint", workspace["checkpoint"], "--data", workspace["test"],
         "--out", out])
    report = json.loads(open(os.path.join(out, "metrics.json")).read())
    for key in ("top1_error", "ece", "num_bins", "count", "mean_confidence"):
        assert key in report and np.isfinite(report[key])
    # the emitted bins must recompute to the reported ECE
    rows = open(os.path.join(out, "reliability.csv")).read().splitlines()[1:]
    total = report["count"]
    ece = 0.0
    for row in rows:
        _, _, count, conf, acc = row.split(",")
        ece += int(count) / total * abs(float(acc) - float(conf))
    assert ece == pytest.approx(report["ece"], abs=1e-12)


def test_eval_on_train_set_memorization(tmp_path, workspace):
    out = str(tmp_path / "eval_train")
    run(["eval", "--checkpoint", workspace["checkpoint"], "--data", workspace["train"],
         "--out", out])
    report = json.loads(open(os.path.join(out, "metrics.json")).read())
    assert report["count"] == 96


def test_attack_zero_epsilon_keeps_clean_error(tmp_path, workspace):
    out = str(tmp_path / "atk0")
    run(["attack", "--checkpoint", workspace["checkpoint"], "--data", workspace["test"],
         "--method", "fgsm", "--epsilon", "0.0", "--out", out])
    report = json.loads(open(os.path.join(out, "attack.json")).read())
    assert report["robust_error"] == report["clean_error"]
    assert report["max_perturbation"] == 0.0


def test_attack_fgsm_budget(tmp_path, workspace):
    out = str(tmp_path / "atk")
    run(["attack", "--checkpoint", workspace["checkpoint"], "--data", workspace["test"],
         "--method", "fgsm", "--out", out])
    report = json.loads(open(os.path.join(out, "attack.json")).read())
    assert report["epsilon"] == pytest.approx(8 / 255)
    assert report["max_perturbation"] <= 8 / 255 + 1e-7


def test_attack_pgd_defaults(tmp_path, workspace):
    out = str(tmp_path / "pgd")
    run(["attack", "--checkpoint", workspace["checkpoint"], "--data", workspace["test"],
         "--method", "pgd", "--steps", "3", "--out", out])
    report = json.loads(open(os.path.join(out, "attack.json")).read())
    assert report["epsilon"] == pytest.approx(4 / 255)
    assert report["step_size"] == pytest.approx(2 / 255)
    assert report["max_perturbation"] <= 4 / 255 + 1e-7


def test_ood_same_dataset_is_chance(tmp_path, workspace):
    out = str(tmp_path / "ood_same")
    run(["ood", "--checkpoint", workspace["checkpoint"], "--id-data", workspace["test"],
         "--ood-data", workspace["test"], "--out", out])
    report = json.loads(open(os.path.join(out, "ood.json")).read())
    assert report["auroc"] == pytest.approx(0.5, abs=1e-9)
    assert report["threshold"] == 0.5


def test_ood_noise_and_scores_csv(tmp_path, workspace):
    out = str(tmp_path / "ood_noise")
    run(["ood", "--checkpoint", workspace["checkpoint"], "--id-data", workspace["test"],
         "--ood-noise", "uniform", "--seed", "1", "--out", out])
    report = json.loads(open(os.path.join(out, "ood.json")).read())
    assert set(report) >= {"det_acc", "auroc", "aupr_id", "aupr_ood", "threshold"}
    rows = open(os.path.join(out, "ood_scores.csv")).read().splitlines()
    assert rows[0] == "set,score"
    assert len(rows) == 1 + report["id_count"] + report["ood_count"]
    # scores recompute to the same auroc
    id_s = [float(r.split(",")[1]) for r in rows[1:] if r.startswith("id,")]
    ood_s = [float(r.split(",")[1]) for r in rows[1:] if r.startswith("ood,")]
    assert metrics.auroc(np.array(id_s), np.array(ood_s)) == pytest.approx(
        report["auroc"], abs=1e-12)


def test_visualize_ppm_layout(tmp_path, workspace):
    out = str(tmp_path / "viz")
    run(["visualize", "--checkpoint", workspace["checkpoint"], "--data", workspace["test"],
         "--index", "0", "--index2", "1", "--mode", "latent",
         "--lambdas", "0.0,0.2,0.4,0.6,0.8,1.0", "--out", out])
    blob = open(os.path.join(out, "interpolation.ppm"), "rb").read()
    header, rest = blob.split(b"\n", 1)
    assert header == b"P6"
    dims, rest = rest.split(b"\n", 1)
    w, h = map(int, dims.split())
    assert (w, h) == ((6 + 2) * 16, 16)  # two originals + six decodes
    maxval, pixels = rest.split(b"\n", 1)
    assert maxval == b"255"
    assert len(pixels) == w * h * 3


def test_visualize_lambda_one_tile_is_reconstruction(tmp_path, workspace):
    from alignmix.checkpoint import load_checkpoint
    out = str(tmp_path / "viz1")
    run(["visualize", "--checkpoint", workspace["checkpoint"], "--data", workspace["test"],
         "--index", "2", "--index2", "3", "--mode", "aligned_base",
         "--lambdas", "1.0", "--out", out])
    blob = open(os.path.join(out, "interpolation.ppm"), "rb").read()
    pixels = blob.split(b"\n", 3)[3]
    grid = np.frombuffer(pixels, dtype=np.uint8).reshape(16, 3 * 16, 3)
    bundle, _ = load_checkpoint(workspace["checkpoint"])
    ds = data.load_dataset(workspace["test"])
    recon = bundle.decode(bundle.latent(ds.images[2][None])).data[0, 0]
    expected = np.clip(np.round(recon * 255.0), 0, 255).astype(np.uint8)
    np.testing.assert_array_equal(grid[:, 32:48, 0], expected)


def test_sinkhorn_check_csv(tmp_path):
    out = str(tmp_path / "sc")
    run(["sinkhorn-check", "--r", "6", "--trials", "8",
         "--epsilons", "0.001,0.01,0.1,1.0", "--iters", "4000", "--tol", "1e-4",
         "--seed", "2", "--out", out])
    rows = open(os.path.join(out, "sinkhorn_check.csv")).read().splitlines()
    header = rows[0].split(",")
    assert header == ["trial", "r", "epsilon", "entropic_cost", "assignment_cost",
                      "rel_gap", "marginal_deviation", "entropy"]
    parsed = [r.split(",") for r in rows[1:]]
    assert len(parsed) == 8 * 4
    by_trial = {}
    for row in parsed:
        by_trial.setdefault(row[0], []).append((float(row[2]), float(row[7])))
        assert float(row[6]) <= 1e-4  # marginal deviation within the configured tol
    for points in by_trial.values():
        ents = [e for _, e in sorted(points)]
        assert all(ents[i] <= ents[i + 1] + 1e-9 for i in range(len(ents) - 1))
    # small-epsilon rows stay within the oracle window
    gaps = [float(r[5]) for r in parsed if float(r[2]) == 0.001]
    assert sum(g < 0.01 for g in gaps) >= 0.95 * len(gaps)


def test_dataset_shape_mismatch_rejected(tmp_path, workspace, capsys):
    other = str(tmp_path / "other")
    run(["gen-synth", "--classes", "3", "--train-count", "8", "--test-count", "4",
         "--image-size", "32", "--seed", "0", "--out", other])
    assert main(["eval", "--checkpoint", workspace["checkpoint"],
                 "--data", os.path.join(other, "test.amix"),
                 "--out", str(tmp_path / "x")]) == 2
    assert "does not match" in capsys.readouterr().err
