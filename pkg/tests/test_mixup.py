"""Mixing operators: exact identities, sampling statistics, aligned mixes."""

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.stats import kstest

from alignmix import ot
from alignmix.autodiff import Tensor
from alignmix.mixup import (MixMode, MODE_ORDER, PairBatch, aligned_mix, mix_linear,
                            modes_for_layers, sample_lambda, sample_mode)

TIGHT = ot.SinkhornConfig(epsilon=1e-3, max_iters=4000, marginal_tol=1e-9)


# -- interpolation factor -----------------------------------------------------


def test_lambda_mean_at_default_alpha():
    gen = np.random.default_rng(7)
    draws = np.array([sample_lambda(2.0, gen) for _ in range(100_000)])
    assert abs(draws.mean() - 0.5) < 0.01
    assert draws.min() >= 0.0 and draws.max() <= 1.0


def test_lambda_uniform_at_alpha_one():
    gen = np.random.default_rng(11)
    draws = np.array([sample_lambda(1.0, gen) for _ in range(100_000)])
    assert kstest(draws, "uniform").statistic < 0.02


def test_lambda_deterministic_and_validated():
    a = [sample_lambda(2.0, np.random.default_rng(3)) for _ in range(5)]
    b = [sample_lambda(2.0, np.random.default_rng(3)) for _ in range(5)]
    assert a == b
    with pytest.raises(ValueError):
        sample_lambda(0.0, np.random.default_rng(0))
    with pytest.raises(ValueError):
        sample_lambda(-1.0, np.random.default_rng(0))


# -- linear mixing ---------------------------------------------------------------


def test_mix_endpoints_exact(rng):
    u = rng.standard_normal((5, 4))
    v = rng.standard_normal((5, 4))
    assert np.array_equal(mix_linear(1.0, u, v), u)
    assert np.array_equal(mix_linear(0.0, u, v), v)


def test_mix_self_exact(rng):
    for _ in range(1000):
        lam = rng.random()
        u = rng.standard_normal(8) * np.exp(rng.uniform(-6, 6))
        assert np.array_equal(mix_linear(lam, u, u), u)


def test_mix_label_hand_case():
    out = mix_linear(0.3, np.array([1.0, 0.0]), np.array([0.0, 1.0]))
    np.testing.assert_allclose(out, [0.3, 0.7], rtol=0, atol=1e-15)


def test_mixed_labels_stay_on_simplex(rng):
    k = 6
    eye = np.eye(k)
    for _ in range(200):
        lam = rng.random()
        y = eye[rng.integers(k)]
        y2 = eye[rng.integers(k)]
        mixed = mix_linear(lam, y, y2)
        assert (mixed >= 0).all()
        assert abs(mixed.sum() - 1.0) < 1e-12


def test_mix_validation(rng):
    u = rng.standard_normal(3)
    with pytest.raises(ValueError):
        mix_linear(1.5, u, u)
    with pytest.raises(ValueError):
        mix_linear(0.5, u, rng.standard_normal(4))


def test_mix_on_tensors_matches_arrays(rng):
    u = rng.standard_normal((3, 3))
    v = rng.standard_normal((3, 3))
    out_t = mix_linear(0.37, Tensor(u), Tensor(v))
    np.testing.assert_array_equal(out_t.data, mix_linear(0.37, u, v))


# -- mode sampling --------------------------------------------------------------


def test_mode_frequencies_uniform():
    gen = np.random.default_rng(23)
    counts = {m: 0 for m in MODE_ORDER}
    n = 100_000
    for _ in range(n):
        counts[sample_mode(gen)] += 1
    for m in MODE_ORDER:
        assert abs(counts[m] / n - 0.2) < 0.005


def test_mode_sequence_reproducible():
    seq = [sample_mode(np.random.default_rng(5)) for _ in range(1)]
    seq2 = [sample_mode(np.random.default_rng(5)) for _ in range(1)]
    assert seq == seq2
    gen1, gen2 = np.random.default_rng(6), np.random.default_rng(6)
    assert [sample_mode(gen1) for _ in range(50)] == [sample_mode(gen2) for _ in range(50)]


def test_restricted_mode_sets():
    assert modes_for_layers(()) == (MixMode.CLEAN,)
    assert modes_for_layers(("x", "z")) == (MixMode.CLEAN, MixMode.INPUT, MixMode.LATENT)
    assert modes_for_layers(("x", "A", "z")) == MODE_ORDER
    assert modes_for_layers(("A",)) == (MixMode.CLEAN, MixMode.FEAT_BASE, MixMode.FEAT_PRIME)
    with pytest.raises(ValueError):
        modes_for_layers(("q",))


def test_restricted_sampling_renormalizes():
    gen = np.random.default_rng(31)
    allowed = modes_for_layers(("x", "z"))
    counts = {m: 0 for m in allowed}
    n = 60_000
    for _ in range(n):
        counts[sample_mode(gen, allowed)] += 1
    for m in allowed:
        assert abs(counts[m] / n - 1 / 3) < 0.01


def test_pair_batch_validates_bijection(rng):
    images = rng.random((4, 1, 2, 2))
    labels = np.eye(3)[[0, 1, 2, 0]]
    PairBatch(images, labels, np.array([1, 0, 3, 2]))
    with pytest.raises(ValueError):
        PairBatch(images, labels, np.array([0, 0, 1, 2]))
    with pytest.raises(ValueError):
        PairBatch(images, labels[:3], np.arange(4))


# -- aligned mixing -----------------------------------------------------------------


def test_aligned_mix_lambda_one_is_first_tensor(rng):
    a = rng.standard_normal((4, 2, 2))
    b = rng.standard_normal((4, 2, 2))
    out = aligned_mix(a, b, 1.0, TIGHT, side="base")
    np.testing.assert_array_equal(out, a)


def test_aligned_mix_constant_second(rng):
    a = rng.standard_normal((3, 2, 2))
    v = np.array([0.5, -1.0, 2.0])
    b = np.broadcast_to(v[:, None, None], (3, 2, 2)).copy()
    lam = 0.3
    out = aligned_mix(a, b, lam, ot.SinkhornConfig(), side="base")
    np.testing.assert_allclose(out, lam * a + (1 - lam) * b, atol=1e-9)


def _assignment_gap(m: np.ndarray) -> float:
    """Cost gap between the best and second-best permutation (enumerated)."""
    from itertools import permutations
    costs = sorted(sum(m[i, p[i]] for i in range(m.shape[0]))
                   for p in permutations(range(m.shape[0])))
    return costs[1] - costs[0]


def test_aligned_mix_matches_hungarian_permutation(rng):
    # Feature scale keeps costs O(1): the eps=1e-3 solve then identifies the
    # optimal permutation whenever it is unique by a clear cost margin.
    checked = 0
    while checked < 10:
        a = 0.4 * rng.standard_normal((4, 2, 2))
        b = 0.4 * rng.standard_normal((4, 2, 2))
        am = ot.flatten_features(a)
        bm = ot.flatten_features(b)
        m = ot.cost_matrix(am, bm)
        if _assignment_gap(m) < 0.05:
            continue  # near-tied optimum: the entropic plan blends permutations
        rows, cols = linear_sum_assignment(m)
        expected = mix_linear(0.5, am, bm[:, cols])
        out = ot.flatten_features(aligned_mix(a, b, 0.5, TIGHT, side="base"))
        assert np.abs(out - expected).max() < 1e-3
        checked += 1


def test_aligned_mix_sides_differ(rng):
    a = rng.standard_normal((5, 3, 3))
    b = rng.standard_normal((5, 3, 3))
    base = aligned_mix(a, b, 0.5, ot.SinkhornConfig(), side="base")
    prime = aligned_mix(a, b, 0.5, ot.SinkhornConfig(), side="prime")
    assert np.abs(base - prime).max() > 0.0


def test_aligned_mix_prime_formula(rng):
    a = rng.standard_normal((4, 2, 2))
    b = rng.standard_normal((4, 2, 2))
    am = ot.flatten_features(a)
    bm = ot.flatten_features(b)
    plan = ot.sinkhorn(ot.cost_matrix(am, bm), ot.SinkhornConfig())
    r = ot.assignment(plan)
    lam = 0.25
    out = aligned_mix(a, b, lam, ot.SinkhornConfig(), side="prime", plan=plan)
    np.testing.assert_allclose(ot.flatten_features(out), mix_linear(lam, bm, am @ r),
                               atol=1e-12)


def test_aligned_mix_tensor_path_matches_arrays(rng):
    a = rng.standard_normal((4, 2, 2))
    b = rng.standard_normal((4, 2, 2))
    expected = aligned_mix(a, b, 0.4, ot.SinkhornConfig(), side="base")
    out = aligned_mix(Tensor(a), Tensor(b), 0.4, ot.SinkhornConfig(), side="base")
    np.testing.assert_array_equal(out.data, expected)


def test_aligned_mix_batched(rng):
    a = rng.standard_normal((3, 4, 2, 2))
    b = rng.standard_normal((3, 4, 2, 2))
    out = aligned_mix(a, b, 0.6, ot.SinkhornConfig(), side="base")
    for i in range(3):
        single = aligned_mix(a[i], b[i], 0.6, ot.SinkhornConfig(), side="base")
        np.testing.assert_allclose(out[i], single, atol=1e-12)


def test_aligned_mix_gradient_flows_to_features_not_plan(rng):
    a = Tensor(rng.standard_normal((4, 2, 2)), requires_grad=True)
    b = Tensor(rng.standard_normal((4, 2, 2)), requires_grad=True)
    out = aligned_mix(a, b, 0.5, ot.SinkhornConfig(), side="base")
    out.sum().backward()
    assert a.grad is not None and b.grad is not None
    assert np.isfinite(a.grad).all() and np.isfinite(b.grad).all()


def test_aligned_mix_validation(rng):
    a = rng.standard_normal((4, 2, 2))
    with pytest.raises(ValueError):
        aligned_mix(a, rng.standard_normal((4, 2, 3)), 0.5, ot.SinkhornConfig())
    with pytest.raises(ValueError):
        aligned_mix(a, a, 0.5, ot.SinkhornConfig(), side="other")
