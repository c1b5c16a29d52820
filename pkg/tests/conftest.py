import numpy as np
import pytest


def central_difference(f, array: np.ndarray, coords, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar f() at flat `coords` of `array`.

    Mutates `array` in place through a flat view, so `f` must re-read it on
    every call (it does if it closes over a Tensor whose .data is `array`).
    """
    flat = array.reshape(-1)
    assert flat.base is not None or flat is array, "need a writable view"
    out = []
    for c in coords:
        orig = flat[c]
        flat[c] = orig + step
        up = f()
        flat[c] = orig - step
        down = f()
        flat[c] = orig
        out.append((up - down) / (2.0 * step))
    return np.array(out)


def relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def probe_coords(rng: np.random.Generator, size: int, count: int = 32) -> np.ndarray:
    if size <= count:
        return np.arange(size)
    return rng.choice(size, size=count, replace=False)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
