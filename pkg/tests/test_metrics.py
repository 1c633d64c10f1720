import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ckgan import data
from ckgan import metrics as M

RING_C, RING_S = data.mode_centers("ring")
GRID_C, GRID_S = data.mode_centers("grid")


def test_modes_captured_examples():
    assert M.modes_captured(RING_C.copy(), RING_C, RING_S) == 8
    assert M.modes_captured(np.tile(GRID_C[3], (10, 1)), GRID_C, GRID_S) == 1
    # 1.5 std radially outward from every ring center
    off = RING_C * (1 + 1.5 * RING_S[0])
    assert M.modes_captured(off, RING_C, RING_S) == 0


def test_hq_examples():
    assert M.high_quality_percent(RING_C, RING_C, RING_S) == 100.0
    pts = np.array([RING_C[0], RING_C[1] * (1 + 4 * RING_S[0])])
    assert M.high_quality_percent(pts, RING_C, RING_S) == 50.0
    # radius of an isotropic 2D Gaussian is Rayleigh: P(r <= 3 std) = 1 - exp(-4.5)
    n = 20000
    real = data.sample("ring", n, np.random.default_rng(11))
    p = 1 - np.exp(-4.5)
    tol = 100 * 4 * np.sqrt(p * (1 - p) / n)
    assert M.high_quality_percent(real, RING_C, RING_S) == pytest.approx(100 * p, abs=tol)


def test_smile_hq_uses_the_arc():
    spec = data.mixture("smile")
    real = data.sample("smile", 2000, np.random.default_rng(12))
    assert M.high_quality_percent(real, spec.means, spec.stds, spec.arc) >= 98.0
    # a point on the mouth is high quality only because the arc competes
    mouth = spec.arc.points(np.array([1.0]))
    assert M.high_quality_percent(mouth, spec.means, spec.stds, spec.arc) == 100.0
    assert M.high_quality_percent(mouth, spec.means, spec.stds) == 0.0
    # eyes count as modes, the mouth does not
    assert M.modes_captured(mouth, spec.means, spec.stds) == 0


def test_kl_examples():
    ref = data.sample("ring", 4000, np.random.default_rng(13))
    assert M.kl_modes(ref, RING_C, ref) == pytest.approx(0.0, abs=1e-9)
    uniform_ref = np.repeat(RING_C, 100, axis=0)
    collapsed = np.tile(RING_C[2], (500, 1))
    assert M.kl_modes(collapsed, RING_C, uniform_ref) == pytest.approx(np.log(8), abs=1e-6)


def test_kl_translation_invariant(rng):
    ref = data.sample("grid", 1000, rng)
    gen = ref[rng.permutation(1000)[:300]] + rng.normal(scale=0.3, size=(300, 2))
    shift = np.array([3.5, -1.25])
    a = M.kl_modes(gen, GRID_C, ref)
    b = M.kl_modes(gen + shift, GRID_C + shift, ref + shift)
    assert a == pytest.approx(b, abs=1e-12)


def test_frechet_examples(rng):
    a = rng.normal(size=(500, 2))
    assert M.frechet_2d(a, a) == pytest.approx(0.0, abs=1e-6)
    # exact moments: symmetric point sets with identity covariance
    base = np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0], [0.0, -1.0]]) * np.sqrt(1.5)
    assert np.allclose(np.cov(base, rowvar=False), np.eye(2))
    assert M.frechet_2d(base, base + [3.0, 0.0]) == pytest.approx(9.0, abs=1e-6)
    with pytest.raises(ValueError):
        M.frechet_2d(a[:1], a)


def test_frechet_degenerate_covariance():
    pts = np.zeros((10, 2))
    assert M.frechet_2d(pts, pts + [0.0, 2.0]) == pytest.approx(4.0, abs=1e-6)


def test_empty_inputs_rejected():
    with pytest.raises(ValueError):
        M.modes_captured(np.zeros((0, 2)), RING_C, RING_S)
    with pytest.raises(ValueError):
        M.kl_modes(np.zeros((0, 2)), RING_C, RING_C)


points = arrays(np.float64, st.tuples(st.integers(1, 40), st.just(2)),
                elements=st.floats(-1.5, 1.5, allow_nan=False))


@settings(max_examples=40, deadline=None)
@given(a=points, b=points)
def test_modes_monotone_in_sample_set(a, b):
    assert M.modes_captured(np.vstack([a, b]), RING_C, RING_S) >= M.modes_captured(a, RING_C, RING_S)
    assert M.modes_captured(a, RING_C, RING_S) <= 8


@settings(max_examples=40, deadline=None)
@given(a=points, seed=st.integers(0, 2**16))
def test_hq_permutation_invariant_and_bounded(a, seed):
    perm = np.random.default_rng(seed).permutation(len(a))
    hq = M.high_quality_percent(a, RING_C, RING_S)
    assert hq == M.high_quality_percent(a[perm], RING_C, RING_S)
    assert 0.0 <= hq <= 100.0


@settings(max_examples=40, deadline=None)
@given(a=points, b=points)
def test_kl_and_frechet_non_negative(a, b):
    assert M.kl_modes(a, RING_C, b) >= 0.0
    if len(a) >= 2 and len(b) >= 2:
        assert M.frechet_2d(a, b) >= 0.0


def test_metrics_are_pure(rng):
    x = rng.normal(size=(200, 2))
    spec = data.mixture("ring")
    ref = data.sample("ring", 300, np.random.default_rng(1))
    assert M.evaluate_samples(x, spec, ref) == M.evaluate_samples(x.copy(), spec, ref)


def test_report_row_layout():
    r = M.MetricsReport(5, 3, 50.0, 0.1, 1.0, -1.0, np.arange(6) / 15, 2.5)
    row = r.row()
    assert len(row) == 13 and row[0] == 5 and row[-1] == 2.5
