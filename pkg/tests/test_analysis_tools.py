import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from aaustereo.analysis import (
    CameraGeometry,
    epipolar_residual,
    flops_eq23,
    hat,
    measure_window_attention_macs,
    pca_project,
    pca_row_slice,
    write_pca_csv,
)
from aaustereo.errors import AAUError


# -- complexity ------------------------------------------------------------------------------


def test_flops_smallest_example():
    r = flops_eq23(2, 2, 1, 2)
    assert (r.omega_isa, r.omega_wsa) == (32, 48)
    assert r.ratio == pytest.approx(32 / 48)


@given(h=st.integers(1, 50), M=st.integers(1, 8), C=st.integers(1, 64))
def test_row_length_m_squared_equalises_costs(h, M, C):
    r = flops_eq23(h, M * M, C, M)
    assert r.omega_isa == r.omega_wsa


def test_full_resolution_second_term():
    r = flops_eq23(180, 320, 48, 7)
    assert r.omega_wsa - 4 * 180 * 320 * 48 * 48 == 2 * 49 * 180 * 320 * 48
    assert isinstance(r.omega_wsa, int)


def test_flops_rejects_non_positive():
    with pytest.raises(ValueError):
        flops_eq23(0, 2, 1, 1)


@pytest.mark.parametrize("h,w,C,M,heads,shift", [(8, 8, 4, 4, 1, 0), (14, 21, 6, 7, 2, 3), (6, 12, 8, 3, 4, 1)])
def test_mac_counter_ties_out(h, w, C, M, heads, shift):
    assert measure_window_attention_macs(h, w, C, M, heads, shift) == flops_eq23(h, w, C, M).omega_wsa


# -- PCA -----------------------------------------------------------------------------------


def test_rank_one_data(rng):
    v = rng.standard_normal(6)
    X = rng.standard_normal((40, 1)) * v
    _, ratios, _ = pca_project(X, 2)
    assert ratios[0] == pytest.approx(1.0, abs=1e-12)
    assert ratios[1] == pytest.approx(0.0, abs=1e-12)


def test_isotropic_gaussian_splits_evenly():
    X = np.random.default_rng(42).standard_normal((10_000, 2))
    _, ratios, _ = pca_project(X, 2)
    assert np.all(np.abs(ratios - 0.5) < 0.03)
    assert ratios.sum() == pytest.approx(1.0, abs=1e-9)


def test_components_are_orthonormal(rng):
    comps, ratios, proj = pca_project(rng.standard_normal((50, 8)), 8)
    G = comps @ comps.T
    assert np.abs(G - np.eye(8)).max() < 1e-8
    assert np.all(np.diff(ratios) <= 1e-15) and ratios.sum() <= 1 + 1e-9
    assert proj.shape == (50, 8)


def test_matches_eigendecomposition(rng):
    X = rng.standard_normal((60, 5)) @ np.diag([5.0, 3.0, 2.0, 1.0, 0.5])
    _, ratios, _ = pca_project(X, 5)
    cov = np.cov(X, rowvar=False)
    ev = np.sort(np.linalg.eigvalsh(cov))[::-1]
    assert np.allclose(ratios, ev / ev.sum(), atol=1e-8)


@pytest.mark.parametrize("seed", range(3))
def test_ratios_invariant_to_rotation(seed):
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((80, 6)) * np.array([4.0, 3.0, 2.0, 1.5, 1.0, 0.5])
    Q, _ = np.linalg.qr(rng.standard_normal((6, 6)))
    _, a, _ = pca_project(X, 4)
    _, b, _ = pca_project(X @ Q, 4)
    assert np.abs(a - b).max() < 1e-8


def test_bad_k(rng):
    X = rng.standard_normal((5, 3))
    for k in (0, 4):
        with pytest.raises(AAUError) as e:
            pca_project(X, k)
        assert e.value.code == "bad-k"


def test_row_slice_and_csv(tmp_path, rng):
    fm = rng.standard_normal((4, 10, 6))
    comps, ratios, proj = pca_row_slice(fm, 2, 3)
    assert proj.shape == (10, 3)
    assert np.allclose(ratios, pca_project(fm[2], 3)[1])
    with pytest.raises(AAUError):
        pca_row_slice(fm, 4, 3)
    p = tmp_path / "pca.csv"
    write_pca_csv(p, ratios, proj)
    rows = list(csv.reader(open(p)))
    assert rows[0] == ["index", "pc0", "pc1", "pc2"] and len(rows) == 1 + 10 + 1 + 1 + 3
    assert float(rows[-1][1]) == ratios[-1]


# -- epipolar residual ------------------------------------------------------------------------


def rectified(f=500.0, cx=320.0, cy=240.0, tx=0.1):
    K = np.array([[f, 0, cx], [0, f, cy], [0, 0, 1.0]])
    return CameraGeometry(K, np.eye(3), np.array([tx, 0.0, 0.0]))


def test_same_row_gives_zero():
    g = rectified()
    assert epipolar_residual([100.0, 50.0, 1.0], [80.0, 50.0, 1.0], g) == pytest.approx(0.0, abs=1e-15)


def test_rows_apart_give_nonzero():
    g = rectified()
    assert abs(epipolar_residual([100.0, 50.0, 1.0], [80.0, 55.0, 1.0], g)) > 0


def test_zero_translation(rng):
    g = CameraGeometry(rectified().K, np.eye(3), np.zeros(3))
    for _ in range(10):
        p, q = np.r_[rng.uniform(0, 600, 2), 1], np.r_[rng.uniform(0, 600, 2), 1]
        assert epipolar_residual(p, q, g) == 0.0


@given(lam=st.floats(-100, 100, allow_nan=False), seed=st.integers(0, 1000))
def test_residual_is_bilinear(lam, seed):
    rng = np.random.default_rng(seed)
    g = rectified(tx=0.3)
    p, q = np.r_[rng.uniform(0, 600, 2), 1], np.r_[rng.uniform(0, 600, 2), 1]
    base = epipolar_residual(p, q, g)
    assert epipolar_residual(lam * p, q, g) == pytest.approx(lam * base, rel=1e-9, abs=1e-12)


def test_hat_is_cross_product(rng):
    t, x = rng.standard_normal((2, 3))
    H = hat(t)
    assert np.array_equal(H, -H.T)
    assert np.allclose(H @ x, np.cross(t, x), atol=1e-15)
    assert np.allclose(H @ t, 0.0, atol=1e-15)


def test_geometry_errors():
    with pytest.raises(AAUError) as e:
        CameraGeometry(np.eye(3), np.diag([1.0, 1.0, 2.0]), np.zeros(3))
    assert e.value.code == "bad-rotation"
    g = CameraGeometry(np.zeros((3, 3)), np.eye(3), np.ones(3))
    with pytest.raises(AAUError) as e:
        epipolar_residual([0, 0, 1], [0, 0, 1], g)
    assert e.value.code == "singular-intrinsics"
