"""Attention cost accounting, PCA of feature maps and the epipolar constraint residual."""

import csv
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionProjections, window_attention
from .errors import AAUError


@dataclass(frozen=True)
class ComplexityReport:
    h: int
    w: int
    C: int
    M: int
    omega_isa: int
    omega_wsa: int

    @property
    def ratio(self):
        return self.omega_isa / self.omega_wsa


def flops_eq23(h, w, C, M):
    """Multiply-accumulate counts of intra-row attention (4hwC^2 + 2hw^2C) and window attention (4hwC^2 + 2M^2hwC)."""
    for name, v in (("h", h), ("w", w), ("C", C), ("M", M)):
        if int(v) != v or v <= 0:
            raise ValueError(f"{name} must be a positive integer")
    h, w, C, M = int(h), int(w), int(C), int(M)
    proj = 4 * h * w * C * C
    return ComplexityReport(h, w, C, M, proj + 2 * h * w * w * C, proj + 2 * M * M * h * w * C)


def measure_window_attention_macs(h, w, C, M, heads=1, shift=0, seed=0):
    """Run one window-attention layer on random data and count its matmul MACs."""
    rng = np.random.default_rng(seed)
    proj = AttentionProjections(rng, C)
    x = rng.standard_normal((h, w, C))
    with ad.no_tape(), ad.MacCounter() as counter:
        window_attention(x, M, heads, proj, None, shift)
    return counter.total


# ---------------------------------------------------------------------------
# PCA


def _power_iteration(A, basis, rng, iters, tol):
    n = A.shape[0]
    v = rng.standard_normal(n)
    for _ in range(2):
        for b in basis:
            v -= (b @ v) * b
    norm = np.linalg.norm(v)
    v = v / norm if norm > 0 else np.eye(n)[len(basis)]
    for _ in range(iters):
        nv = A @ v
        for _ in range(2):
            for b in basis:
                nv -= (b @ nv) * b
        norm = np.linalg.norm(nv)
        if norm <= 1e-300:
            break
        nv /= norm
        if nv @ v < 0:
            nv = -nv
        done = np.linalg.norm(nv - v) < tol
        v = nv
        if done:
            break
    return v, float(v @ A @ v)


def pca_project(features, k, iters=500, tol=1e-12, seed=0):
    """Principal components of ``features`` (n, C) by power iteration with deflation.

    Returns (components (k, C), explained variance ratios (k,), projections (n, k)).
    Ratios are eigenvalues over the total variance, sorted in descending order.
    """
    X = np.asarray(features, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] < 2:
        raise AAUError("bad-k", "need an (n, C) matrix with n > 1")
    n, C = X.shape
    if not 1 <= k <= min(n, C):
        raise AAUError("bad-k", f"k={k} outside 1..{min(n, C)}")
    Xc = X - X.mean(axis=0)
    cov = Xc.T @ Xc / (n - 1)
    total = float(np.trace(cov))
    rng = np.random.default_rng(seed)
    A = cov.copy()
    comps, vals = [], []
    for _ in range(k):
        v, lam = _power_iteration(A, comps, rng, iters, tol)
        comps.append(v)
        vals.append(max(lam, 0.0))
        A = A - lam * np.outer(v, v)
    comps = np.array(comps)
    vals = np.array(vals)
    order = np.argsort(-vals, kind="stable")
    comps, vals = comps[order], vals[order]
    ratios = vals / total if total > 0 else np.zeros(k)
    return comps, ratios, Xc @ comps.T


def pca_row_slice(feature_map, row, k):
    """PCA over the tokens of one row of an (h, w, C) feature map."""
    fm = np.asarray(feature_map)
    if not 0 <= row < fm.shape[0]:
        raise AAUError("bad-row", f"row {row} outside 0..{fm.shape[0] - 1}")
    return pca_project(fm[row], k)


def write_pca_csv(path, ratios, projected):
    """One row per token: index followed by its component values; a trailing block lists ratios."""
    with open(path, "w", newline="") as f:
        out = csv.writer(f)
        k = projected.shape[1]
        out.writerow(["index"] + [f"pc{i}" for i in range(k)])
        for i, row in enumerate(projected):
            out.writerow([i] + [repr(float(x)) for x in row])
        out.writerow([])
        out.writerow(["component", "ratio"])
        for i, r in enumerate(ratios):
            out.writerow([i, repr(float(r))])


# ---------------------------------------------------------------------------
# epipolar geometry


def hat(t):
    """Skew-symmetric matrix with hat(t) @ x == cross(t, x)."""
    tx, ty, tz = np.asarray(t, dtype=np.float64)
    return np.array([[0.0, -tz, ty], [tz, 0.0, -tx], [-ty, tx, 0.0]])


@dataclass
class CameraGeometry:
    K: np.ndarray
    R: np.ndarray
    t: np.ndarray

    def __post_init__(self):
        self.K = np.asarray(self.K, dtype=np.float64)
        self.R = np.asarray(self.R, dtype=np.float64)
        self.t = np.asarray(self.t, dtype=np.float64)
        if np.abs(self.R @ self.R.T - np.eye(3)).max() > 1e-9:
            raise AAUError("bad-rotation", "R is not orthonormal")

    @property
    def t_hat(self):
        return hat(self.t)


def epipolar_residual(p_l, p_r, geom):
    """p_l^T K^-T hat(t) R K^-1 p_r for homogeneous pixel coordinates."""
    K = geom.K
    if abs(np.linalg.det(K)) < 1e-12:
        raise AAUError("singular-intrinsics", "K is not invertible")
    Kinv = np.linalg.inv(K)
    E = Kinv.T @ geom.t_hat @ geom.R @ Kinv
    return float(np.asarray(p_l, dtype=np.float64) @ E @ np.asarray(p_r, dtype=np.float64))
