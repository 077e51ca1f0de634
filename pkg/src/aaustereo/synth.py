"""Random-dot stereograms with exact ground truth, affine misalignment and a reference matcher."""

import numpy as np

from .config import RdsSpec
from .errors import AAUError, ConfigError
from .formats import StereoSample


def check_rds(spec):
    x0, y0, x1, y1 = spec.rect
    if spec.height <= 0 or spec.width <= 0:
        raise ConfigError("bad-config", "image size must be positive")
    if not 0 <= spec.d_background <= spec.d_foreground:
        raise ConfigError("bad-config", "need 0 <= d_background <= d_foreground")
    if spec.d_foreground * 4 >= spec.width:
        raise ConfigError("bad-config", "foreground disparity must stay below width / 4")
    if not (0 <= x0 <= x1 <= spec.width and 0 <= y0 <= y1 <= spec.height):
        raise ConfigError("bad-config", f"rectangle {spec.rect} outside the image")


def rds_disparity(spec):
    d = np.full((spec.height, spec.width), spec.d_background, dtype=np.int64)
    x0, y0, x1, y1 = spec.rect
    d[y0:y1, x0:x1] = spec.d_foreground
    return d


def synth_rds(spec=None):
    """Left = uniform noise; right[y, x - d] = left[y, x] with larger disparities drawn last.

    Right pixels that no left pixel lands on are filled with fresh noise. A
    left pixel is occluded when it leaves the right image or another pixel
    with larger disparity lands on the same right position.
    """
    spec = spec or RdsSpec()
    check_rds(spec)
    rng = np.random.default_rng(spec.seed)
    H, W = spec.height, spec.width
    left = rng.uniform(size=(H, W, 3))
    d = rds_disparity(spec)
    right = np.full((H, W, 3), np.nan)
    owner = np.full((H, W), -1, dtype=np.int64)  # disparity of the pixel visible at each right position
    ys, xs = np.mgrid[0:H, 0:W]
    xr = xs - d
    for level in np.unique(d):
        sel = (d == level) & (xr >= 0)
        right[ys[sel], xr[sel]] = left[sel]
        owner[ys[sel], xr[sel]] = level
    holes = owner < 0
    right[holes] = rng.uniform(size=(int(holes.sum()), 3))
    occ = xr < 0
    vis = ~occ
    occ[vis] = owner[ys[vis], xr[vis]] != d[vis]
    return StereoSample(left, right, d.astype(np.float64), occ, name=f"rds_{spec.seed}")


def apply_affine(image, matrix):
    """Resample ``image`` under the map p_out = A p_in + b with p = (x, y).

    Each output pixel is pulled from A^-1 (p_out - b) by bilinear
    interpolation; samples outside the source read as zero.
    """
    image = np.asarray(image, dtype=np.float64)
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape != (2, 3):
        raise AAUError("bad-affine", f"expected a 2x3 matrix, got {m.shape}")
    A, b = m[:, :2], m[:, 2]
    det = np.linalg.det(A)
    if not np.isfinite(det) or abs(det) < 1e-12:
        raise AAUError("singular-affine", f"determinant {det}")
    Ainv = np.linalg.inv(A)
    H, W = image.shape[:2]
    ys, xs = np.mgrid[0:H, 0:W].astype(np.float64)
    pts = np.stack([xs.ravel() - b[0], ys.ravel() - b[1]])
    sx, sy = Ainv @ pts
    x0 = np.floor(sx).astype(np.int64)
    y0 = np.floor(sy).astype(np.int64)
    fx, fy = sx - x0, sy - y0
    img = image.reshape(H, W, -1)
    out = np.zeros((H * W, img.shape[2]))
    for dy, dx, wgt in ((0, 0, (1 - fx) * (1 - fy)), (0, 1, fx * (1 - fy)), (1, 0, (1 - fx) * fy), (1, 1, fx * fy)):
        yy, xx = y0 + dy, x0 + dx
        ok = (yy >= 0) & (yy < H) & (xx >= 0) & (xx < W) & (wgt > 0)
        out[ok] += wgt[ok, None] * img[yy[ok], xx[ok]]
    return out.reshape(image.shape)


def vertical_shear(width, pixels=1.0):
    """Affine matrix shifting rows by ``pixels`` * x / (width - 1): zero at the left edge, ``pixels`` at the right."""
    return np.array([[1.0, 0.0, 0.0], [pixels / max(width - 1, 1), 1.0, 0.0]])


def warp_matcher(left, right, max_disp, radius=0):
    """Winner-take-all integer disparity from per-pixel absolute differences.

    Costs are summed over colour channels and an optional (2r+1)^2 box. On a
    noise stereogram with integer disparities the true match costs exactly
    zero, so the matcher recovers ground truth wherever the pair is aligned.
    """
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    H, W = left.shape[:2]
    cost = np.full((max_disp + 1, H, W), np.inf)
    for d in range(max_disp + 1):
        c = np.abs(left[:, d:] - right[:, : W - d]).sum(axis=-1)
        if radius:
            c = _box(c, radius)
        cost[d, :, d:] = c
    return np.argmin(cost, axis=0).astype(np.float64)


def _box(a, r):
    k = 2 * r + 1
    p = np.pad(a, r, mode="edge")
    c = p.cumsum(0).cumsum(1)
    c = np.pad(c, ((1, 0), (1, 0)))
    return c[k:, k:] - c[:-k, k:] - c[k:, :-k] + c[:-k, :-k]
