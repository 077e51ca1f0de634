"""Optimal-transport matching, raw disparity regression and the context adjustment layer."""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import AAUError, ShapeError
from .nn import Conv2d, Module


def augment_scores(scores, dustbin):
    """Append the dustbin score as an extra column and row: (..., w, w) -> (..., w+1, w+1)."""
    scores = ad.astensor(scores)
    *lead, w, w2 = scores.shape
    lead = tuple(lead)
    ones_col = np.ones(lead + (w, 1))
    ones_row = np.ones(lead + (1, w + 1))
    dust = ad.astensor(dustbin)
    top = ad.concat([scores, ad.mul(ones_col, dust)], axis=-1)
    return ad.concat([top, ad.mul(ones_row, dust)], axis=-2)


def log_marginals(w):
    """Log of the (w+1)-vector [1, ..., 1, w] / 2w shared by rows and columns."""
    m = np.ones(w + 1)
    m[-1] = w
    return np.log(m / (2.0 * w))


def sinkhorn_ot(cost, dustbin_cost, iters=10, temperature=1.0):
    """Entropic transport plan over the dustbin-augmented score matrix.

    ``cost`` holds matching scores (higher means better) of shape (w, w) or
    (rows, w, w); ``dustbin_cost`` is the score of matching a pixel to the
    dustbin. Returns T of shape (..., w+1, w+1) scaled so every real pixel
    carries total mass 1 and each dustbin carries mass w.
    """
    cost = ad.astensor(cost)
    if iters < 1:
        raise ValueError("iters must be >= 1")
    if not temperature > 0:
        raise ValueError("temperature must be positive")
    if not np.all(np.isfinite(cost.data)) or not np.all(np.isfinite(ad.astensor(dustbin_cost).data)):
        raise AAUError("non-finite-cost", "score matrix contains NaN or inf")
    if cost.shape[-1] != cost.shape[-2]:
        raise ShapeError("shape-mismatch", f"score matrix must be square per row, got {cost.shape[-2:]}")
    w = cost.shape[-1]
    z = augment_scores(cost, dustbin_cost) * (1.0 / temperature)
    log_mu = log_marginals(w)
    lead = cost.shape[:-2]
    u = ad.astensor(np.zeros(lead + (w + 1,)))
    v = ad.astensor(np.zeros(lead + (w + 1,)))
    for _ in range(iters):
        u = log_mu - ad.logsumexp(z + ad.reshape(v, lead + (1, w + 1)), axis=-1)
        v = log_mu - ad.logsumexp(z + ad.reshape(u, lead + (w + 1, 1)), axis=-2)
    log_t = z + ad.reshape(u, lead + (w + 1, 1)) + ad.reshape(v, lead + (1, w + 1)) + np.log(2.0 * w)
    return ad.exp(log_t)


@dataclass
class RawRegression:
    disparity: ad.Tensor  # pre-clamp, differentiable w.r.t. T
    confidence: ad.Tensor
    occluded: np.ndarray  # bool
    match: np.ndarray  # argmax column per pixel


def raw_regression(T, interp_window=3, occlusion_threshold=0.3):
    """Windowed sub-pixel regression around the best matchable column of each row of T.

    For left pixel i with best column j*, the match position is the
    T-weighted mean of columns within ``interp_window // 2`` of j*, and the
    disparity is ``i - position``. Confidence is the mass inside the window. A
    pixel is occluded when its dustbin mass beats every matchable entry or
    its confidence falls below ``occlusion_threshold``.
    """
    if interp_window < 1 or interp_window % 2 == 0:
        raise AAUError("bad-config", "interp_window must be odd and positive")
    T = ad.astensor(T)
    squeeze = T.ndim == 2
    if squeeze:
        T = ad.reshape(T, (1,) + T.shape)
    rows, w1, _ = T.shape
    w = w1 - 1
    t = T.data
    matchable = t[:, :w, :w]
    if w == 0:
        empty = ad.astensor(np.zeros((rows, 0)))
        return RawRegression(empty, empty, np.zeros((rows, 0), bool), np.zeros((rows, 0), int))
    best = np.argmax(matchable, axis=-1)  # (rows, w)
    r = interp_window // 2
    offs = np.arange(-r, r + 1)
    cols = best[..., None] + offs  # (rows, w, K)
    valid = (cols >= 0) & (cols < w)
    cols_c = np.clip(cols, 0, w - 1)
    ri = np.arange(rows)[:, None, None]
    ii = np.arange(w)[None, :, None]
    vals = ad.getitem(T, (ri, np.broadcast_to(ii, cols.shape), cols_c)) * valid
    mass = ad.tsum(vals, axis=-1)
    moment = ad.tsum(vals * cols_c, axis=-1)
    has_mass = mass.data > 0
    safe = ad.where(has_mass, mass, 1.0)
    position = moment / safe
    disparity = ad.where(has_mass, np.arange(w)[None, :] - position, 0.0)
    dust = t[:, :w, w]
    occ = (dust > matchable.max(axis=-1)) | (mass.data < occlusion_threshold)
    out = RawRegression(disparity, mass, occ, best)
    if squeeze:
        out = RawRegression(ad.getitem(disparity, 0), ad.getitem(mass, 0), occ[0], best[0])
    return out


def bilinear_matrix(n_out, n_in, scale):
    """(n_out, n_in) interpolation matrix with half-pixel centres: src = (dst + 0.5) / scale - 0.5."""
    src = (np.arange(n_out) + 0.5) / scale - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    lo = np.floor(src).astype(int)
    hi = np.minimum(lo + 1, n_in - 1)
    frac = src - lo
    A = np.zeros((n_out, n_in))
    A[np.arange(n_out), lo] += 1.0 - frac
    A[np.arange(n_out), hi] += frac
    return A


def upsample_bilinear(x, out_hw, scale):
    """Upsample an (h, w) map by ``scale`` and crop to ``out_hw`` using separable bilinear weights."""
    x = ad.astensor(x)
    h, w = x.shape
    H, W = out_hw
    A_h = bilinear_matrix(H, h, scale)
    A_w = bilinear_matrix(W, w, scale)
    return ad.matmul(ad.matmul(A_h, x), A_w.T)


def _he_init(conv, rng):
    cout, cin_g, kh, kw = conv.weight.shape
    conv.weight.data[...] = rng.standard_normal(conv.weight.shape) * np.sqrt(2.0 / (cin_g * kh * kw))


class ResBlock(Module):
    def __init__(self, rng, ch):
        self.conv1 = Conv2d(rng, ch, ch, 3, group="context")
        self.conv2 = Conv2d(rng, ch, ch, 3, group="context")
        _he_init(self.conv1, rng)
        _he_init(self.conv2, rng)
        self.conv2.weight.data *= 0.1

    def forward(self, x):
        return ad.relu(x + self.conv2(ad.relu(self.conv1(x))))


class ContextAdjust(Module):
    """Full-resolution refinement guided by the left image.

    Input channels are the upsampled disparity (scaled by 1/16), the
    upsampled raw occlusion (optional) and the left image. The disparity head
    adds a residual to the upsampled disparity and starts at zero, so an
    untrained layer passes the upsampled disparity through unchanged.
    """

    DISP_SCALE = 1.0 / 16.0

    def __init__(self, rng, channels=16, blocks=2, use_occ=True):
        self.use_occ = use_occ
        c_in = 3 + 1 + int(use_occ)
        self.stem = Conv2d(rng, c_in, channels, 3, group="context")
        _he_init(self.stem, rng)
        self.blocks = [ResBlock(rng, channels) for _ in range(blocks)]
        self.disp_head = Conv2d(rng, channels, 1, 3, group="context")
        self.disp_head.zero_init()
        self.occ_head = Conv2d(rng, channels, 1, 3, group="context")

    def forward(self, d_up, occ_up, image):
        """``d_up`` and ``occ_up`` are (H, W); ``image`` is (H, W, 3). Returns (d_final, occ_final)."""
        d_up, image = ad.astensor(d_up), ad.astensor(image)
        H, W = d_up.shape
        if image.shape != (H, W, 3):
            raise ShapeError("shape-mismatch", f"disparity {d_up.shape} vs image {image.shape}")
        chans = [ad.reshape(d_up * self.DISP_SCALE, (1, H, W))]
        if self.use_occ:
            occ_up = ad.astensor(occ_up)
            if occ_up.shape != (H, W):
                raise ShapeError("shape-mismatch", f"occlusion {occ_up.shape} vs disparity {d_up.shape}")
            chans.append(ad.reshape(occ_up, (1, H, W)))
        chans.append(ad.transpose(image, (2, 0, 1)))
        x = ad.relu(self.stem(ad.concat(chans, axis=0)))
        for blk in self.blocks:
            x = blk(x)
        d_final = d_up + ad.reshape(self.disp_head(x), (H, W))
        occ_final = ad.sigmoid(ad.reshape(self.occ_head(x), (H, W)))
        return d_final, occ_final

    def zero_residuals(self):
        self.disp_head.zero_init()


def context_adjust(d_raw, occ_raw, left_image, params, stride):
    """Upsample ``stride * d_raw`` and ``occ_raw`` to the image size and refine them with ``params``."""
    d_raw, left_image = ad.astensor(d_raw), ad.astensor(left_image)
    if left_image.ndim != 3 or d_raw.ndim != 2:
        raise ShapeError("shape-mismatch", f"d_raw {d_raw.shape}, image {left_image.shape}")
    H, W = left_image.shape[:2]
    h, w = d_raw.shape
    if (-(-H // stride), -(-W // stride)) != (h, w):
        raise ShapeError("shape-mismatch", f"d_raw {d_raw.shape} does not tile an image of {H}x{W} at stride {stride}")
    d_up = upsample_bilinear(d_raw * float(stride), (H, W), stride)
    occ_up = upsample_bilinear(ad.astensor(occ_raw), (H, W), stride)
    return params(d_up, occ_up, left_image)


@dataclass
class DisparityResult:
    d_raw: np.ndarray
    occ_raw: np.ndarray
    confidence: np.ndarray
    d_final: np.ndarray
    occ_final: np.ndarray
    occ_mask: np.ndarray

    def validate(self):
        for name in ("occ_raw", "confidence", "occ_final"):
            v = getattr(self, name)
            if v.size and (v.min() < 0 or v.max() > 1):
                raise AAUError("bad-range", f"{name} outside [0, 1]")
        return self
