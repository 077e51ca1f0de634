"""Invariant groups run by ``aaustereo selftest``.

Each check uses an independent reference (plain loops, plain-domain
arithmetic or finite differences) rather than the code path it guards.
"""

import io
import os
import tempfile
import traceback

import numpy as np

from . import _kernels
from . import autodiff as ad
from .analysis import flops_eq23, measure_window_attention_macs, pca_project
from .attention import AttentionProjections, multi_head_attention, window_partition, window_reverse
from .backbone import PatchExpand, PatchMerge
from .config import ModelConfig, RdsSpec, RunConfig, preset
from .cross import relative_scores_eq11
from .formats import decode_pfm, decode_ppm, encode_pfm, encode_ppm
from .head import raw_regression, sinkhorn_ot
from .losses import loss_be, loss_rr_from_probs, loss_smooth_l1, metrics_epe_3px
from .model import AAUformer, decode_weights, encode_weights
from .optim import grad_check
from .synth import synth_rds


class CheckFailed(AssertionError):
    pass


def expect(cond, name):
    if not cond:
        raise CheckFailed(name)


def _softmax(x):
    e = np.exp(x - x.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def group_gradients():
    rng = np.random.default_rng(0)
    x = ad.Tensor(rng.standard_normal(8))
    v = rng.standard_normal(8)
    err = grad_check(lambda a: ad.tsum(ad.softmax_lastdim(a) * v), [x])
    expect(err < 1e-6, f"softmax-dot gradient (rel err {err:.2e})")
    a = ad.Tensor(rng.standard_normal((2, 5)))
    g = ad.Tensor(1.0 + rng.uniform(size=5))
    b = ad.Tensor(rng.standard_normal(5))
    err = grad_check(lambda a, g, b: ad.tsum(ad.layer_norm(a, g, b) * v[:5]), [a, g, b])
    expect(err < 1e-6, f"layer-norm gradient (rel err {err:.2e})")
    xi = ad.Tensor(rng.standard_normal((1, 2, 5, 5)))
    k = ad.Tensor(rng.standard_normal((2, 1, 3, 3)))
    kb = ad.Tensor(rng.standard_normal(2))
    err = grad_check(lambda xi, k, kb: ad.tsum(ad.conv2d(xi, k, kb, 1, 1, 2) ** 2), [xi, k, kb])
    expect(err < 1e-6, f"grouped conv gradient (rel err {err:.2e})")


def group_kernels():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((2, 4, 7, 6))
    w = rng.standard_normal((4, 2, 3, 3))
    b = rng.standard_normal(4)
    prev = _kernels.get_backend()
    outs = {}
    try:
        for name in ("numpy", "numba"):
            _kernels.set_backend(name)
            outs[name] = (
                _kernels.conv2d_forward(x, w, b, 2, 1, 2),
                _kernels.softmax_forward(x.reshape(-1, 6)),
                _kernels.layer_norm_forward(x.reshape(-1, 6), np.ones(6), np.zeros(6), 1e-5)[0],
            )
    finally:
        _kernels.set_backend(prev)
    for a, c in zip(outs["numpy"], outs["numba"]):
        expect(np.allclose(a, c, atol=1e-12, rtol=1e-12), "numba and numpy kernels agree")


def group_attention():
    rng = np.random.default_rng(2)
    n, m, C, heads = 5, 6, 8, 2
    q, k, v = rng.standard_normal((n, C)), rng.standard_normal((m, C)), rng.standard_normal((m, C))
    out = multi_head_attention(q, k, v, heads).data
    ref = np.zeros((n, C))
    dh = C // heads
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(n):
            s = np.array([q[i, sl] @ k[j, sl] / np.sqrt(dh) for j in range(m)])
            ref[i, sl] = _softmax(s) @ v[:, sl]
    expect(np.abs(out - ref).max() < 1e-10, "multi-head attention matches loop oracle")
    x = rng.standard_normal((2, 9, 11, 3))
    win, grid = window_partition(x, 4)
    expect(np.array_equal(window_reverse(win, grid).data, x), "window partition round trip")
    proj = AttentionProjections(rng, 8)
    y = multi_head_attention(q, q, q, heads, proj=proj).data
    expect(np.all(np.isfinite(y)), "projected attention finite")


def group_cross():
    rng = np.random.default_rng(3)
    w, C, heads = 6, 4, 2
    q, k = rng.standard_normal((w, C)), rng.standard_normal((w, C))
    e_p = rng.standard_normal((2 * 8 - 1, C))
    got = relative_scores_eq11(q, k, e_p, heads).data
    dh = C // heads
    for h in range(heads):
        sl = slice(h * dh, (h + 1) * dh)
        for i in range(w):
            for j in range(w):
                ref = q[i, sl] @ k[j, sl] + q[i, sl] @ e_p[7 + j - i, sl] + e_p[7 + i - j, sl] @ k[j, sl]
                expect(abs(got[h, i, j] - ref / np.sqrt(dh)) < 1e-10, "relative scores match loop oracle")


def group_backbone():
    rng = np.random.default_rng(4)
    x = ad.Tensor(rng.standard_normal((1, 6, 8, 4)))
    y, rec = PatchMerge(rng, 4)(x)
    expect(y.shape == (1, 3, 4, 8), "merge halves space and doubles channels")
    z = PatchExpand(rng, 8)(y, rec)
    expect(z.shape == x.shape, "expand inverts merge shape")
    cfg = preset("tiny")
    model = AAUformer(cfg, seed=0)
    out = model.infer(rng.uniform(size=(16, 32, 3)), rng.uniform(size=(16, 32, 3)))
    expect(out.stage_shapes == [(8, 16, 16), (4, 8, 32)], "stage shapes follow the scale law")


def group_head():
    rng = np.random.default_rng(5)
    w = 4
    S = rng.uniform(-1, 1, (w, w))
    phi = 0.3
    T = sinkhorn_ot(S, phi, iters=30).data
    target = np.r_[np.ones(w), w]
    expect(np.abs(T.sum(1) - target).max() < 1e-6 and np.abs(T.sum(0) - target).max() < 1e-6, "sinkhorn marginals")
    K = np.exp(np.pad(S, ((0, 1), (0, 1)), constant_values=phi))
    a = np.ones(w + 1)
    b = np.ones(w + 1)
    for _ in range(30):
        a = target / (K @ b)
        b = target / (K.T @ a)
    expect(np.abs(a[:, None] * K * b[None] - T).max() < 1e-6, "sinkhorn matches plain-domain oracle")
    onehot = np.zeros((3, 3))
    onehot[1, 0] = 1.0
    onehot[0, 2] = 1.0
    onehot[2, 2] = 1.0
    r = raw_regression(onehot, 3)
    expect(abs(r.disparity.data[1] - 1.0) < 1e-12 and not r.occluded[1], "one-hot regression")
    expect(r.occluded[0], "dustbin row is occluded")


def group_losses():
    expect(abs(loss_rr_from_probs([1.0, 0.5], [0.25]).data - (0.5 * np.log(2) + np.log(4))) < 1e-12, "rr hand value")
    expect(abs(loss_smooth_l1([0.0], [2.0], [True]).data - 1.5) < 1e-12, "smooth-L1 hand value")
    expect(abs(loss_be([1, 0], [0.9, 0.1]).data + np.log(0.9)) < 1e-12, "binary cross-entropy hand value")
    epe, e3 = metrics_epe_3px(np.array([0.0, 0.0, 5.0]), np.zeros(3), np.ones(3, bool))
    expect(abs(epe - 5 / 3) < 1e-12 and abs(e3 - 100 / 3) < 1e-9, "metric hand value")
    _, e3 = metrics_epe_3px(np.full(4, 3.0), np.zeros(4), np.ones(4, bool))
    expect(e3 == 0.0, "3px threshold is strict")


def group_formats():
    rng = np.random.default_rng(6)
    d = rng.standard_normal((5, 7)).astype(np.float32)
    expect(np.array_equal(decode_pfm(encode_pfm(d)), d), "PFM round trip")
    expect(encode_pfm(np.ones((1, 1), np.float32)) == b"Pf\n1 1\n-1.0\n\x00\x00\x80\x3f", "PFM byte layout")
    img = rng.integers(0, 256, (4, 5, 3)).astype(np.uint8)
    expect(np.array_equal(decode_ppm(encode_ppm(img), raw=True), img), "PPM round trip")
    model = AAUformer(preset("tiny"))
    stored = decode_weights(encode_weights(model))
    expect([n for n, _ in stored] == [n for n, _ in model.named_parameters()], "weights file round trip")


def group_synth():
    s = synth_rds(RdsSpec())
    H, W = s.d_gt.shape
    d = s.d_gt.astype(int)
    ys, xs = np.nonzero(~s.occ_gt)
    expect(np.array_equal(s.right[ys, xs - d[ys, xs]], s.left[ys, xs]), "warp reproduces right view")
    x0, y0, x1, y1 = RdsSpec().rect
    band = s.occ_gt[y0:y1, x0 - 6 : x0]
    expect(band.all() and not s.occ_gt[y0:y1, x0:x1].any(), "occlusion band left of the foreground")


def group_analysis():
    rep = flops_eq23(2, 2, 1, 2)
    expect((rep.omega_isa, rep.omega_wsa) == (32, 48), "closed-form complexity")
    h, w, C, M = 8, 12, 8, 4
    expect(measure_window_attention_macs(h, w, C, M, heads=2) == flops_eq23(h, w, C, M).omega_wsa, "MAC counter tie-out")
    rng = np.random.default_rng(7)
    comps, ratios, _ = pca_project(rng.standard_normal((50, 8)), 4)
    expect(np.abs(comps @ comps.T - np.eye(4)).max() < 1e-8, "PCA components orthonormal")


def group_config():
    cfg = RunConfig()
    back = RunConfig.from_dict(cfg.to_dict())
    expect(back.to_dict() == cfg.to_dict(), "run config JSON round trip")
    expect(ModelConfig.from_json(preset("base").to_json()) == preset("base"), "model config round trip")


GROUPS = [
    ("gradients", group_gradients),
    ("kernels", group_kernels),
    ("attention", group_attention),
    ("cross-attention", group_cross),
    ("backbone", group_backbone),
    ("matching-head", group_head),
    ("losses-metrics", group_losses),
    ("formats", group_formats),
    ("stereograms", group_synth),
    ("analysis", group_analysis),
    ("config", group_config),
]


def run_selftest(faults=(), out=None):
    """Run every group; returns (all_passed, [(group, ok, message)])."""
    out = out or io.StringIO()
    ad.FAULTS.clear()
    ad.FAULTS.update(faults)
    results = []
    try:
        for name, fn in GROUPS:
            try:
                fn()
                results.append((name, True, ""))
            except CheckFailed as exc:
                results.append((name, False, str(exc)))
            except Exception as exc:  # a crash is a failure of that group, not of the harness
                results.append((name, False, f"{type(exc).__name__}: {exc}"))
                traceback.print_exc(file=out)
    finally:
        ad.FAULTS.clear()
    return all(ok for _, ok, _ in results), results
