"""Hot numeric kernels: conv2d, layer norm and last-axis softmax, forward and backward.

Each kernel has a numba ``@njit`` loop version and a vectorised numpy version.
``AAUSTEREO_BACKEND=numpy`` forces the numpy path; the default is numba when it
imports. Both paths are deterministic; they agree to rounding, not bitwise.
"""

import os

import numpy as np

try:
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    numba = None
    HAVE_NUMBA = False

_requested = os.environ.get("AAUSTEREO_BACKEND", "numba").strip().lower()
if _requested not in ("numba", "numpy"):
    raise ValueError(f"AAUSTEREO_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
BACKEND = "numba" if (_requested == "numba" and HAVE_NUMBA) else "numpy"


def set_backend(name):
    """Switch kernel backend at runtime (benchmarks and cross-backend tests)."""
    global BACKEND
    if name not in ("numba", "numpy"):
        raise ValueError(name)
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not installed")
    BACKEND = name


def get_backend():
    return BACKEND


# ---------------------------------------------------------------------------
# numpy implementations


def _pad_nchw(x, padding):
    if padding == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))


def _patches(xp, kh, kw, stride, ho, wo):
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    return win[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]


def _conv2d_fwd_np(x, w, b, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    xp = _pad_nchw(x, padding)
    p = _patches(xp, kh, kw, stride, ho, wo).reshape(n, groups, cin_g, ho, wo, kh, kw)
    wg = w.reshape(groups, cout // groups, cin_g, kh, kw)
    out = np.einsum("ngchwij,gocij->ngohw", p, wg, optimize=True).reshape(n, cout, ho, wo)
    return out + b[None, :, None, None]


def _conv2d_bwd_np(g, x, w, stride, padding, groups):
    n, cin, h, wd = x.shape
    cout, cin_g, kh, kw = w.shape
    ho, wo = g.shape[2], g.shape[3]
    xp = _pad_nchw(x, padding)
    p = _patches(xp, kh, kw, stride, ho, wo).reshape(n, groups, cin_g, ho, wo, kh, kw)
    gg = g.reshape(n, groups, cout // groups, ho, wo)
    wg = w.reshape(groups, cout // groups, cin_g, kh, kw)
    dw = np.einsum("ngohw,ngchwij->gocij", gg, p, optimize=True).reshape(w.shape)
    dcol = np.einsum("ngohw,gocij->ngchwij", gg, wg, optimize=True).reshape(n, cin, ho, wo, kh, kw)
    dxp = np.zeros_like(xp)
    for ky in range(kh):
        for kx in range(kw):
            dxp[:, :, ky : ky + stride * (ho - 1) + 1 : stride, kx : kx + stride * (wo - 1) + 1 : stride] += dcol[..., ky, kx]
    dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
    return np.ascontiguousarray(dx), dw, g.sum(axis=(0, 2, 3))


def _layer_norm_fwd_np(x2, gamma, beta, eps):
    mu = x2.mean(axis=1, keepdims=True)
    xc = x2 - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    return xhat * gamma + beta, xhat, rstd[:, 0]


def _layer_norm_bwd_np(g2, xhat, rstd, gamma):
    dxhat = g2 * gamma
    m1 = dxhat.mean(axis=1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, (g2 * xhat).sum(axis=0), g2.sum(axis=0)


def _softmax_fwd_np(x2):
    m = x2.max(axis=1, keepdims=True)
    e = np.exp(x2 - m)
    return e / e.sum(axis=1, keepdims=True)


def _softmax_bwd_np(g2, y2):
    s = (g2 * y2).sum(axis=1, keepdims=True)
    return y2 * (g2 - s)


# ---------------------------------------------------------------------------
# numba implementations

if HAVE_NUMBA:
    _jit = numba.njit(cache=True, nogil=True)

    @_jit
    def _conv2d_fwd_nb(xp, w, b, stride, groups, ho, wo):
        n = xp.shape[0]
        cout, cin_g, kh, kw = w.shape
        cout_g = cout // groups
        out = np.empty((n, cout, ho, wo))
        for ni in range(n):
            for co in range(cout):
                c0 = (co // cout_g) * cin_g
                for oy in range(ho):
                    iy = oy * stride
                    for ox in range(wo):
                        ix = ox * stride
                        acc = b[co]
                        for ci in range(cin_g):
                            for ky in range(kh):
                                for kx in range(kw):
                                    acc += xp[ni, c0 + ci, iy + ky, ix + kx] * w[co, ci, ky, kx]
                        out[ni, co, oy, ox] = acc
        return out

    @_jit
    def _conv2d_bwd_nb(g, xp, w, stride, groups):
        n, cout, ho, wo = g.shape
        _, cin_g, kh, kw = w.shape
        cout_g = cout // groups
        dxp = np.zeros(xp.shape)
        dw = np.zeros(w.shape)
        db = np.zeros(cout)
        for ni in range(n):
            for co in range(cout):
                c0 = (co // cout_g) * cin_g
                for oy in range(ho):
                    iy = oy * stride
                    for ox in range(wo):
                        ix = ox * stride
                        go = g[ni, co, oy, ox]
                        if go == 0.0:
                            continue
                        db[co] += go
                        for ci in range(cin_g):
                            for ky in range(kh):
                                for kx in range(kw):
                                    dxp[ni, c0 + ci, iy + ky, ix + kx] += go * w[co, ci, ky, kx]
                                    dw[co, ci, ky, kx] += go * xp[ni, c0 + ci, iy + ky, ix + kx]
        return dxp, dw, db

    @_jit
    def _layer_norm_fwd_nb(x2, gamma, beta, eps):
        rows, d = x2.shape
        y = np.empty_like(x2)
        xhat = np.empty_like(x2)
        rstd = np.empty(rows)
        for r in range(rows):
            mu = 0.0
            for k in range(d):
                mu += x2[r, k]
            mu /= d
            var = 0.0
            for k in range(d):
                t = x2[r, k] - mu
                var += t * t
            var /= d
            s = 1.0 / np.sqrt(var + eps)
            rstd[r] = s
            for k in range(d):
                xh = (x2[r, k] - mu) * s
                xhat[r, k] = xh
                y[r, k] = xh * gamma[k] + beta[k]
        return y, xhat, rstd

    @_jit
    def _layer_norm_bwd_nb(g2, xhat, rstd, gamma):
        rows, d = g2.shape
        dx = np.empty_like(g2)
        dgamma = np.zeros(d)
        dbeta = np.zeros(d)
        for r in range(rows):
            m1 = 0.0
            m2 = 0.0
            for k in range(d):
                dxh = g2[r, k] * gamma[k]
                m1 += dxh
                m2 += dxh * xhat[r, k]
                dgamma[k] += g2[r, k] * xhat[r, k]
                dbeta[k] += g2[r, k]
            m1 /= d
            m2 /= d
            for k in range(d):
                dx[r, k] = (g2[r, k] * gamma[k] - m1 - xhat[r, k] * m2) * rstd[r]
        return dx, dgamma, dbeta

    @_jit
    def _softmax_fwd_nb(x2):
        rows, d = x2.shape
        y = np.empty_like(x2)
        for r in range(rows):
            m = x2[r, 0]
            for k in range(1, d):
                if x2[r, k] > m:
                    m = x2[r, k]
            s = 0.0
            for k in range(d):
                e = np.exp(x2[r, k] - m)
                y[r, k] = e
                s += e
            inv = 1.0 / s
            for k in range(d):
                y[r, k] *= inv
        return y

    @_jit
    def _softmax_bwd_nb(g2, y2):
        rows, d = g2.shape
        dx = np.empty_like(g2)
        for r in range(rows):
            s = 0.0
            for k in range(d):
                s += g2[r, k] * y2[r, k]
            for k in range(d):
                dx[r, k] = y2[r, k] * (g2[r, k] - s)
        return dx


# ---------------------------------------------------------------------------
# dispatch


def conv2d_forward(x, w, b, stride, padding, groups):
    if BACKEND == "numba":
        n, cin, h, wd = x.shape
        _, _, kh, kw = w.shape
        ho = (h + 2 * padding - kh) // stride + 1
        wo = (wd + 2 * padding - kw) // stride + 1
        xp = np.ascontiguousarray(_pad_nchw(x, padding))
        return _conv2d_fwd_nb(xp, np.ascontiguousarray(w), b, stride, groups, ho, wo)
    return _conv2d_fwd_np(x, w, b, stride, padding, groups)


def conv2d_backward(g, x, w, stride, padding, groups):
    """Return (dx, dw, db)."""
    if BACKEND == "numba":
        h, wd = x.shape[2], x.shape[3]
        xp = np.ascontiguousarray(_pad_nchw(x, padding))
        dxp, dw, db = _conv2d_bwd_nb(np.ascontiguousarray(g), xp, np.ascontiguousarray(w), stride, groups)
        dx = dxp[:, :, padding : padding + h, padding : padding + wd] if padding else dxp
        return np.ascontiguousarray(dx), dw, db
    return _conv2d_bwd_np(g, x, w, stride, padding, groups)


def layer_norm_forward(x2, gamma, beta, eps):
    """Rows of ``x2`` normalised; returns (y, xhat, rstd)."""
    if BACKEND == "numba":
        return _layer_norm_fwd_nb(np.ascontiguousarray(x2), gamma, beta, eps)
    return _layer_norm_fwd_np(x2, gamma, beta, eps)


def layer_norm_backward(g2, xhat, rstd, gamma):
    if BACKEND == "numba":
        return _layer_norm_bwd_nb(np.ascontiguousarray(g2), xhat, rstd, gamma)
    return _layer_norm_bwd_np(g2, xhat, rstd, gamma)


def softmax_forward(x2):
    if BACKEND == "numba":
        return _softmax_fwd_nb(np.ascontiguousarray(x2))
    return _softmax_fwd_np(x2)


def softmax_backward(g2, y2):
    if BACKEND == "numba":
        return _softmax_bwd_nb(np.ascontiguousarray(g2), np.ascontiguousarray(y2))
    return _softmax_bwd_np(g2, y2)
