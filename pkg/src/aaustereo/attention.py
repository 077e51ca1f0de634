"""Window partitioning, cyclic shifts, multi-head attention and position embeddings."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .errors import AAUError, ShapeError
from .nn import Linear, Module, trunc_normal


@dataclass(frozen=True)
class WindowGrid:
    window_size: int
    height: int
    width: int
    padded_h: int
    padded_w: int
    num_windows: int
    pad_bottom: int
    pad_right: int


def make_grid(h, w, M):
    if M <= 0:
        raise AAUError("bad-window", f"window size must be positive, got {M}")
    ph = -(-h // M) * M
    pw = -(-w // M) * M
    return WindowGrid(M, h, w, ph, pw, (ph // M) * (pw // M), ph - h, pw - w)


def window_partition(x, M):
    """Split (h, w, C) or (B, h, w, C) into M x M windows.

    Zero-pads the bottom/right edges up to multiples of ``M``. Windows are
    numbered row-major, and so are the tokens inside each window. Returns
    ``(windows, grid)`` where windows is (num_windows, M*M, C) or
    (B, num_windows, M*M, C).
    """
    x = ad.astensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    b, h, w, c = x.shape
    grid = make_grid(h, w, M)
    if grid.pad_bottom or grid.pad_right:
        x = ad.pad(x, ((0, 0), (0, grid.pad_bottom), (0, grid.pad_right), (0, 0)))
    ny, nx = grid.padded_h // M, grid.padded_w // M
    x = ad.reshape(x, (b, ny, M, nx, M, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (b, ny * nx, M * M, c))
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x, grid


def window_reverse(windows, grid):
    """Inverse of :func:`window_partition`; strips the recorded padding."""
    windows = ad.astensor(windows)
    M = grid.window_size
    squeeze = windows.ndim == 3
    if squeeze:
        windows = ad.reshape(windows, (1,) + windows.shape)
    b, nw, mm, c = windows.shape
    if nw != grid.num_windows or mm != M * M:
        raise AAUError("grid-mismatch", f"windows {windows.shape[1:3]} vs grid ({grid.num_windows}, {M * M})")
    ny, nx = grid.padded_h // M, grid.padded_w // M
    x = ad.reshape(windows, (b, ny, nx, M, M, c))
    x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
    x = ad.reshape(x, (b, grid.padded_h, grid.padded_w, c))
    if grid.pad_bottom or grid.pad_right:
        x = ad.getitem(x, (slice(None), slice(0, grid.height), slice(0, grid.width)))
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


def window_partition_reverse(x, M, direction="partition", grid=None):
    if direction == "partition":
        return window_partition(x, M)
    if direction == "reverse":
        if grid is None or grid.window_size != M:
            raise AAUError("grid-mismatch", "reverse needs the grid produced by partition")
        return window_reverse(x, grid)
    raise ValueError(f"unknown direction {direction!r}")


def cyclic_shift(x, dy, dx):
    """out[..., i, j, :] = x[..., (i + dy) % h, (j + dx) % w, :]."""
    x = ad.astensor(x)
    if dy == 0 and dx == 0:
        return x
    return ad.roll(x, (-dy, -dx), axis=(x.ndim - 3, x.ndim - 2))


# ---------------------------------------------------------------------------
# relative position bias inside windows


def relative_index(dy, dx, M):
    """Row of the bias table for the offset (dy, dx)."""
    if abs(dy) > M - 1 or abs(dx) > M - 1:
        raise AAUError("offset-range", f"offset ({dy}, {dx}) outside window {M}")
    return (dy + M - 1) * (2 * M - 1) + (dx + M - 1)


@lru_cache(maxsize=None)
def relative_index_map(M):
    ys, xs = np.divmod(np.arange(M * M), M)
    dy = ys[:, None] - ys[None, :]
    dx = xs[:, None] - xs[None, :]
    idx = (dy + M - 1) * (2 * M - 1) + (dx + M - 1)
    idx.setflags(write=False)
    return idx


class RelativeBiasTable(Module):
    def __init__(self, rng, M, heads, zero=False):
        self.M = M
        self.heads = heads
        data = np.zeros(((2 * M - 1) ** 2, heads)) if zero else trunc_normal(rng, ((2 * M - 1) ** 2, heads))
        self.table = Parameter(data)

    @property
    def index(self):
        return relative_index_map(self.M)


def relative_bias_lookup(table, M):
    """(heads, M*M, M*M) bias with entry (h, p, q) = table[index(p - q), h]."""
    if table.M != M:
        raise AAUError("offset-range", f"table built for window {table.M}, requested {M}")
    idx = relative_index_map(M)
    b = ad.getitem(table.table, idx)  # (M*M, M*M, heads)
    return ad.transpose(b, (2, 0, 1))


# ---------------------------------------------------------------------------
# attention


def split_heads(x, heads):
    *lead, n, c = x.shape
    x = ad.reshape(x, tuple(lead) + (n, heads, c // heads))
    nd = x.ndim
    return ad.swapaxes(x, nd - 3, nd - 2)


def merge_heads(x):
    *lead, h, n, d = x.shape
    nd = x.ndim
    x = ad.swapaxes(x, nd - 3, nd - 2)
    return ad.reshape(x, tuple(lead) + (n, h * d))


def attend(scores, v_heads, bias=None, mask=None):
    """softmax(scores + bias, with blocked entries at -inf) @ v. Returns (out, weights)."""
    if bias is not None:
        scores = scores + bias
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        full = np.broadcast_to(mask, np.broadcast_shapes(mask.shape, scores.shape))
        if full.all(axis=-1).any():
            raise AAUError("all-masked-row", "a query row has every key masked")
        scores = ad.masked_fill(scores, mask, -np.inf)
    weights = ad.softmax_lastdim(scores)
    return ad.matmul(weights, v_heads), weights


class AttentionProjections(Module):
    """Query/key/value input projections and the output projection of one MSA."""

    def __init__(self, rng, dim, group="default"):
        self.q = Linear(rng, dim, dim, group=group)
        self.k = Linear(rng, dim, dim, group=group)
        self.v = Linear(rng, dim, dim, group=group)
        self.o = Linear(rng, dim, dim, group=group)


def multi_head_attention(q, k, v, heads, bias=None, mask=None, proj=None, return_weights=False):
    """Scaled dot-product attention over (..., n, C) queries and (..., m, C) keys/values.

    With ``proj`` the inputs are first mapped through its q/k/v projections and
    the concatenated heads through its output projection. ``bias`` is added to
    the (..., heads, n, m) scores before the softmax; ``mask`` is boolean with
    True marking blocked pairs.
    """
    q, k, v = ad.astensor(q), ad.astensor(k), ad.astensor(v)
    c = q.shape[-1]
    if c % heads:
        raise ShapeError("shape-mismatch", f"channels {c} not divisible by heads {heads}")
    if proj is not None:
        q, k, v = proj.q(q), proj.k(k), proj.v(v)
    qh, kh, vh = split_heads(q, heads), split_heads(k, heads), split_heads(v, heads)
    scale = 1.0 / np.sqrt(c // heads)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2)) * scale
    out, weights = attend(scores, vh, bias, mask)
    out = merge_heads(out)
    if proj is not None:
        out = proj.o(out)
    return (out, weights) if return_weights else out


# ---------------------------------------------------------------------------
# window attention with shift and padding masks


@lru_cache(maxsize=64)
def window_mask(h, w, M, shift):
    """Blocked-pair mask (num_windows, M*M, M*M) or None when nothing is blocked.

    Pairs are blocked when they come from different regions of the cyclically
    shifted map (wrapped across the border) or when the key is a padding token.
    The diagonal is never blocked so padded queries keep a valid row.
    """
    grid = make_grid(h, w, M)
    ph, pw = grid.padded_h, grid.padded_w
    if shift == 0 and not (grid.pad_bottom or grid.pad_right):
        return None
    valid = np.zeros((ph, pw), dtype=bool)
    valid[:h, :w] = True
    labels = np.zeros((ph, pw), dtype=np.int64)
    if shift:
        valid = np.roll(valid, (-shift, -shift), axis=(0, 1))
        cuts = (slice(0, -M), slice(-M, -shift), slice(-shift, None))
        cnt = 0
        for sy in cuts:
            for sx in cuts:
                labels[sy, sx] = cnt
                cnt += 1
    ny, nx = ph // M, pw // M

    def part(a):
        return a.reshape(ny, M, nx, M).transpose(0, 2, 1, 3).reshape(ny * nx, M * M)

    lw, vw = part(labels), part(valid)
    blocked = (lw[:, :, None] != lw[:, None, :]) | ~vw[:, None, :]
    eye = np.eye(M * M, dtype=bool)
    blocked &= ~eye[None]
    blocked.setflags(write=False)
    return blocked


def window_attention(x, M, heads, proj, rel_table=None, shift=0):
    """(Shifted) window multi-head self-attention over (B, h, w, C) or (h, w, C)."""
    x = ad.astensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    b, h, w, c = x.shape
    grid = make_grid(h, w, M)
    if grid.pad_bottom or grid.pad_right:
        x = ad.pad(x, ((0, 0), (0, grid.pad_bottom), (0, grid.pad_right), (0, 0)))
    if shift:
        x = cyclic_shift(x, shift, shift)
    win, pgrid = window_partition(x, M)  # (B, nW, M*M, C)
    mask = window_mask(h, w, M, shift)
    if mask is not None:
        mask = mask[:, None]  # (nW, 1, M*M, M*M) against (B, nW, heads, M*M, M*M)
    bias = relative_bias_lookup(rel_table, M) if rel_table is not None else None
    out = multi_head_attention(win, win, win, heads, bias=bias, mask=mask, proj=proj)
    x = window_reverse(out, pgrid)
    if shift:
        x = cyclic_shift(x, -shift, -shift)
    if grid.pad_bottom or grid.pad_right:
        x = ad.getitem(x, (slice(None), slice(0, h), slice(0, w)))
    if squeeze:
        x = ad.reshape(x, x.shape[1:])
    return x


class AbsolutePosEmbedding(Module):
    """Learnable absolute position embedding for a token grid, stored per axis.

    The embedding at (i, j) is ``rows[i] + cols[j]``; grids smaller than the
    table use its top-left corner.
    """

    def __init__(self, rng, max_h, max_w, dim):
        self.rows = Parameter(trunc_normal(rng, (max_h, 1, dim)))
        self.cols = Parameter(trunc_normal(rng, (1, max_w, dim)))

    def forward(self, x):
        h, w = x.shape[-3], x.shape[-2]
        if h > self.rows.shape[0] or w > self.cols.shape[1]:
            raise ShapeError("shape-mismatch", f"token grid {h}x{w} exceeds embedding table {self.rows.shape[0]}x{self.cols.shape[1]}")
        r = ad.getitem(self.rows, (slice(0, h),))
        cl = ad.getitem(self.cols, (slice(None), slice(0, w)))
        return x + (r + cl)
