"""Epipolar cross-attention between the left and right token streams.

Every image row is an independent attention problem: tokens in row r of one
view only ever attend to tokens in row r of the other view.
"""

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .attention import AttentionProjections, attend, merge_heads, split_heads
from .autodiff import Parameter
from .errors import AAUError, ShapeError
from .nn import LayerNorm, Module, trunc_normal

# Rows per chunk when running without a tape; bounds the (rows, heads, w, w) score buffers.
ROW_CHUNK = 16


@dataclass
class CrossState:
    """Token maps of both views, each (rows, w, C)."""

    left: ad.Tensor
    right: ad.Tensor

    @classmethod
    def split(cls, x):
        """(2, rows, w, C) stacked as [left, right] -> CrossState."""
        x = ad.astensor(x)
        if x.shape[0] != 2:
            raise ShapeError("shape-mismatch", f"expected a stacked pair, got leading dim {x.shape[0]}")
        return cls(ad.getitem(x, 0), ad.getitem(x, 1))

    def concat(self):
        return ad.stack([self.left, self.right], axis=0)


def _position_slice(e_p, w):
    """Rows of the offset table covering offsets -(w-1)..(w-1); row r is offset r-(w-1)."""
    n = e_p.shape[0]
    if n % 2 == 0:
        raise AAUError("offset-range", "relative position table must have odd length")
    max_w = (n + 1) // 2
    if w > max_w:
        raise AAUError("offset-range", f"table covers widths up to {max_w}, row has {w} tokens")
    return ad.getitem(e_p, (slice(max_w - w, max_w + w - 1),))


def relative_scores_eq11(q, k, e_p, heads):
    """Data-data + data-position + position-data scores, scaled by 1/sqrt(head dim).

    ``q`` and ``k`` are (..., w, C); ``e_p`` is an offset table (2W-1, C) with
    W >= w whose centre row is offset 0. Entry (h, i, j) of the result is
    ``q_i.k_j + q_i.p[j-i] + p[i-j].k_j`` restricted to head ``h``.
    ``e_p=None`` gives plain scaled dot-product scores.
    """
    q, k = ad.astensor(q), ad.astensor(k)
    w, c = q.shape[-2], q.shape[-1]
    if k.shape[-2] != w:
        raise AAUError("epipolar-mismatch", f"query row has {w} tokens, key row {k.shape[-2]}")
    ch = c // heads
    qh, kh = split_heads(q, heads), split_heads(k, heads)
    scores = ad.matmul(qh, ad.swapaxes(kh, -1, -2))
    if e_p is not None:
        p = _position_slice(ad.astensor(e_p), w)  # (2w-1, C)
        ph = ad.swapaxes(ad.reshape(p, (2 * w - 1, heads, ch)), 0, 1)  # (heads, 2w-1, ch)
        pt = ad.swapaxes(ph, -1, -2)
        data_pos = ad.relative_skew(ad.matmul(qh, pt))
        pos_data = ad.swapaxes(ad.relative_skew(ad.matmul(kh, pt)), -1, -2)
        scores = scores + data_pos + pos_data
    return scores * (1.0 / np.sqrt(ch))


class CrossAttentionLayer(Module):
    """Two chained MSAs: right queries over left, then left queries over the updated right.

    Both MSA calls share one set of projections and one layer norm. ``K_R`` and
    ``V_R`` are projected from the first MSA's output without normalisation.
    """

    def __init__(self, rng, dim, heads, max_w, use_rpe=True):
        self.dim = dim
        self.heads = heads
        self.norm = LayerNorm(dim)
        self.msa = AttentionProjections(rng, dim)
        self.e_p = Parameter(trunc_normal(rng, (2 * max_w - 1, dim))) if use_rpe else None

    def forward(self, x, keep=False):
        """``x`` is (2, rows, w, C) as [left, right].

        Returns (output, info) where info holds the head-averaged left->right
        attention weights and pre-softmax scores (rows, w, w); weights are only
        kept when ``keep`` is set, scores always.
        """
        x = ad.astensor(x)
        rows = x.shape[1]
        if ad.active_tape() is None and rows > ROW_CHUNK:
            outs, weights, scores = [], [], []
            for r0 in range(0, rows, ROW_CHUNK):
                o, info = self._rows(ad.getitem(x, (slice(None), slice(r0, r0 + ROW_CHUNK))), keep)
                outs.append(o)
                scores.append(info["scores"])
                if keep:
                    weights.append(info["weights"])
            out = ad.concat(outs, axis=1)
            info = {"scores": ad.concat(scores, axis=0), "weights": np.concatenate(weights) if keep else None}
            return out, info
        return self._rows(x, keep)

    def _rows(self, x, keep):
        st = CrossState.split(x)
        L, R = st.left, st.right
        if L.shape != R.shape:
            raise AAUError("epipolar-mismatch", f"left {L.shape} vs right {R.shape}")
        if L.shape[-1] != self.dim:
            raise ShapeError("shape-mismatch", f"cross layer expects {self.dim} channels, got {L.shape[-1]}")
        ln_r = self.norm(R)
        ln_l = self.norm(L)
        q_r = self.msa.q(ln_r)
        q_l, k_l, v_l = self.msa.q(ln_l), self.msa.k(ln_l), self.msa.v(ln_l)
        s1 = relative_scores_eq11(q_r, k_l, self.e_p, self.heads)
        r_hat, _ = attend(s1, split_heads(v_l, self.heads))
        r_hat = self.msa.o(merge_heads(r_hat))
        k_r, v_r = self.msa.k(r_hat), self.msa.v(r_hat)
        s2 = relative_scores_eq11(q_l, k_r, self.e_p, self.heads)
        l_hat, w2 = attend(s2, split_heads(v_r, self.heads))
        l_hat = self.msa.o(merge_heads(l_hat))
        out = CrossState(L + l_hat, R + r_hat).concat()
        info = {
            "scores": ad.mean(s2, axis=-3),
            "weights": w2.data.mean(axis=-3) if keep else None,
        }
        return out, info
