"""Self-attention blocks, patch merging/expanding and the U-shaped two-view backbone."""

from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .attention import AbsolutePosEmbedding, AttentionProjections, RelativeBiasTable, window_attention
from .autodiff import Parameter
from .cross import CrossAttentionLayer
from .errors import AAUError, ConfigError, ShapeError
from .nn import Conv2d, LayerNorm, Linear, Module


class SwinBlock(Module):
    """LN -> (shifted) window attention -> residual -> LN -> MLP -> residual."""

    def __init__(self, rng, dim, heads, window, shift, mlp_ratio=4):
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.norm1 = LayerNorm(dim)
        self.attn = AttentionProjections(rng, dim)
        self.rel = RelativeBiasTable(rng, window, heads)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(rng, dim, dim * mlp_ratio)
        self.fc2 = Linear(rng, dim * mlp_ratio, dim)

    def forward(self, x):
        x = x + window_attention(self.norm1(x), self.window, self.heads, self.attn, self.rel, self.shift)
        return x + self.fc2(ad.gelu(self.fc1(self.norm2(x))))

    def zero_residuals(self):
        self.attn.o.zero_init()
        self.fc2.zero_init()


class RSTB(Module):
    """Residual group: alternating WSA / S-WSA blocks followed by a 3x3 depthwise conv."""

    def __init__(self, rng, dim, heads, window, depth, mlp_ratio=4):
        if depth % 2:
            raise AAUError("bad-depth", f"block count must be even, got {depth}")
        self.blocks = [
            SwinBlock(rng, dim, heads, window, 0 if i % 2 == 0 else window // 2, mlp_ratio) for i in range(depth)
        ]
        self.conv = Conv2d(rng, dim, dim, 3, groups=dim)

    def chain(self, x):
        for blk in self.blocks:
            x = blk(x)
        return x

    def forward(self, x):
        y = self.chain(x)
        y = ad.transpose(y, (0, 3, 1, 2))
        y = ad.transpose(self.conv(y), (0, 2, 3, 1))
        return x + y

    def zero_residuals(self):
        for blk in self.blocks:
            blk.zero_residuals()
        self.conv.zero_init()


def rstb_forward(x, block):
    x = ad.astensor(x)
    squeeze = x.ndim == 3
    if squeeze:
        x = ad.reshape(x, (1,) + x.shape)
    y = block(x)
    return ad.reshape(y, y.shape[1:]) if squeeze else y


@dataclass(frozen=True)
class MergeRecord:
    height: int
    width: int


class PatchMerge(Module):
    """Concatenate each 2x2 neighbourhood (4C channels) and project to 2C."""

    def __init__(self, rng, dim):
        self.proj = Linear(rng, 4 * dim, 2 * dim, bias=False)
        self.dim = dim

    def forward(self, x):
        b, h, w, c = x.shape
        rec = MergeRecord(h, w)
        if h % 2 or w % 2:
            x = ad.pad(x, ((0, 0), (0, h % 2), (0, w % 2), (0, 0)))
        parts = [
            ad.getitem(x, (slice(None), slice(dy, None, 2), slice(dx, None, 2)))
            for dy, dx in ((0, 0), (1, 0), (0, 1), (1, 1))
        ]
        return self.proj(ad.concat(parts, axis=-1)), rec


class PatchExpand(Module):
    """Project C to 2C channels and unfold them into a 2x2 neighbourhood of C/2 channels.

    Channel block k in 0..3 lands at offset (k % 2, k // 2), the inverse of the
    merge ordering.
    """

    def __init__(self, rng, dim):
        self.proj = Linear(rng, dim, 2 * dim, bias=False)
        self.dim = dim

    def forward(self, x, record=None, strip=True):
        b, h, w, c = x.shape
        y = self.proj(x)
        co = c // 2
        y = ad.reshape(y, (b, h, w, 2, 2, co))  # (.., dx, dy, co)
        y = ad.transpose(y, (0, 1, 4, 2, 3, 5))
        y = ad.reshape(y, (b, 2 * h, 2 * w, co))
        if strip:
            if record is None:
                raise AAUError("pad-record-missing", "expand needs the record of its paired merge")
            if (record.height, record.width) != (2 * h, 2 * w):
                y = ad.getitem(y, (slice(None), slice(0, record.height), slice(0, record.width)))
        return y


class TokenEmbed(Module):
    """Non-overlapping s x s patches of the RGB image, linearly projected to C channels."""

    def __init__(self, rng, stride, dim):
        self.stride = stride
        self.proj = Linear(rng, 3 * stride * stride, dim)

    def forward(self, img):
        b, H, W, c = img.shape
        s = self.stride
        ph, pw = (-H) % s, (-W) % s
        if ph or pw:
            img = ad.pad(img, ((0, 0), (0, ph), (0, pw), (0, 0)))
        h, w = (H + ph) // s, (W + pw) // s
        x = ad.reshape(img, (b, h, s, w, s, c))
        x = ad.transpose(x, (0, 1, 3, 2, 4, 5))
        x = ad.reshape(x, (b, h, w, s * s * c))
        return self.proj(x)


class SkipBuffer:
    """Encoder features waiting for their decoder stage; each is consumed exactly once."""

    def __init__(self, scales):
        self.scales = list(scales)
        self._store = {}

    def put(self, scale, x):
        if scale in self.scales:
            self._store[scale] = x

    def take(self, scale):
        if scale not in self.scales:
            return None
        if scale not in self._store:
            raise AAUError("skip-missing", f"no stored skip for scale {scale}")
        return self._store.pop(scale)

    def close(self):
        if self._store:
            raise AAUError("skip-unconsumed", f"skips left over at scales {sorted(self._store)}")

    def __len__(self):
        return len(self._store)


def token_grid(H, W, stride, scale):
    h, w = -(-H // stride), -(-W // stride)
    for _ in range(scale):
        h, w = -(-h // 2), -(-w // 2)
    return h, w


def stage_shapes(cfg, H, W):
    """Expected (h, w, C) of the feature map entering each down-path stage."""
    return [token_grid(H, W, cfg.attention_stride, i) + (2**i * cfg.embed_dim,) for i in range(cfg.num_scales)]


@dataclass
class UNetOutput:
    left: ad.Tensor
    right: ad.Tensor
    scores: ad.Tensor
    attention: list = field(default_factory=list)
    stage_shapes: list = field(default_factory=list)


class UNetBackbone(Module):
    def __init__(self, rng, cfg):
        cfg.validate(for_forward=False)
        self.cfg = cfg
        C, M, n = cfg.embed_dim, cfg.window, cfg.num_scales
        H, W = cfg.max_image_hw
        self.embed = TokenEmbed(rng, cfg.attention_stride, C)
        self.ape = []
        if cfg.use_ape:
            for i in range(n):
                gh, gw = token_grid(H, W, cfg.attention_stride, i)
                self.ape.append(AbsolutePosEmbedding(rng, gh, gw, 2**i * C))
        depth = cfg.swin_blocks_per_rstb
        dims, heads = cfg.dims(), cfg.heads_per_scale
        widths = [token_grid(H, W, cfg.attention_stride, i)[1] for i in range(n)]
        self.rstb_down = [RSTB(rng, dims[i], heads[i], M, depth, cfg.mlp_ratio) for i in range(n)] if depth else []
        self.cross_down = [CrossAttentionLayer(rng, dims[i], heads[i], widths[i], cfg.use_rpe) for i in range(n)]
        self.merge = [PatchMerge(rng, dims[i]) for i in range(n - 1)]
        self.expand = [PatchExpand(rng, dims[i + 1]) for i in range(n - 1)]
        self.rstb_up = [RSTB(rng, dims[i], heads[i], M, depth, cfg.mlp_ratio) for i in range(n)] if depth else []
        self.cross_up = [CrossAttentionLayer(rng, dims[i], heads[i], widths[i], cfg.use_rpe) for i in range(n)]

    @property
    def cross_layers(self):
        """Cross 0 .. Cross 2n-1 in execution order."""
        return list(self.cross_down) + list(reversed(self.cross_up))

    def zero_residuals(self):
        for blk in list(self.rstb_down) + list(self.rstb_up):
            blk.zero_residuals()
        for layer in self.cross_layers:
            layer.msa.o.zero_init()

    def forward(self, left, right, keep_attention=False, hook=None):
        """Run both towers and the interleaved cross-attention layers.

        ``left``/``right`` are standardised (H, W, 3) images. ``hook(index, x_in,
        layer)`` is called before every cross layer if given. Returns a
        :class:`UNetOutput` whose token maps are (H/s, W/s, C).
        """
        cfg = self.cfg
        cfg.validate()
        left, right = ad.astensor(left), ad.astensor(right)
        if left.shape != right.shape:
            raise AAUError("pair-mismatch", f"left {left.shape} vs right {right.shape}")
        if left.ndim != 3 or left.shape[-1] != 3:
            raise ShapeError("shape-mismatch", f"images must be (H, W, 3), got {left.shape}")
        H, W = left.shape[:2]
        deepest = token_grid(H, W, cfg.attention_stride, cfg.num_scales - 1)
        if min(deepest) < cfg.window:
            raise AAUError("too-small-input", f"deepest token grid {deepest} smaller than window {cfg.window}")
        n = cfg.num_scales
        shapes = []
        attention = []
        skips = SkipBuffer(range(1, cfg.skip_count + 1))
        cross_idx = 0

        def check(x, i):
            if x.shape[-1] != 2**i * cfg.embed_dim:
                raise ShapeError("shape-mismatch", f"scale {i} carries {x.shape[-1]} channels, expected {2**i * cfg.embed_dim}")

        def run_cross(layer, x):
            nonlocal cross_idx
            if hook is not None:
                hook(cross_idx, x, layer)
            x, info = layer(x, keep=keep_attention)
            if keep_attention:
                attention.append(info["weights"])
            cross_idx += 1
            return x, info

        x = self.embed(ad.stack([left, right], axis=0))
        records = {}
        for i in range(n):
            if i > 0:
                x, records[i] = self.merge[i - 1](x)
            if self.ape:
                x = self.ape[i](x)
            check(x, i)
            shapes.append(tuple(x.shape[1:]))
            skips.put(i, x)
            x = self.rstb_down[i](x)
            x, info = run_cross(self.cross_down[i], x)
        for i in reversed(range(n)):
            if i < n - 1:
                x = self.expand[i](x, records[i + 1])
            check(x, i)
            if cfg.skip_placement == "before_cross":
                s = skips.take(i)
                if s is not None:
                    x = x + s
            x = self.rstb_up[i](x)
            x, info = run_cross(self.cross_up[i], x)
            if cfg.skip_placement == "after_cross":
                s = skips.take(i)
                if s is not None:
                    x = x + s
        skips.close()
        return UNetOutput(ad.getitem(x, 0), ad.getitem(x, 1), info["scores"], attention, shapes)


def unet_forward(left, right, cfg, params, keep_attention=False):
    """Functional entry point; ``params`` is a :class:`UNetBackbone` built for ``cfg``."""
    if params.cfg is not cfg and params.cfg != cfg:
        raise ConfigError("bad-config", "backbone parameters were built for a different config")
    return params(left, right, keep_attention=keep_attention)
