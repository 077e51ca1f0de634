"""The full two-view network: backbone, transport head and context refinement."""

import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter
from .backbone import UNetBackbone
from .errors import AAUError, FormatError, ShapeError
from .head import ContextAdjust, DisparityResult, context_adjust, raw_regression, sinkhorn_ot
from .nn import Module, finalize_names


def standardize_pair(left, right):
    """Scale both images by the pair's joint per-channel mean and standard deviation."""
    left = np.asarray(left, dtype=np.float64)
    right = np.asarray(right, dtype=np.float64)
    if left.shape != right.shape:
        raise AAUError("pair-mismatch", f"left {left.shape} vs right {right.shape}")
    both = np.concatenate([left.reshape(-1, left.shape[-1]), right.reshape(-1, right.shape[-1])])
    mu = both.mean(axis=0)
    sd = both.std(axis=0)
    sd = np.where(sd > 1e-8, sd, 1.0)
    return (left - mu) / sd, (right - mu) / sd


@dataclass
class ModelOutput:
    T: ad.Tensor
    d_raw: ad.Tensor  # token units, before clamping
    confidence: ad.Tensor
    occ_raw: np.ndarray
    d_final: ad.Tensor  # pixels, before clamping
    occ_final: ad.Tensor
    result: DisparityResult
    attention: list = field(default_factory=list)
    stage_shapes: list = field(default_factory=list)


class AAUformer(Module):
    def __init__(self, cfg, seed=0):
        cfg.validate(for_forward=False)
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        self.backbone = UNetBackbone(rng, cfg)
        self.dustbin = Parameter(np.zeros(()))
        self.context = ContextAdjust(rng, cfg.context_channels, cfg.context_blocks, cfg.context_occ_input)
        finalize_names(self)

    def forward(self, left, right, keep_attention=False):
        """``left``/``right`` are (H, W, 3) images with values in [0, 1]."""
        cfg = self.cfg
        s = cfg.attention_stride
        L, R = standardize_pair(left, right)
        feats = self.backbone(L, R, keep_attention=keep_attention)
        T = sinkhorn_ot(feats.scores, self.dustbin, cfg.sinkhorn_iters, cfg.temperature)
        raw = raw_regression(T, cfg.max_interp_window, cfg.occlusion_threshold)
        occ_raw = raw.occluded.astype(np.float64)
        d_final, occ_final = context_adjust(raw.disparity, occ_raw, L, self.context, s)
        H, W = L.shape[:2]
        occ_px = occ_raw[np.arange(H)[:, None] // s, np.arange(W)[None, :] // s] > 0.5
        result = DisparityResult(
            d_raw=np.maximum(raw.disparity.data, 0.0),
            occ_raw=occ_raw,
            confidence=raw.confidence.data.copy(),
            d_final=np.maximum(d_final.data, 0.0),
            occ_final=occ_final.data.copy(),
            occ_mask=occ_px | (occ_final.data > 0.5),
        )
        return ModelOutput(T, raw.disparity, raw.confidence, occ_raw, d_final, occ_final, result,
                           feats.attention, feats.stage_shapes)

    def infer(self, left, right, keep_attention=False):
        with ad.no_tape():
            return self.forward(left, right, keep_attention)


def count_params(cfg):
    """Number of trainable scalars of the network built for ``cfg``."""
    return AAUformer(cfg).num_parameters()


# ---------------------------------------------------------------------------
# weights file: b"AAUW", u32 version, then per parameter
#   u16 name length, name, u8 rank, u32 dims..., float32 LE values

WEIGHTS_MAGIC = b"AAUW"
WEIGHTS_VERSION = 1


def encode_weights(module):
    parts = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION)]
    for name, p in module.named_parameters():
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<B", p.data.ndim) + struct.pack(f"<{p.data.ndim}I", *p.data.shape))
        parts.append(np.ascontiguousarray(p.data, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_weights(buf):
    """Parse a weights file into an ordered list of (name, float32 array)."""
    buf = bytes(buf)
    if buf[:4] != WEIGHTS_MAGIC:
        raise FormatError("bad-magic", "not a weights file")
    if len(buf) < 8:
        raise FormatError("truncated", "weights header")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != WEIGHTS_VERSION:
        raise FormatError("bad-version", f"weights version {version}")
    off = 8
    out = []
    try:
        while off < len(buf):
            (n,) = struct.unpack_from("<H", buf, off)
            off += 2
            name = buf[off : off + n].decode("utf-8")
            if len(name.encode("utf-8")) != n:
                raise FormatError("truncated", "parameter name")
            off += n
            (rank,) = struct.unpack_from("<B", buf, off)
            off += 1
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            count = int(np.prod(dims, dtype=np.int64))
            if off + 4 * count > len(buf):
                raise FormatError("truncated", f"values of {name}")
            arr = np.frombuffer(buf, dtype="<f4", count=count, offset=off).reshape(dims)
            off += 4 * count
            out.append((name, arr))
    except (struct.error, UnicodeDecodeError) as exc:
        raise FormatError("truncated", str(exc)) from None
    return out


def save_weights(module, path):
    with open(path, "wb") as f:
        f.write(encode_weights(module))


def load_weights(module, path):
    """Copy the stored values into ``module``; names and shapes must match exactly."""
    with open(path, "rb") as f:
        stored = decode_weights(f.read())
    params = dict(module.named_parameters())
    names = [n for n, _ in stored]
    if sorted(names) != sorted(params):
        missing = sorted(set(params) - set(names))
        extra = sorted(set(names) - set(params))
        raise ShapeError("weights-mismatch", f"missing {missing[:3]}, unexpected {extra[:3]}")
    for name, arr in stored:
        p = params[name]
        if p.data.shape != arr.shape:
            raise ShapeError("weights-mismatch", f"{name}: stored {arr.shape}, model {p.data.shape}")
        p.data[...] = arr.astype(np.float64)
    return module
