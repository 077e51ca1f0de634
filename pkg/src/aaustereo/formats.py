"""PFM and binary PPM/PGM codecs plus the on-disk sample layout.

Readers take raw bytes (``decode_*``) or a path (``read_*``) and raise
:class:`FormatError` with a named code on any malformed input.
"""

import os
from dataclasses import dataclass

import numpy as np

from .errors import FormatError

_WS = b" \t\n\r\v\f"


def _tokens(buf, start, count, comments=False):
    """Read ``count`` whitespace-separated header tokens; returns (tokens, payload offset).

    The payload starts after the single whitespace byte that ends the last token.
    """
    out = []
    i = start
    n = len(buf)
    while len(out) < count:
        while i < n and (buf[i] in _WS or (comments and buf[i] == ord("#"))):
            if buf[i] == ord("#"):
                while i < n and buf[i] not in b"\n\r":
                    i += 1
            else:
                i += 1
        if i >= n:
            raise FormatError("truncated", "header ends early")
        j = i
        while j < n and buf[j] not in _WS:
            j += 1
        if j >= n:
            raise FormatError("truncated", "header ends early")
        out.append(bytes(buf[i:j]))
        i = j
    return out, i + 1


def _int_token(tok, what):
    try:
        text = tok.decode("ascii")
    except UnicodeDecodeError:
        raise FormatError("bad-header", f"{what} is not ASCII") from None
    if not text.isdigit():
        raise FormatError("bad-header", f"{what} {text!r} is not a positive integer")
    value = int(text)
    if value <= 0:
        raise FormatError("bad-header", f"{what} must be positive")
    return value


# ---------------------------------------------------------------------------
# PFM


def encode_pfm(data, little_endian=True):
    data = np.asarray(data)
    if data.ndim == 2:
        magic = b"Pf"
    elif data.ndim == 3 and data.shape[2] == 3:
        magic = b"PF"
    else:
        raise FormatError("bad-shape", f"PFM holds (H, W) or (H, W, 3) data, got {data.shape}")
    h, w = data.shape[:2]
    scale = b"-1.0" if little_endian else b"1.0"
    dtype = "<f4" if little_endian else ">f4"
    payload = np.ascontiguousarray(data[::-1].astype(dtype)).tobytes()
    return magic + b"\n" + f"{w} {h}".encode() + b"\n" + scale + b"\n" + payload


def decode_pfm(buf):
    buf = bytes(buf)
    magic = buf[:2]
    if len(buf) < 3 and magic in (b"Pf", b"PF"):
        raise FormatError("truncated", "file too short")
    if magic not in (b"Pf", b"PF") or buf[2] not in _WS:
        raise FormatError("bad-magic", f"unexpected magic {magic!r}")
    (tw, th, ts), off = _tokens(buf, 2, 3)
    w, h = _int_token(tw, "width"), _int_token(th, "height")
    try:
        scale = float(ts.decode("ascii"))
    except (UnicodeDecodeError, ValueError):
        raise FormatError("bad-header", f"scale {ts!r} is not a number") from None
    if not np.isfinite(scale) or scale == 0:
        raise FormatError("bad-header", "scale must be finite and non-zero")
    ch = 3 if magic == b"PF" else 1
    n = w * h * ch
    if len(buf) - off < 4 * n:
        raise FormatError("truncated", f"payload has {len(buf) - off} bytes, need {4 * n}")
    dtype = "<f4" if scale < 0 else ">f4"
    arr = np.frombuffer(buf, dtype=dtype, count=n, offset=off).astype(np.float32)
    shape = (h, w, 3) if ch == 3 else (h, w)
    return arr.reshape(shape)[::-1].copy()


def write_pfm(path, data, little_endian=True):
    with open(path, "wb") as f:
        f.write(encode_pfm(data, little_endian))


def read_pfm(path):
    with open(path, "rb") as f:
        return decode_pfm(f.read())


def pfm_read_write(path, data=None, mode="r"):
    if mode == "w":
        write_pfm(path, data)
        return None
    if mode == "r":
        return read_pfm(path)
    raise ValueError(f"mode must be 'r' or 'w', got {mode!r}")


# ---------------------------------------------------------------------------
# PPM / PGM


def _to_bytes(image):
    image = np.asarray(image)
    if image.dtype == np.uint8:
        return image
    return np.clip(np.round(image.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def encode_ppm(image):
    """P6 for (H, W, 3), P5 for (H, W). Float input in [0, 1] is rounded to 8 bits."""
    px = _to_bytes(image)
    if px.ndim == 3 and px.shape[2] == 3:
        magic = b"P6"
    elif px.ndim == 2:
        magic = b"P5"
    else:
        raise FormatError("bad-shape", f"PPM/PGM holds (H, W, 3) or (H, W) images, got {px.shape}")
    h, w = px.shape[:2]
    return magic + b"\n" + f"{w} {h}\n255".encode() + b"\n" + np.ascontiguousarray(px).tobytes()


def decode_ppm(buf, raw=False, channels=None):
    """Decode P6/P5. Returns values in [0, 1] (uint8 when ``raw``).

    ``channels=3`` replicates a gray image to three channels.
    """
    buf = bytes(buf)
    if len(buf) < 3 or buf[:2] not in (b"P6", b"P5") or buf[2] not in _WS:
        raise FormatError("bad-magic", f"unexpected magic {buf[:2]!r}")
    (tw, th, tm), off = _tokens(buf, 2, 3, comments=True)
    w, h = _int_token(tw, "width"), _int_token(th, "height")
    maxval = _int_token(tm, "maxval")
    if maxval != 255:
        raise FormatError("unsupported-maxval", f"maxval {maxval}")
    ch = 3 if buf[:2] == b"P6" else 1
    n = w * h * ch
    if len(buf) - off < n:
        raise FormatError("truncated", f"payload has {len(buf) - off} bytes, need {n}")
    px = np.frombuffer(buf, dtype=np.uint8, count=n, offset=off).copy()
    px = px.reshape((h, w, 3) if ch == 3 else (h, w))
    if channels == 3 and ch == 1:
        px = np.repeat(px[..., None], 3, axis=2)
    elif channels not in (None, ch, 3):
        raise ValueError(f"cannot produce {channels} channels")
    return px if raw else px.astype(np.float64) / 255.0


def write_ppm(path, image):
    with open(path, "wb") as f:
        f.write(encode_ppm(image))


def read_ppm(path, raw=False, channels=None):
    with open(path, "rb") as f:
        return decode_ppm(f.read(), raw=raw, channels=channels)


def ppm_read_write(path, image=None, mode="r"):
    if mode == "w":
        write_ppm(path, image)
        return None
    if mode == "r":
        return read_ppm(path)
    raise ValueError(f"mode must be 'r' or 'w', got {mode!r}")


# ---------------------------------------------------------------------------
# sample directories


@dataclass
class StereoSample:
    left: np.ndarray
    right: np.ndarray
    d_gt: np.ndarray = None
    occ_gt: np.ndarray = None
    name: str = "sample"

    def __post_init__(self):
        if self.left.shape != self.right.shape:
            raise FormatError("pair-mismatch", f"left {self.left.shape} vs right {self.right.shape}")


def write_sample(root, sample):
    d = os.path.join(root, sample.name)
    os.makedirs(d, exist_ok=True)
    write_ppm(os.path.join(d, "left.ppm"), sample.left)
    write_ppm(os.path.join(d, "right.ppm"), sample.right)
    if sample.d_gt is not None:
        write_pfm(os.path.join(d, "disp.pfm"), sample.d_gt)
    if sample.occ_gt is not None:
        write_ppm(os.path.join(d, "occ.pgm"), np.where(sample.occ_gt, 255, 0).astype(np.uint8))
    return d


def read_sample(path):
    """Load ``path/{left,right}.ppm`` and, when present, ``disp.pfm`` and ``occ.pgm``."""
    name = os.path.basename(os.path.normpath(path))
    left = read_ppm(os.path.join(path, "left.ppm"), channels=3)
    right = read_ppm(os.path.join(path, "right.ppm"), channels=3)
    disp_p = os.path.join(path, "disp.pfm")
    occ_p = os.path.join(path, "occ.pgm")
    d_gt = read_pfm(disp_p).astype(np.float64) if os.path.exists(disp_p) else None
    occ = read_ppm(occ_p, raw=True) > 127 if os.path.exists(occ_p) else None
    return StereoSample(left, right, d_gt, occ, name)
