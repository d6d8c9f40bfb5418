"""Image buffers, binary PPM I/O and bicubic resampling."""

from __future__ import annotations

import os
from dataclasses import dataclass

import numpy as np

from .errors import InputError


class PPMParseError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


@dataclass
class ImageBuffer:
    """``(H, W, 3)`` float32 pixels clamped to ``[0, 1]``."""

    pixels: np.ndarray

    def __post_init__(self):
        px = np.asarray(self.pixels, dtype=np.float32)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError(f"ImageBuffer needs (H, W, 3) pixels, got {px.shape}")
        self.pixels = np.clip(px, 0.0, 1.0)

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    def to_uint8(self) -> np.ndarray:
        return np.round(self.pixels * 255.0).astype(np.uint8)

    @classmethod
    def from_uint8(cls, arr: np.ndarray) -> "ImageBuffer":
        return cls(np.asarray(arr, dtype=np.float32) / 255.0)

    def to_chw(self) -> np.ndarray:
        return np.ascontiguousarray(self.pixels.transpose(2, 0, 1))

    @classmethod
    def from_chw(cls, arr) -> "ImageBuffer":
        arr = np.asarray(arr)
        return cls(arr.transpose(1, 2, 0))

    def quantized(self) -> "ImageBuffer":
        return ImageBuffer.from_uint8(self.to_uint8())


def as_pixels(img) -> np.ndarray:
    """Float64 ``(H, W, 3)`` view of an ImageBuffer or array."""
    if isinstance(img, ImageBuffer):
        return img.pixels.astype(np.float64)
    return np.asarray(img, dtype=np.float64)


# ---------------------------------------------------------------------------
# binary portable pixmap (P6, maxval 255)
# ---------------------------------------------------------------------------

def encode_ppm(img: ImageBuffer) -> bytes:
    header = f"P6\n{img.width} {img.height}\n255\n".encode("ascii")
    return header + img.to_uint8().tobytes()


def decode_ppm(data: bytes) -> ImageBuffer:
    pos = 0
    n = len(data)

    def skip_space(p):
        while p < n:
            ch = data[p:p + 1]
            if ch == b"#":
                while p < n and data[p:p + 1] not in (b"\n", b"\r"):
                    p += 1
            elif ch.isspace():
                p += 1
            else:
                break
        return p

    def read_int(p, what):
        p = skip_space(p)
        start = p
        while p < n and data[p:p + 1].isdigit():
            p += 1
        if p == start:
            raise PPMParseError(f"expected {what}", start)
        return int(data[start:p]), p

    if data[:2] != b"P6":
        raise PPMParseError("missing P6 magic number", 0)
    pos = 2
    width, pos = read_int(pos, "width")
    height, pos = read_int(pos, "height")
    maxval_at = skip_space(pos)
    maxval, pos = read_int(pos, "maxval")
    if maxval != 255:
        raise PPMParseError(f"unsupported maxval {maxval}", maxval_at)
    if width <= 0 or height <= 0:
        raise PPMParseError(f"invalid dimensions {width}x{height}", pos)
    if pos >= n or not data[pos:pos + 1].isspace():
        raise PPMParseError("expected single whitespace after maxval", pos)
    pos += 1
    need = width * height * 3
    if n - pos < need:
        raise PPMParseError(f"truncated raster: need {need} bytes, have {n - pos}", n)
    raster = np.frombuffer(data, dtype=np.uint8, count=need, offset=pos)
    return ImageBuffer.from_uint8(raster.reshape(height, width, 3))


def write_image(path, img: ImageBuffer) -> None:
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))


def read_image(path) -> ImageBuffer:
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


# ---------------------------------------------------------------------------
# bicubic resampling
# ---------------------------------------------------------------------------

def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(np.asarray(x, dtype=np.float64))
    x2, x3 = x * x, x * x * x
    near = (a + 2) * x3 - (a + 3) * x2 + 1
    far = a * x3 - 5 * a * x2 + 8 * a * x - 4 * a
    return np.where(x <= 1, near, np.where(x < 2, far, 0.0))


def resample_matrix(n_in: int, n_out: int, a: float = -0.5, antialias: bool = True) -> np.ndarray:
    """Dense ``(n_out, n_in)`` interpolation matrix with clamped edges.

    Pixel centres are aligned (``src = (dst + 0.5) * n_in / n_out - 0.5``).
    When shrinking, the kernel is stretched by the scale factor so it acts as
    a low-pass prefilter. Rows are renormalised to sum to one.
    """
    scale = n_in / n_out
    stretch = max(scale, 1.0) if antialias else 1.0
    radius = 2.0 * stretch
    mat = np.zeros((n_out, n_in))
    for i in range(n_out):
        centre = (i + 0.5) * scale - 0.5
        lo = int(np.floor(centre - radius)) + 1
        hi = int(np.ceil(centre + radius))
        taps = np.arange(lo, hi)
        w = cubic_kernel((taps - centre) / stretch, a)
        np.add.at(mat[i], np.clip(taps, 0, n_in - 1), w)
        mat[i] /= mat[i].sum()
    return mat


def resample_array(arr: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bicubic-resample the last two axes of ``arr`` (e.g. ``(N, C, H, W)``)."""
    if out_h <= 0 or out_w <= 0:
        raise InputError(f"output size must be positive, got {out_h}x{out_w}")
    arr = np.asarray(arr)
    mh = resample_matrix(arr.shape[-2], out_h)
    mw = resample_matrix(arr.shape[-1], out_w)
    out = np.einsum("oh,...hw,pw->...op", mh, arr.astype(np.float64), mw, optimize=True)
    return np.clip(out, 0.0, 1.0).astype(arr.dtype if arr.dtype.kind == "f" else np.float32)


def bicubic_resample(img: ImageBuffer, out_h: int, out_w: int) -> ImageBuffer:
    if out_h <= 0 or out_w <= 0:
        raise InputError(f"output size must be positive, got {out_h}x{out_w}")
    chw = resample_array(img.pixels.transpose(2, 0, 1), out_h, out_w)
    return ImageBuffer(chw.transpose(1, 2, 0))


def ensure_dir(path) -> None:
    os.makedirs(path, exist_ok=True)
