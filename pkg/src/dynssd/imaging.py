"""Pixel-level utilities on H x W x C float64 rasters in [0, 1].

Images are plain ``numpy.ndarray`` objects (C-contiguous, channels last),
so the flat row-major, channel-interleaved layout is just ``img.ravel()``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import kernels


class ImageFormatError(ValueError):
    """Malformed or unsupported image file."""


@dataclass(frozen=True)
class BoundingBox:
    """Corner-form box in continuous pixel coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {self.as_tuple()}")

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def diagonal(self) -> float:
        return math.hypot(self.width, self.height)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x_min, self.y_min, self.x_max, self.y_max)

    def clipped(self, height: int, width: int) -> "BoundingBox | None":
        """Box clipped to the image; ``None`` if nothing with positive area remains."""
        x0, y0 = max(self.x_min, 0.0), max(self.y_min, 0.0)
        x1, y1 = min(self.x_max, float(width)), min(self.y_max, float(height))
        if x0 < x1 and y0 < y1:
            return BoundingBox(x0, y0, x1, y1)
        return None

    @classmethod
    def from_seq(cls, seq: Sequence[float]) -> "BoundingBox":
        x0, y0, x1, y1 = (float(v) for v in seq)
        return cls(x0, y0, x1, y1)


def as_image(arr) -> np.ndarray:
    """Coerce to a C-contiguous H x W x C float64 image with 1 or 3 channels."""
    img = np.asarray(arr, dtype=np.float64)
    if img.ndim == 2:
        img = img[:, :, None]
    if img.ndim != 3 or img.shape[2] not in (1, 3) or img.shape[0] < 1 or img.shape[1] < 1:
        raise ValueError(f"expected H x W x C image with C in (1, 3), got shape {img.shape}")
    return np.ascontiguousarray(img)


def bicubic_resize(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Catmull-Rom (a = -0.5) resize with edge-clamped taps; output clamped to [0, 1]."""
    if out_h < 1 or out_w < 1:
        raise ValueError(f"output size must be positive, got {out_h}x{out_w}")
    img = as_image(img)
    if img.shape[:2] == (out_h, out_w):
        return img.copy()
    return np.clip(kernels.resize_bicubic(img, int(out_h), int(out_w)), 0.0, 1.0)


def _round_half_up(v: float) -> int:
    return int(math.floor(v + 0.5))


def scale_and_pad(
    img: np.ndarray, boxes: Iterable[BoundingBox], factor: float
) -> tuple[np.ndarray, list[BoundingBox]]:
    """Shrink content by ``factor`` and centre it on a black canvas of the original size."""
    if not 0.0 < factor <= 1.0:
        raise ValueError(f"scale factor must lie in (0, 1], got {factor}")
    img = as_image(img)
    h, w, c = img.shape
    sh, sw = _round_half_up(factor * h), _round_half_up(factor * w)
    if sh < 1 or sw < 1:
        raise ValueError(f"scaled content would be {sh}x{sw} pixels")
    boxes = list(boxes)
    if factor == 1.0:
        return img.copy(), boxes
    oy, ox = (h - sh) // 2, (w - sw) // 2
    canvas = np.zeros_like(img)
    canvas[oy : oy + sh, ox : ox + sw] = bicubic_resize(img, sh, sw)
    moved = [
        BoundingBox(
            b.x_min * factor + ox,
            b.y_min * factor + oy,
            b.x_max * factor + ox,
            b.y_max * factor + oy,
        )
        for b in boxes
    ]
    return canvas, moved


def pixel_bounds(box: BoundingBox, height: int, width: int) -> tuple[int, int, int, int]:
    """Integer (x0, y0, x1, y1) of a box after half-up rounding and clipping."""
    x0 = min(max(_round_half_up(box.x_min), 0), width)
    y0 = min(max(_round_half_up(box.y_min), 0), height)
    x1 = min(max(_round_half_up(box.x_max), 0), width)
    y1 = min(max(_round_half_up(box.y_max), 0), height)
    return x0, y0, x1, y1


def crop(img: np.ndarray, box: BoundingBox) -> np.ndarray:
    img = as_image(img)
    h, w = img.shape[:2]
    x0, y0, x1, y1 = pixel_bounds(box, h, w)
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"crop box {box.as_tuple()} is empty after clipping to {w}x{h}")
    return img[y0:y1, x0:x1].copy()


def paste(canvas: np.ndarray, patch: np.ndarray, x0: int, y0: int) -> np.ndarray:
    """Copy ``patch`` into a copy of ``canvas`` with its top-left corner at (x0, y0)."""
    out = as_image(canvas).copy()
    ph, pw = patch.shape[:2]
    out[y0 : y0 + ph, x0 : x0 + pw] = patch
    return out


def hflip(img: np.ndarray, boxes: Iterable[BoundingBox]) -> tuple[np.ndarray, list[BoundingBox]]:
    w = img.shape[1]
    out = np.ascontiguousarray(img[:, ::-1])
    return out, [BoundingBox(w - b.x_max, b.y_min, w - b.x_min, b.y_max) for b in boxes]


def vflip(img: np.ndarray, boxes: Iterable[BoundingBox]) -> tuple[np.ndarray, list[BoundingBox]]:
    h = img.shape[0]
    out = np.ascontiguousarray(img[::-1])
    return out, [BoundingBox(b.x_min, h - b.y_max, b.x_max, h - b.y_min) for b in boxes]


# --- PPM ---------------------------------------------------------------------


def to_bytes_u8(img: np.ndarray) -> np.ndarray:
    return np.floor(np.clip(img, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def encode_ppm(img: np.ndarray) -> bytes:
    img = as_image(img)
    if img.shape[2] == 1:
        img = np.repeat(img, 3, axis=2)
    h, w = img.shape[:2]
    return f"P6\n{w} {h}\n255\n".encode("ascii") + to_bytes_u8(img).tobytes()


def write_ppm(img: np.ndarray, path) -> None:
    Path(path).write_bytes(encode_ppm(img))


def decode_ppm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"P6":
        raise ImageFormatError("bad magic at byte 0: expected P6 binary PPM")
    pos = 2
    fields: list[int] = []
    for _ in range(3):
        skipped = False
        while pos < len(buf):
            ch = buf[pos : pos + 1]
            if ch.isspace():
                pos += 1
            elif ch == b"#":
                while pos < len(buf) and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                break
            skipped = True
        if not skipped:
            raise ImageFormatError(f"malformed header at byte {pos}: expected whitespace")
        tok_start = pos
        while pos < len(buf) and buf[pos : pos + 1].isdigit():
            pos += 1
        if pos == tok_start:
            raise ImageFormatError(f"malformed header at byte {pos}: expected an integer")
        fields.append(int(buf[tok_start:pos]))
    if pos >= len(buf) or not buf[pos : pos + 1].isspace():
        raise ImageFormatError(f"malformed header at byte {pos}: expected single whitespace before data")
    pos += 1
    width, height, maxval = fields
    if maxval != 255:
        raise ImageFormatError(f"unsupported maxval {maxval}; only 8-bit (255) PPM is supported")
    if width < 1 or height < 1:
        raise ImageFormatError(f"malformed header: image size {width}x{height}")
    need = width * height * 3
    if len(buf) - pos < need:
        raise ImageFormatError(f"truncated payload: expected {need} bytes after byte {pos}, got {len(buf) - pos}")
    data = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos)
    return data.reshape(height, width, 3).astype(np.float64) / 255.0


def read_ppm(path) -> np.ndarray:
    return decode_ppm(Path(path).read_bytes())
