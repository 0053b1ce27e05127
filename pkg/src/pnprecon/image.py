"""Complex 2D image container, unitary 2D DFT, and raw-file I/O.

The transform pair here is *unitary* (norm-preserving, ``norm="ortho"``):
``||dft2(x)|| == ||x||`` for every image. Everything downstream (forward
model, linear stage, solvers) relies on that normalization, so do not swap
in an unnormalized FFT. The DC bin sits at index (0, 0).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

_HEADER = struct.Struct("<II")

# Incremented by dft2/idft2; lets tests pin per-call transform budgets.
_transform_calls = 0


def transform_call_count() -> int:
    """Total forward+inverse transforms executed so far (test hook)."""
    return _transform_calls


@dataclass(frozen=True)
class ComplexImage:
    """Row-major 2D grid of complex double samples.

    Invariants: 2D, non-empty, every entry finite. Instances are immutable
    and safe to share across threads; use ``.data`` (complex128 ndarray)
    for arithmetic and rewrap the result.
    """

    data: np.ndarray

    def __post_init__(self):
        arr = np.ascontiguousarray(self.data, dtype=np.complex128)
        if arr.ndim != 2 or arr.size == 0:
            raise ValueError(f"expected a non-empty 2D grid, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image contains non-finite samples")
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))

    @staticmethod
    def zeros(height: int, width: int) -> "ComplexImage":
        return ComplexImage(np.zeros((height, width), dtype=np.complex128))


def dft2(img: ComplexImage) -> ComplexImage:
    """Unitary 2D DFT. Mixed-radix sizes are fine (not just powers of two)."""
    global _transform_calls
    _transform_calls += 1
    return ComplexImage(np.fft.fft2(img.data, norm="ortho"))


def idft2(img: ComplexImage) -> ComplexImage:
    """Unitary inverse 2D DFT; exact inverse of :func:`dft2` up to roundoff."""
    global _transform_calls
    _transform_calls += 1
    return ComplexImage(np.fft.ifft2(img.data, norm="ortho"))


def write_cplx(img: ComplexImage, path: str | Path) -> None:
    """Write the raw complex-image format.

    Little-endian: u32 height, u32 width, then height*width interleaved
    (re, im) float64 pairs. Conventional extension ``.cplx``.
    """
    buf = np.empty((img.size, 2), dtype="<f8")
    buf[:, 0] = img.data.real.ravel()
    buf[:, 1] = img.data.imag.ravel()
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(img.height, img.width))
        fh.write(buf.tobytes())


def read_cplx(path: str | Path) -> ComplexImage:
    """Read the raw complex-image format written by :func:`write_cplx`."""
    with open(path, "rb") as fh:
        head = fh.read(_HEADER.size)
        if len(head) != _HEADER.size:
            raise ValueError(f"{path}: truncated header")
        height, width = _HEADER.unpack(head)
        payload = fh.read()
    expected = height * width * 2 * 8
    if len(payload) != expected:
        raise ValueError(
            f"{path}: expected {expected} payload bytes for {height}x{width}, got {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f8").reshape(height * width, 2)
    data = (flat[:, 0] + 1j * flat[:, 1]).reshape(height, width)
    return ComplexImage(data)
