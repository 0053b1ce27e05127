"""Masked-Fourier measurement operator, sampling-mask generators, noise
injection, and synthetic phantoms.

The measurement model is: transform the image with the unitary 2D DFT, keep
the k-space bins selected by a mask, and add circularly-symmetric complex
AWGN of known precision. Masks are generated in *centered* k-space
coordinates (DC in the middle, the way masks are drawn) and stored as
*internal* linear indices (DC at (0, 0), matching the transform layout);
:func:`centered_to_internal` / :func:`internal_to_centered` are the single
conversion points.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .image import ComplexImage, dft2, idft2

MASK_KINDS = ("cartesian", "point", "full", "custom")

# Shepp-Logan ellipses: (intensity delta, a, b, x0, y0, angle deg).
# Additive intensities; the classic "modified" values land in [0, 1].
_SHEPP_LOGAN = (
    (1.0, 0.69, 0.92, 0.0, 0.0, 0.0),
    (-0.8, 0.6624, 0.8740, 0.0, -0.0184, 0.0),
    (-0.2, 0.1100, 0.3100, 0.22, 0.0, -18.0),
    (-0.2, 0.1600, 0.4100, -0.22, 0.0, 18.0),
    (0.1, 0.2100, 0.2500, 0.0, 0.35, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, 0.1, 0.0),
    (0.1, 0.0460, 0.0460, 0.0, -0.1, 0.0),
    (0.1, 0.0460, 0.0230, -0.08, -0.605, 0.0),
    (0.1, 0.0230, 0.0230, 0.0, -0.606, 0.0),
    (0.1, 0.0230, 0.0460, 0.06, -0.605, 0.0),
)


def centered_to_internal(idx: np.ndarray, n: int) -> np.ndarray:
    """Map centered k-space indices (DC at n//2) to internal ones (DC at 0)."""
    return (np.asarray(idx) - n // 2) % n


def internal_to_centered(idx: np.ndarray, n: int) -> np.ndarray:
    """Inverse of :func:`centered_to_internal`."""
    return (np.asarray(idx) + n // 2) % n


@dataclass(frozen=True)
class SamplingMask:
    """Set of retained k-space positions on an (height, width) grid.

    ``kept`` holds sorted, duplicate-free internal linear indices
    (row-major, DC row/column first).
    """

    shape: tuple[int, int]
    kept: np.ndarray
    kind: str = "custom"
    seed: int = 0

    def __post_init__(self):
        h, w = self.shape
        kept = np.unique(np.asarray(self.kept, dtype=np.int64))
        if kept.size != np.asarray(self.kept).size:
            raise ValueError("mask indices contain duplicates")
        if kept.size and (kept[0] < 0 or kept[-1] >= h * w):
            raise ValueError("mask index out of range")
        if self.kind not in MASK_KINDS:
            raise ValueError(f"unknown mask kind {self.kind!r}")
        if kept.size == 0 and self.kind != "custom":
            raise ValueError("empty mask only allowed for kind='custom'")
        kept.setflags(write=False)
        object.__setattr__(self, "shape", (int(h), int(w)))
        object.__setattr__(self, "kept", kept)

    @property
    def m(self) -> int:
        """Number of retained bins."""
        return int(self.kept.size)

    @property
    def n(self) -> int:
        """Number of grid bins (image pixels)."""
        return int(self.shape[0] * self.shape[1])

    def bool_grid(self) -> np.ndarray:
        """Dense boolean keep-grid in internal layout."""
        grid = np.zeros(self.n, dtype=bool)
        grid[self.kept] = True
        return grid.reshape(self.shape)

    def kept_rows_centered(self) -> np.ndarray:
        """Sorted centered row indices that have at least one kept bin."""
        rows = np.unique(self.kept // self.shape[1])
        return np.sort(internal_to_centered(rows, self.shape[0]))


@dataclass(frozen=True)
class KSpaceVector:
    """Retained k-space measurements, in the mask's index order."""

    shape: tuple[int, int]
    data: np.ndarray
    index_map: SamplingMask

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.complex128).ravel()
        if data.size != self.index_map.m:
            raise ValueError(
                f"{data.size} samples for a mask keeping {self.index_map.m} bins"
            )
        if tuple(self.shape) != self.index_map.shape:
            raise ValueError("shape disagrees with mask shape")
        if not np.all(np.isfinite(data)):
            raise ValueError("k-space samples contain non-finite values")
        data.setflags(write=False)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))
        object.__setattr__(self, "data", data)

    def norm(self) -> float:
        return float(np.linalg.norm(self.data))


@dataclass(frozen=True)
class Problem:
    """One reconstruction instance: measurements, mask, noise precision,
    and (optionally) the ground truth that produced them."""

    y: KSpaceVector
    mask: SamplingMask
    gamma_w: float
    x0: ComplexImage | None = None
    snr_db: float | None = None

    def __post_init__(self):
        if not (self.gamma_w > 0):
            raise ValueError("gamma_w must be positive")
        if self.y.index_map.shape != self.mask.shape or not np.array_equal(
            self.y.index_map.kept, self.mask.kept
        ):
            raise ValueError("y.index_map disagrees with mask")
        if self.x0 is not None and self.x0.shape != self.mask.shape:
            raise ValueError("ground truth shape disagrees with mask shape")

    @property
    def shape(self) -> tuple[int, int]:
        return self.mask.shape


def apply_A(x: ComplexImage, mask: SamplingMask) -> KSpaceVector:
    """Measurement operator: unitary DFT followed by the mask's row selection."""
    if x.shape != mask.shape:
        raise ValueError(f"image shape {x.shape} vs mask shape {mask.shape}")
    fx = dft2(x).data.ravel()
    return KSpaceVector(mask.shape, fx[mask.kept], mask)


def apply_A_adjoint(y: KSpaceVector) -> ComplexImage:
    """Adjoint: zero-fill the unkept bins, then inverse unitary DFT."""
    full = np.zeros(y.index_map.n, dtype=np.complex128)
    full[y.index_map.kept] = y.data
    return idft2(ComplexImage(full.reshape(y.shape)))


def full_mask(shape: tuple[int, int]) -> SamplingMask:
    h, w = shape
    return SamplingMask(shape, np.arange(h * w, dtype=np.int64), kind="full")


def custom_mask(shape: tuple[int, int], kept, seed: int = 0) -> SamplingMask:
    return SamplingMask(shape, np.asarray(kept, dtype=np.int64), kind="custom", seed=seed)


def make_cartesian_mask(
    shape: tuple[int, int],
    R: float,
    center_fraction: float = 0.08,
    seed: int = 0,
) -> SamplingMask:
    """Row mask: a fully-sampled central band plus uniformly-random outer rows.

    Keeps ceil(height / R) whole rows. The central band holds
    round(center_fraction * height) contiguous rows around the centered DC
    row; the remainder is drawn uniformly without replacement. Deterministic
    for a given seed.
    """
    h, w = shape
    if R < 1:
        raise ValueError("acceleration R must be >= 1")
    if not (0 <= center_fraction < 1.0 / R):
        raise ValueError("need 0 <= center_fraction < 1/R")
    n_rows = math.ceil(h / R)
    n_center = int(round(center_fraction * h))
    if n_center > n_rows:
        raise ValueError("center band larger than the row budget")
    start = (h - n_center) // 2
    center_rows = np.arange(start, start + n_center)
    outer = np.setdiff1d(np.arange(h), center_rows)
    rng = np.random.default_rng(seed)
    extra = rng.choice(outer, size=n_rows - n_center, replace=False)
    rows_centered = np.sort(np.concatenate([center_rows, extra]))
    rows = centered_to_internal(rows_centered, h)
    kept = (rows[:, None] * w + np.arange(w)[None, :]).ravel()
    return SamplingMask(shape, np.sort(kept), kind="cartesian", seed=seed)


def make_point_mask(
    shape: tuple[int, int],
    R: float,
    poly_degree: float = 6.0,
    seed: int = 0,
) -> SamplingMask:
    """Variable-density point mask: keeps ceil(N / R) individual bins, drawn
    without replacement with probability proportional to (1 - d)**poly_degree,
    d being the normalized distance from the k-space center.
    """
    h, w = shape
    if R < 1:
        raise ValueError("acceleration R must be >= 1")
    n = h * w
    n_keep = math.ceil(n / R)
    if n_keep >= n:
        return SamplingMask(shape, np.arange(n, dtype=np.int64), kind="point", seed=seed)
    rr, cc = np.meshgrid(np.arange(h), np.arange(w), indexing="ij")
    u = (rr - h // 2) / max(h // 2, h - 1 - h // 2)
    v = (cc - w // 2) / max(w // 2, w - 1 - w // 2)
    d = np.sqrt(u * u + v * v) / math.sqrt(2.0)
    weights = np.clip(1.0 - d, 0.0, None).ravel() ** poly_degree
    if np.count_nonzero(weights) < n_keep:
        weights = weights + 1e-12  # corners have exactly zero weight
    rng = np.random.default_rng(seed)
    picked_centered = rng.choice(n, size=n_keep, replace=False, p=weights / weights.sum())
    rows = centered_to_internal(picked_centered // w, h)
    cols = centered_to_internal(picked_centered % w, w)
    kept = np.sort(rows * w + cols)
    return SamplingMask(shape, kept, kind="point", seed=seed)


def mask_from_kind(
    kind: str,
    shape: tuple[int, int],
    R: float = 4.0,
    center_fraction: float = 0.08,
    poly_degree: float = 6.0,
    seed: int = 0,
) -> SamplingMask:
    """CLI-facing dispatch over the named mask kinds."""
    if kind == "cartesian":
        return make_cartesian_mask(shape, R, center_fraction, seed)
    if kind == "point":
        return make_point_mask(shape, R, poly_degree, seed)
    if kind == "full":
        return full_mask(shape)
    raise ValueError(f"unknown mask kind {kind!r}")


def add_awgn(
    y_clean: KSpaceVector,
    snr_db: float,
    seed: int = 0,
    gamma_cap: float = 1e15,
) -> tuple[KSpaceVector, float]:
    """Add circularly-symmetric complex AWGN calibrated to a target SNR.

    The per-component noise variance is set to 1/gamma_w =
    ||y||^2 / (M * 10^(snr_db/10)), and the exact gamma_w used is returned
    (the solvers consume it as known, never re-estimated). ``snr_db=inf``
    means no noise; gamma_w is then the configured cap instead of infinity.
    """
    energy = float(np.vdot(y_clean.data, y_clean.data).real)
    if energy <= 0:
        raise ValueError("cannot calibrate noise against zero-energy measurements")
    if math.isinf(snr_db):
        return y_clean, gamma_cap
    m = y_clean.index_map.m
    sigma2 = energy / (m * 10.0 ** (snr_db / 10.0))
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    w *= math.sqrt(sigma2 / 2.0)
    noisy = KSpaceVector(y_clean.shape, y_clean.data + w, y_clean.index_map)
    return noisy, 1.0 / sigma2


def simulate_problem(
    x0: ComplexImage,
    mask: SamplingMask,
    snr_db: float = 40.0,
    seed: int = 0,
) -> Problem:
    """Measure a ground-truth image through the mask at the requested SNR."""
    y_clean = apply_A(x0, mask)
    y, gamma_w = add_awgn(y_clean, snr_db, seed)
    return Problem(y=y, mask=mask, gamma_w=gamma_w, x0=x0, snr_db=snr_db)


def make_phantom(shape: tuple[int, int], kind: str, path: str | Path | None = None) -> ComplexImage:
    """Deterministic real-valued test image in [0, 1].

    Kinds: ``shepp_logan`` (ellipse phantom), ``blocks`` (piecewise-constant
    rectangles, >= 4 levels), ``natural_file`` (grayscale-load an image file,
    which requires ``path``).
    """
    h, w = shape
    if kind == "shepp_logan":
        ys = np.linspace(-1.0, 1.0, h)[:, None]
        xs = np.linspace(-1.0, 1.0, w)[None, :]
        img = np.zeros((h, w))
        for amp, a, b, x0, y0, deg in _SHEPP_LOGAN:
            th = math.radians(deg)
            xr = (xs - x0) * math.cos(th) + (ys - y0) * math.sin(th)
            yr = (ys - y0) * math.cos(th) - (xs - x0) * math.sin(th)
            img[(xr / a) ** 2 + (yr / b) ** 2 <= 1.0] += amp
        img = np.clip(img, 0.0, 1.0)
    elif kind == "blocks":
        img = np.zeros((h, w))
        levels = (0.2, 0.45, 0.7, 0.95)
        for i, lev in enumerate(levels):
            r0, r1 = (i * h) // 5, ((i + 1) * h) // 5
            c0, c1 = w // 8, ((i + 2) * w) // 6
            img[r0:r1, c0:c1] = lev
        img[(2 * h) // 3 : (5 * h) // 6, (3 * w) // 5 : (9 * w) // 10] = 1.0
        img[h // 12 : h // 5, (2 * w) // 3 : (11 * w) // 12] = 0.6
    elif kind == "natural_file":
        if path is None:
            raise ValueError("natural_file phantom needs a file path")
        from PIL import Image

        try:
            with Image.open(path) as im:
                gray = im.convert("F").resize((w, h))
        except OSError as exc:
            raise ValueError(f"unreadable image file {path}: {exc}") from exc
        img = np.asarray(gray, dtype=np.float64)
        lo, hi = img.min(), img.max()
        img = (img - lo) / (hi - lo) if hi > lo else np.zeros_like(img)
    else:
        raise ValueError(f"unknown phantom kind {kind!r}")
    return ComplexImage(img.astype(np.complex128))


def write_mask(mask: SamplingMask, path: str | Path) -> None:
    """Text mask format: 'height width' line, then one kept index per line."""
    with open(path, "w") as fh:
        fh.write(f"{mask.shape[0]} {mask.shape[1]}\n")
        for idx in mask.kept:
            fh.write(f"{idx}\n")


def read_mask(path: str | Path, kind: str = "custom", seed: int = 0) -> SamplingMask:
    with open(path) as fh:
        lines = [ln.strip() for ln in fh if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty mask file")
    h, w = (int(tok) for tok in lines[0].split())
    kept = np.array([int(ln) for ln in lines[1:]], dtype=np.int64)
    return SamplingMask((h, w), kept, kind=kind, seed=seed)
