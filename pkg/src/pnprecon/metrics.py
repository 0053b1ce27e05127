"""Reconstruction quality metrics: NMSE (dB) and windowed SSIM."""

from __future__ import annotations

import numpy as np

from .image import ComplexImage

NMSE_FLOOR_DB = -300.0
SSIM_WINDOW = 8


def _as_array(x) -> np.ndarray:
    return x.data if isinstance(x, ComplexImage) else np.asarray(x)


def nmse(xhat, x0, floor_db: float = NMSE_FLOOR_DB) -> float:
    """Normalized MSE ||xhat - x0||^2 / ||x0||^2 in dB.

    Exact recovery returns the configured floor instead of -inf.
    """
    a = _as_array(xhat)
    b = _as_array(x0)
    ref = float(np.vdot(b, b).real)
    if ref <= 0:
        raise ValueError("ground truth has zero energy")
    diff = a - b
    ratio = float(np.vdot(diff, diff).real) / ref
    if ratio < 1e-30:
        return floor_db
    return 10.0 * np.log10(ratio)


def nmse_linear(xhat, x0) -> float:
    """Linear-scale NMSE (used when averaging across iterations)."""
    a = _as_array(xhat)
    b = _as_array(x0)
    ref = float(np.vdot(b, b).real)
    if ref <= 0:
        raise ValueError("ground truth has zero energy")
    diff = a - b
    return float(np.vdot(diff, diff).real) / ref


def ssim(xhat, x0, window: int = SSIM_WINDOW) -> float:
    """Mean local SSIM over uniform ``window`` x ``window`` patches.

    Inputs with imaginary content are compared by magnitude; real-valued
    images (even when carried in complex containers) are compared as-is, so
    sign flips register as anti-correlation. Stabilizers are C1 = (0.01 L)^2
    and C2 = (0.03 L)^2 with L the dynamic range of the reference (L = 1
    when the reference is constant, so equal constants score exactly 1).
    Window statistics use the unbiased normalization.
    """
    a = _as_array(xhat)
    b = _as_array(x0)
    if np.any(np.iscomplex(a)) or np.any(np.iscomplex(b)):
        a, b = np.abs(a), np.abs(b)
    a = a.real.astype(np.float64)
    b = b.real.astype(np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise ValueError(f"images must be at least {window}x{window}")
    rng = float(b.max() - b.min())
    span = rng if rng > 0 else 1.0
    c1 = (0.01 * span) ** 2
    c2 = (0.03 * span) ** 2

    wa = np.lib.stride_tricks.sliding_window_view(a, (window, window))
    wb = np.lib.stride_tricks.sliding_window_view(b, (window, window))
    n = window * window
    mu_a = wa.mean(axis=(-1, -2))
    mu_b = wb.mean(axis=(-1, -2))
    # unbiased second moments, matching the common implementation convention
    var_a = (wa - mu_a[..., None, None]).reshape(*mu_a.shape, n)
    var_b = (wb - mu_b[..., None, None]).reshape(*mu_b.shape, n)
    sa = np.sum(var_a * var_a, axis=-1) / (n - 1)
    sb = np.sum(var_b * var_b, axis=-1) / (n - 1)
    sab = np.sum(var_a * var_b, axis=-1) / (n - 1)

    score = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / (
        (mu_a**2 + mu_b**2 + c1) * (sa + sb + c2)
    )
    return float(score.mean())
