"""Closed-form linear stage for masked-Fourier operators, its exact
sensitivity, and a conjugate-gradient fallback for general operators.

The estimator solves argmin_x gamma_w/2 ||y - Ax||^2 + gamma/2 ||x - r||^2.
For A = mask o unitary-DFT this reduces to a per-bin diagonal solve between
one forward and one inverse transform; the two-transform budget is a
deliberate cost contract (tests count transform calls).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse.linalg import LinearOperator, cg

from .forward import Problem
from .image import ComplexImage, dft2, idft2


class ConvergenceError(RuntimeError):
    """Iterative solve failed to reach tolerance within its iteration cap."""


@dataclass(frozen=True)
class LinearStageResult:
    """Estimate plus the estimator's normalized sensitivity, as one unit."""

    x2: ComplexImage
    alpha2: float

    def __post_init__(self):
        if not (0 < self.alpha2 <= 1):
            raise ValueError("sensitivity must lie in (0, 1]")


def linear_estimate(r: ComplexImage, gamma: float, prob: Problem) -> ComplexImage:
    """Regularized reconstruction toward prior mean ``r`` with precision
    ``gamma``: kept bins blend measurement and prior spectra, unkept bins
    pass through. Costs exactly two transforms (none when the mask is empty).
    """
    if not (gamma > 0):
        raise ValueError("gamma must be positive")
    if r.shape != prob.shape:
        raise ValueError(f"image shape {r.shape} vs problem shape {prob.shape}")
    if prob.mask.m == 0:
        return r
    spectrum = dft2(r).data.ravel().copy()
    kept = prob.mask.kept
    spectrum[kept] = (gamma * spectrum[kept] + prob.gamma_w * prob.y.data) / (
        prob.gamma_w + gamma
    )
    return idft2(ComplexImage(spectrum.reshape(prob.shape)))


def linear_stage(r: ComplexImage, gamma: float, prob: Problem) -> LinearStageResult:
    """Estimate and sensitivity together, the shape solvers consume."""
    return LinearStageResult(
        x2=linear_estimate(r, gamma, prob),
        alpha2=linear_sensitivity(gamma, prob.gamma_w, prob.mask.m, prob.mask.n),
    )


def linear_sensitivity(gamma: float, gamma_w: float, m: int, n: int) -> float:
    """Normalized Jacobian trace of the masked-Fourier linear estimator:
    ((1 - m/n) * gamma_w + gamma) / (gamma_w + gamma)."""
    if not (gamma > 0 and gamma_w > 0):
        raise ValueError("precisions must be positive")
    if not (0 <= m <= n):
        raise ValueError("need 0 <= m <= n")
    return ((1.0 - m / n) * gamma_w + gamma) / (gamma_w + gamma)


def linear_estimate_general(
    r: ComplexImage,
    gamma: float,
    a_dense: np.ndarray,
    y: np.ndarray,
    gamma_w: float,
    cg_tol: float = 1e-10,
    max_iters: int | None = None,
) -> ComplexImage:
    """Same quadratic for an arbitrary dense operator, solved by CG on the
    normal equations; serves as the cross-check oracle for the closed form.
    """
    if not (gamma > 0):
        raise ValueError("gamma must be positive")
    if not (gamma_w > 0):
        raise ValueError("gamma_w must be positive")
    a = np.asarray(a_dense, dtype=np.complex128)
    y = np.asarray(y, dtype=np.complex128).ravel()
    n = r.size
    if a.shape != (y.size, n):
        raise ValueError(f"operator shape {a.shape} vs ({y.size}, {n})")
    rhs = gamma * r.data.ravel() + gamma_w * (a.conj().T @ y)

    def matvec(z):
        return gamma_w * (a.conj().T @ (a @ z)) + gamma * z

    op = LinearOperator((n, n), matvec=matvec, dtype=np.complex128)
    solution, info = cg(
        op, rhs, x0=r.data.ravel().copy(), rtol=cg_tol, atol=0.0, maxiter=max_iters
    )
    if info != 0:
        raise ConvergenceError(f"CG stopped after {info} iterations above tolerance")
    return ComplexImage(solution.reshape(r.shape))
