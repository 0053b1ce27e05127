"""Reconstruction algorithms over the masked-Fourier (or explicit-matrix)
forward model: AMP with Onsager correction, ADMM and its Peaceman-Rachford
variant (classical prox or plug-and-play denoiser), the damped
denoising-VAMP iteration, and its warm-started variant.

Shared conventions:

* every run is deterministic given (problem, config, seed);
* per-iteration traces record estimate quality and the internal precisions;
* instead of returning NaN images, runs abort with :class:`SolverDiverged`
  carrying the partial trace and the last finite estimate.

The warm-started variant and the frozen-precision debug switch share one
code path: freezing both stage precisions at gamma forces the stage
sensitivities used in the extrapolation steps to 1/2, which reproduces the
Peaceman-Rachford reflection exactly, so "switching" is literally
unfreezing the precision updates.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .denoisers import DenoiserHandle, denoise, exact_divergence, mc_divergence, prox_l1_wavelet
from .forward import KSpaceVector, Problem, apply_A, apply_A_adjoint
from .image import ComplexImage
from .linear_stage import linear_estimate, linear_sensitivity
from .metrics import nmse

ALGORITHMS = ("amp", "damp", "admm", "admm_pr", "dd_vamp", "dd_vamp_pp")

_ALPHA_MIN = 1e-12
_ALPHA_MAX = 1.0 - 1e-12


class SolverDiverged(Exception):
    """Structured divergence abort: keeps the partial trace and the last
    finite estimate so callers can still report what happened."""

    def __init__(self, message: str, trace: "SolverTrace", estimate: ComplexImage | None):
        super().__init__(message)
        self.trace = trace
        self.estimate = estimate


@dataclass
class SolverConfig:
    """Algorithm selection plus every tunable knob, with validation."""

    algorithm: str
    max_iters: int = 150
    denoiser: DenoiserHandle | None = None
    amp_beta: float | None = None  # None -> pixels / ||A||_F^2
    admm_gamma: float = 1.0
    admm_lambda: float | None = None  # classical prox mode when set
    wavelet_levels: int = 4
    vamp_gamma2_init: float = 1.0
    vamp_theta: float = 1.0
    zeta_rule: float | str = "adaptive"  # "adaptive" or a fixed value in (0, 1]
    t_switch: int = 0
    freeze_gammas: bool = False
    mc_probes: int = 1
    seed: int = 0
    tau_blowup: float = 1e6
    gamma_bounds: tuple[float, float] = (1e-12, 1e12)
    keep_estimates: bool = False  # stash per-iteration estimates on the trace

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if not (0 < self.vamp_theta <= 1):
            raise ValueError("theta must lie in (0, 1]")
        if not isinstance(self.zeta_rule, str) and not (0 < float(self.zeta_rule) <= 1):
            raise ValueError("fixed zeta must lie in (0, 1]")
        if not (0 <= self.t_switch <= self.max_iters):
            raise ValueError("t_switch must lie in [0, max_iters]")
        if self.mc_probes < 1:
            raise ValueError("mc_probes must be >= 1")


@dataclass
class TraceRecord:
    iteration: int
    nmse_db: float | None = None
    gamma1: float | None = None
    gamma2: float | None = None
    alpha1: float | None = None
    alpha2: float | None = None
    zeta: float | None = None
    tau: float | None = None
    seconds: float = 0.0
    denoiser_calls: int = 0
    alpha_clamped: bool = False
    zeta_gap: float | None = None  # |zeta - 2 min(alpha1, alpha2)| diagnostic
    input_mse: float | None = None  # ||denoiser input - truth||^2 / n, when truth known
    estimate: np.ndarray | None = None  # only with cfg.keep_estimates


_CSV_COLUMNS = (
    "iteration",
    "nmse_db",
    "gamma1",
    "gamma2",
    "alpha1",
    "alpha2",
    "zeta",
    "tau",
    "seconds",
    "denoiser_calls",
)


@dataclass
class SolverTrace:
    algorithm: str
    records: list[TraceRecord] = field(default_factory=list)
    switch_iteration: int | None = None
    diverged: bool = False
    divergence_message: str | None = None
    final_state: dict | None = None  # algorithm-specific iterate bundle

    def final_nmse_db(self) -> float | None:
        return self.records[-1].nmse_db if self.records else None

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(_CSV_COLUMNS)
            for rec in self.records:
                row = []
                for col in _CSV_COLUMNS:
                    val = getattr(rec, col)
                    if val is None:
                        row.append("")
                    elif isinstance(val, float):
                        row.append(f"{val:.17g}")
                    else:
                        row.append(val)
                writer.writerow(row)


@dataclass(frozen=True)
class DenseProblem:
    """Explicit-matrix test instance (same solver interface as masked-DFT)."""

    a: np.ndarray
    y: np.ndarray
    gamma_w: float
    shape: tuple[int, int]
    x0: ComplexImage | None = None

    def __post_init__(self):
        a = np.ascontiguousarray(self.a, dtype=np.complex128)
        y = np.ascontiguousarray(self.y, dtype=np.complex128).ravel()
        n = self.shape[0] * self.shape[1]
        if a.shape != (y.size, n):
            raise ValueError(f"operator shape {a.shape} vs ({y.size}, {n})")
        if not (self.gamma_w > 0):
            raise ValueError("gamma_w must be positive")
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "y", y)


class _MaskedOp:
    """Masked unitary-DFT operator bound to one problem."""

    def __init__(self, prob: Problem):
        self.prob = prob
        self.shape = prob.shape
        self.m = prob.mask.m
        self.n = prob.mask.n
        self.frob2 = float(self.m)
        self.y = prob.y.data
        self.gamma_w = prob.gamma_w
        self.x0 = prob.x0

    def forward(self, x: np.ndarray) -> np.ndarray:
        return apply_A(ComplexImage(x), self.prob.mask).data

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        return apply_A_adjoint(KSpaceVector(self.shape, v, self.prob.mask)).data

    def linear_est(self, r: np.ndarray, gamma: float) -> np.ndarray:
        return linear_estimate(ComplexImage(r), gamma, self.prob).data

    def sensitivity(self, gamma: float) -> float:
        return linear_sensitivity(gamma, self.gamma_w, self.m, self.n)


class _DenseOp:
    """Explicit-matrix operator; linear stage solved through a cached SVD."""

    def __init__(self, prob: DenseProblem):
        self.shape = prob.shape
        self.a = prob.a
        self.y = prob.y
        self.gamma_w = prob.gamma_w
        self.x0 = prob.x0
        self.m, self.n = prob.a.shape
        self.frob2 = float(np.linalg.norm(prob.a) ** 2)
        self._svd = None
        self._ahy = None

    def forward(self, x: np.ndarray) -> np.ndarray:
        return self.a @ x.ravel()

    def adjoint(self, v: np.ndarray) -> np.ndarray:
        return (self.a.conj().T @ v).reshape(self.shape)

    def _factors(self):
        if self._svd is None:
            u, s, vh = np.linalg.svd(self.a, full_matrices=False)
            self._svd = (u, s, vh)
            self._ahy = self.a.conj().T @ self.y
        return self._svd

    def linear_est(self, r: np.ndarray, gamma: float) -> np.ndarray:
        _, s, vh = self._factors()
        rhs = gamma * r.ravel() + self.gamma_w * self._ahy
        z = vh @ rhs
        x = vh.conj().T @ (z / (self.gamma_w * s * s + gamma))
        x += (rhs - vh.conj().T @ z) / gamma
        return x.reshape(self.shape)

    def sensitivity(self, gamma: float) -> float:
        _, s, _ = self._factors()
        filled = np.sum(gamma / (self.gamma_w * s * s + gamma))
        return float(filled + (self.n - s.size)) / self.n


def _operator_for(prob) -> "_MaskedOp | _DenseOp":
    if isinstance(prob, Problem):
        return _MaskedOp(prob)
    if isinstance(prob, DenseProblem):
        return _DenseOp(prob)
    raise TypeError(f"unsupported problem type {type(prob).__name__}")


def compute_zeta(
    alpha1: float, alpha2: float, gamma1: float, gamma2_bar: float, rule
) -> float:
    """Damping factor: either the fixed configured value or the adaptive
    precision-ratio rule 2 / (1 + max(g1/g2bar, g2bar/g1))."""
    if isinstance(rule, str):
        if rule != "adaptive":
            raise ValueError(f"unknown zeta rule {rule!r}")
        if not (gamma1 > 0 and gamma2_bar > 0):
            raise ValueError("precisions must be positive")
        ratio = max(gamma1 / gamma2_bar, gamma2_bar / gamma1)
        return 2.0 / (1.0 + ratio)
    zeta = float(rule)
    if not (0 < zeta <= 1):
        raise ValueError("fixed zeta must lie in (0, 1]")
    return zeta


def _clamp_alpha(value: float) -> tuple[float, bool]:
    clamped = min(max(value, _ALPHA_MIN), _ALPHA_MAX)
    return clamped, clamped != value


def _nmse_or_none(x: np.ndarray, x0: ComplexImage | None) -> float | None:
    return None if x0 is None else nmse(x, x0)


def _check_finite(arr: np.ndarray, what: str, trace: SolverTrace, est: np.ndarray | None):
    if not np.all(np.isfinite(arr)):
        trace.diverged = True
        trace.divergence_message = f"non-finite {what} at iteration {len(trace.records) + 1}"
        image = ComplexImage(est) if est is not None and np.all(np.isfinite(est)) else None
        raise SolverDiverged(trace.divergence_message, trace, image)


def _calls(h: DenoiserHandle | None) -> int:
    return h.calls if h is not None else 0


# ---------------------------------------------------------------------------
# AMP


def run_amp(prob, cfg: SolverConfig) -> tuple[ComplexImage, SolverTrace]:
    """AMP / denoising-AMP: residual update with Onsager memory, noise-level
    tracking tau = ||v||^2 / m, then denoising of the pseudo-data.

    The Onsager term uses the denoiser's exact normalized divergence when it
    is linear and a fresh single-probe estimate otherwise; at the first
    iteration the term is zero (no previous denoiser input exists).
    """
    if cfg.algorithm not in ("amp", "damp"):
        raise ValueError("run_amp expects an amp/damp config")
    if cfg.denoiser is None:
        raise ValueError("amp needs a denoiser handle")
    op = _operator_for(prob)
    h = cfg.denoiser
    beta = cfg.amp_beta if cfg.amp_beta is not None else op.n / op.frob2
    trace = SolverTrace(algorithm=cfg.algorithm)

    x = np.zeros(op.shape, dtype=np.complex128)
    v = np.zeros(op.m, dtype=np.complex128)
    alpha_prev = 0.0
    tau_ref = None
    for t in range(1, cfg.max_iters + 1):
        started = time.perf_counter()
        calls_before = _calls(h)
        v = beta * (op.y - op.forward(x) + (op.n / op.m) * alpha_prev * v)
        _check_finite(v, "residual", trace, x)
        tau = float(np.vdot(v, v).real) / op.m
        if tau_ref is None and tau > 0:
            tau_ref = tau
        if tau_ref is not None and tau > cfg.tau_blowup * tau_ref:
            trace.diverged = True
            trace.divergence_message = (
                f"tau blew up at iteration {t}: {tau:.3e} > {cfg.tau_blowup:.1e} * {tau_ref:.3e}"
            )
            raise SolverDiverged(trace.divergence_message, trace, ComplexImage(x))
        r = x + op.adjoint(v)
        _check_finite(r, "pseudo-data", trace, x)
        r_img = ComplexImage(r)
        tau_call = max(tau, 1e-300)  # zero-measurement runs keep a no-op threshold
        x_img = denoise(h, r_img, tau_call)
        x = x_img.data
        alpha_prev = exact_divergence(h, r_img, tau_call)
        if alpha_prev is None:
            alpha_prev = mc_divergence(
                h, r_img, tau_call, probes=cfg.mc_probes, seed=[cfg.seed, t], fr=x_img
            ).alpha_bar
        input_mse = None
        if op.x0 is not None:
            diff = r - op.x0.data
            input_mse = float(np.vdot(diff, diff).real) / op.n
        trace.records.append(
            TraceRecord(
                iteration=t,
                nmse_db=_nmse_or_none(x, op.x0),
                tau=tau,
                seconds=time.perf_counter() - started,
                denoiser_calls=_calls(h) - calls_before,
                input_mse=input_mse,
                estimate=x.copy() if cfg.keep_estimates else None,
            )
        )
    trace.final_state = {"x": x, "v": v}
    return ComplexImage(x), trace


# ---------------------------------------------------------------------------
# ADMM family


def _admm_core(prob, cfg: SolverConfig, extra_dual: bool) -> tuple[ComplexImage, SolverTrace]:
    if cfg.denoiser is None and cfg.admm_lambda is None:
        raise ValueError("admm needs a denoiser handle or a classical lambda")
    if not (cfg.admm_gamma > 0):
        raise ValueError("admm_gamma must be positive")
    op = _operator_for(prob)
    h = cfg.denoiser
    gamma = cfg.admm_gamma
    tau = 1.0 / gamma
    trace = SolverTrace(algorithm=cfg.algorithm)

    x = np.zeros(op.shape, dtype=np.complex128)
    v = np.zeros_like(x)
    u = np.zeros_like(x)
    for t in range(1, cfg.max_iters + 1):
        started = time.perf_counter()
        calls_before = _calls(h)
        x = op.linear_est(v - u, gamma)
        if extra_dual:
            u = u + (x - v)
        if cfg.admm_lambda is not None:
            v = prox_l1_wavelet(
                ComplexImage(x + u), cfg.admm_lambda / gamma, cfg.wavelet_levels
            ).data
        else:
            v = denoise(h, ComplexImage(x + u), tau).data
        u = u + (x - v)
        _check_finite(v, "estimate", trace, x)
        trace.records.append(
            TraceRecord(
                iteration=t,
                nmse_db=_nmse_or_none(v, op.x0),
                gamma1=gamma,
                gamma2=gamma,
                tau=tau,
                seconds=time.perf_counter() - started,
                denoiser_calls=_calls(h) - calls_before,
                estimate=v.copy() if cfg.keep_estimates else None,
            )
        )
    trace.final_state = {"x": x, "v": v, "u": u}
    return ComplexImage(v), trace


def run_admm(prob, cfg: SolverConfig) -> tuple[ComplexImage, SolverTrace]:
    """ADMM with the masked-Fourier quadratic as the x-update and either the
    classical l1-wavelet prox or a plug-and-play denoiser (at variance
    1/gamma) as the v-update."""
    if cfg.algorithm not in ("admm", "admm_pr"):
        raise ValueError("run_admm expects an admm config")
    return _admm_core(prob, cfg, extra_dual=False)


def run_admm_pr(prob, cfg: SolverConfig) -> tuple[ComplexImage, SolverTrace]:
    """Peaceman-Rachford variant: one extra dual update between the x- and
    v-updates."""
    if cfg.algorithm not in ("admm", "admm_pr"):
        raise ValueError("run_admm_pr expects an admm config")
    return _admm_core(prob, cfg, extra_dual=True)


# ---------------------------------------------------------------------------
# damped denoising-VAMP


def _dd_vamp_core(
    prob, cfg: SolverConfig, freeze_until: int, gamma2_init: float
) -> tuple[ComplexImage, SolverTrace]:
    if cfg.denoiser is None:
        raise ValueError("dd_vamp needs a denoiser handle")
    op = _operator_for(prob)
    h = cfg.denoiser
    lo, hi = cfg.gamma_bounds
    trace = SolverTrace(algorithm=cfg.algorithm)

    r2 = np.zeros(op.shape, dtype=np.complex128)
    gamma2 = float(gamma2_init)
    alpha1_prev: float | None = None
    probe_seed = [cfg.seed, 0]  # one probe vector, reused every iteration
    x1 = r2
    for t in range(1, cfg.max_iters + 1):
        started = time.perf_counter()
        calls_before = _calls(h)
        frozen = (t - 1) < freeze_until
        gamma2_used = gamma2

        # linear stage
        x2 = op.linear_est(r2, gamma2)
        if frozen:
            alpha2, a2_clamped = 0.5, False
        else:
            alpha2, a2_clamped = _clamp_alpha(op.sensitivity(gamma2))
        r1 = (x2 - alpha2 * r2) / (1.0 - alpha2)
        gamma1 = gamma2 if frozen else gamma2 * (1.0 - alpha2) / alpha2
        if not (lo <= gamma1 <= hi):
            trace.diverged = True
            trace.divergence_message = (
                f"gamma1 left [{lo:.1e}, {hi:.1e}] at iteration {t}: {gamma1:.3e}"
            )
            raise SolverDiverged(trace.divergence_message, trace, ComplexImage(x1))
        _check_finite(r1, "denoiser input", trace, x1)
        tau = 1.0 / gamma1

        # denoising stage
        x1_img = denoise(h, ComplexImage(r1), tau)
        x1 = x1_img.data
        a1_clamped = False
        if frozen:
            alpha1 = 0.5
        else:
            est = mc_divergence(
                h, ComplexImage(r1), tau, probes=cfg.mc_probes, seed=probe_seed, fr=x1_img
            )
            alpha_bar, a1_clamped = _clamp_alpha(est.alpha_bar)
            if alpha1_prev is None or cfg.vamp_theta == 1.0:
                alpha1 = alpha_bar  # first denoising step, or damping off
            else:
                theta = cfg.vamp_theta
                alpha1 = (
                    theta * math.sqrt(alpha_bar) + (1.0 - theta) * math.sqrt(alpha1_prev)
                ) ** 2
                alpha1, clipped = _clamp_alpha(alpha1)
                a1_clamped = a1_clamped or clipped
        r2_bar = (x1 - alpha1 * r1) / (1.0 - alpha1)
        gamma2_bar = gamma2 if frozen else gamma1 * (1.0 - alpha1) / alpha1

        # damping stage (zeta = 1 reduces exactly to the undamped update)
        zeta = 1.0 if frozen else compute_zeta(alpha1, alpha2, gamma1, gamma2_bar, cfg.zeta_rule)
        if zeta == 1.0:
            r2, gamma2 = r2_bar, gamma2_bar
        else:
            r2 = zeta * r2_bar + (1.0 - zeta) * r2
            gamma2 = (zeta * gamma2_bar ** -0.5 + (1.0 - zeta) * gamma2 ** -0.5) ** -2
        _check_finite(r2, "extrapolation", trace, x1)
        alpha1_prev = alpha1

        trace.records.append(
            TraceRecord(
                iteration=t,
                nmse_db=_nmse_or_none(x1, op.x0),
                gamma1=gamma1,
                gamma2=gamma2_used,
                alpha1=alpha1,
                alpha2=alpha2,
                zeta=zeta,
                tau=tau,
                seconds=time.perf_counter() - started,
                denoiser_calls=_calls(h) - calls_before,
                alpha_clamped=a1_clamped or a2_clamped,
                zeta_gap=abs(zeta - 2.0 * min(alpha1, alpha2)),
                estimate=x1.copy() if cfg.keep_estimates else None,
            )
        )
    trace.final_state = {
        "r2": r2,
        "gamma2": gamma2,
        "r1": r1,
        "x1": x1,
        "x2": x2,
        "alpha1": alpha1,
        "alpha2": alpha2,
    }
    return ComplexImage(x1), trace


def run_dd_vamp(prob, cfg: SolverConfig) -> tuple[ComplexImage, SolverTrace]:
    """Damped denoising-VAMP from a zero extrapolation point.

    ``cfg.freeze_gammas`` pins gamma1 = gamma2 = admm_gamma for the whole
    run (the Peaceman-Rachford equivalence debug switch).
    """
    if cfg.algorithm not in ("dd_vamp", "dd_vamp_pp"):
        raise ValueError("run_dd_vamp expects a dd_vamp config")
    if cfg.freeze_gammas:
        return _dd_vamp_core(prob, cfg, cfg.max_iters, cfg.admm_gamma)
    return _dd_vamp_core(prob, cfg, 0, cfg.vamp_gamma2_init)


def run_dd_vamp_pp(prob, cfg: SolverConfig) -> tuple[ComplexImage, SolverTrace]:
    """Warm-started variant: run the frozen-precision path (provably the
    Peaceman-Rachford iteration) for t_switch iterations at stepsize
    admm_gamma, then unfreeze the precision updates."""
    if cfg.algorithm != "dd_vamp_pp":
        raise ValueError("run_dd_vamp_pp expects a dd_vamp_pp config")
    est, trace = _dd_vamp_core(prob, cfg, cfg.t_switch, cfg.admm_gamma)
    trace.switch_iteration = cfg.t_switch
    return est, trace


_RUNNERS = {
    "amp": run_amp,
    "damp": run_amp,
    "admm": run_admm,
    "admm_pr": run_admm_pr,
    "dd_vamp": run_dd_vamp,
    "dd_vamp_pp": run_dd_vamp_pp,
}


def run_solver(prob, cfg: SolverConfig) -> tuple[ComplexImage, SolverTrace]:
    """Dispatch on cfg.algorithm."""
    return _RUNNERS[cfg.algorithm](prob, cfg)


def fresh_config(cfg: SolverConfig, **overrides) -> SolverConfig:
    """Copy a config with overrides and a private denoiser handle (fresh call
    counter and connection), for parallel experiment workers.

    Override keys that are not SolverConfig fields are applied to the
    denoiser's parameters instead, so tuning grids can sweep denoiser knobs
    (e.g. the wavelet threshold scale) alongside solver ones.
    """
    field_names = {f.name for f in fields(SolverConfig)}
    cfg_over = {k: v for k, v in overrides.items() if k in field_names}
    den_over = {k: v for k, v in overrides.items() if k not in field_names}
    new = replace(cfg, **cfg_over)
    if new.denoiser is not None and "denoiser" not in overrides:
        params = {k: v for k, v in new.denoiser.params.items() if not k.startswith("_")}
        params.update(den_over)
        new.denoiser = DenoiserHandle(
            new.denoiser.kind, params, new.denoiser.complex_policy
        )
    elif den_over:
        raise ValueError(f"no denoiser handle to take overrides {sorted(den_over)}")
    return new
