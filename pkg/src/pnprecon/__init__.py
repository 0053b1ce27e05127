"""Plug-and-play compressed-sensing reconstruction over masked-Fourier
measurements: forward model, denoisers, AMP/ADMM/VAMP-family solvers,
metrics, and a tuning/evaluation harness."""

from .image import ComplexImage, dft2, idft2, read_cplx, write_cplx
from .forward import (
    KSpaceVector,
    Problem,
    SamplingMask,
    add_awgn,
    apply_A,
    apply_A_adjoint,
    full_mask,
    make_cartesian_mask,
    make_phantom,
    make_point_mask,
    mask_from_kind,
    read_mask,
    simulate_problem,
    write_mask,
)
from .denoisers import (
    DenoiserHandle,
    DivergenceEstimate,
    ExternalDenoiserClient,
    denoise,
    exact_divergence,
    external,
    external_denoise,
    gaussian_smooth,
    linear_test,
    mc_divergence,
    prox_l1_wavelet,
    wavelet_soft,
)
from .linear_stage import (
    LinearStageResult,
    linear_estimate,
    linear_estimate_general,
    linear_sensitivity,
    linear_stage,
)
from .metrics import nmse, nmse_linear, ssim
from .solvers import (
    DenseProblem,
    SolverConfig,
    SolverDiverged,
    SolverTrace,
    compute_zeta,
    run_admm,
    run_admm_pr,
    run_amp,
    run_dd_vamp,
    run_dd_vamp_pp,
    run_solver,
)
from .experiments import BatchResult, TuneResult, TuningSpec, batch_run, tune

__version__ = "0.1.0"
