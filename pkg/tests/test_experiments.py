import math

import numpy as np
import pytest

from pnprecon.experiments import (
    BatchResult,
    TuningSpec,
    batch_run,
    lower_median,
    tune,
)
from pnprecon.forward import full_mask, make_cartesian_mask, make_phantom, simulate_problem
from pnprecon.image import ComplexImage
from pnprecon.metrics import nmse, nmse_linear, ssim
from pnprecon.solvers import SolverConfig
from pnprecon.denoisers import wavelet_soft


def random_image(shape, seed=0):
    rng = np.random.default_rng(seed)
    return ComplexImage(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


# --- nmse ---------------------------------------------------------------------


def test_nmse_exact_recovery_floor():
    x = random_image((8, 8), seed=1)
    assert nmse(x, x) == -300.0


def test_nmse_zero_estimate():
    x = random_image((8, 8), seed=2)
    assert nmse(ComplexImage.zeros(8, 8), x) == pytest.approx(0.0, abs=1e-12)


def test_nmse_known_error_level():
    rng = np.random.default_rng(3)
    x0 = random_image((16, 16), seed=3)
    e = rng.standard_normal((16, 16)) + 1j * rng.standard_normal((16, 16))
    e *= 0.1 * np.linalg.norm(x0.data) / np.linalg.norm(e)  # ||e||^2 = 0.01 ||x0||^2
    xhat = ComplexImage(x0.data + e)
    assert nmse(xhat, x0) == pytest.approx(-20.0, abs=1e-9)


def test_nmse_scale_and_phase_invariances():
    x0 = random_image((8, 8), seed=4)
    xh = random_image((8, 8), seed=5)
    base = nmse(xh, x0)
    c = 2.5 - 1.1j
    assert nmse(ComplexImage(c * xh.data), ComplexImage(c * x0.data)) == pytest.approx(base)
    phase = np.exp(1j * 0.7)
    assert nmse(ComplexImage(phase * xh.data), ComplexImage(phase * x0.data)) == pytest.approx(
        base
    )


def test_nmse_rejects_zero_truth():
    with pytest.raises(ValueError):
        nmse(random_image((4, 4)), ComplexImage.zeros(4, 4))


# --- ssim ---------------------------------------------------------------------


def test_ssim_identical_images():
    x = make_phantom((32, 32), "shepp_logan")
    assert ssim(x, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_negated_image_is_negative():
    # zero-mean structure: the anti-correlated covariance term sets the sign
    i, j = np.meshgrid(np.arange(32), np.arange(32), indexing="ij")
    x = ComplexImage(np.sin(2 * np.pi * i / 8) * np.cos(2 * np.pi * j / 8) + 0j)
    neg = ComplexImage(-x.data)
    assert ssim(neg, x) < 0


def test_ssim_equal_constants():
    a = ComplexImage(np.full((16, 16), 0.5))
    b = ComplexImage(np.full((16, 16), 0.5))
    assert ssim(a, b) == pytest.approx(1.0)


def test_ssim_complex_uses_magnitude():
    x = make_phantom((16, 16), "blocks")
    rotated = ComplexImage(x.data * np.exp(1j * 1.3))
    assert ssim(rotated, x) == pytest.approx(1.0, abs=1e-12)


def test_ssim_shape_mismatch():
    with pytest.raises(ValueError):
        ssim(random_image((8, 8)), random_image((16, 16)))
    with pytest.raises(ValueError):
        ssim(random_image((4, 4)), random_image((4, 4)))  # below window size


def test_ssim_degrades_with_noise():
    x = make_phantom((32, 32), "shepp_logan")
    rng = np.random.default_rng(6)
    noisy = ComplexImage(x.data + 0.2 * rng.standard_normal((32, 32)))
    val = ssim(noisy, x)
    assert 0.0 < val < 0.95


# --- tuning -------------------------------------------------------------------


def make_training_problems(n=2, shape=(32, 32)):
    probs = []
    for seed in range(n):
        x0 = make_phantom(shape, "shepp_logan" if seed % 2 == 0 else "blocks")
        mask = make_cartesian_mask(shape, 4, 0.08, seed=seed)
        probs.append(simulate_problem(x0, mask, 40.0, seed=50 + seed))
    return probs


def test_lower_median():
    assert lower_median([3.0, 1.0, 2.0]) == 2.0
    assert lower_median([4.0, 1.0, 3.0, 2.0]) == 2.0  # lower of the two middles
    with pytest.raises(ValueError):
        lower_median([])


def test_tune_single_point_grid():
    probs = make_training_problems(2)
    spec = TuningSpec(grid=({"admm_gamma": 100.0},), problems=tuple(probs), t_meas=3, t_max=8)
    template = SolverConfig(algorithm="admm", denoiser=wavelet_soft(1.0, wavelet="haar"))
    result = tune(spec, template)
    assert result.best == {"admm_gamma": 100.0}
    assert len(result.rows) == 1
    assert math.isfinite(result.rows[0].score_db)


def test_tune_prefers_stable_beta():
    # amp with the default masked-DFT beta (n/m) diverges on this instance,
    # while beta = 1 completes; tuning must pick the stable point
    probs = make_training_problems(1, shape=(64, 64))
    spec = TuningSpec(
        grid=({"amp_beta": 4.0}, {"amp_beta": 1.0}), problems=tuple(probs), t_meas=5, t_max=40
    )
    template = SolverConfig(algorithm="damp", denoiser=wavelet_soft(1.0, wavelet="haar"), seed=0)
    result = tune(spec, template)
    assert result.best == {"amp_beta": 1.0}
    assert math.isinf(result.rows[0].score_db)
    assert result.rows[0].n_diverged == 1


def test_tune_deterministic_and_tie_break(tmp_path):
    probs = make_training_problems(2)
    grid = ({"admm_gamma": 50.0}, {"admm_gamma": 50.0})  # exact tie: first wins
    spec = TuningSpec(grid=grid, problems=tuple(probs), t_meas=2, t_max=6)
    template = SolverConfig(algorithm="admm", denoiser=wavelet_soft(1.0), seed=1)
    r1 = tune(spec, template)
    r2 = tune(spec, template)
    assert r1.best is not r2.best and r1.best == r2.best
    assert [row.score_db for row in r1.rows] == [row.score_db for row in r2.rows]
    assert r1.rows[0].score_db == r1.rows[1].score_db
    assert r1.best_index == 0
    r1.to_csv(tmp_path / "tie.csv")
    lines = (tmp_path / "tie.csv").read_text().splitlines()
    assert sum(line.endswith(",1") for line in lines[1:]) == 1  # one selected row


def test_tune_all_divergent_raises():
    from pnprecon.experiments import TuningError

    probs = make_training_problems(1, shape=(64, 64))
    spec = TuningSpec(grid=({"amp_beta": 4.0},), problems=tuple(probs), t_meas=5, t_max=40)
    template = SolverConfig(algorithm="damp", denoiser=wavelet_soft(1.0, wavelet="haar"), seed=0)
    with pytest.raises(TuningError):
        tune(spec, template)


def test_tune_denoiser_param_override():
    probs = make_training_problems(1)
    spec = TuningSpec(grid=({"lam": 0.5}, {"lam": 2.0}), problems=tuple(probs), t_meas=2, t_max=6)
    template = SolverConfig(algorithm="admm", denoiser=wavelet_soft(1.0), admm_gamma=100.0)
    result = tune(spec, template)
    assert set(result.best) == {"lam"}


def test_tune_report_csv(tmp_path):
    probs = make_training_problems(1)
    spec = TuningSpec(
        grid=({"admm_gamma": 10.0}, {"admm_gamma": 100.0}), problems=tuple(probs), t_meas=2, t_max=5
    )
    template = SolverConfig(algorithm="admm", denoiser=wavelet_soft(1.0))
    result = tune(spec, template)
    path = tmp_path / "report.csv"
    result.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "admm_gamma,score_db,n_diverged,selected"
    assert len(lines) == 3
    assert sum(line.endswith(",1") for line in lines[1:]) == 1


def test_tuning_spec_validation():
    probs = make_training_problems(1)
    with pytest.raises(ValueError):
        TuningSpec(grid=(), problems=tuple(probs))
    with pytest.raises(ValueError):
        TuningSpec(grid=({"a": 1},), problems=tuple(probs), t_meas=10, t_max=5)


# --- batch runs -----------------------------------------------------------------


def test_batch_single_problem_matches_own_trace():
    probs = make_training_problems(1)
    cfg = SolverConfig(algorithm="admm", max_iters=6, denoiser=wavelet_soft(1.0), admm_gamma=50.0)
    result = batch_run(probs, cfg)
    assert result.n_diverged == 0
    trace = result.traces[0]
    assert result.iterations == [rec.iteration for rec in trace.records]
    assert result.median_nmse_db == [rec.nmse_db for rec in trace.records]
    assert result.n_alive == [1] * 6


def test_batch_duplicated_problem_median_is_single_trace():
    probs = make_training_problems(1) * 3
    cfg = SolverConfig(algorithm="admm", max_iters=5, denoiser=wavelet_soft(1.0), admm_gamma=50.0)
    result = batch_run(probs, cfg)
    single = batch_run(probs[:1], cfg)
    assert result.median_nmse_db == single.median_nmse_db
    assert result.n_alive == [3] * 5


def test_batch_mixed_divergence_reported():
    # undamped precision updates diverge on the cartesian instance but the
    # full-mask instance (a unitary operator) completes
    shape = (64, 64)
    x0 = make_phantom(shape, "shepp_logan")
    hard = simulate_problem(x0, make_cartesian_mask(shape, 4, 0.08, seed=0), 40.0, seed=1)
    easy = simulate_problem(x0, full_mask(shape), 40.0, seed=2)
    cfg = SolverConfig(
        algorithm="dd_vamp",
        max_iters=60,
        denoiser=wavelet_soft(4.0, wavelet="haar"),
        vamp_gamma2_init=100.0,
        vamp_theta=1.0,
        zeta_rule=1.0,
        seed=3,
    )
    result = batch_run([easy, hard], cfg)
    assert result.n_diverged == 1
    assert result.errors[0] is None and result.errors[1] is not None
    assert result.n_alive[0] == 2
    assert result.n_alive[-1] == 1  # survivors only beyond the abort point


def test_batch_csv(tmp_path):
    probs = make_training_problems(1)
    cfg = SolverConfig(algorithm="admm", max_iters=4, denoiser=wavelet_soft(1.0), admm_gamma=50.0)
    result = batch_run(probs, cfg)
    path = tmp_path / "batch.csv"
    result.to_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,median_nmse_db,n_alive"
    assert len(lines) == 5


def test_parallel_workers_match_serial(monkeypatch):
    probs = make_training_problems(3)
    cfg = SolverConfig(
        algorithm="dd_vamp", max_iters=6, denoiser=wavelet_soft(1.0, wavelet="haar"), seed=4
    )
    monkeypatch.delenv("PNPRECON_THREADS", raising=False)
    serial = batch_run(probs, cfg)
    monkeypatch.setenv("PNPRECON_THREADS", "3")
    parallel = batch_run(probs, cfg)
    assert serial.median_nmse_db == parallel.median_nmse_db
    assert serial.n_alive == parallel.n_alive
