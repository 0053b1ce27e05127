import csv

import numpy as np
import pytest

from pnprecon.denoisers import gaussian_smooth, linear_test, prox_l1_wavelet, wavelet_soft
from pnprecon.forward import (
    KSpaceVector,
    Problem,
    apply_A_adjoint,
    custom_mask,
    full_mask,
    make_cartesian_mask,
    make_phantom,
    simulate_problem,
)
from pnprecon.image import ComplexImage
from pnprecon.solvers import (
    DenseProblem,
    SolverConfig,
    SolverDiverged,
    compute_zeta,
    run_admm,
    run_admm_pr,
    run_amp,
    run_dd_vamp,
    run_dd_vamp_pp,
    run_solver,
)


def random_image(shape, seed=0):
    rng = np.random.default_rng(seed)
    return ComplexImage(rng.standard_normal(shape) + 1j * rng.standard_normal(shape))


def random_problem(shape, m, seed, gamma_w=None):
    rng = np.random.default_rng(seed)
    n = shape[0] * shape[1]
    mask = custom_mask(shape, rng.choice(n, size=m, replace=False))
    y = rng.standard_normal(m) + 1j * rng.standard_normal(m)
    gw = float(rng.uniform(1.0, 10.0)) if gamma_w is None else gamma_w
    return Problem(y=KSpaceVector(shape, y, mask), mask=mask, gamma_w=gw)


def cartesian_instance(shape=(64, 64), seed=0, kind="shepp_logan", snr=40.0):
    x0 = make_phantom(shape, kind)
    mask = make_cartesian_mask(shape, 4, 0.08, seed=seed)
    return simulate_problem(x0, mask, snr, seed=100 + seed)


def identity_denoiser(n):
    return linear_test(np.eye(n))


# --- AMP ----------------------------------------------------------------------


def test_amp_zero_measurements_zero_fixed_point():
    mask = make_cartesian_mask((16, 16), 2, 0.125, seed=0)
    y = KSpaceVector((16, 16), np.zeros(mask.m), mask)
    prob = Problem(y=y, mask=mask, gamma_w=1.0)
    cfg = SolverConfig(algorithm="amp", max_iters=10, denoiser=wavelet_soft(1.0))
    est, trace = run_amp(prob, cfg)
    assert np.all(est.data == 0)
    assert all(rec.tau == 0.0 for rec in trace.records)


def test_amp_beta_one_rescues_divergent_instance():
    prob = cartesian_instance(seed=0)
    base = dict(max_iters=60, denoiser=wavelet_soft(1.0, wavelet="haar"), seed=0)
    with pytest.raises(SolverDiverged) as exc_info:
        run_amp(prob, SolverConfig(algorithm="damp", **base))  # beta = n/m default
    assert len(exc_info.value.trace.records) > 0  # partial trace retained
    est, trace = run_amp(prob, SolverConfig(algorithm="damp", amp_beta=1.0, **base))
    assert len(trace.records) == 60
    assert not trace.diverged


def test_amp_deterministic_traces():
    prob = cartesian_instance(shape=(32, 32), seed=1)
    cfg = SolverConfig(algorithm="damp", max_iters=8, denoiser=wavelet_soft(1.0), amp_beta=1.0, seed=3)
    est1, tr1 = run_amp(prob, cfg)
    est2, tr2 = run_amp(prob, cfg)
    assert np.array_equal(est1.data, est2.data)
    for a, b in zip(tr1.records, tr2.records):
        assert a.tau == b.tau and a.nmse_db == b.nmse_db


def test_amp_denoiser_call_counts():
    prob = cartesian_instance(shape=(32, 32), seed=2)
    cfg = SolverConfig(algorithm="damp", max_iters=5, denoiser=wavelet_soft(1.0), amp_beta=1.0)
    _, trace = run_amp(prob, cfg)
    assert all(rec.denoiser_calls == 2 for rec in trace.records)  # 1 denoise + 1 probe
    cfg_lin = SolverConfig(algorithm="amp", max_iters=5, denoiser=gaussian_smooth(1.0), amp_beta=1.0)
    _, trace_lin = run_amp(prob, cfg_lin)
    assert all(rec.denoiser_calls == 1 for rec in trace_lin.records)  # exact divergence


def test_amp_dense_operator_mode():
    rng = np.random.default_rng(4)
    n, m = 256, 128
    a = rng.standard_normal((m, n)) / np.sqrt(m)
    x0 = np.where(rng.random(n) < 0.1, rng.standard_normal(n), 0.0)
    y = a @ x0
    prob = DenseProblem(
        a=a, y=y, gamma_w=1e6, shape=(16, 16), x0=ComplexImage(x0.reshape(16, 16).astype(complex))
    )
    cfg = SolverConfig(algorithm="amp", max_iters=50, denoiser=wavelet_soft(1.4, levels=0), seed=0)
    est, trace = run_amp(prob, cfg)
    assert trace.records[-1].nmse_db < -30  # sparse recovery succeeds


# --- ADMM family ---------------------------------------------------------------


def test_admm_data_dominated_recovers_truth():
    shape = (16, 16)
    x0 = make_phantom(shape, "shepp_logan")
    prob = simulate_problem(x0, full_mask(shape), float("inf"), seed=0)
    cfg = SolverConfig(
        algorithm="admm", max_iters=50, denoiser=identity_denoiser(256), admm_gamma=1.0
    )
    est, trace = run_admm(prob, cfg)
    assert np.linalg.norm(est.data - x0.data) < 1e-4 * np.linalg.norm(x0.data)


def test_admm_classical_fixed_point_conditions():
    shape = (16, 16)
    x0 = make_phantom(shape, "shepp_logan")
    prob = simulate_problem(x0, full_mask(shape), 40.0, seed=1)
    lam, gamma = 0.05, 50.0
    cfg = SolverConfig(
        algorithm="admm",
        max_iters=400,
        denoiser=None,
        admm_lambda=lam,
        admm_gamma=gamma,
        keep_estimates=True,
    )
    _, trace = run_admm(prob, cfg)
    state = trace.final_state
    rel_change = np.linalg.norm(
        trace.records[-1].estimate - trace.records[-2].estimate
    ) / np.linalg.norm(state["v"])
    assert rel_change < 1e-8
    fixed_point = prox_l1_wavelet(ComplexImage(state["x"] + state["u"]), lam / gamma, 4)
    assert np.max(np.abs(fixed_point.data - state["v"])) < 1e-8


def test_admm_identity_denoiser_limit():
    prob = cartesian_instance(shape=(16, 16), seed=3)
    cfg = SolverConfig(
        algorithm="admm", max_iters=150, denoiser=identity_denoiser(256), admm_gamma=1.0
    )
    est, trace = run_admm(prob, cfg)
    # v = x + u collapses the dual (u stays zero) and the iteration converges
    # to the least-norm data-consistent point, i.e. the zero-filled adjoint
    assert np.max(np.abs(trace.final_state["u"])) < 1e-12
    zero_fill = apply_A_adjoint(prob.y)
    assert np.linalg.norm(est.data - zero_fill.data) < 1e-6 * np.linalg.norm(zero_fill.data)


def test_admm_pr_differs_from_admm_but_reduction_matches():
    prob = cartesian_instance(shape=(32, 32), seed=4)
    base = dict(max_iters=10, denoiser=wavelet_soft(1.0), admm_gamma=100.0, keep_estimates=True)
    _, tr_plain = run_admm(prob, SolverConfig(algorithm="admm", **base))
    _, tr_pr = run_admm_pr(prob, SolverConfig(algorithm="admm_pr", **base))
    assert not np.array_equal(tr_plain.records[-1].estimate, tr_pr.records[-1].estimate)
    from pnprecon.solvers import _admm_core

    _, tr_disabled = _admm_core(prob, SolverConfig(algorithm="admm_pr", **base), extra_dual=False)
    for a, b in zip(tr_plain.records, tr_disabled.records):
        assert np.array_equal(a.estimate, b.estimate)


def test_admm_pr_equals_frozen_dd_vamp_10_instances():
    for seed in range(10):
        shape = (8, 8) if seed % 2 == 0 else (16, 16)
        prob = random_problem(shape, shape[0] * shape[1] // 3, seed=seed)
        gamma = float(np.random.default_rng(seed).uniform(0.5, 4.0))
        base = dict(max_iters=10, denoiser=wavelet_soft(1.0), admm_gamma=gamma, keep_estimates=True)
        _, tr_pr = run_admm_pr(prob, SolverConfig(algorithm="admm_pr", **base))
        _, tr_frozen = run_dd_vamp(
            prob, SolverConfig(algorithm="dd_vamp", freeze_gammas=True, **base)
        )
        for a, b in zip(tr_pr.records, tr_frozen.records):
            scale = max(np.max(np.abs(a.estimate)), 1.0)
            assert np.max(np.abs(a.estimate - b.estimate)) <= 1e-10 * scale


def test_dense_operator_linear_stage_matches_cg():
    from pnprecon.linear_stage import linear_estimate_general
    from pnprecon.solvers import _DenseOp

    rng = np.random.default_rng(5)
    a = rng.standard_normal((20, 36)) + 1j * rng.standard_normal((20, 36))
    y = rng.standard_normal(20) + 1j * rng.standard_normal(20)
    prob = DenseProblem(a=a, y=y, gamma_w=2.0, shape=(6, 6))
    op = _DenseOp(prob)
    r = random_image((6, 6), seed=6)
    fast = op.linear_est(r.data, 1.3)
    oracle = linear_estimate_general(r, 1.3, a, y, 2.0, cg_tol=1e-13).data
    np.testing.assert_allclose(fast, oracle, atol=1e-9)


# --- DD-VAMP -------------------------------------------------------------------


def test_compute_zeta_values():
    assert compute_zeta(0.3, 0.4, 2.0, 2.0, "adaptive") == 1.0
    assert compute_zeta(0.3, 0.4, 3.0, 1.0, "adaptive") == pytest.approx(0.5)
    assert compute_zeta(0.3, 0.4, 1.0, 3.0, "adaptive") == pytest.approx(0.5)
    assert compute_zeta(0.3, 0.4, 1.0, 1.0, 0.7) == 0.7
    rng = np.random.default_rng(7)
    for _ in range(50):
        g1, g2 = rng.uniform(1e-6, 1e6, size=2)
        z = compute_zeta(0.5, 0.5, g1, g2, "adaptive")
        assert 0 < z <= 1
    with pytest.raises(ValueError):
        compute_zeta(0.5, 0.5, 1.0, 1.0, 1.5)
    with pytest.raises(ValueError):
        compute_zeta(0.5, 0.5, 1.0, 1.0, "bogus")


def test_dd_vamp_bookkeeping_identities():
    prob = cartesian_instance(shape=(32, 32), seed=5)
    cfg = SolverConfig(
        algorithm="dd_vamp",
        max_iters=8,
        denoiser=wavelet_soft(1.0, wavelet="haar"),
        vamp_gamma2_init=10.0,
        vamp_theta=1.0,
        zeta_rule=1.0,
        seed=2,
    )
    _, trace = run_dd_vamp(prob, cfg)
    recs = trace.records
    for rec in recs:
        # gamma1 as computed from (gamma2, alpha2) on line 6
        assert rec.gamma1 == rec.gamma2 * (1.0 - rec.alpha2) / rec.alpha2
    for prev, nxt in zip(recs, recs[1:]):
        # with zeta = 1, the next gamma2 is exactly gamma2_bar from lines 11-12
        assert nxt.gamma2 == prev.gamma1 * (1.0 - prev.alpha1) / prev.alpha1


def test_dd_vamp_damping_reduces_step():
    prob = cartesian_instance(shape=(32, 32), seed=6)
    base = dict(
        max_iters=1, denoiser=wavelet_soft(1.0), vamp_gamma2_init=10.0, vamp_theta=1.0, seed=4
    )
    _, tr_full = run_dd_vamp(prob, SolverConfig(algorithm="dd_vamp", zeta_rule=1.0, **base))
    _, tr_half = run_dd_vamp(prob, SolverConfig(algorithm="dd_vamp", zeta_rule=0.5, **base))
    # r2 starts at zero, so |r2_new| measures the step length
    step_full = np.linalg.norm(tr_full.final_state["r2"])
    step_half = np.linalg.norm(tr_half.final_state["r2"])
    assert step_half == pytest.approx(0.5 * step_full, rel=1e-12)


def test_dd_vamp_fixed_point_invariant_under_damping():
    rng = np.random.default_rng(8)
    n = 256
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    # symmetric PSD with mean eigenvalue below m/n = 0.25, so the precision
    # recursion has an interior fixed point to converge to
    psd = (q * rng.uniform(0.05, 0.3, size=n)) @ q.T
    prob = cartesian_instance(shape=(16, 16), seed=7)
    finals = []
    for zeta_rule, theta in [(1.0, 1.0), (0.5, 0.5), (0.5, 1.0), ("adaptive", 0.5)]:
        cfg = SolverConfig(
            algorithm="dd_vamp",
            max_iters=300,
            denoiser=linear_test(psd),
            vamp_gamma2_init=5.0,
            vamp_theta=theta,
            zeta_rule=zeta_rule,
            seed=9,
        )
        est, trace = run_dd_vamp(prob, cfg)
        finals.append(est.data)
    ref = finals[0]
    for other in finals[1:]:
        assert np.linalg.norm(other - ref) < 1e-6 * np.linalg.norm(ref)


def test_dd_vamp_deterministic():
    prob = cartesian_instance(shape=(32, 32), seed=8)
    cfg = SolverConfig(
        algorithm="dd_vamp", max_iters=10, denoiser=wavelet_soft(1.0), vamp_theta=0.5, seed=5
    )
    est1, tr1 = run_dd_vamp(prob, cfg)
    est2, tr2 = run_dd_vamp(prob, cfg)
    assert np.array_equal(est1.data, est2.data)
    for a, b in zip(tr1.records, tr2.records):
        assert (a.gamma1, a.gamma2, a.alpha1, a.alpha2, a.zeta, a.nmse_db) == (
            b.gamma1,
            b.gamma2,
            b.alpha1,
            b.alpha2,
            b.zeta,
            b.nmse_db,
        )


def test_dd_vamp_denoiser_call_counts():
    prob = cartesian_instance(shape=(32, 32), seed=9)
    cfg = SolverConfig(algorithm="dd_vamp", max_iters=4, denoiser=wavelet_soft(1.0), seed=1)
    _, trace = run_dd_vamp(prob, cfg)
    assert all(rec.denoiser_calls == 2 for rec in trace.records)  # probes + 1 with K = 1
    cfg3 = SolverConfig(
        algorithm="dd_vamp", max_iters=4, denoiser=wavelet_soft(1.0), mc_probes=3, seed=1
    )
    _, trace3 = run_dd_vamp(prob, cfg3)
    assert all(rec.denoiser_calls == 4 for rec in trace3.records)
    cfg_frozen = SolverConfig(
        algorithm="dd_vamp", max_iters=4, denoiser=wavelet_soft(1.0), freeze_gammas=True, seed=1
    )
    _, trace_frozen = run_dd_vamp(prob, cfg_frozen)
    assert all(rec.denoiser_calls == 1 for rec in trace_frozen.records)  # no probe needed


def test_dd_vamp_pp_zero_switch_equals_plain():
    prob = cartesian_instance(shape=(32, 32), seed=10)
    gamma = 30.0
    cfg_pp = SolverConfig(
        algorithm="dd_vamp_pp",
        max_iters=12,
        denoiser=wavelet_soft(1.0),
        admm_gamma=gamma,
        t_switch=0,
        vamp_theta=0.5,
        seed=6,
    )
    est_pp, tr_pp = run_dd_vamp_pp(prob, cfg_pp)
    cfg_dv = SolverConfig(
        algorithm="dd_vamp",
        max_iters=12,
        denoiser=wavelet_soft(1.0),
        vamp_gamma2_init=gamma,
        vamp_theta=0.5,
        seed=6,
    )
    est_dv, tr_dv = run_dd_vamp(prob, cfg_dv)
    assert np.array_equal(est_pp.data, est_dv.data)
    assert tr_pp.switch_iteration == 0


def test_dd_vamp_pp_full_switch_equals_admm_pr():
    prob = cartesian_instance(shape=(32, 32), seed=11)
    gamma = 50.0
    cfg_pp = SolverConfig(
        algorithm="dd_vamp_pp",
        max_iters=10,
        denoiser=wavelet_soft(1.0),
        admm_gamma=gamma,
        t_switch=10,
        keep_estimates=True,
        seed=7,
    )
    _, tr_pp = run_dd_vamp_pp(prob, cfg_pp)
    cfg_pr = SolverConfig(
        algorithm="admm_pr",
        max_iters=10,
        denoiser=wavelet_soft(1.0),
        admm_gamma=gamma,
        keep_estimates=True,
    )
    _, tr_pr = run_admm_pr(prob, cfg_pr)
    for a, b in zip(tr_pp.records, tr_pr.records):
        scale = max(np.max(np.abs(b.estimate)), 1.0)
        assert np.max(np.abs(a.estimate - b.estimate)) <= 1e-10 * scale
    assert all(rec.denoiser_calls == 1 for rec in tr_pp.records)


def test_dd_vamp_pp_trace_is_contiguous_with_marked_switch():
    prob = cartesian_instance(shape=(32, 32), seed=12)
    cfg = SolverConfig(
        algorithm="dd_vamp_pp",
        max_iters=20,
        denoiser=wavelet_soft(1.0, wavelet="haar"),
        admm_gamma=100.0,
        t_switch=8,
        vamp_theta=0.5,
        seed=8,
    )
    _, trace = run_dd_vamp_pp(prob, cfg)
    assert trace.switch_iteration == 8
    assert [rec.iteration for rec in trace.records] == list(range(1, 21))
    # warm-up iterations cost one call, adaptive iterations two
    assert all(rec.denoiser_calls == 1 for rec in trace.records[:8])
    assert all(rec.denoiser_calls == 2 for rec in trace.records[8:])


def test_divergence_guard_is_structured():
    prob = cartesian_instance(seed=13)
    cfg = SolverConfig(
        algorithm="dd_vamp",
        max_iters=150,
        denoiser=wavelet_soft(4.0, wavelet="haar"),
        vamp_gamma2_init=100.0,
        vamp_theta=1.0,
        zeta_rule=1.0,
        seed=3,
    )
    with pytest.raises(SolverDiverged) as exc_info:
        run_dd_vamp(prob, cfg)
    err = exc_info.value
    assert err.trace.diverged
    assert err.trace.divergence_message
    assert len(err.trace.records) > 0
    assert err.estimate is None or np.all(np.isfinite(err.estimate.data))


def test_run_solver_dispatch_and_validation():
    prob = cartesian_instance(shape=(32, 32), seed=14)
    cfg = SolverConfig(algorithm="admm", max_iters=3, denoiser=wavelet_soft(1.0), admm_gamma=10.0)
    est, trace = run_solver(prob, cfg)
    assert trace.algorithm == "admm"
    with pytest.raises(ValueError):
        SolverConfig(algorithm="nope")
    with pytest.raises(ValueError):
        SolverConfig(algorithm="dd_vamp", vamp_theta=0.0)
    with pytest.raises(ValueError):
        SolverConfig(algorithm="dd_vamp", zeta_rule=1.7)
    with pytest.raises(ValueError):
        SolverConfig(algorithm="dd_vamp_pp", t_switch=200, max_iters=100)
    with pytest.raises(ValueError):
        run_amp(prob, cfg)  # admm config handed to the amp runner


def test_trace_csv_schema(tmp_path):
    prob = cartesian_instance(shape=(32, 32), seed=15)
    cfg = SolverConfig(
        algorithm="dd_vamp", max_iters=3, denoiser=wavelet_soft(1.0, wavelet="haar"), seed=1
    )
    _, trace = run_dd_vamp(prob, cfg)
    path = tmp_path / "trace.csv"
    trace.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == [
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
    ]
    assert len(rows) == 4
    assert rows[1][0] == "1"
    assert float(rows[1][2]) > 0  # gamma1 populated for dd_vamp

    cfg_amp = SolverConfig(
        algorithm="amp", max_iters=2, denoiser=wavelet_soft(1.0), amp_beta=1.0
    )
    _, trace_amp = run_amp(prob, cfg_amp)
    trace_amp.to_csv(path)
    with open(path) as fh:
        rows = list(csv.reader(fh))
    assert rows[1][2] == ""  # gamma1 blank where inapplicable
    assert rows[1][7] != ""  # tau populated
