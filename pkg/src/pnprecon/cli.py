"""Batch command-line front end.

Subcommands: ``simulate`` (phantom + mask + noisy k-space), ``recon`` (run a
solver, export estimate/trace), ``tune`` (grid search). Every command writes
a JSON manifest of its fully-resolved inputs before doing work, so any run
can be reproduced from the manifest alone.

Exit codes: 0 success, 2 usage error, 3 solver divergence, 4 I/O failure.
"""

from __future__ import annotations

import argparse
import itertools
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .denoisers import close_denoiser, external, gaussian_smooth, wavelet_soft
from .experiments import DEFAULT_T_MAX, DEFAULT_T_MEAS, TuningSpec, tune
from .forward import (
    Problem,
    KSpaceVector,
    make_phantom,
    mask_from_kind,
    read_mask,
    simulate_problem,
    write_mask,
)
from .image import ComplexImage, read_cplx, write_cplx
from .solvers import SolverConfig, SolverDiverged, run_solver

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3
EXIT_IO = 4


def _write_manifest(path: Path, payload: dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def _load_config_file(path: str | None) -> dict:
    """Flat key = value file; '#' starts a comment."""
    if path is None:
        return {}
    values = {}
    for raw in Path(path).read_text().splitlines():
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"bad config line: {raw!r}")
        key, val = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = val
    return values


def _resolve(args, config: dict, key: str, default, cast):
    """Precedence: command-line flag, then config file, then default."""
    flag = getattr(args, key, None)
    if flag is not None:
        return flag
    if key in config:
        return cast(config[key])
    return default


def _parse_zeta(text: str):
    return text if text == "adaptive" else float(text)


def write_pgm(img: ComplexImage, path: Path) -> tuple[float, float]:
    """8-bit binary PGM of the magnitude, min-max scaled; returns the scale."""
    mag = np.abs(img.data)
    lo, hi = float(mag.min()), float(mag.max())
    scaled = np.zeros_like(mag) if hi <= lo else (mag - lo) / (hi - lo)
    body = (scaled * 255.0 + 0.5).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.width} {img.height}\n255\n".encode())
        fh.write(body.tobytes())
    return lo, hi


def _problem_from_dir(problem_dir: Path) -> Problem:
    try:
        manifest = json.loads((problem_dir / "manifest.json").read_text())
        resolved = manifest["resolved"]
        mask = read_mask(problem_dir / "mask.txt", kind=resolved.get("mask", "custom"))
        grid = read_cplx(problem_dir / "kspace.cplx")
        y = KSpaceVector(mask.shape, grid.data.ravel()[mask.kept], mask)
        phantom_path = problem_dir / "phantom.cplx"
        x0 = read_cplx(phantom_path) if phantom_path.exists() else None
        return Problem(
            y=y,
            mask=mask,
            gamma_w=float(manifest["gamma_w"]),
            x0=x0,
            snr_db=resolved.get("snr_db"),
        )
    except (ValueError, KeyError) as exc:  # corrupt files are an I/O failure
        raise OSError(f"unusable problem directory {problem_dir}: {exc}") from exc


def _add_simulate(sub) -> None:
    p = sub.add_parser("simulate", help="generate a phantom, mask, and noisy k-space")
    p.add_argument("--out", required=True)
    p.add_argument("--phantom", choices=["shepp_logan", "blocks", "natural_file"])
    p.add_argument("--natural-file", dest="natural_file")
    p.add_argument("--size", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--width", type=int)
    p.add_argument("--mask", choices=["cartesian", "point", "full"])
    p.add_argument("--R", type=float, dest="r")
    p.add_argument("--center-frac", type=float, dest="center_frac")
    p.add_argument("--poly-degree", type=float, dest="poly_degree")
    p.add_argument("--snr-db", type=float, dest="snr_db")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")


def _add_solver_flags(p) -> None:
    p.add_argument("--alg", choices=["amp", "damp", "admm", "admm_pr", "dd_vamp", "dd_vamp_pp"])
    p.add_argument("--iters", type=int)
    p.add_argument("--denoiser", choices=["wavelet_soft", "gaussian_smooth", "external", "none"])
    p.add_argument("--lam", type=float)
    p.add_argument("--levels", type=int)
    p.add_argument("--wavelet", choices=["d4", "haar"])
    p.add_argument("--smooth-width", type=float, dest="smooth_width")
    p.add_argument("--endpoint")
    p.add_argument("--timeout", type=float)
    p.add_argument("--policy", choices=["split_re_im", "magnitude_phase"])
    p.add_argument("--beta", type=float)
    p.add_argument("--gamma", type=float)
    p.add_argument("--classical-lambda", type=float, dest="classical_lambda")
    p.add_argument("--gamma2-init", type=float, dest="gamma2_init")
    p.add_argument("--theta", type=float)
    p.add_argument("--zeta", type=_parse_zeta)
    p.add_argument("--t-switch", type=int, dest="t_switch")
    p.add_argument("--mc-probes", type=int, dest="mc_probes")
    p.add_argument("--seed", type=int)
    p.add_argument("--config")


def _add_recon(sub) -> None:
    p = sub.add_parser("recon", help="reconstruct a simulated problem")
    p.add_argument("--problem", required=True)
    p.add_argument("--out", required=True)
    _add_solver_flags(p)


def _add_tune(sub) -> None:
    p = sub.add_parser("tune", help="grid-tune solver parameters on training problems")
    p.add_argument("--problems", nargs="+", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--param", action="append", default=[])
    p.add_argument("--grid", action="append", default=[])
    p.add_argument("--t-meas", type=int, dest="t_meas")
    p.add_argument("--t-max", type=int, dest="t_max")
    _add_solver_flags(p)


_SOLVER_DEFAULTS = {
    "alg": ("dd_vamp_pp", str),
    "iters": (150, int),
    "denoiser": ("wavelet_soft", str),
    "lam": (1.0, float),
    "levels": (4, int),
    "wavelet": ("d4", str),
    "smooth_width": (1.0, float),
    "endpoint": (None, str),
    "timeout": (30.0, float),
    "policy": ("split_re_im", str),
    "beta": (None, float),
    "gamma": (1.0, float),
    "classical_lambda": (None, float),
    "gamma2_init": (1.0, float),
    "theta": (1.0, float),
    "zeta": ("adaptive", _parse_zeta),
    "t_switch": (0, int),
    "mc_probes": (1, int),
    "seed": (0, int),
}


def _resolve_solver(args, config: dict) -> dict:
    return {
        key: _resolve(args, config, key, default, cast)
        for key, (default, cast) in _SOLVER_DEFAULTS.items()
    }


def _build_denoiser(resolved: dict):
    kind = resolved["denoiser"]
    if kind == "none":
        return None
    if kind == "wavelet_soft":
        handle = wavelet_soft(resolved["lam"], resolved["levels"], resolved["wavelet"])
    elif kind == "gaussian_smooth":
        handle = gaussian_smooth(resolved["smooth_width"])
    elif kind == "external":
        if not resolved["endpoint"]:
            raise ValueError("external denoiser needs --endpoint")
        handle = external(resolved["endpoint"], resolved["timeout"])
    else:
        raise ValueError(f"unknown denoiser {kind!r}")
    handle.complex_policy = resolved["policy"]
    return handle


def _build_config(resolved: dict, iters: int | None = None) -> SolverConfig:
    return SolverConfig(
        algorithm=resolved["alg"],
        max_iters=iters if iters is not None else resolved["iters"],
        denoiser=_build_denoiser(resolved),
        amp_beta=resolved["beta"],
        admm_gamma=resolved["gamma"],
        admm_lambda=resolved["classical_lambda"],
        wavelet_levels=resolved["levels"],
        vamp_gamma2_init=resolved["gamma2_init"],
        vamp_theta=resolved["theta"],
        zeta_rule=resolved["zeta"],
        t_switch=resolved["t_switch"],
        mc_probes=resolved["mc_probes"],
        seed=resolved["seed"],
    )


def cmd_simulate(args) -> int:
    config = _load_config_file(args.config)
    defaults = {
        "phantom": ("shepp_logan", str),
        "natural_file": (None, str),
        "size": (128, int),
        "height": (None, int),
        "width": (None, int),
        "mask": ("cartesian", str),
        "r": (4.0, float),
        "center_frac": (0.08, float),
        "poly_degree": (6.0, float),
        "snr_db": (40.0, float),
        "seed": (0, int),
    }
    resolved = {k: _resolve(args, config, k, d, cast) for k, (d, cast) in defaults.items()}
    height = resolved["height"] or resolved["size"]
    width = resolved["width"] or resolved["size"]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": "simulate",
        "version": __version__,
        "resolved": {**resolved, "height": height, "width": width},
    }
    _write_manifest(out / "manifest.json", manifest)

    x0 = make_phantom((height, width), resolved["phantom"], resolved["natural_file"])
    mask = mask_from_kind(
        resolved["mask"],
        (height, width),
        R=resolved["r"],
        center_fraction=resolved["center_frac"],
        poly_degree=resolved["poly_degree"],
        seed=resolved["seed"],
    )
    prob = simulate_problem(x0, mask, snr_db=resolved["snr_db"], seed=resolved["seed"])

    write_cplx(x0, out / "phantom.cplx")
    write_mask(mask, out / "mask.txt")
    grid = np.zeros(mask.n, dtype=np.complex128)
    grid[mask.kept] = prob.y.data
    write_cplx(ComplexImage(grid.reshape(mask.shape)), out / "kspace.cplx")
    manifest["gamma_w"] = prob.gamma_w
    manifest["kept_bins"] = int(mask.m)
    manifest["outputs"] = ["phantom.cplx", "mask.txt", "kspace.cplx"]
    _write_manifest(out / "manifest.json", manifest)
    print(f"simulate: wrote {out} (kept {mask.m} of {mask.n} bins, gamma_w={prob.gamma_w:.6g})")
    return EXIT_OK


def cmd_recon(args) -> int:
    config = _load_config_file(args.config)
    resolved = _resolve_solver(args, config)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": "recon",
        "version": __version__,
        "problem": str(Path(args.problem)),
        "resolved": resolved,
    }
    _write_manifest(out / "manifest.json", manifest)

    prob = _problem_from_dir(Path(args.problem))
    cfg = _build_config(resolved)
    handle = cfg.denoiser
    diverged_msg = None
    try:
        estimate, trace = run_solver(prob, cfg)
    except SolverDiverged as exc:
        estimate, trace = exc.estimate, exc.trace
        diverged_msg = str(exc)
    finally:
        if handle is not None:
            close_denoiser(handle)

    trace.to_csv(out / "trace.csv")
    if estimate is not None:
        write_cplx(estimate, out / "estimate.cplx")
        lo, hi = write_pgm(estimate, out / "estimate.pgm")
        manifest["pgm_scale"] = {"min": lo, "max": hi}
    manifest["iterations_completed"] = len(trace.records)
    if trace.switch_iteration is not None:
        manifest["switch_iteration"] = trace.switch_iteration
    if diverged_msg is not None:
        manifest["diverged"] = diverged_msg
    final = trace.final_nmse_db()
    if final is not None:
        manifest["final_nmse_db"] = final
    _write_manifest(out / "manifest.json", manifest)
    if diverged_msg is not None:
        print(f"recon: DIVERGED ({diverged_msg}); partial trace written to {out}")
        return EXIT_DIVERGED
    note = "" if final is None else f", final NMSE {final:.2f} dB"
    print(f"recon: {len(trace.records)} iterations{note}; outputs in {out}")
    return EXIT_OK


def _parse_grid_value(text: str):
    try:
        return int(text)
    except ValueError:
        return float(text)


def cmd_tune(args) -> int:
    config = _load_config_file(args.config)
    resolved = _resolve_solver(args, config)
    t_meas = _resolve(args, config, "t_meas", DEFAULT_T_MEAS, int)
    t_max = _resolve(args, config, "t_max", DEFAULT_T_MAX, int)
    if len(args.param) != len(args.grid):
        raise ValueError("each --param needs a matching --grid")
    if not args.param:
        raise ValueError("tune needs at least one --param/--grid pair")
    names = list(args.param)
    value_lists = [[_parse_grid_value(v) for v in grid.split(",")] for grid in args.grid]
    alias = {
        "gamma": "admm_gamma",
        "gamma2_init": "vamp_gamma2_init",
        "theta": "vamp_theta",
        "beta": "amp_beta",
        "zeta": "zeta_rule",
        "classical_lambda": "admm_lambda",
    }
    grid = [
        {alias.get(name, name): value for name, value in zip(names, combo)}
        for combo in itertools.product(*value_lists)
    ]

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = {
        "command": "tune",
        "version": __version__,
        "problems": [str(Path(p)) for p in args.problems],
        "resolved": {**resolved, "t_meas": t_meas, "t_max": t_max},
        "grid": grid,
    }
    _write_manifest(out / "manifest.json", manifest)

    problems = [_problem_from_dir(Path(p)) for p in args.problems]
    spec = TuningSpec(grid=tuple(grid), problems=tuple(problems), t_meas=t_meas, t_max=t_max)
    result = tune(spec, _build_config(resolved, iters=t_max))
    result.to_csv(out / "report.csv")
    with open(out / "selected.cfg", "w") as fh:
        for key, value in sorted(result.best.items()):
            fh.write(f"{key} = {value}\n")
    manifest["best"] = result.best
    _write_manifest(out / "manifest.json", manifest)
    print(f"tune: best {result.best} ({len(result.rows)} grid points); report in {out}")
    return EXIT_OK


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="pnprecon",
        description="Plug-and-play compressed-sensing reconstruction toolkit",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    _add_simulate(sub)
    _add_recon(sub)
    _add_tune(sub)
    args = parser.parse_args(argv)
    handlers = {"simulate": cmd_simulate, "recon": cmd_recon, "tune": cmd_tune}
    try:
        return handlers[args.command](args)
    except SolverDiverged as exc:
        print(f"error: solver diverged: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
