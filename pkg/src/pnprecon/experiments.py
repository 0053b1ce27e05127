"""Grid tuning and multi-problem batch runs.

Tuning scores each grid point by running every training problem to t_max,
averaging the *linear* per-iteration NMSE over iterations [t_meas, t_max]
(dB averaging would overweight near-converged iterations), taking the lower
median across problems, and reporting the result in dB. Diverged runs score
+inf and a grid point is only selected if something converged.

Worker parallelism is capped by the PNPRECON_THREADS environment variable
(default: serial); work items carry their own seeds and denoiser handles,
so parallel execution cannot perturb results.
"""

from __future__ import annotations

import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .forward import Problem
from .metrics import nmse, nmse_linear, ssim  # re-exported: metric ops live here too
from .solvers import SolverConfig, SolverDiverged, SolverTrace, fresh_config, run_solver

__all__ = [
    "TuningSpec",
    "TuneRow",
    "TuneResult",
    "MetricReport",
    "tune",
    "BatchResult",
    "batch_run",
    "nmse",
    "nmse_linear",
    "ssim",
]

DEFAULT_T_MEAS = 35
DEFAULT_T_MAX = 150


class TuningError(RuntimeError):
    """Every grid point diverged on every training problem."""


def _worker_count() -> int:
    raw = os.environ.get("PNPRECON_THREADS", "1")
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def _map_items(fn, items):
    workers = _worker_count()
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def lower_median(values) -> float:
    """Median that picks the lower of the two middle elements."""
    ordered = sorted(values)
    if not ordered:
        raise ValueError("median of empty sequence")
    return ordered[(len(ordered) - 1) // 2]


@dataclass(frozen=True)
class TuningSpec:
    """Grid of parameter assignments evaluated over a training problem set."""

    grid: tuple
    problems: tuple
    t_meas: int = DEFAULT_T_MEAS
    t_max: int = DEFAULT_T_MAX
    aggregate: str = "median"

    def __post_init__(self):
        if not self.grid:
            raise ValueError("grid must be non-empty")
        if not (1 <= self.t_meas <= self.t_max):
            raise ValueError("need 1 <= t_meas <= t_max")
        if self.aggregate != "median":
            raise ValueError("only median aggregation is supported")
        object.__setattr__(self, "grid", tuple(dict(g) for g in self.grid))
        object.__setattr__(self, "problems", tuple(self.problems))


@dataclass
class TuneRow:
    assignment: dict
    score_db: float
    per_image_db: list[float]
    n_diverged: int


@dataclass
class TuneResult:
    best: dict
    best_index: int
    rows: list[TuneRow]

    def to_csv(self, path) -> None:
        import csv

        keys = sorted({k for row in self.rows for k in row.assignment})
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(keys + ["score_db", "n_diverged", "selected"])
            for index, row in enumerate(self.rows):
                writer.writerow(
                    [row.assignment.get(k, "") for k in keys]
                    + [
                        f"{row.score_db:.17g}",
                        row.n_diverged,
                        int(index == self.best_index),
                    ]
                )


def _window_score(trace: SolverTrace, t_meas: int) -> float:
    """Mean linear NMSE over the measurement window of one run."""
    window = [
        10.0 ** (rec.nmse_db / 10.0)
        for rec in trace.records
        if rec.iteration >= t_meas and rec.nmse_db is not None
    ]
    if not window:
        return math.inf
    return float(np.mean(window))


def tune(spec: TuningSpec, cfg_template: SolverConfig) -> TuneResult:
    """Evaluate every grid point and select the one minimizing the median
    windowed NMSE across training problems (ties broken by grid order)."""
    for prob in spec.problems:
        if isinstance(prob, Problem) and prob.x0 is None:
            raise ValueError("tuning needs problems with ground truth")

    def eval_point(assignment: dict) -> TuneRow:
        def run_one(prob) -> float:
            cfg = fresh_config(cfg_template, max_iters=spec.t_max, **assignment)
            try:
                _, trace = run_solver(prob, cfg)
            except SolverDiverged:
                return math.inf
            return _window_score(trace, spec.t_meas)

        scores = _map_items(run_one, list(spec.problems))
        med = lower_median(scores)
        med_db = 10.0 * math.log10(med) if math.isfinite(med) else math.inf
        per_image = [10.0 * math.log10(s) if math.isfinite(s) else math.inf for s in scores]
        return TuneRow(dict(assignment), med_db, per_image, sum(math.isinf(s) for s in scores))

    rows = [eval_point(g) for g in spec.grid]
    if all(math.isinf(row.score_db) for row in rows):
        raise TuningError("every grid point diverged on the training set")
    best_index = min(range(len(rows)), key=lambda i: rows[i].score_db)  # first wins ties
    return TuneResult(dict(rows[best_index].assignment), best_index, rows)


@dataclass
class BatchResult:
    traces: list[SolverTrace | None]
    errors: list[str | None]
    iterations: list[int] = field(default_factory=list)
    median_nmse_db: list[float] = field(default_factory=list)
    n_alive: list[int] = field(default_factory=list)

    @property
    def n_diverged(self) -> int:
        return sum(1 for t in self.traces if t is None or t.diverged)

    def to_csv(self, path) -> None:
        import csv

        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "median_nmse_db", "n_alive"])
            for it, med, alive in zip(self.iterations, self.median_nmse_db, self.n_alive):
                writer.writerow([it, f"{med:.17g}", alive])


def batch_run(problems, cfg: SolverConfig) -> BatchResult:
    """Run one config over many problems and aggregate per-iteration medians.

    Diverged runs keep their completed iterations (the partial trace) and
    are excluded from medians beyond their abort point.
    """

    def run_one(prob):
        try:
            _, trace = run_solver(prob, fresh_config(cfg))
            return trace, None
        except SolverDiverged as exc:
            return exc.trace, str(exc)

    outcomes = _map_items(run_one, list(problems))
    result = BatchResult(
        traces=[trace for trace, _ in outcomes], errors=[err for _, err in outcomes]
    )
    for it in range(1, cfg.max_iters + 1):
        values = []
        for trace, _ in outcomes:
            if trace is not None and len(trace.records) >= it:
                rec = trace.records[it - 1]
                if rec.nmse_db is not None:
                    values.append(rec.nmse_db)
        if values:
            result.iterations.append(it)
            result.median_nmse_db.append(lower_median(values))
            result.n_alive.append(len(values))
    return result


@dataclass
class MetricReport:
    """NMSE/SSIM summary for a batch of (estimate, truth) pairs."""

    nmse_db: float
    ssim: float
    per_image: list[tuple[float, float]]

    @staticmethod
    def evaluate(pairs) -> "MetricReport":
        per_image = [(nmse(xh, x0), ssim(xh, x0)) for xh, x0 in pairs]
        return MetricReport(
            nmse_db=lower_median([p[0] for p in per_image]),
            ssim=lower_median([p[1] for p in per_image]),
            per_image=per_image,
        )
