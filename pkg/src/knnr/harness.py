"""Repeated-trial benchmarks: datasets, ground truth, estimators, tables, plots.

Every ``(n, repetition)`` cell draws one behavior dataset from
``derive_seed(master, env, n, rep)`` and runs all configured estimators on
that same dataset. Estimator failures become failed rows, not crashes.
"""
from __future__ import annotations

import csv
import io
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import Dataset, RngStream, derive_seed
from .envs import ENVIRONMENTS, make_env
from .errors import InvalidConfigError, KnnrError, NumericError
from .fqe import default_k_reg, fqe_estimate, fqe_fit
from .is_estimators import naive_average, pdis_estimate, peis_estimate, wdr_estimate
from .resamplers import KnnrConfig, ValueEstimate, knnr_estimate, mfmc_estimate

log = logging.getLogger(__name__)

ESTIMATORS = ("knnr", "mfmc", "peis", "pdis", "wdr", "fqe_lin", "fqe_nn", "na")
DEFAULT_N_GRID = (100, 316, 1000, 3162, 10000)
GROUND_TRUTH_CHUNK = 50_000

RESULT_COLUMNS = ("env", "estimator", "n", "rep", "estimate", "ground_truth", "abs_error", "runtime_s", "status", "error")
AGGREGATE_COLUMNS = ("env", "estimator", "n", "reps", "failed", "mean_estimate", "median_mse", "std_estimate")
TIMING_COLUMNS = ("env", "estimator", "n", "rep", "runtime_s")


@dataclass(frozen=True)
class ExperimentConfig:
    env: str
    estimators: dict = field(default_factory=lambda: {"knnr": {}, "na": {}})
    n_grid: tuple = DEFAULT_N_GRID
    repetitions: int = 10
    master_seed: int = 0
    ground_truth_budget: int = 10**6
    env_params: dict = field(default_factory=dict)
    target: dict = field(default_factory=dict)
    workers: int = 1
    out_dir: Optional[str] = None

    def __post_init__(self):
        if self.env not in ENVIRONMENTS:
            raise InvalidConfigError(f"unknown environment {self.env!r}; valid ids: {', '.join(sorted(ENVIRONMENTS))}")
        bad = [e for e in self.estimators if e not in ESTIMATORS]
        if bad:
            raise InvalidConfigError(f"unknown estimator(s) {bad}; valid: {', '.join(ESTIMATORS)}")
        if not self.estimators:
            raise InvalidConfigError("no estimators configured")
        grid = [int(n) for n in self.n_grid]
        if not grid or any(b <= a for a, b in zip(grid, grid[1:])):
            raise InvalidConfigError(f"n grid must be nonempty and strictly increasing, got {list(self.n_grid)}")
        if grid[0] < 10:
            raise InvalidConfigError("every n must be >= 10")
        if self.repetitions < 2:
            raise InvalidConfigError("repetitions must be >= 2")
        if self.ground_truth_budget < 10**3:
            raise InvalidConfigError("ground_truth_budget must be >= 1000")
        if self.workers < 1:
            raise InvalidConfigError("workers must be >= 1")
        object.__setattr__(self, "n_grid", tuple(grid))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["n_grid"] = list(self.n_grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = set(cls.__dataclass_fields__)
        extra = set(d) - known
        if extra:
            raise InvalidConfigError(f"unknown experiment keys {sorted(extra)}")
        return cls(**d)

    def build_env(self):
        env = make_env(self.env, self.env_params)
        sigma = self.target.get("sigma")
        if sigma is not None and hasattr(env, "target_sigma"):
            env.target_sigma = float(sigma)
        return env


@dataclass
class ResultRow:
    env: str
    estimator: str
    n: int
    rep: int
    estimate: float
    ground_truth: float
    abs_error: float
    runtime_s: float
    status: str = "ok"
    error: str = ""

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def squared_error(self) -> float:
        # a failed cell is infinitely bad in median comparisons
        return self.abs_error**2 if self.ok else math.inf


@dataclass
class Aggregate:
    env: str
    estimator: str
    n: int
    reps: int
    failed: int
    mean_estimate: float
    median_mse: float
    std_estimate: float
    median_runtime_s: float


@dataclass
class ResultTable:
    rows: list = field(default_factory=list)

    def select(self, estimator: Optional[str] = None, n: Optional[int] = None) -> list:
        return [r for r in self.rows if (estimator is None or r.estimator == estimator) and (n is None or r.n == n)]

    @property
    def estimators(self) -> list:
        return list(dict.fromkeys(r.estimator for r in self.rows))

    @property
    def n_values(self) -> list:
        return sorted({r.n for r in self.rows})

    def aggregate(self, estimator: str, n: int) -> Aggregate:
        rows = self.select(estimator, n)
        if not rows:
            raise KeyError((estimator, n))
        ok = [r for r in rows if r.ok]
        est = np.array([r.estimate for r in ok])
        return Aggregate(
            env=rows[0].env,
            estimator=estimator,
            n=n,
            reps=len(rows),
            failed=len(rows) - len(ok),
            mean_estimate=float(np.mean(est)) if len(ok) else math.nan,
            median_mse=float(np.median([r.squared_error for r in rows])),
            std_estimate=float(np.std(est, ddof=1)) if len(ok) > 1 else math.nan,
            median_runtime_s=float(np.median([r.runtime_s for r in ok])) if ok else math.nan,
        )

    @property
    def aggregates(self) -> list:
        return [self.aggregate(e, n) for e in self.estimators for n in self.n_values if self.select(e, n)]

    def same_results(self, other: "ResultTable") -> bool:
        """Equal up to runtimes."""
        return results_csv(self) == results_csv(other)


# ------------------------------------------------------------- ground truth


def ground_truth(env, policy=None, budget: int = 10**6, seed: int = 0) -> tuple[float, float]:
    """Monte Carlo value of ``policy`` (default: the env's target) and its standard error.

    For LQR the result is cross-checked against the closed form; a mismatch
    beyond three standard errors is logged.
    """
    if budget < 10**3:
        raise InvalidConfigError("ground-truth budget must be >= 1000")
    is_target = policy is None
    policy = env.target() if is_target else policy
    total, total_sq, count = 0.0, 0.0, 0
    for c, lo in enumerate(range(0, budget, GROUND_TRUTH_CHUNK)):
        m = min(GROUND_TRUTH_CHUNK, budget - lo)
        r = env.generate(policy, m, rng=RngStream(seed, c)).returns()
        # shift by the first chunk's mean to keep the variance sum well conditioned
        if c == 0:
            shift = float(np.mean(r))
        d = r - shift
        total += float(np.sum(d))
        total_sq += float(np.sum(d * d))
        count += m
    mean_d = total / count
    var = max(total_sq / count - mean_d**2, 0.0) * count / (count - 1)
    value, se = shift + mean_d, math.sqrt(var / count)
    closed = env.closed_form_value() if is_target else None
    if closed is not None and abs(value - closed) > 3 * se and se > 0:
        log.warning("ground truth %.6f disagrees with closed form %.6f (se %.2g)", value, closed, se)
    return value, se


def closed_form_agrees(env, value: float, se: float, k: float = 3.0) -> Optional[bool]:
    """``|value - closed form| <= k se``, or ``None`` without a closed form."""
    closed = env.closed_form_value()
    if closed is None:
        return None
    return abs(value - closed) <= k * se


# ---------------------------------------------------------------- estimators


def run_estimator(env, name: str, params: dict, dataset: Dataset, seed: int, workers: int = 1) -> ValueEstimate:
    """Dispatch one named estimator with the environment's conventions.

    Recognized params: ``knnr``: K, l, allow_reuse, tie_break; ``mfmc``: l;
    ``fqe_lin``/``wdr``: ridge; ``fqe_nn``: k_reg.
    """
    params = dict(params or {})
    n = dataset.n
    target = env.target()
    if name == "knnr":
        K, l = env.rates(n)
        cfg = KnnrConfig(
            K=int(params.get("K") or K),
            l=int(params.get("l") or l),
            allow_reuse=bool(params.get("allow_reuse", env.allow_reuse)),
            tie_break=str(params.get("tie_break", env.tie_break)),
            seed=seed,
            workers=int(params.get("workers", workers)),
        )
        return knnr_estimate(dataset, target, env.metric(), cfg, terminal=env.terminal, reward_model=env.reward_model)
    if name == "mfmc":
        l = int(params.get("l") or env.rates(n)[1])
        return mfmc_estimate(dataset, target, env.metric(), l, rng=seed, terminal=env.terminal, reward_model=env.reward_model)
    if name == "peis":
        return peis_estimate(dataset, env.behavior(), env.target_density())
    if name == "pdis":
        return pdis_estimate(dataset, env.behavior(), env.target_density())
    if name == "wdr":
        t0 = time.perf_counter()
        model = fqe_fit(dataset, target, "lin", ridge=params.get("ridge"), terminal=env.terminal)
        est = wdr_estimate(dataset, env.behavior(), env.target_density(), model)
        est.wall_clock_seconds = time.perf_counter() - t0
        return est
    if name == "fqe_lin":
        return fqe_estimate(dataset, target, "lin", ridge=params.get("ridge"), terminal=env.terminal)
    if name == "fqe_nn":
        k_reg = int(params.get("k_reg") or default_k_reg(n, env.fqe_nn_exponent))
        return fqe_estimate(dataset, target, "nn", k_reg=k_reg, metric=env.metric(), terminal=env.terminal)
    if name == "na":
        return naive_average(dataset)
    raise InvalidConfigError(f"unknown estimator {name!r}; valid: {', '.join(ESTIMATORS)}")


def dataset_seed(master: int, env_id: str, n: int, rep: int) -> int:
    return derive_seed(master, env_id, n, rep)


def estimator_seed(master: int, env_id: str, n: int, rep: int, estimator: str) -> int:
    return derive_seed(master, env_id, n, rep, estimator)


def _run_cell(cfg: ExperimentConfig, n: int, rep: int, truth: float) -> list:
    env = cfg.build_env()
    data = env.generate(env.behavior(), n, rng=dataset_seed(cfg.master_seed, cfg.env, n, rep))
    rows = []
    for name, params in cfg.estimators.items():
        seed = estimator_seed(cfg.master_seed, cfg.env, n, rep, name)
        try:
            est = run_estimator(env, name, params, data, seed)
        except (KnnrError, ValueError, np.linalg.LinAlgError) as exc:
            log.info("%s failed on n=%d rep=%d: %s", name, n, rep, exc)
            rows.append(ResultRow(cfg.env, name, n, rep, math.nan, truth, math.nan, math.nan, "failed", f"{type(exc).__name__}: {exc}"))
            continue
        if not math.isfinite(est.value):
            rows.append(ResultRow(cfg.env, name, n, rep, math.nan, truth, math.nan, est.wall_clock_seconds, "failed", "non-finite estimate"))
            continue
        rows.append(ResultRow(cfg.env, name, n, rep, est.value, truth, abs(est.value - truth), est.wall_clock_seconds))
    return rows


def run_experiment(cfg: ExperimentConfig, truth: Optional[tuple[float, float]] = None) -> ResultTable:
    """All cells of the config; deterministic given the master seed.

    The ground truth is computed once per call (``truth`` overrides it).
    Cells run in ``cfg.workers`` processes, each timing one estimator at a time.
    """
    if truth is None:
        env = cfg.build_env()
        truth = ground_truth(env, budget=cfg.ground_truth_budget, seed=derive_seed(cfg.master_seed, cfg.env, "ground_truth"))
    cells = [(n, rep) for n in cfg.n_grid for rep in range(cfg.repetitions)]
    if cfg.workers == 1:
        parts = [_run_cell(cfg, n, rep, truth[0]) for n, rep in cells]
    else:
        with ProcessPoolExecutor(max_workers=cfg.workers) as pool:
            parts = list(pool.map(_run_cell, *zip(*[(cfg, n, rep, truth[0]) for n, rep in cells])))
    return ResultTable([row for part in parts for row in part])


# -------------------------------------------------------------------- slopes


def loglog_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of ``log y`` against ``log x``."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    if len(x) < 3:
        raise InvalidConfigError("a slope needs at least 3 grid points")
    if np.any(~np.isfinite(y)) or np.any(y <= 0) or np.any(x <= 0):
        raise NumericError("log-log slope needs positive finite values")
    lx, ly = np.log(x), np.log(y)
    lx = lx - lx.mean()
    return float(np.dot(lx, ly - ly.mean()) / np.dot(lx, lx))


def stddev_slope(table: ResultTable, estimator: str) -> float:
    aggs = [table.aggregate(estimator, n) for n in table.n_values if table.select(estimator, n)]
    return loglog_slope([a.n for a in aggs], [a.std_estimate for a in aggs])


def runtime_slope(table: ResultTable, estimator: str) -> float:
    aggs = [table.aggregate(estimator, n) for n in table.n_values if table.select(estimator, n)]
    return loglog_slope([a.n for a in aggs], [a.median_runtime_s for a in aggs])


# ---------------------------------------------------------------- CSV output


def _fmt(v) -> str:
    if isinstance(v, float):
        if math.isnan(v):
            return "nan"
        if math.isinf(v):
            return "inf" if v > 0 else "-inf"
        return repr(v)
    return str(v)


def _write_csv(columns, records) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(columns)
    for rec in records:
        w.writerow([_fmt(rec[c]) for c in columns])
    return buf.getvalue()


def results_csv(table: ResultTable) -> str:
    # runtimes vary run to run; they go to timings.csv so this file is reproducible
    recs = []
    for r in table.rows:
        d = asdict(r)
        d["runtime_s"] = ""
        recs.append(d)
    return _write_csv(RESULT_COLUMNS, recs)


def aggregates_csv(table: ResultTable) -> str:
    return _write_csv(AGGREGATE_COLUMNS, [asdict(a) for a in table.aggregates])


def timings_csv(table: ResultTable) -> str:
    return _write_csv(TIMING_COLUMNS, [asdict(r) for r in table.rows])


def write_tables(table: ResultTable, out_dir) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = {}
    for name, text in (
        ("results.csv", results_csv(table)),
        ("aggregates.csv", aggregates_csv(table)),
        ("timings.csv", timings_csv(table)),
    ):
        p = out / name
        p.write_bytes(text.encode("utf-8"))
        paths[name] = p
    return paths


def read_results(path) -> ResultTable:
    """Rows from ``results.csv``, joined with ``timings.csv`` next to it if present."""
    path = Path(path)
    times = {}
    tpath = path.with_name("timings.csv")
    if tpath.exists():
        with open(tpath, newline="", encoding="utf-8") as fh:
            for rec in csv.DictReader(fh):
                times[(rec["estimator"], int(rec["n"]), int(rec["rep"]))] = float(rec["runtime_s"])
    rows = []
    with open(path, newline="", encoding="utf-8") as fh:
        for rec in csv.DictReader(fh):
            key = (rec["estimator"], int(rec["n"]), int(rec["rep"]))
            rows.append(
                ResultRow(
                    rec["env"], rec["estimator"], key[1], key[2], float(rec["estimate"]), float(rec["ground_truth"]),
                    float(rec["abs_error"]), times.get(key, math.nan), rec["status"], rec["error"],
                )
            )
    return ResultTable(rows)


# --------------------------------------------------------------------- plots


def write_plots(table: ResultTable, out_dir) -> list:
    """Log-log SVGs: median MSE, std of estimates and median runtime versus n."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for fname, attr, ylabel in (
        ("mse.svg", "median_mse", "median MSE"),
        ("std.svg", "std_estimate", "std of estimates"),
        ("runtime.svg", "median_runtime_s", "median runtime [s]"),
    ):
        fig, ax = plt.subplots(figsize=(6, 4))
        for est in table.estimators:
            aggs = [table.aggregate(est, n) for n in table.n_values if table.select(est, n)]
            pts = [(a.n, getattr(a, attr)) for a in aggs if math.isfinite(getattr(a, attr)) and getattr(a, attr) > 0]
            if pts:
                xs, ys = zip(*pts)
                ax.plot(xs, ys, marker="o", label=est)
        ax.set_xscale("log")
        ax.set_yscale("log")
        ax.set_xlabel("episodes n")
        ax.set_ylabel(ylabel)
        if ax.get_legend_handles_labels()[0]:
            ax.legend(fontsize="small")
        fig.tight_layout()
        p = out / fname
        fig.savefig(p, format="svg", metadata={"Date": None})
        plt.close(fig)
        paths.append(p)
    return paths
