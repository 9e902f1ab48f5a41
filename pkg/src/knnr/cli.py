"""Command-line entry point: ``knnr {generate,evaluate,benchmark,plot,oracle-check}``.

Configuration is one JSON file with the sections ``env``, ``behavior``,
``target``, ``estimators`` and ``experiment``; ``--set a.b=value`` overrides
any dotted key (values parse as JSON, falling back to plain strings).

Exit codes: 0 ok, 2 config/validation, 3 estimator failure, 4 I/O.
"""
from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
import time
from pathlib import Path
from typing import Optional

import numpy as np

from . import harness
from .core import BehaviorSpec, Dataset, Metric, PolicySpec, TerminalRule, derive_seed, load_dataset, save_dataset
from .envs import ENVIRONMENTS
from .errors import KnnrError
from .knn_index import PointIndex, brute_force_knn
from .resamplers import knnr_sequence_expectation, mnn_oracle

log = logging.getLogger("knnr")

EXIT_OK, EXIT_CONFIG, EXIT_ESTIMATOR, EXIT_IO = 0, 2, 3, 4

# hidden self-test hook: names an oracle check whose result is perturbed
FAULT_ENV_VAR = "KNNR_ORACLE_FAULT"

SECTIONS = ("env", "behavior", "target", "estimators", "experiment")

DEFAULT_CONFIG = {
    "env": {"id": "lqr", "params": {}},
    "behavior": {"n": 100, "seed": 0, "policy": "behavior", "density": "auto"},
    "target": {},
    "estimators": {"knnr": {}, "na": {}},
    "experiment": {
        "n_grid": list(harness.DEFAULT_N_GRID),
        "repetitions": 10,
        "master_seed": 0,
        "ground_truth_budget": 10**6,
    },
}


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# -------------------------------------------------------------------- config


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_override(cfg: dict, assignment: str) -> None:
    if "=" not in assignment:
        raise CliError(EXIT_CONFIG, f"--set expects key=value, got {assignment!r}")
    key, value = assignment.split("=", 1)
    parts = key.strip().split(".")
    if parts[0] not in SECTIONS:
        raise CliError(EXIT_CONFIG, f"--set key must start with one of {', '.join(SECTIONS)}, got {key!r}")
    node = cfg
    for p in parts[:-1]:
        if not isinstance(node.get(p), dict):
            node[p] = {}
        node = node[p]
    node[parts[-1]] = _parse_value(value)


def load_config(path: Optional[str], overrides=(), seed: Optional[int] = None, workers: Optional[int] = None) -> dict:
    """Defaults, then the file, then ``--seed``/``--workers``, then ``--set`` overrides."""
    cfg = copy.deepcopy(DEFAULT_CONFIG)
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                doc = json.load(fh)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise CliError(EXIT_CONFIG, f"config {path} is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise CliError(EXIT_CONFIG, "config must be a JSON object")
        unknown = set(doc) - set(SECTIONS)
        if unknown:
            raise CliError(EXIT_CONFIG, f"unknown config sections {sorted(unknown)}; expected {', '.join(SECTIONS)}")
        for sec in SECTIONS:
            if sec in doc:
                if sec == "estimators":
                    cfg[sec] = doc[sec]
                elif isinstance(doc[sec], dict):
                    cfg[sec].update(doc[sec])
                else:
                    raise CliError(EXIT_CONFIG, f"section {sec!r} must be an object")
    if seed is not None:
        cfg["behavior"]["seed"] = seed
        cfg["experiment"]["master_seed"] = seed
    if workers is not None:
        cfg["experiment"]["workers"] = workers
    for a in overrides:
        apply_override(cfg, a)
    validate_config(cfg)
    return cfg


def validate_config(cfg: dict) -> None:
    env_id = cfg["env"].get("id")
    if env_id not in ENVIRONMENTS:
        raise CliError(EXIT_CONFIG, f"unknown environment {env_id!r}; valid ids: {', '.join(sorted(ENVIRONMENTS))}")
    try:
        build_env(cfg)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"invalid env params: {exc}") from exc
    ests = cfg["estimators"]
    if isinstance(ests, list):
        cfg["estimators"] = ests = {e: {} for e in ests}
    if not isinstance(ests, dict) or not ests:
        raise CliError(EXIT_CONFIG, "estimators must be a nonempty object or list")
    bad = [e for e in ests if e not in harness.ESTIMATORS]
    if bad:
        raise CliError(EXIT_CONFIG, f"unknown estimator(s) {bad}; valid: {', '.join(harness.ESTIMATORS)}")
    b = cfg["behavior"]
    if not isinstance(b.get("n"), int) or b["n"] < 1:
        raise CliError(EXIT_CONFIG, "behavior.n must be a positive integer")
    if b.get("policy", "behavior") not in ("behavior", "target"):
        raise CliError(EXIT_CONFIG, "behavior.policy must be 'behavior' or 'target'")
    if b.get("density", "auto") not in ("auto", "none"):
        raise CliError(EXIT_CONFIG, "behavior.density must be 'auto' or 'none'")


def build_env(cfg: dict):
    from .envs import make_env

    env = make_env(cfg["env"]["id"], cfg["env"].get("params") or {})
    sigma = cfg.get("target", {}).get("sigma")
    if sigma is not None and hasattr(env, "target_sigma"):
        env.target_sigma = float(sigma)
    return env


def experiment_config(cfg: dict) -> harness.ExperimentConfig:
    ex = dict(cfg["experiment"])
    known = {"n_grid", "repetitions", "master_seed", "ground_truth_budget", "workers"}
    unknown = set(ex) - known
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown experiment keys {sorted(unknown)}")
    ex.setdefault("workers", os.cpu_count() or 1)
    try:
        return harness.ExperimentConfig(
            env=cfg["env"]["id"],
            estimators=cfg["estimators"],
            env_params=cfg["env"].get("params") or {},
            target=cfg.get("target") or {},
            **ex,
        )
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc


def _out_dir(path: Optional[str]) -> Path:
    out = Path(path or "knnr-out")
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot create output directory {out}: {exc}") from exc
    return out


def _write(path: Path, text: str) -> None:
    try:
        path.write_bytes(text.encode("utf-8"))
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc


def echo_config(cfg: dict, out: Path) -> Path:
    p = out / "config.json"
    _write(p, json.dumps(cfg, indent=2, sort_keys=True) + "\n")
    return p


# ------------------------------------------------------------------ commands


def cmd_generate(args, cfg: dict) -> int:
    env = build_env(cfg)
    b = cfg["behavior"]
    actor = env.behavior() if b.get("policy", "behavior") == "behavior" else env.target()
    data = env.generate(actor, b["n"], rng=b.get("seed", 0))
    out = _out_dir(args.out)
    echo_config(cfg, out)
    path = out / (args.name or "dataset.npz")
    try:
        save_dataset(data, path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write {path}: {exc}") from exc
    print(f"wrote {path}: {data.n} episodes, {data.n_transitions} transitions")
    return EXIT_OK


def _read_dataset(path: str) -> Dataset:
    try:
        return load_dataset(path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read dataset {path}: {exc}") from exc
    except (KnnrError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"malformed dataset {path}: {exc}") from exc


def _without_density(env):
    behavior = env.behavior()
    stripped = BehaviorSpec(behavior.sample, None, name=behavior.name)

    class _Env:
        def __getattr__(self, item):
            return getattr(env, item)

        def behavior(self):
            return stripped

    return _Env()


def cmd_evaluate(args, cfg: dict) -> int:
    if not args.dataset:
        raise CliError(EXIT_CONFIG, "evaluate needs --dataset PATH")
    data = _read_dataset(args.dataset)
    env = build_env(cfg)
    env_tag = data.meta.get("env")
    if env_tag is not None and env_tag != env.id:
        raise CliError(EXIT_CONFIG, f"dataset was generated for {env_tag!r} but the config selects {env.id!r}")
    if cfg["behavior"].get("density", "auto") == "none":
        env = _without_density(env)
    names = [args.estimator] if args.estimator else list(cfg["estimators"])
    if args.estimator and args.estimator not in harness.ESTIMATORS:
        raise CliError(EXIT_CONFIG, f"unknown estimator {args.estimator!r}; valid: {', '.join(harness.ESTIMATORS)}")
    master = cfg["experiment"].get("master_seed", 0)
    workers = cfg["experiment"].get("workers", 1)
    report = {}
    for name in names:
        try:
            est = harness.run_estimator(env, name, cfg["estimators"].get(name, {}), data, derive_seed(master, "evaluate", name), workers)
        except (KnnrError, ValueError, np.linalg.LinAlgError) as exc:
            raise CliError(EXIT_ESTIMATOR, f"{name}: {exc}") from exc
        d = est.to_dict()
        d["estimator"] = name
        report[name] = d
    text = json.dumps(report if len(report) > 1 else next(iter(report.values())), sort_keys=True)
    print(text)
    if args.out:
        out = _out_dir(args.out)
        echo_config(cfg, out)
        _write(out / "estimate.json", text + "\n")
    return EXIT_OK


def cmd_benchmark(args, cfg: dict) -> int:
    ecfg = experiment_config(cfg)
    out = _out_dir(args.out)
    echo_config(cfg, out)
    t0 = time.perf_counter()
    env = ecfg.build_env()
    truth = harness.ground_truth(env, budget=ecfg.ground_truth_budget, seed=derive_seed(ecfg.master_seed, ecfg.env, "ground_truth"))
    table = harness.run_experiment(ecfg, truth=truth)
    try:
        harness.write_tables(table, out)
        gt = {"value": truth[0], "std_error": truth[1], "closed_form": env.closed_form_value()}
        _write(out / "ground_truth.json", json.dumps(gt, sort_keys=True) + "\n")
        if args.plot:
            harness.write_plots(table, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write benchmark outputs to {out}: {exc}") from exc
    ok = sum(r.ok for r in table.rows)
    print(f"{len(table.rows)} cells ({ok} ok, {len(table.rows) - ok} failed) in {time.perf_counter() - t0:.1f}s -> {out}")
    for a in table.aggregates:
        print(f"  {a.estimator:8s} n={a.n:<6d} median_mse={a.median_mse:.4g} std={a.std_estimate:.4g} failed={a.failed}")
    return EXIT_OK if ok else EXIT_ESTIMATOR


def cmd_plot(args, cfg: Optional[dict]) -> int:
    out = _out_dir(args.out)
    src = Path(args.results) if args.results else out / "results.csv"
    try:
        table = harness.read_results(src)
        paths = harness.write_plots(table, out)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot plot from {src}: {exc}") from exc
    except (KeyError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"malformed results file {src}: {exc}") from exc
    for p in paths:
        print(f"wrote {p}")
    return EXIT_OK


# -------------------------------------------------------------- oracle check


def _tiny_instance(rng: np.random.Generator, with_terminal: bool):
    n = int(rng.integers(1, 6))
    T = int(rng.integers(1, 4))
    d1 = int(rng.integers(1, 3))
    states = rng.normal(size=(n, T + 1, d1))
    actions = rng.normal(size=(n, T + 1, 1))
    rewards = rng.normal(size=(n, T + 1))
    gain = rng.normal(size=d1)
    policy = PolicySpec(lambda t, X: (X @ gain)[:, None] + 0.1 * t, name="tiny_linear")
    terminal = None
    eff, term = None, None
    if with_terminal:
        # absorbing once the first coordinate is positive, paid a linear settlement
        eff = np.full(n, T + 1)
        term = np.ones(n, dtype=bool)
        terminal = TerminalRule(lambda X: np.atleast_2d(X)[:, 0] > 0.8, lambda X: 2.0 * np.atleast_2d(X)[:, 0])
    data = Dataset(states, actions, rewards, eff, term)
    K = int(rng.integers(1, min(3, data.n_transitions) + 1))
    starts = data.initial_states()[: int(rng.integers(1, n + 1))]
    return data, policy, K, starts, terminal


def run_oracle_checks(fault: Optional[str] = None, instances: int = 20, seed: int = 0) -> list:
    """``(name, passed, detail)`` per check; ``fault`` perturbs the named check."""
    rng = np.random.default_rng(seed)
    results = []

    worst = 0.0
    for i in range(instances):
        data, policy, K, starts, terminal = _tiny_instance(rng, with_terminal=bool(i % 2))
        reuse = bool(i % 3 != 2) or data.n_transitions < K + data.horizon + 1
        oracle = mnn_oracle(data, policy, Metric(), K, starts, terminal=terminal, allow_reuse=reuse)
        seqs = knnr_sequence_expectation(data, policy, Metric(), K, starts, terminal=terminal, allow_reuse=reuse)
        if fault == "subsampling_identity":
            seqs += 1e-6 * (1 + abs(seqs))
        worst = max(worst, abs(seqs - oracle) / max(1.0, abs(oracle)))
    results.append(("subsampling_identity", worst <= 1e-10, f"max relative gap {worst:.3g} over {instances} instances"))

    mismatches = 0
    for _ in range(5):
        m, p = int(rng.integers(5, 400)), int(rng.integers(1, 20))
        pts = rng.integers(0, 3, size=(m, p)).astype(float) if rng.random() < 0.5 else rng.normal(size=(m, p))
        index = PointIndex(pts)
        queries = np.vstack([rng.normal(size=(25, p)), pts[rng.integers(0, m, size=25)]])
        k = int(rng.integers(1, m + 1))
        ids, dist = index.query(queries, k)
        if fault == "nn_index":
            ids = ids[:, ::-1]
        for q, row_ids, row_d in zip(queries, ids, dist):
            ref_ids, ref_d = brute_force_knn(pts, q, k)
            if not np.array_equal(ref_ids, row_ids) or not np.allclose(ref_d, row_d, rtol=1e-12, atol=0.0):
                mismatches += 1
    results.append(("nn_index", mismatches == 0, f"{mismatches} of 250 queries differ from the linear scan"))
    return results


def cmd_oracle_check(args, cfg: Optional[dict]) -> int:
    t0 = time.perf_counter()
    fault = os.environ.get(FAULT_ENV_VAR) or None
    results = run_oracle_checks(fault=fault)
    for name, passed, detail in results:
        print(f"{'PASS' if passed else 'FAIL'} {name}: {detail}")
    failed = [name for name, passed, _ in results if not passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed in {time.perf_counter() - t0:.1f}s")
    if failed:
        print(f"failed checks: {', '.join(failed)}")
    return EXIT_OK if not failed else 1


# ---------------------------------------------------------------------- main


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="knnr", description="Nearest-neighbor resampling for off-policy evaluation.")
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="overrides behavior.seed and experiment.master_seed")
        p.add_argument("--workers", type=int, help="worker cap (default: machine parallelism)")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
        p.add_argument("--plot", action="store_true", help="also write SVG plots")

    p = sub.add_parser("generate", help="simulate a dataset under the configured behavior")
    common(p)
    p.add_argument("--name", help="dataset file name inside --out (.npz or .json)")
    p = sub.add_parser("evaluate", help="run estimators on a dataset file")
    common(p)
    p.add_argument("--dataset", help="dataset file written by 'generate'")
    p.add_argument("--estimator", help="run only this estimator")
    p = sub.add_parser("benchmark", help="repeated-trial experiment over an n grid")
    common(p)
    p = sub.add_parser("plot", help="SVG plots from a results.csv")
    common(p)
    p.add_argument("--results", help="results.csv (default: OUT/results.csv)")
    p = sub.add_parser("oracle-check", help="exact-oracle self checks on tiny instances")
    common(p)
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
    "benchmark": cmd_benchmark,
    "plot": cmd_plot,
    "oracle-check": cmd_oracle_check,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.workers is not None and args.workers < 1:
            raise CliError(EXIT_CONFIG, "--workers must be >= 1")
        cfg = None
        if args.command not in ("plot", "oracle-check") or args.config:
            cfg = load_config(args.config, args.overrides, args.seed, args.workers)
        return COMMANDS[args.command](args, cfg)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
