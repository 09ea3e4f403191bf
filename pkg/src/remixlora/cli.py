"""Batch entry points: collapse simulation, inequality verification,
estimator checks, training, and evaluation.

JSON config in, CSV/JSON artifacts plus rendered figures out. Exit codes:
0 success, 1 verification failure, 2 config error, 3 I/O error,
4 numerical divergence.
"""

from __future__ import annotations

import argparse
import csv
import itertools
import json
import math
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import figures, theory
from .numerics import RngStream, softmax
from .rloo import estimator_variance, unbiasedness_check
from .routing import enumerate_ordered, from_probs
from .tasks import TaskSpec, gen_cluster_task, make_bandit
from .training import (
    DivergenceError,
    TrainConfig,
    evaluate,
    load_checkpoint,
    metrics_header,
    metrics_row_values,
    run_training,
    save_checkpoint,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4


class ConfigError(Exception):
    pass


def _read_json(path) -> dict:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            payload = json.load(fh)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise ConfigError("config must be a JSON object")
    return payload


def _check_keys(obj: dict, allowed, context: str) -> None:
    for key in obj:
        if key not in allowed:
            raise ConfigError(f"unknown field {key!r} in {context}")


def _require(obj: dict, key: str, context: str):
    if key not in obj:
        raise ConfigError(f"missing required field {key!r} in {context}")
    return obj[key]


def _resolve_seed(value, context: str, default: int | None = None) -> int:
    """Config seed wins; REMIX_SEED is the fallback, then the default."""
    if value is not None:
        if not isinstance(value, int) or isinstance(value, bool):
            raise ConfigError(f"field 'seed' in {context} must be an integer")
        return value
    env = os.environ.get("REMIX_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise ConfigError("REMIX_SEED must be an integer") from exc
    if default is not None:
        return default
    raise ConfigError(f"missing required field 'seed' in {context} (or set REMIX_SEED)")


def _jsonable(value):
    if isinstance(value, (np.floating,)):
        return float(value)
    if isinstance(value, (np.integer,)):
        return int(value)
    if isinstance(value, (np.bool_,)):
        return bool(value)
    if isinstance(value, np.ndarray):
        return [_jsonable(v) for v in value.tolist()]
    if isinstance(value, dict):
        return {key: _jsonable(v) for key, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


def write_json(path, payload) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        json.dump(_jsonable(payload), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_csv(path, header: list[str], rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def _dataclass_from(cls, obj: dict, context: str):
    allowed = {f.name for f in fields(cls)}
    _check_keys(obj, allowed, context)
    try:
        return cls(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid {context}: {exc}") from exc


def cmd_collapse(config_path, out_dir, bit_exact: bool) -> int:
    if config_path is None:
        raise ConfigError("the collapse command requires --config")
    cfg = _read_json(config_path)
    _check_keys(cfg, {"sigma", "n", "D", "trials", "deltas", "seed"}, "collapse config")
    sigma = float(_require(cfg, "sigma", "collapse config"))
    n = int(_require(cfg, "n", "collapse config"))
    dim = int(_require(cfg, "D", "collapse config"))
    trials = int(_require(cfg, "trials", "collapse config"))
    deltas = _require(cfg, "deltas", "collapse config")
    seed = _resolve_seed(cfg.get("seed"), "collapse config")
    if not isinstance(deltas, list) or not deltas:
        raise ConfigError("field 'deltas' in collapse config must be a nonempty list")
    for d in deltas:
        if not 0.0 < float(d) < 1.0:
            raise ConfigError("every entry of 'deltas' must lie strictly between 0 and 1")

    try:
        samples = theory.monte_carlo_ess(sigma, n, dim, trials, RngStream(seed, "collapse"))
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc

    x_norm = math.sqrt(dim)
    rows = []
    for d in deltas:
        d = float(d)
        bound = theory.ess_upper_bound(theory.BoundInputs(sigma=sigma, n=n, x_norm=x_norm, delta=d))
        rows.append(
            {
                "delta": d,
                "bound": bound,
                "exceedance": theory.exceedance_fraction(samples, bound),
                "quantile_1_minus_delta": float(np.quantile(samples, 1.0 - d)),
            }
        )
    table = {
        "sigma": sigma,
        "n": n,
        "D": dim,
        "trials": trials,
        "seed": seed,
        "median_ess": float(np.median(samples)),
        "rows": rows,
    }
    write_csv(out_dir / "ess_samples.csv", ["trial", "ess"], ((t, float(v)) for t, v in enumerate(samples)))
    write_json(out_dir / "bound_table.json", table)
    figures.render_ess_histogram(samples, rows, out_dir / "ess_histogram.png")
    return EXIT_OK


def cmd_verify(config_path, out_dir, bit_exact: bool) -> int:
    cfg = _read_json(config_path) if config_path is not None else {}
    _check_keys(cfg, {"trials", "n_values", "k_values", "seed", "force_fail_id"}, "verify config")
    trials = int(cfg.get("trials", 10_000))
    n_values = tuple(int(v) for v in cfg.get("n_values", (3, 4, 5, 6)))
    k_values = tuple(int(v) for v in cfg.get("k_values", (1, 2, 3)))
    seed = _resolve_seed(cfg.get("seed"), "verify config", default=0)
    force_fail_id = cfg.get("force_fail_id")
    if any(n > 8 for n in n_values) or any(k > 4 for k in k_values):
        raise ConfigError("field 'n_values'/'k_values': brute force is limited to n <= 8, k <= 4")
    if force_fail_id is not None and force_fail_id not in theory.CHECK_IDS:
        raise ConfigError(f"field 'force_fail_id' must be one of {theory.CHECK_IDS}")

    report = theory.build_verification_report(
        RngStream(seed, "verify"),
        trials=trials,
        n_values=n_values,
        k_values=k_values,
        force_fail_id=force_fail_id,
    )
    write_json(out_dir / "verification_report.json", report)
    figures.render_lemma_margins(report, out_dir / "lemma_margins.png")
    return EXIT_OK if report["all_pass"] else EXIT_VERIFY


def _unbiasedness_cells(seed: int, deviation_tol: float) -> tuple[list[dict], float]:
    cells = []
    worst = 0.0
    xs_dim = 5
    index = 0
    for n, k, layers, m in itertools.product((2, 3), (1, 2), (1, 2), (2, 3)):
        if k > n:
            continue
        rng = RngStream(seed, "rloo-cell", index)
        index += 1
        dists = [
            from_probs(softmax(rng.derive("logits", l).standard_normal((n,))))
            for l in range(layers)
        ]
        xs = [rng.derive("x", l).standard_normal((xs_dim,)) for l in range(layers)]
        per_layer = [enumerate_ordered(n, k) for _ in range(layers)]
        values = rng.derive("losses").uniform(
            tuple(len(t) for t in per_layer) if layers > 1 else (len(per_layer[0]),)
        )
        table = {}
        for combo in itertools.product(*per_layer):
            key = tuple(per_layer[l].index(combo[l]) for l in range(layers))
            table[combo] = float(values[key if layers > 1 else key[0]])
        deviation = unbiasedness_check(table, dists, xs, k, m)
        worst = max(worst, deviation)
        cells.append({"n": n, "k": k, "layers": layers, "m": m, "deviation": deviation})
    return cells, worst


def cmd_rloo_check(config_path, out_dir, bit_exact: bool) -> int:
    cfg = _read_json(config_path) if config_path is not None else {}
    _check_keys(
        cfg,
        {"seed", "deviation_tol", "m_values", "variance_trials", "bandit_n", "bandit_k"},
        "rloo-check config",
    )
    seed = _resolve_seed(cfg.get("seed"), "rloo-check config", default=0)
    deviation_tol = float(cfg.get("deviation_tol", 1e-10))
    m_values = tuple(int(m) for m in cfg.get("m_values", (2, 4, 16)))
    variance_trials = int(cfg.get("variance_trials", 4000))
    bandit_n = int(cfg.get("bandit_n", 6))
    bandit_k = int(cfg.get("bandit_k", 2))
    if any(m < 2 for m in m_values):
        raise ConfigError("every entry of 'm_values' must be at least 2")

    cells, max_deviation = _unbiasedness_cells(seed, deviation_tol)

    fixture = make_bandit(bandit_n, bandit_k, RngStream(seed, "rloo-fixture"))
    dist = fixture.layer.routing(fixture.x0)
    table = fixture.loss_table()
    variance_rows = []
    for i, m in enumerate(m_values):
        summary = estimator_variance(
            table,
            [dist],
            [fixture.x0],
            bandit_k,
            m,
            variance_trials,
            RngStream(seed, "rloo-variance", i),
        )
        variance_rows.append({"m": m, "variance": summary.total})
    ordered = all(
        variance_rows[i]["variance"] > variance_rows[i + 1]["variance"]
        for i in range(len(variance_rows) - 1)
    )
    passed = max_deviation <= deviation_tol and ordered
    report = {
        "cells": cells,
        "max_deviation": max_deviation,
        "deviation_tol": deviation_tol,
        "variance": {
            "bandit_n": bandit_n,
            "bandit_k": bandit_k,
            "trials": variance_trials,
            "rows": variance_rows,
            "strictly_decreasing": ordered,
        },
        "pass": passed,
    }
    write_json(out_dir / "rloo_report.json", report)
    figures.render_variance_table(variance_rows, out_dir / "variance_vs_m.png")
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_train(config_path, out_dir, bit_exact: bool) -> int:
    if config_path is None:
        raise ConfigError("the train command requires --config")
    cfg = _read_json(config_path)
    _check_keys(cfg, {"task", "train"}, "train config")
    task_obj = dict(_require(cfg, "task", "train config"))
    train_obj = dict(_require(cfg, "train", "train config"))
    train_obj["seed"] = _resolve_seed(train_obj.get("seed"), "train config", default=1)
    if bit_exact:
        train_obj["bit_exact"] = True
    spec = _dataclass_from(TaskSpec, task_obj, "train config field 'task'")
    train_cfg = _dataclass_from(TrainConfig, train_obj, "train config field 'train'")

    header = metrics_header(spec.layers)
    metrics_path = out_dir / "metrics.csv"
    diverged_step = None
    with open(metrics_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        try:
            result = run_training(
                train_cfg, spec, row_callback=lambda row: writer.writerow(metrics_row_values(row))
            )
        except DivergenceError as exc:
            diverged_step = exc.step
    if diverged_step is not None:
        print(f"training diverged: non-finite loss at step {diverged_step}", file=sys.stderr)
        return EXIT_DIVERGED

    save_checkpoint(out_dir / "checkpoint.json", result.model, train_cfg, spec)
    summary = {
        "mode": train_cfg.mode,
        "k": train_cfg.k if train_cfg.mode == "remix" else None,
        "loss": result.eval_result.loss,
        "histograms": result.eval_result.histograms,
        "steps": train_cfg.steps,
        "final_train_loss": result.rows[-1].loss,
    }
    write_json(out_dir / "eval_summary.json", summary)
    with open(metrics_path, "r", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        next(reader)
        rows = [[float(v) if i != 1 else v for i, v in enumerate(r)] for r in reader]
    figures.render_training_curves(header, rows, out_dir / "training_curves.png")
    if result.eval_result.histograms is not None:
        figures.render_selection_histogram(
            result.eval_result.histograms, out_dir / "selection_histogram.png"
        )
    return EXIT_OK


def cmd_eval(config_path, out_dir, bit_exact: bool) -> int:
    if config_path is None:
        raise ConfigError("the eval command requires --config")
    cfg = _read_json(config_path)
    _check_keys(cfg, {"checkpoint", "k_values"}, "eval config")
    checkpoint_path = _require(cfg, "checkpoint", "eval config")
    k_values = cfg.get("k_values")
    try:
        model, train_cfg, spec = load_checkpoint(checkpoint_path)
    except FileNotFoundError as exc:
        raise ConfigError(f"checkpoint not found: {checkpoint_path}") from exc
    except (ValueError, KeyError, TypeError, json.JSONDecodeError) as exc:
        raise ConfigError(f"invalid checkpoint: {exc}") from exc
    if model.dim != spec.dim:
        raise ConfigError(
            f"checkpoint dimension {model.dim} does not match its task dimension {spec.dim}"
        )
    if k_values is not None:
        if not isinstance(k_values, list) or not all(
            isinstance(k, int) and 1 <= k <= train_cfg.n for k in k_values
        ):
            raise ConfigError("field 'k_values' must be a list of integers in [1, n]")

    rng = RngStream(train_cfg.seed, "train")
    _, eval_set, _ = gen_cluster_task(spec, rng.derive("task"))
    base = evaluate(model, eval_set, train_cfg.mode)
    summary = {
        "checkpoint": str(checkpoint_path),
        "mode": train_cfg.mode,
        "base": {
            "k": train_cfg.k if train_cfg.mode == "remix" else None,
            "loss": base.loss,
            "histograms": base.histograms,
        },
        "variants": [],
    }
    if k_values is not None and train_cfg.mode == "remix":
        for k in k_values:
            variant = evaluate(model, eval_set, train_cfg.mode, k_override=k)
            summary["variants"].append(
                {"k": k, "loss": variant.loss, "histograms": variant.histograms}
            )
    write_json(out_dir / "eval_summary.json", summary)
    if base.histograms is not None:
        figures.render_selection_histogram(base.histograms, out_dir / "selection_histogram.png")
    return EXIT_OK


_COMMANDS = {
    "collapse": cmd_collapse,
    "verify": cmd_verify,
    "rloo-check": cmd_rloo_check,
    "train": cmd_train,
    "eval": cmd_eval,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="remixlora",
        description="Constant-weight mixture-of-adapters lab: simulations, "
        "verification suites, and desk-scale training runs.",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name in _COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="JSON config path")
        p.add_argument("--out", required=True, help="output directory (created if missing)")
        p.add_argument(
            "--threads",
            type=int,
            default=None,
            help="cap worker threads (computation is sequential; caps BLAS pools)",
        )
        p.add_argument("--bit-exact", action="store_true", dest="bit_exact")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.threads is not None:
        if args.threads < 1:
            print("config error: --threads must be at least 1", file=sys.stderr)
            return EXIT_CONFIG
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    out_dir = Path(args.out)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        print(f"i/o error: cannot create output directory: {exc}", file=sys.stderr)
        return EXIT_IO
    config_path = Path(args.config) if args.config is not None else None
    try:
        return _COMMANDS[args.command](config_path, out_dir, args.bit_exact)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
