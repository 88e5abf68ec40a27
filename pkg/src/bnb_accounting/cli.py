"""Command-line interface: ``bnb-accounting {account,curve,simulate-sampler,truncation-delta}``.

Standard output carries data only (JSON, JSON lines or CSV); diagnostics go to
standard error. Exit codes: 0 success, 2 configuration error, 3 numerical
regime error.
"""

from __future__ import annotations

import argparse
import csv
import importlib.resources
import io
import json
import logging
import math
import os
import sys
from typing import Optional, Sequence

import numpy as np

from bnb_accounting import __version__, analytic, samplers
from bnb_accounting.errors import (ConfigurationError, DomainError, GridOverflowError,
                                   TailUnderflowError)
from bnb_accounting.losses import AccountingParams, Direction, OrderSpec, PairId, PairKind, parse_orders
from bnb_accounting.monte_carlo import McConfig, Strategy, estimate_curve
from bnb_accounting.numerics import RngStream, binomial_tail

logger = logging.getLogger("bnb_accounting.cli")

SCHEMA_VERSION = "1.0"
WORKERS_ENV = "BNB_ACCOUNTING_WORKERS"
CURVE_COLUMNS = ("epsilon", "lower", "mean", "upper", "method", "direction", "m", "beta", "seed")
BETA_NOTE = "beta applies to each (epsilon, direction) bound separately; no correction across a grid"

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3

# Methods each sampler accepts; "upper" is an alias for the sampler's default upper bound.
METHODS = {
    "bnb": ("plain", "importance", "order-stats", "combined", "lower"),
    "poisson": ("pld",),
    "deterministic": ("exact",),
    "shuffle": ("lower",),
}
UPPER_ALIAS = {"bnb": "plain", "poisson": "pld", "deterministic": "exact"}
MC_STRATEGY = {
    "plain": Strategy.PLAIN,
    "importance": Strategy.IMPORTANCE,
    "order-stats": Strategy.ORDER_STATS,
    "combined": Strategy.COMBINED,
}


def load_schema(name: str) -> dict:
    """Returns the shipped JSON schema `name` (account, curve, simulate or truncation)."""
    path = importlib.resources.files("bnb_accounting") / "schemas" / f"{name}.schema.json"
    return json.loads(path.read_text())


def _default_workers() -> int:
    raw = os.environ.get(WORKERS_ENV, "").strip()
    if not raw:
        return 1
    try:
        value = int(raw)
    except ValueError:
        raise ConfigurationError(f"{WORKERS_ENV} must be an integer, got {raw!r}")
    if value < 1:
        raise ConfigurationError(f"{WORKERS_ENV} must be positive, got {value}")
    return value


def _resolve_method(sampler: str, method: Optional[str]) -> str:
    if method is None:
        return METHODS[sampler][0]
    if method == "upper":
        if sampler == "shuffle":
            raise ConfigurationError("shuffle supports lower bounds only")
        return UPPER_ALIAS[sampler]
    if method not in METHODS[sampler]:
        if sampler == "shuffle":
            raise ConfigurationError("shuffle supports lower bounds only")
        raise ConfigurationError(
            f"method {method!r} is not available for sampler {sampler}; "
            f"choose from {', '.join(METHODS[sampler])}")
    return method


def _order_spec(text: Optional[str], T: int) -> Optional[OrderSpec]:
    if text is None:
        return None
    if text.strip() == "full":
        return OrderSpec.full(T)
    orders = parse_orders(text)
    return OrderSpec(orders, T - 1 if orders and orders[-1] <= T - 1 else T)


def _epsilon_grid(args) -> list[float]:
    if args.epsilons is not None:
        try:
            eps = [float(v) for v in args.epsilons.split(",") if v.strip()]
        except ValueError:
            raise ConfigurationError(f"cannot parse --epsilons {args.epsilons!r}")
    else:
        if args.eps_min is None or args.eps_max is None:
            raise ConfigurationError("give --epsilons or both --eps-min and --eps-max")
        if args.eps_count < 1:
            raise ConfigurationError("--eps-count must be positive")
        if args.eps_spacing == "geometric":
            if not 0 < args.eps_min <= args.eps_max:
                raise ConfigurationError("a geometric grid needs 0 < eps-min <= eps-max")
            eps = np.geomspace(args.eps_min, args.eps_max, args.eps_count).tolist()
        else:
            eps = np.linspace(args.eps_min, args.eps_max, args.eps_count).tolist()
    if not eps:
        raise ConfigurationError("the epsilon grid is empty")
    if not all(math.isfinite(e) for e in eps):
        raise ConfigurationError("epsilons must be finite")
    return sorted(eps)


def _config_echo(args, method: str, epsilons: Sequence[float]) -> dict:
    return {
        "sampler": args.sampler,
        "sigma": args.sigma,
        "steps": args.steps,
        "epochs": args.epochs,
        "method": method,
        "direction": args.direction,
        "m": args.m,
        "beta": args.beta,
        "orders": args.orders,
        "workers": args.workers,
        "seed": args.seed,
        "grid_step": args.grid_step,
        "epsilons": list(epsilons),
    }


def _row(epsilon, lower=None, mean=None, upper=None, method="", direction="", m=None, beta=None,
         seed=None, **extra) -> dict:
    row = {"epsilon": epsilon, "lower": lower, "mean": mean, "upper": upper, "method": method,
           "direction": direction, "m": m, "beta": beta, "seed": seed}
    row.update(extra)
    return row


def compute_rows(args) -> tuple[str, list[dict]]:
    """Evaluates the request in `args` on its epsilon grid; one dict per epsilon."""
    sampler = args.sampler
    method = _resolve_method(sampler, args.method)
    epsilons = args.epsilon_grid
    params = AccountingParams(args.sigma, args.steps, args.epochs)
    direction = Direction(args.direction)
    rows = []

    if sampler == "deterministic":
        for e in epsilons:
            d = analytic.delta_deterministic(params, e)
            rows.append(_row(e, d, d, d, method, "both", bound_kind="exact", delta=d))
        return method, rows

    if sampler == "poisson":
        kw = dict(grid_step=args.grid_step, direction=direction)
        lower = analytic.poisson_delta_curve(params, epsilons, analytic.Rounding.OPTIMISTIC, **kw)
        upper = analytic.poisson_delta_curve(params, epsilons, analytic.Rounding.PESSIMISTIC, **kw)
        for e, lo, up in zip(epsilons, lower, upper):
            rows.append(_row(e, lo, None, up, method, direction.value, bound_kind="pld", delta=up))
        return method, rows

    cfg_common = dict(m=args.m, beta=args.beta, workers=args.workers)
    if sampler == "shuffle":
        cfg = McConfig(strategy=Strategy.PLAIN, **cfg_common)
        for est in analytic.shuffle_lower_curve(params, epsilons, cfg, RngStream(args.seed), direction):
            rows.append(_row(est.epsilon, est.lower, est.mean_q, None, method, direction.value, est.m_used,
                             args.beta, args.seed, bound_kind="lower_only", delta=est.lower,
                             estimate=est.to_dict()))
        return method, rows

    # Balls-and-Bins.
    certs = []
    if params.epochs == 1:
        certs = [analytic.bnb_lower_bound(params, e) for e in epsilons]
    if method == "lower":
        if not certs:
            raise ConfigurationError("the threshold lower bound is single-epoch only")
        for c in certs:
            rows.append(_row(c.epsilon, c.value, None, None, method, "both", bound_kind="lower_only",
                             delta=c.value, certificate=c.to_dict()))
        return method, rows
    spec = _order_spec(args.orders, params.T)
    cfg = McConfig(strategy=MC_STRATEGY[method], order_spec=spec, **cfg_common)
    ests = estimate_curve(PairId(PairKind.BALLS_BINS, direction), params, epsilons, cfg,
                          RngStream(args.seed))
    for i, est in enumerate(ests):
        lower = certs[i].value if certs else None
        extra = {"estimate": est.to_dict(), "delta": est.upper_p, "bound_kind": "upper"}
        if certs:
            extra["certificate"] = certs[i].to_dict()
        rows.append(_row(est.epsilon, lower, est.mean_q, est.upper_p, method, direction.value,
                         est.m_used, args.beta, args.seed, **extra))
    return method, rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def cmd_account(args, out) -> int:
    args.epsilon_grid = [args.epsilon]
    if not math.isfinite(args.epsilon):
        raise ConfigurationError("epsilon must be finite")
    method, rows = compute_rows(args)
    result = dict(rows[0])
    result["beta_note"] = BETA_NOTE
    doc = {
        "schema_version": SCHEMA_VERSION,
        "library_version": __version__,
        "command": "account",
        "config": _config_echo(args, method, [args.epsilon]),
        "result": result,
    }
    out.write(json.dumps(doc, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_curve(args, out) -> int:
    args.epsilon_grid = _epsilon_grid(args)
    method, rows = compute_rows(args)
    if args.format == "json":
        doc = {
            "schema_version": SCHEMA_VERSION,
            "library_version": __version__,
            "command": "curve",
            "config": _config_echo(args, method, args.epsilon_grid),
            "beta_note": BETA_NOTE,
            "columns": list(CURVE_COLUMNS),
            "rows": [{k: r[k] for k in CURVE_COLUMNS} for r in rows],
        }
        out.write(json.dumps(doc, sort_keys=True) + "\n")
        return EXIT_OK
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(CURVE_COLUMNS)
    for r in rows:
        writer.writerow([_fmt(r[k]) for k in CURVE_COLUMNS])
    out.write(buf.getvalue())
    return EXIT_OK


def simulate_summary(kind: samplers.SamplerKind, cfg: samplers.SamplerConfig,
                     assignments: Sequence[samplers.BatchAssignment]) -> dict:
    """Size histogram, marginal inclusion frequencies and a chi-square check."""
    trials = len(assignments)
    n, T = cfg.n, cfg.T
    counts = np.zeros((n, T), dtype=np.int64)
    sizes: dict[int, int] = {}
    truncated = 0
    for a in assignments:
        for t, batch in enumerate(a.batches):
            counts[np.asarray(batch, dtype=np.int64) - 1, t] += 1
            sizes[len(batch)] = sizes.get(len(batch), 0) + 1
    prob = samplers.marginal_inclusion_probability(kind, cfg)
    summary = {
        "sampler": kind.value,
        "n": n, "b": cfg.b, "T": T, "max_batch": cfg.max_batch, "trials": trials,
        "size_histogram": {str(k): sizes[k] for k in sorted(sizes)},
        "marginal_frequency_batch1": (counts[:, 0] / trials).tolist() if T else [],
        "marginal_probability": prob,
    }
    if kind is samplers.SamplerKind.DETERMINISTIC:
        expected = np.zeros((n, T), dtype=np.int64)
        for t, batch in enumerate(samplers.deterministic_batches(cfg).batches):
            expected[np.asarray(batch) - 1, t] = trials
        summary["chi_square"] = {"degenerate": True, "exact_match": bool(np.array_equal(counts, expected))}
    else:
        expected = trials * prob
        stat = float(((counts - expected) ** 2 / expected).sum())
        summary["chi_square"] = {"degenerate": False, "statistic": stat, "cells": n * T}
    if cfg.max_batch is not None:
        law = samplers.batch_size_law(kind, cfg)
        rate = sum(c for s, c in sizes.items() if s > cfg.max_batch) / max(1, trials * T)
        summary["truncation_rate"] = rate
        summary["truncation_probability"] = (
            binomial_tail(law[0], law[1], cfg.max_batch) if law else float(cfg.b > cfg.max_batch))
    return summary


def cmd_simulate_sampler(args, out) -> int:
    kind = samplers.SamplerKind(args.sampler)
    cfg = samplers.SamplerConfig(args.n, args.b, args.steps, args.max_batch)
    if kind in (samplers.SamplerKind.DETERMINISTIC, samplers.SamplerKind.SHUFFLE):
        cfg.require_exact_partition()
    if args.trials < 1:
        raise ConfigurationError("--trials must be positive")
    root = RngStream(args.seed)
    drawn = []
    for i in range(args.trials):
        stream = root.substream(i)
        assignment = samplers.generate(kind, cfg, stream.substream(0))
        drawn.append(assignment)
        if args.summary_only:
            continue
        emitted = assignment
        if cfg.max_batch is not None:
            emitted = samplers.truncate_batches(assignment, cfg.max_batch, stream.substream(1))
        for line in emitted.to_json_lines(trial=i):
            out.write(json.dumps(line, sort_keys=True) + "\n")
    # The summary describes the raw sampler, before any truncation.
    summary = simulate_summary(kind, cfg, drawn)
    doc = {"schema_version": SCHEMA_VERSION, "library_version": __version__, "summary": summary}
    out.write(json.dumps(doc, sort_keys=True) + "\n")
    return EXIT_OK


def cmd_truncation_delta(args, out) -> int:
    penalty = None
    if args.max_batch is not None:
        penalty = samplers.truncation_delta_penalty(args.n, args.b, args.steps, args.max_batch,
                                                    args.epsilon)
    smallest = None
    if args.target is not None:
        smallest = samplers.smallest_max_batch(args.n, args.b, args.steps, args.epsilon, args.target)
    if penalty is None and smallest is None:
        raise ConfigurationError("give --max-batch, --target, or both")
    if args.format == "json":
        doc = {"schema_version": SCHEMA_VERSION, "library_version": __version__,
               "n": args.n, "b": args.b, "T": args.steps, "epsilon": args.epsilon,
               "max_batch": args.max_batch, "delta_prime": penalty, "target": args.target,
               "smallest_max_batch": smallest}
        out.write(json.dumps(doc, sort_keys=True) + "\n")
        return EXIT_OK
    if penalty is not None:
        out.write(f"{penalty:.6g}\n")
    if smallest is not None:
        out.write(f"{smallest}\n")
    return EXIT_OK


def _add_accounting_flags(p: argparse.ArgumentParser):
    p.add_argument("--sampler", required=True, choices=sorted(METHODS))
    p.add_argument("--sigma", type=float, required=True, help="noise multiplier")
    p.add_argument("--steps", type=int, required=True, help="steps per epoch, T")
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--method", default=None,
                   help="bnb: plain|importance|order-stats|combined|lower; poisson: pld; "
                        "deterministic: exact; shuffle: lower; 'upper' picks the default upper bound")
    p.add_argument("--m", type=int, default=100_000, help="Monte Carlo samples")
    p.add_argument("--beta", type=float, default=1e-3, help="failure probability per bound")
    p.add_argument("--orders", default=None,
                   help="ranks for order statistics, e.g. 1..400,410..1000:10, or 'full'")
    p.add_argument("--direction", choices=[d.value for d in Direction], default="both")
    p.add_argument("--workers", type=int, default=None,
                   help=f"worker processes (default ${WORKERS_ENV} or 1)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--grid-step", type=float, default=analytic.DEFAULT_GRID_STEP,
                   help="PLD loss grid spacing")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bnb-accounting", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("account", help="delta at a single epsilon (JSON)")
    _add_accounting_flags(p)
    p.add_argument("--epsilon", type=float, required=True)
    p.set_defaults(func=cmd_account)

    p = sub.add_parser("curve", help="delta over an epsilon grid (CSV or JSON)")
    _add_accounting_flags(p)
    p.add_argument("--epsilons", default=None, help="comma-separated list")
    p.add_argument("--eps-min", type=float, default=None)
    p.add_argument("--eps-max", type=float, default=None)
    p.add_argument("--eps-count", type=int, default=10)
    p.add_argument("--eps-spacing", choices=["linear", "geometric"], default="linear")
    p.add_argument("--format", choices=["csv", "json"], default="csv")
    p.set_defaults(func=cmd_curve)

    p = sub.add_parser("simulate-sampler", help="draw batch assignments (JSON lines)")
    p.add_argument("--sampler", required=True, choices=[k.value for k in samplers.SamplerKind])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--steps", "--T", dest="steps", type=int, required=True)
    p.add_argument("--max-batch", type=int, default=None)
    p.add_argument("--trials", type=int, default=1)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--summary-only", action="store_true", help="omit per-batch lines")
    p.set_defaults(func=cmd_simulate_sampler)

    p = sub.add_parser("truncation-delta", help="delta penalty for capping batch sizes")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--b", type=int, required=True)
    p.add_argument("--steps", "--T", dest="steps", type=int, required=True)
    p.add_argument("--max-batch", "--B", dest="max_batch", type=int, default=None)
    p.add_argument("--epsilon", type=float, required=True)
    p.add_argument("--target", type=float, default=None,
                   help="also print the smallest max batch with penalty <= target")
    p.add_argument("--format", choices=["text", "json"], default="text")
    p.set_defaults(func=cmd_truncation_delta)
    return parser


def main(argv: Optional[Sequence[str]] = None, out=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(stream=sys.stderr, level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    out = sys.stdout if out is None else out
    # Output is buffered so a failing command writes nothing to stdout.
    buf = io.StringIO()
    try:
        if hasattr(args, "workers") and args.workers is None:
            args.workers = _default_workers()
        code = args.func(args, buf)
    except (ConfigurationError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TailUnderflowError, GridOverflowError) as exc:
        print(f"numerical regime error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    out.write(buf.getvalue())
    out.flush()
    return code


if __name__ == "__main__":
    sys.exit(main())
