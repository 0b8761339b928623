"""Command-line surface: train, evaluate, recommend, simulate.

Exit codes: 0 success, 2 usage/data errors, 1 internal errors. Diagnostics go
to stderr; stdout carries data (recommendation JSON, evaluation headline).
The SIZECAST_LOG environment variable sets the log level (DEBUG/INFO/...).
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import traceback
from pathlib import Path

from . import baseline as baseline_mod
from . import evaluation, report, synthgen
from . import hbayes as hbayes_mod
from . import predict
from .domain import (
    SizeSystemConfig,
    parse_catalog,
    parse_orders,
    parse_size_config,
    write_catalog_csv,
    write_orders_csv,
)
from .errors import ConfigError, DegenerateSupportError, ModelError, SizecastError
from .hbayes import Hyperparams

_LOG = logging.getLogger("sizecast")


def _configure_logging() -> None:
    name = os.environ.get("SIZECAST_LOG", "WARNING").upper()
    level = getattr(logging, name, None)
    if not isinstance(level, int):
        level = logging.WARNING
    logging.basicConfig(
        level=level, stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s"
    )


def _load_size_config(path: str | None) -> SizeSystemConfig:
    if path is None:
        return SizeSystemConfig.identity()
    with open(path, "r", encoding="utf-8") as fh:
        return parse_size_config(fh)


def _load_catalog(path: str, config: SizeSystemConfig):
    with open(path, "r", encoding="utf-8") as fh:
        return parse_catalog(fh, config)


def _load_orders(path: str, config: SizeSystemConfig, catalog):
    with open(path, "r", encoding="utf-8") as fh:
        dataset = parse_orders(fh, config, catalog)
    stats = dataset.ingest_stats
    _LOG.info(
        "ingested %d orders (%d other-reason returns, %d malformed, %d unknown-article rows)",
        stats.accepted,
        stats.other_returns,
        stats.malformed,
        stats.unknown_article,
    )
    for err in stats.errors[:10]:
        _LOG.warning("orders line %d: %s", err.line, err.reason)
    return dataset


def _load_model(path: str):
    with open(path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    kind = doc.get("kind")
    if kind == "baseline":
        return baseline_mod.from_json(doc)
    if kind == "hbayes":
        return hbayes_mod.from_json(doc)
    raise ModelError(f"model file {path!r} has unknown kind {kind!r}")


def _check_threshold(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ConfigError(f"{name} must lie in [0, 1], got {value}")
    return value


def _threads_cap(args) -> int:
    threads = getattr(args, "threads", None)
    if threads is None:
        return os.cpu_count() or 1
    if threads < 1:
        raise ConfigError("--threads must be at least 1")
    return threads


def cmd_train(args) -> int:
    _threads_cap(args)
    config = _load_size_config(args.size_config)
    catalog = _load_catalog(args.catalog, config)
    dataset = _load_orders(args.orders, config, catalog)
    if args.kind == "baseline":
        model = baseline_mod.fit_baseline(dataset, h_min=args.h_min)
        with open(args.out, "w", encoding="utf-8") as fh:
            baseline_mod.save(model, fh)
    else:
        state = hbayes_mod.fit_hbayes(
            dataset,
            catalog,
            tol=args.tol,
            max_sweeps=args.max_sweeps,
            seed=args.seed,
            on_sweep=lambda i, value: _LOG.info("sweep %d: objective %.6f", i, value),
        )
        with open(args.out, "w", encoding="utf-8") as fh:
            hbayes_mod.save(state, fh)
    _LOG.info("wrote %s model to %s", args.kind, args.out)
    return 0


def cmd_evaluate(args) -> int:
    _threads_cap(args)
    config = _load_size_config(args.size_config)
    catalog = _load_catalog(args.catalog, config)
    dataset = _load_orders(args.orders, config, catalog)
    result = evaluation.run_evaluation(
        dataset,
        catalog,
        n_folds=args.folds,
        gap_days=args.gap_days,
        val_days=args.val_days,
        h_min=args.h_min,
        tol=args.tol,
        max_sweeps=args.max_sweeps,
        seed=args.seed,
        on_progress=_LOG.info,
    )
    out_dir = Path(args.out)
    paths = evaluation.emit_report(result, out_dir)
    paths.append(
        report.coverage_accuracy_figure(result.curves, out_dir / "coverage_accuracy.png")
    )
    paths.append(report.elbo_trace_figure(result.elbo_traces, out_dir / "elbo_trace.png"))
    for path in paths:
        _LOG.info("wrote %s", path)

    condition = "excl" if args.exclude_unknown_customers else "incl"
    summary = result.summary()
    headline = {
        "customers": condition,
        "avg_log_joint": {
            kind: summary["models"][kind][condition]["mean"] for kind in summary["models"]
        },
    }
    print(json.dumps(headline, sort_keys=True))
    return 0


def cmd_recommend(args) -> int:
    _threads_cap(args)
    _check_threshold("--tau-joint", args.tau_joint)
    _check_threshold("--tau-param", args.tau_param)
    config = _load_size_config(args.size_config)
    catalog = _load_catalog(args.catalog, config)
    model = _load_model(args.model)
    try:
        table = predict.joint_table(model, args.customer, args.article, catalog)
        rec = predict.recommend(table, args.tau_joint, args.tau_param)
    except DegenerateSupportError as exc:
        _LOG.warning("abstaining: %s", exc)
        rec = predict.Recommendation(
            decision=None,
            joint_prob=0.0,
            tau_joint=args.tau_joint,
            tau_param=args.tau_param,
            confidence=None,
        )
    print(json.dumps(predict.recommendation_to_json(rec, args.customer, args.article),
                     sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    _threads_cap(args)
    hyper = Hyperparams()
    if args.sigma0 is not None:
        if not args.sigma0 > 0:
            raise ConfigError(f"--sigma0 must be positive, got {args.sigma0}")
        var0 = args.sigma0 ** 2
        hyper = Hyperparams(
            size_prior={key: (mu, var0) for key, (mu, _) in hyper.size_prior.items()},
            default_size_prior=(hyper.default_size_prior[0], var0),
        )
    config = synthgen.SynthConfig(
        n_customers=args.customers,
        n_articles=args.articles,
        n_orders=args.orders,
        n_brands=args.brands,
        seed=args.seed,
        hyper=hyper,
    )
    dataset, catalog, truth = synthgen.sample_dataset(config)

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    with (out_dir / "orders.csv").open("w", encoding="utf-8", newline="") as fh:
        write_orders_csv(dataset, fh)
    with (out_dir / "catalog.csv").open("w", encoding="utf-8", newline="") as fh:
        write_catalog_csv(catalog, fh)
    with (out_dir / "truth.json").open("w", encoding="utf-8") as fh:
        synthgen.save_truth(truth, fh)
    _LOG.info(
        "wrote %d orders, %d articles, truth for %d customers to %s",
        len(dataset),
        len(catalog),
        len(truth.customer_ids),
        out_dir,
    )
    return 0


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument(
        "--threads",
        type=int,
        default=None,
        help="cap worker threads (default: all available cores); results are "
        "identical for any value",
    )

    parser = argparse.ArgumentParser(
        prog="sizecast",
        description="Size recommendation: fit, evaluate, and serve the baseline "
        "and hierarchical Bayesian models.",
        formatter_class=fmt,
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser(
        "train", parents=[common], formatter_class=fmt, help="fit a model and write it as JSON"
    )
    p_train.add_argument("--kind", choices=("baseline", "hbayes"), required=True,
                         help="model family to fit")
    p_train.add_argument("--orders", required=True, help="orders CSV path")
    p_train.add_argument("--catalog", required=True, help="catalog CSV path")
    p_train.add_argument("--size-config", default=None, help="size-system config path")
    p_train.add_argument("--out", required=True, help="output model JSON path")
    p_train.add_argument("--seed", type=int, default=0, help="fit seed (hbayes init)")
    p_train.add_argument("--h-min", type=float, default=baseline_mod.DEFAULT_H_MIN,
                         help="baseline bandwidth floor")
    p_train.add_argument("--tol", type=float, default=1e-4,
                         help="relative objective-change stopping tolerance (hbayes)")
    p_train.add_argument("--max-sweeps", type=int, default=200,
                         help="maximum coordinate-ascent sweeps (hbayes)")
    p_train.set_defaults(func=cmd_train)

    p_eval = sub.add_parser(
        "evaluate", parents=[common], formatter_class=fmt,
        help="temporal cross-validation of both models",
    )
    p_eval.add_argument("--orders", required=True, help="orders CSV path")
    p_eval.add_argument("--catalog", required=True, help="catalog CSV path")
    p_eval.add_argument("--size-config", default=None, help="size-system config path")
    p_eval.add_argument("--out", required=True, help="output directory for report files")
    p_eval.add_argument("--folds", type=int, default=3, help="number of temporal folds")
    p_eval.add_argument("--gap-days", type=int, default=evaluation.DEFAULT_GAP_DAYS,
                        help="days between training cutoff and validation start")
    p_eval.add_argument("--val-days", type=int, default=evaluation.DEFAULT_VAL_DAYS,
                        help="length of each validation window in days")
    p_eval.add_argument("--seed", type=int, default=0, help="fit seed (hbayes init)")
    p_eval.add_argument("--h-min", type=float, default=baseline_mod.DEFAULT_H_MIN,
                        help="baseline bandwidth floor")
    p_eval.add_argument("--tol", type=float, default=1e-4,
                        help="relative objective-change stopping tolerance (hbayes)")
    p_eval.add_argument("--max-sweeps", type=int, default=200,
                        help="maximum coordinate-ascent sweeps (hbayes)")
    p_eval.add_argument("--exclude-unknown-customers", action="store_true",
                        help="report the headline on the excl.-unknown-customers rows")
    p_eval.set_defaults(func=cmd_evaluate)

    p_rec = sub.add_parser(
        "recommend", parents=[common], formatter_class=fmt,
        help="print a size recommendation (or abstention) as JSON",
    )
    p_rec.add_argument("--model", required=True, help="model JSON path")
    p_rec.add_argument("--catalog", required=True, help="catalog CSV path")
    p_rec.add_argument("--size-config", default=None, help="size-system config path")
    p_rec.add_argument("--customer", required=True, help="customer id")
    p_rec.add_argument("--article", required=True, help="article id")
    p_rec.add_argument("--tau-joint", type=float, default=0.0,
                       help="abstain when p(size, kept) is below this")
    p_rec.add_argument("--tau-param", type=float, default=0.0,
                       help="abstain when parameter confidence is below this "
                       "(hierarchical model only)")
    p_rec.set_defaults(func=cmd_recommend)

    p_sim = sub.add_parser(
        "simulate", parents=[common], formatter_class=fmt,
        help="sample a synthetic dataset with known ground truth",
    )
    p_sim.add_argument("--out", required=True, help="output directory")
    p_sim.add_argument("--customers", type=int, default=200, help="number of customers")
    p_sim.add_argument("--articles", type=int, default=50, help="number of articles")
    p_sim.add_argument("--orders", type=int, default=20_000, help="total number of orders")
    p_sim.add_argument("--brands", type=int, default=8, help="number of brands")
    p_sim.add_argument("--seed", type=int, default=1, help="sampling seed")
    p_sim.add_argument("--sigma0", type=float, default=None,
                       help="override the size-prior standard deviation (must be > 0)")
    p_sim.set_defaults(func=cmd_simulate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _configure_logging()
    try:
        return args.func(args)
    except SizecastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except Exception:  # pragma: no cover - internal failure path
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
