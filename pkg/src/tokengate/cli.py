"""Command-line surface: select, train, bench, ablate, diag, weights-inspect.

Exit codes: 0 ok, 2 input parse, 3 shape conflict, 4 missing resource,
5 numeric failure, 6 config schema violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .config import RunConfig, apply_overrides, load_config, schema_help
from .errors import (
    ConfigError,
    InputError,
    MissingResourceError,
    NumericError,
    ParameterError,
    ShapeError,
)
from .harness import (
    AblationVariant,
    OptimizerConfig,
    WorkloadSpec,
    ablation_csv,
    bench_csv,
    bench_scaling,
    correlation_csv,
    correlation_report,
    parse_records_csv,
    records_csv,
    run_ablation,
    train_desk_scale,
    trajectory_csv,
    write_csv,
)
from .objective import PenaltyWeights
from .selector import DiagnosticsRecord, SelectorModel, load_weights, save_weights, select
from .tensorio import atomic_write_text, read_tensor, write_tensor

EXIT_OK = 0
EXIT_PARSE = 2
EXIT_SHAPE = 3
EXIT_MISSING = 4
EXIT_NUMERIC = 5
EXIT_CONFIG = 6


def _load_run_config(args) -> RunConfig:
    cfg = RunConfig()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingResourceError(f"config file not found: {path}")
        cfg = load_config(path, cfg)
    if getattr(args, "set", None):
        cfg = apply_overrides(cfg, args.set)
    return cfg


def _penalties(cfg: RunConfig) -> PenaltyWeights:
    return PenaltyWeights(
        lambda_t=cfg.lambda_t,
        lambda_m=cfg.lambda_m,
        lambda_s=cfg.lambda_s,
        rho_bar=cfg.rho_bar,
    )


def _add_config_args(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="key = value configuration file")
    parser.add_argument(
        "--set",
        action="append",
        metavar="KEY=VALUE",
        help="override one configuration key (repeatable)",
    )


def cmd_select(args) -> int:
    cfg = _load_run_config(args)
    model = load_weights(args.weights)
    x = read_tensor(args.x)
    q = read_tensor(args.q)
    timestamps = read_tensor(args.timestamps).ravel()
    rng = np.random.default_rng(cfg.seed)
    result = select(model, x, timestamps, q, mode=args.mode, rng=rng)

    write_tensor(args.out_tokens, result.z)
    atomic_write_text(
        args.out_indices, "\n".join(str(int(i)) for i in result.indices) + "\n"
    )
    diag = {name: getattr(result.record, name) for name in DiagnosticsRecord.FIELDS}
    diag["mode"] = result.mode
    diag["n_target"] = result.n_target
    diag["rho_m"] = result.rho_m
    line = json.dumps(diag, sort_keys=True)
    atomic_write_text(args.out_diag, line + "\n")
    print(line)
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _load_run_config(args)
    model = SelectorModel.build(cfg)
    spec = WorkloadSpec.from_config(cfg)
    trained, trajectory = train_desk_scale(
        spec,
        model,
        epochs=cfg.train_epochs,
        opt=OptimizerConfig.from_config(cfg),
        penalties=_penalties(cfg),
        seed=cfg.seed,
    )
    save_weights(trained, args.out_weights)
    write_csv(args.out_trajectory, trajectory_csv(trajectory))
    print(f"trained {cfg.train_epochs} epochs; weights -> {args.out_weights}")
    return EXIT_OK


def cmd_bench(args) -> int:
    cfg = _load_run_config(args)
    model = load_weights(args.weights) if args.weights else SelectorModel.build(cfg)
    frames = [int(tok) for tok in args.frames.split(",") if tok]
    if not frames:
        raise InputError("empty frame list")
    spec = WorkloadSpec.from_config(cfg)
    records = bench_scaling(frames, model, spec)
    write_csv(args.out, bench_csv(records))
    print(f"benchmark rows: {len(records)} -> {args.out}")
    return EXIT_OK


def cmd_ablate(args) -> int:
    cfg = _load_run_config(args)
    model = load_weights(args.weights) if args.weights else SelectorModel.build(cfg)
    spec = WorkloadSpec.from_config(cfg)
    variant = AblationVariant(args.variant)
    metrics = run_ablation(variant, spec, model, args.trials)
    write_csv(args.out, ablation_csv(metrics.rows))
    if args.records_out:
        write_csv(args.records_out, records_csv(metrics.records))
    print(
        f"{metrics.variant}: recall={metrics.mean_recall:.4f} "
        f"rho={metrics.mean_rho:.4f} n={metrics.mean_n:.1f} over {metrics.trials} trials"
    )
    return EXIT_OK


def cmd_diag(args) -> int:
    path = Path(args.records)
    if not path.exists():
        raise MissingResourceError(f"records file not found: {path}")
    records = parse_records_csv(path.read_text(encoding="utf-8"))
    rows = correlation_report(records)
    write_csv(args.out, correlation_csv(rows))
    for row in rows:
        r_txt = "undefined" if row.r is None else f"{row.r:+.4f}"
        print(f"{row.pair}: r={r_txt} (count={row.count})")
    return EXIT_OK


def cmd_weights_inspect(args) -> int:
    model = load_weights(args.weights)
    entries = list(model.named_tensors())
    for name, tensor in entries:
        arr = np.asarray(tensor)
        print(f"{name} {arr.shape[0]}x{arr.shape[1]}")
    print(f"{len(entries)} tensors verified in {args.weights}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tokengate",
        description="Query-aware visual token selection with adaptive budgets.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def subparser(name: str, help_text: str) -> argparse.ArgumentParser:
        p = sub.add_parser(
            name,
            help=help_text,
            epilog=schema_help(),
            formatter_class=argparse.RawDescriptionHelpFormatter,
        )
        _add_config_args(p)
        return p

    p = subparser("select", "run selection on QTN1 tensor files")
    p.add_argument("--x", required=True, help="visual tokens, QTN1 rank-2 (M x d)")
    p.add_argument("--q", required=True, help="query embeddings, QTN1 rank-2 (L x d)")
    p.add_argument("--timestamps", required=True, help="per-token seconds, QTN1 rank-1")
    p.add_argument("--weights", required=True, help="weights directory")
    p.add_argument("--mode", choices=("train", "infer"), default="infer")
    p.add_argument("--out-tokens", required=True)
    p.add_argument("--out-indices", required=True)
    p.add_argument("--out-diag", required=True)
    p.set_defaults(func=cmd_select)

    p = subparser("train", "desk-scale training on synthetic workloads")
    p.add_argument("--out-weights", required=True)
    p.add_argument("--out-trajectory", required=True)
    p.set_defaults(func=cmd_train)

    p = subparser("bench", "scaling benchmark against a quadratic mock downstream")
    p.add_argument("--frames", required=True, help="comma-separated frame counts")
    p.add_argument("--weights", help="weights directory (default: seeded init)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_bench)

    p = subparser("ablate", "recall comparison of UNIF / nREENC / QTS")
    p.add_argument(
        "--variant", required=True, choices=[v.value for v in AblationVariant]
    )
    p.add_argument("--trials", type=int, default=50)
    p.add_argument("--weights", help="weights directory (default: seeded init)")
    p.add_argument("--out", required=True)
    p.add_argument("--records-out", help="also write per-trial diagnostics records")
    p.set_defaults(func=cmd_ablate)

    p = subparser("diag", "correlation report over a diagnostics records CSV")
    p.add_argument("--records", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_diag)

    p = subparser("weights-inspect", "verify and list a weights directory")
    p.add_argument("--weights", required=True)
    p.set_defaults(func=cmd_weights_inspect)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_SHAPE
    except (MissingResourceError, FileNotFoundError) as exc:
        print(f"missing resource: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        if exc.dump:
            print(json.dumps(exc.dump, default=str), file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, ParameterError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
