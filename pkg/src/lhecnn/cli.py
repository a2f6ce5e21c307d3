"""Command-line surface.

Subcommands:
  derive-params  validate a config and print its packing plan
  infer          run a full inference session, report op counts and costs
  train-step     run one SGD step, write updated weights
  estimate       dry-run op counts (data independent) priced by the cost table
  make-fixtures  materialize the bundled demo models

Exit codes: 0 success, 2 validation error, 3 depth-budget error,
4 oracle mismatch.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from . import fixtures
from .errors import (
    AttestationError,
    DepthBudgetError,
    LhecnnError,
    OracleMismatchError,
    ValidationError,
)
from .ledger import (
    CostTable,
    estimate_breakdown_us,
    estimate_time_us,
    render_csv,
    render_text,
)
from .oracle import plain_forward, plain_sgd_step, zero_model
from .protocol import run_session
from .tensorio import (
    load_config,
    load_tensors,
    model_to_tensors,
    save_tensors,
    tensors_to_model,
)

EXIT_VALIDATION = 2
EXIT_DEPTH = 3
EXIT_ORACLE = 4

WORKERS_ENV = "LHECNN_WORKERS"


def _workers(args) -> int:
    raw = os.environ.get(WORKERS_ENV, "1")
    try:
        return max(1, int(raw))
    except ValueError:
        raise ValidationError(f"{WORKERS_ENV} must be an integer, got {raw!r}")


def _load_batch(path, config):
    tensors = load_tensors(path)
    if "inputs" not in tensors:
        raise ValidationError(f"{path}: no 'inputs' tensor found")
    return tensors["inputs"]


def _max_rel_err(got: np.ndarray, want: np.ndarray) -> float:
    scale = np.maximum(np.abs(want), 1e-12)
    return float(np.max(np.abs(got - want) / scale))


def _apply_overrides(config, args):
    if getattr(args, "n", None) is not None:
        config.n = args.n
    return config


def _report(session, cost_table, args, extra_lines=()):
    ledger = session.ledger
    out_lines = []
    if args.report == "csv":
        out_lines.append(render_csv(ledger, "by_phase"))
        out_lines.append(render_csv(ledger, "by_level"))
        out_lines.append(render_csv(ledger, "totals"))
        out_lines.append(render_csv(ledger, "amortized", n=session.plan.n))
        text = "".join(out_lines)
    else:
        out_lines.append("== packing plan ==")
        out_lines.extend(session.plan.summary_lines())
        out_lines.append("")
        out_lines.append("== operations by phase ==")
        out_lines.append(render_text(ledger, "by_phase"))
        out_lines.append("== operations by level ==")
        out_lines.append(render_text(ledger, "by_level"))
        out_lines.append("== totals ==")
        out_lines.append(render_text(ledger, "totals"))
        out_lines.append(render_text(ledger, "amortized", n=session.plan.n))
        total_us = estimate_time_us(ledger, cost_table)
        by_phase_us, by_level_us = estimate_breakdown_us(ledger, cost_table)
        out_lines.append(f"== estimated time: {total_us:.0f} us ==")
        for phase, us in by_phase_us.items():
            out_lines.append(f"  {phase:<24} {us:12.0f} us")
        out_lines.append("  by level:")
        for level, us in by_level_us.items():
            out_lines.append(f"    level {level:<3} {us:12.0f} us")
        out_lines.extend(extra_lines)
        text = "\n".join(out_lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)


def cmd_derive_params(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    from .geometry import validate_model

    plan = validate_model(config, packing=args.packing)
    for line in plan.summary_lines():
        print(line)
    return 0


def cmd_infer(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    model = tensors_to_model(load_tensors(args.weights), config)
    batch = _load_batch(args.inputs, config)
    activations = not args.no_activation
    session = run_session(model, config, batch, activations=activations,
                          packing=args.packing, workers=_workers(args),
                          seed=args.seed)
    extra = []
    if args.compare_oracle:
        want = plain_forward(model, config, batch, activations).logits
        err = _max_rel_err(session.logits, want)
        verdict = "pass" if err <= args.tolerance else "FAIL"
        extra.append(f"== oracle comparison: {verdict} "
                     f"(max relative error {err:.3e}, tolerance {args.tolerance:g}) ==")
    cost_table = CostTable.load(args.cost_table) if args.cost_table else CostTable.default()
    _report(session, cost_table, args, extra)
    if args.compare_oracle:
        want = plain_forward(model, config, batch, activations).logits
        if _max_rel_err(session.logits, want) > args.tolerance:
            raise OracleMismatchError(
                f"inference disagrees with the oracle beyond {args.tolerance:g}")
    return 0


def cmd_train_step(args) -> int:
    config = _apply_overrides(load_config(args.config), args)
    model = tensors_to_model(load_tensors(args.weights), config)
    batch = _load_batch(args.inputs, config)
    label_tensors = load_tensors(args.labels)
    if "labels" not in label_tensors:
        raise ValidationError(f"{args.labels}: no 'labels' tensor found")
    labels = label_tensors["labels"]
    activations = not args.no_activation
    session = run_session(model, config, batch, labels=labels, eta=args.eta,
                          activations=activations, packing="baseline",
                          workers=_workers(args), seed=args.seed)
    updated = session.tee.export_model(session.updated_model, session.plan)
    out_weights = args.out_weights or (args.weights + ".updated")
    save_tensors(out_weights, model_to_tensors(updated))
    refreshes = dict(session.tee.refresh_counts)
    extra = [f"== TEE refreshes: {refreshes} ==",
             f"== updated weights written to {out_weights} =="]
    if args.compare_oracle:
        want = plain_sgd_step(model, config, batch, labels, args.eta, activations)
        errs = [_max_rel_err(g, w) for g, w in
                zip(updated.conv + updated.fc, want.conv + want.fc)]
        err = max(errs) if errs else 0.0
        verdict = "pass" if err <= args.tolerance else "FAIL"
        extra.append(f"== oracle SGD comparison: {verdict} "
                     f"(max relative error {err:.3e}) ==")
        if err > args.tolerance:
            cost_table = (CostTable.load(args.cost_table) if args.cost_table
                          else CostTable.default())
            _report(session, cost_table, args, extra)
            raise OracleMismatchError(
                f"updated weights disagree with plaintext SGD beyond {args.tolerance:g}")
    cost_table = CostTable.load(args.cost_table) if args.cost_table else CostTable.default()
    _report(session, cost_table, args, extra)
    return 0


def cmd_estimate(args) -> int:
    """Counts are data independent: run the real pipeline on zero tensors."""
    config = _apply_overrides(load_config(args.config), args)
    model = zero_model(config)
    channels = config.conv[0].channels if config.conv else 1
    batch = np.zeros((config.n, channels, config.input_side, config.input_side))
    session = run_session(model, config, batch, packing=args.packing,
                          workers=_workers(args), seed=args.seed)
    cost_table = CostTable.load(args.cost_table) if args.cost_table else CostTable.default()
    _report(session, cost_table, args)
    return 0


def cmd_make_fixtures(args) -> int:
    names = sorted(fixtures.BUNDLES) if args.which == "all" else [args.which]
    for name in names:
        paths = fixtures.write_bundle(args.dest, name, fmt=args.format)
        for kind, path in paths.items():
            print(f"{name} {kind}: {path}")
    return 0


def _common_run_flags(p, with_tolerance=True):
    p.add_argument("--n", type=int, default=None,
                   help="override the config's simultaneous input count")
    p.add_argument("--no-activation", action="store_true",
                   help="disable square activations (worked-example mode)")
    p.add_argument("--packing", default="auto",
                   choices=["auto", "baseline", "cross-channel", "cross-filter"])
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--report", default="text", choices=["text", "csv"])
    p.add_argument("--out", default=None, help="write the report to a file")
    p.add_argument("--cost-table", default=None,
                   help="JSON cost table overriding the built-in one")
    if with_tolerance:
        p.add_argument("--compare-oracle", action="store_true")
        p.add_argument("--tolerance", type=float, default=1e-9)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="lhecnn",
        description="Packed leveled-HE CNN inference/training simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("derive-params", help="print the packing plan for a config")
    p.add_argument("--config", required=True)
    p.add_argument("--n", type=int, default=None)
    p.add_argument("--packing", default="auto",
                   choices=["auto", "baseline", "cross-channel", "cross-filter"])
    p.set_defaults(func=cmd_derive_params)

    p = sub.add_parser("infer", help="run an inference session")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--inputs", required=True)
    _common_run_flags(p)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("train-step", help="run one SGD step")
    p.add_argument("--config", required=True)
    p.add_argument("--weights", required=True)
    p.add_argument("--inputs", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--eta", type=float, default=0.01)
    p.add_argument("--out-weights", default=None)
    _common_run_flags(p)
    p.set_defaults(func=cmd_train_step)

    p = sub.add_parser("estimate", help="dry-run op counts priced in microseconds")
    p.add_argument("--config", required=True)
    _common_run_flags(p, with_tolerance=False)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("make-fixtures", help="write the bundled demo models")
    p.add_argument("--dest", required=True)
    p.add_argument("--which", default="all",
                   choices=["all"] + sorted(fixtures.BUNDLES))
    p.add_argument("--format", default="binary", choices=["binary", "text"])
    p.set_defaults(func=cmd_make_fixtures)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ValidationError, AttestationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except DepthBudgetError as exc:
        print(f"depth budget error: {exc}", file=sys.stderr)
        return EXIT_DEPTH
    except OracleMismatchError as exc:
        print(f"oracle mismatch: {exc}", file=sys.stderr)
        return EXIT_ORACLE
    except LhecnnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
