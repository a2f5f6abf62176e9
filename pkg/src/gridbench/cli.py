"""Command-line interface: gen, plan, run, summarize, crosseval."""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .diversity import OodSpec, cell_counts
from .harness import (
    ExperimentConfig, ExperimentSpec, build_plan, cross_domain_eval, expand,
    polymnist_lite, resolve_dataset, run_one, run_sweep, summarize,
    write_counts_csv,
)
from .synthgrid import save_manifest
from .trainer import train


def _load_config(args) -> ExperimentConfig:
    if args.preset:
        if args.preset != "polymnist-lite":
            raise SystemExit(f"unknown preset {args.preset!r}")
        return polymnist_lite()
    if not args.config:
        raise SystemExit("either --config or --preset is required")
    return ExperimentConfig.load(args.config)


def _parse_cell(text: str) -> tuple[int, int]:
    try:
        c, d = text.split(",")
        return int(c), int(d)
    except ValueError:
        raise SystemExit(f"cell must be 'class,domain', got {text!r}") from None


def cmd_gen(args) -> int:
    config = _load_config(args)
    grid = resolve_dataset(config.dataset)
    out = args.out or os.path.join(config.resolved_output_dir(), "dataset")
    manifest = save_manifest(grid, out)
    print(f"wrote {grid.n_classes}x{grid.n_domains} grid to {manifest}")
    return 0


def cmd_plan(args) -> int:
    config = _load_config(args)
    specs = expand(config)
    spec = specs[args.index]
    grid = resolve_dataset(config.dataset)
    plan = build_plan(spec, grid)
    out = args.out or os.path.join(config.resolved_output_dir(),
                                   f"plan_{spec.spec_id()}.json")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    with open(out, "w", encoding="utf-8") as fh:
        fh.write(plan.to_json())
    counts = np.zeros((grid.n_classes, grid.n_domains), dtype=np.int64)
    for (c, d), uids in plan.train.items():
        counts[c, d] = len(uids)
    counts_path = os.path.splitext(out)[0] + "_counts.csv"
    write_counts_csv(counts_path, counts)
    print(f"wrote {out} and {counts_path}")
    return 0


def cmd_run(args) -> int:
    config = _load_config(args)
    ledger = run_sweep(config, workers=args.workers, resume=args.resume)
    done = sum(1 for e in ledger.entries.values() if e["status"] == "done")
    failed = sum(1 for e in ledger.entries.values() if e["status"] == "failed")
    print(f"{done} done, {failed} failed -> {config.resolved_output_dir()}")
    for sid, entry in sorted(ledger.entries.items()):
        if entry["status"] == "failed":
            print(f"  FAILED {sid}: {entry['error']}", file=sys.stderr)
    return 0 if failed == 0 else 1


def cmd_summarize(args) -> int:
    config = _load_config(args)
    out = config.resolved_output_dir()
    curves = summarize(out)
    print(f"wrote summary.csv, auc.csv, diff.csv under {out} "
          f"({len(curves)} curves)")
    return 0


def cmd_crosseval(args) -> int:
    config = _load_config(args)
    cell = _parse_cell(args.cell)
    domain = cell[1] if args.domain is None else args.domain
    kind = f"specialized:{domain}"
    for spec in expand(config):
        if (spec.model_kind == kind and spec.ood_cell == cell
                and spec.ood_level == args.level and spec.seed == args.seed):
            break
    else:
        raise SystemExit("no matching specialized spec in the config expansion")
    grid = resolve_dataset(config.dataset)
    plan = build_plan(spec, grid)
    state, _ = train(grid, plan, spec.model, spec.optimizer, spec.seed,
                     preprocess_spec=spec.preprocess)
    record = cross_domain_eval(state, grid, domain, spec,
                               output_dir=config.resolved_output_dir())
    print(f"wrote cross-domain record {record.experiment_id}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridbench",
        description="specialized vs multi-domain classifier benchmarking "
                    "on class-by-domain image grids",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p):
        p.add_argument("--config", help="experiment config JSON path")
        p.add_argument("--preset", help="built-in preset name (polymnist-lite)")

    p = sub.add_parser("gen", help="build the dataset grid and export a manifest")
    add_common(p)
    p.add_argument("--out", help="export directory")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("plan", help="emit one expanded spec's split plan JSON")
    add_common(p)
    p.add_argument("--index", type=int, default=0,
                   help="index into the expanded spec list")
    p.add_argument("--out", help="plan JSON output path")
    p.set_defaults(func=cmd_plan)

    p = sub.add_parser("run", help="execute the sweep")
    add_common(p)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--resume", action="store_true",
                   help="skip specs whose records verify against the ledger")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("summarize", help="emit figure-ready CSVs from records")
    add_common(p)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("crosseval",
                       help="train a specialized model and evaluate it on the "
                            "other domains")
    add_common(p)
    p.add_argument("--cell", required=True, help="target cell 'class,domain'")
    p.add_argument("--level", type=int, required=True, help="OOD level")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--domain", type=int, default=None,
                   help="training domain (default: the target cell's)")
    p.set_defaults(func=cmd_crosseval)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
