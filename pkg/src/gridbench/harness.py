"""Experiment orchestration: grid expansion, resumable runs, CSV summaries.

A sweep is a Cartesian expansion of (model kinds x axis points x OOD cells x
levels x seeds) into ExperimentSpecs.  Each spec runs independently: build
the split plan, train, predict on the full untouched test grid, and write one
ResultRecord JSON atomically.  The ledger tracks per-spec status and record
digests, making interrupted sweeps resumable and reruns byte-identical.
"""

from __future__ import annotations

import concurrent.futures
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .diversity import (
    DistributionSpec, OodSpec, SplitPlan, apply_ood, cell_counts,
    counts_median, distribution_grid, grouped_domain_control, percentage_split,
    restrict_to_domain, sample_split, uniform_resample, upsample_specialized,
)
from .metrics import (
    CellRecallMatrix, ResultRecord, aggregate_seeds, experiment_id,
    kind_family, model_difference, per_cell_recall,
)
from .synthgrid import DatasetGrid, GridConfig, PreprocessSpec, build_grid, load_manifest
from .trainer import ModelConfig, OptimizerHyper, ParamState, predict, train

OUTPUT_ROOT_ENV = "GRIDBENCH_OUT"
SCHEMA_VERSION = 1

SUMMARY_HEADER = ["x", "metric", "model_kind", "ood_level", "mean", "std",
                  "n_seeds", "auc"]
AUC_HEADER = ["model_kind", "metric", "ood_level", "auc", "n_points"]
DIFF_HEADER = ["x", "metric", "ood_level", "baseline_kind", "diff"]
COUNTS_HEADER = ["class_id", "domain_id", "count"]


def fmt_float(v: float) -> str:
    """Canonical CSV float formatting: 9 significant digits."""
    return f"{v:.9g}"


# -- configuration -------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentConfig:
    dataset: dict
    model_kinds: tuple[str, ...]
    axis_kind: str                      # "distribution" | "percentage"
    distributions: tuple[DistributionSpec, ...]
    percentages: tuple[int, ...]
    ood_levels: tuple[int, ...]
    cells: tuple[tuple[int, int], ...] | str
    seeds: tuple[int, ...]
    model: ModelConfig
    optimizer: OptimizerHyper
    output_dir: str
    train_val_ratio: float = 0.75
    upsample_factor: int | None = None
    preprocess: PreprocessSpec | None = None
    eval_split: str = "test"

    def __post_init__(self):
        if not self.model_kinds:
            raise ConfigError("at least one model kind is required")
        for kind in self.model_kinds:
            if kind not in ("multi-domain", "specialized", "specialized-upsampled"):
                raise ConfigError(f"unknown model kind {kind!r}")
        if self.axis_kind not in ("distribution", "percentage"):
            raise ConfigError(f"unknown axis kind {self.axis_kind!r}")
        if self.axis_kind == "distribution" and not self.distributions:
            raise ConfigError("distribution axis needs at least one spec")
        if self.axis_kind == "percentage" and not self.percentages:
            raise ConfigError("percentage axis needs at least one value")
        if not self.ood_levels:
            raise ConfigError("at least one OOD level is required")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        if self.eval_split not in ("test", "val"):
            raise ConfigError(f"eval_split must be 'test' or 'val', got {self.eval_split!r}")

    def resolved_output_dir(self) -> str:
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root:
            return os.path.join(root, os.path.basename(self.output_dir.rstrip("/")))
        return self.output_dir

    def to_json(self) -> str:
        doc = {
            "schema_version": SCHEMA_VERSION,
            "dataset": self.dataset,
            "model_kinds": list(self.model_kinds),
            "axis": ({"kind": "distribution",
                      "specs": [dataclasses.asdict(s) for s in self.distributions]}
                     if self.axis_kind == "distribution"
                     else {"kind": "percentage", "values": list(self.percentages)}),
            "ood_levels": list(self.ood_levels),
            "cells": ("all" if self.cells == "all"
                      else [list(c) for c in self.cells]),
            "seeds": list(self.seeds),
            "train_val_ratio": self.train_val_ratio,
            "upsample_factor": self.upsample_factor,
            "model": dataclasses.asdict(self.model),
            "optimizer": dataclasses.asdict(self.optimizer),
            "preprocess": (dataclasses.asdict(self.preprocess)
                           if self.preprocess else None),
            "eval_split": self.eval_split,
            "output_dir": self.output_dir,
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ExperimentConfig":
        doc = json.loads(text)
        version = doc.get("schema_version")
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema version {version}")
        axis = doc["axis"]
        if axis["kind"] == "distribution":
            dists = tuple(DistributionSpec(**s) for s in axis["specs"])
            pcts = ()
        elif axis["kind"] == "percentage":
            dists = ()
            pcts = tuple(int(v) for v in axis["values"])
        else:
            raise ConfigError(f"unknown axis kind {axis['kind']!r}")
        cells = doc.get("cells", "all")
        if cells != "all":
            cells = tuple((int(c), int(d)) for c, d in cells)
        pre = doc.get("preprocess")
        return ExperimentConfig(
            dataset=doc["dataset"],
            model_kinds=tuple(doc["model_kinds"]),
            axis_kind=axis["kind"],
            distributions=dists,
            percentages=pcts,
            ood_levels=tuple(int(v) for v in doc["ood_levels"]),
            cells=cells,
            seeds=tuple(int(s) for s in doc["seeds"]),
            model=ModelConfig(**doc["model"]),
            optimizer=OptimizerHyper(**doc["optimizer"]),
            output_dir=doc["output_dir"],
            train_val_ratio=float(doc.get("train_val_ratio", 0.75)),
            upsample_factor=doc.get("upsample_factor"),
            preprocess=PreprocessSpec(**pre) if pre else None,
            eval_split=doc.get("eval_split", "test"),
        )

    @staticmethod
    def load(path: str) -> "ExperimentConfig":
        with open(path, encoding="utf-8") as fh:
            return ExperimentConfig.from_json(fh.read())


def resolve_dataset(dataset: dict) -> DatasetGrid:
    """Materialize the grid a config's dataset block describes."""
    kind = dataset.get("kind")
    if kind == "synthetic":
        cfg = GridConfig(**{**dataset["grid"],
                            "samples_per_cell": tuple(dataset["grid"]["samples_per_cell"])})
        return build_grid(cfg)
    if kind == "manifest":
        return load_manifest(dataset["path"])
    if kind == "grouped":
        base = resolve_dataset(dataset["base"])
        grouping = tuple(tuple(pair) for pair in dataset["grouping"])
        return grouped_domain_control(base, grouping=grouping,
                                      source_domain=int(dataset["source_domain"]))
    if kind == "uniform":
        base = resolve_dataset(dataset["base"])
        return uniform_resample(base, int(dataset["per_cell_train"]),
                                int(dataset["per_cell_val"]),
                                seed=int(dataset.get("resample_seed", 0)))
    raise ConfigError(f"unknown dataset kind {kind!r}")


# -- expansion -----------------------------------------------------------------


@dataclass(frozen=True)
class ExperimentSpec:
    model_kind: str                 # resolved, e.g. "specialized:3"
    x_kind: str
    x_value: float
    distribution: DistributionSpec | None
    percentage: int | None
    ood_cell: tuple[int, int]
    ood_level: int
    seed: int
    train_val_ratio: float
    upsample_factor: int
    dataset: dict = field(hash=False)
    model: ModelConfig = field(hash=False, default=None)
    optimizer: OptimizerHyper = field(hash=False, default=None)
    preprocess: PreprocessSpec | None = field(hash=False, default=None)
    eval_split: str = "test"

    def provenance(self) -> dict:
        return {
            "model_kind": self.model_kind,
            "x_kind": self.x_kind,
            "x_value": self.x_value,
            "distribution": (dataclasses.asdict(self.distribution)
                             if self.distribution else None),
            "percentage": self.percentage,
            "ood_cell": list(self.ood_cell),
            "ood_level": self.ood_level,
            "seed": self.seed,
            "train_val_ratio": self.train_val_ratio,
            "upsample_factor": self.upsample_factor,
            "dataset": self.dataset,
            "model": dataclasses.asdict(self.model),
            "optimizer": dataclasses.asdict(self.optimizer),
            "preprocess": (dataclasses.asdict(self.preprocess)
                           if self.preprocess else None),
            "eval_split": self.eval_split,
        }

    def spec_id(self) -> str:
        return experiment_id(self.provenance())

    def sort_key(self):
        return (self.model_kind, self.x_kind, self.x_value,
                self.ood_cell, self.ood_level, self.seed)


def _grid_shape(dataset: dict) -> tuple[int, int]:
    kind = dataset.get("kind")
    if kind == "synthetic":
        g = dataset["grid"]
        return int(g.get("n_classes", 10)), int(g.get("n_domains", 5))
    if kind == "grouped":
        return len(dataset["grouping"]), 2
    if kind == "uniform":
        return _grid_shape(dataset["base"])
    if kind == "manifest":
        grid = resolve_dataset(dataset)
        return grid.n_classes, grid.n_domains
    raise ConfigError(f"unknown dataset kind {kind!r}")


def expand(config: ExperimentConfig) -> list[ExperimentSpec]:
    """Full Cartesian expansion, deterministically ordered."""
    n_classes, n_domains = _grid_shape(config.dataset)
    if config.cells == "all":
        cells = [(c, d) for c in range(n_classes) for d in range(n_domains)]
    else:
        cells = list(config.cells)
        for c, d in cells:
            if not (0 <= c < n_classes and 0 <= d < n_domains):
                raise ConfigError(f"cell ({c},{d}) outside the grid")
    if config.axis_kind == "distribution":
        points = [("distribution", counts_median(s, n_classes, n_domains), s, None)
                  for s in config.distributions]
    else:
        points = [("percentage", float(p), None, p) for p in config.percentages]
    factor = config.upsample_factor or n_domains

    resolved_kinds: list[str] = []
    for kind in config.model_kinds:
        if kind == "multi-domain":
            resolved_kinds.append("multi-domain")
        else:
            resolved_kinds.extend(f"{kind}:{d}" for d in range(n_domains))

    specs = [
        ExperimentSpec(
            model_kind=kind, x_kind=x_kind, x_value=x_value,
            distribution=dist, percentage=pct, ood_cell=cell, ood_level=level,
            seed=seed, train_val_ratio=config.train_val_ratio,
            upsample_factor=factor, dataset=config.dataset,
            model=config.model, optimizer=config.optimizer,
            preprocess=config.preprocess, eval_split=config.eval_split,
        )
        for kind in resolved_kinds
        for (x_kind, x_value, dist, pct) in points
        for cell in cells
        for level in config.ood_levels
        for seed in config.seeds
    ]
    specs.sort(key=ExperimentSpec.sort_key)
    return specs


# -- running -------------------------------------------------------------------


def build_plan(spec: ExperimentSpec, grid: DatasetGrid) -> SplitPlan:
    if spec.x_kind == "distribution":
        counts = cell_counts(spec.distribution, grid.n_classes, grid.n_domains)
        plan = sample_split(grid, counts, spec.train_val_ratio, spec.seed)
    else:
        plan = percentage_split(grid, spec.percentage, spec.seed)
    plan = apply_ood(plan, OodSpec(cell=spec.ood_cell, level_pct=spec.ood_level),
                     spec.seed)
    family = kind_family(spec.model_kind)
    if family == "specialized":
        plan = restrict_to_domain(plan, int(spec.model_kind.split(":")[1]))
    elif family == "specialized-upsampled":
        plan = upsample_specialized(plan, int(spec.model_kind.split(":")[1]),
                                    spec.upsample_factor, grid)
    elif family != "multi-domain":
        raise ConfigError(f"cannot build a plan for kind {spec.model_kind!r}")
    return plan


def _eval_pool_arrays(grid: DatasetGrid, pool: str):
    xs, cs, ds, us = [], [], [], []
    for c, d in grid.cells():
        cell = grid.pool(c, d, pool)
        if len(cell) == 0:
            continue
        xs.append(cell.pixels)
        cs.append(np.full(len(cell), c, dtype=np.int64))
        ds.append(np.full(len(cell), d, dtype=np.int64))
        us.append(cell.uids)
    if not xs:
        raise ConfigError(f"grid has no samples in pool {pool!r}")
    return (np.concatenate(xs), np.concatenate(cs), np.concatenate(ds),
            np.concatenate(us))


def evaluate_state(state: ParamState, grid: DatasetGrid, *,
                   eval_split: str = "test",
                   preprocess_spec: PreprocessSpec | None = None,
                   domains: tuple[int, ...] | None = None) -> CellRecallMatrix:
    """Full-grid recall of a trained model on the held-out pool."""
    from .synthgrid import preprocess_batch
    pixels, classes, doms, _ = _eval_pool_arrays(grid, eval_split)
    if domains is not None:
        keep = np.isin(doms, domains)
        pixels, classes, doms = pixels[keep], classes[keep], doms[keep]
    if preprocess_spec is not None:
        pixels = preprocess_batch(pixels, preprocess_spec, "eval")
    pred = predict(state, pixels)
    return per_cell_recall(pred, classes, doms, grid.n_classes, grid.n_domains)


def run_one(spec: ExperimentSpec, grid: DatasetGrid,
            output_dir: str | None = None) -> ResultRecord:
    """Run one experiment end to end; optionally persist its record."""
    test_digest_before = grid.pool_digest("test")
    plan = build_plan(spec, grid)
    state, _report = train(grid, plan, spec.model, spec.optimizer, spec.seed,
                           preprocess_spec=spec.preprocess)
    recall = evaluate_state(state, grid, eval_split=spec.eval_split,
                            preprocess_spec=spec.preprocess)
    if grid.pool_digest("test") != test_digest_before:
        raise RuntimeError("test pool content changed during the run")
    record = ResultRecord(
        experiment_id=spec.spec_id(), model_kind=spec.model_kind,
        x_kind=spec.x_kind, x_value=spec.x_value, ood_cell=spec.ood_cell,
        ood_level=spec.ood_level, seed=spec.seed, recall=recall,
        provenance=spec.provenance(),
    )
    if output_dir is not None:
        write_record(record, output_dir)
    return record


def cross_domain_eval(state: ParamState, grid: DatasetGrid, domain_id: int,
                      spec: ExperimentSpec,
                      output_dir: str | None = None) -> ResultRecord:
    """Evaluate a trained specialized model outside its training domain."""
    other = tuple(d for d in range(grid.n_domains) if d != domain_id)
    recall = evaluate_state(state, grid, eval_split=spec.eval_split,
                            preprocess_spec=spec.preprocess, domains=other)
    kind = f"specialized-cross:{domain_id}"
    prov = {**spec.provenance(), "model_kind": kind}
    record = ResultRecord(
        experiment_id=experiment_id(prov), model_kind=kind,
        x_kind=spec.x_kind, x_value=spec.x_value, ood_cell=spec.ood_cell,
        ood_level=spec.ood_level, seed=spec.seed, recall=recall,
        provenance=prov,
    )
    if output_dir is not None:
        write_record(record, output_dir)
    return record


# -- persistence ---------------------------------------------------------------


def records_dir(output_dir: str) -> str:
    return os.path.join(output_dir, "records")


def record_path(output_dir: str, spec_id: str) -> str:
    return os.path.join(records_dir(output_dir), f"{spec_id}.json")


def _atomic_write(path: str, data: str) -> None:
    tmp = path + ".tmp"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(data)
    os.replace(tmp, path)


def write_record(record: ResultRecord, output_dir: str) -> str:
    os.makedirs(records_dir(output_dir), exist_ok=True)
    path = record_path(output_dir, record.experiment_id)
    _atomic_write(path, record.to_json())
    return path


def file_digest(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        h.update(fh.read())
    return h.hexdigest()


class RunLedger:
    """Per-spec status plus record digests; the sweep's only shared state."""

    def __init__(self, entries: dict | None = None):
        self.entries: dict[str, dict] = entries or {}

    @staticmethod
    def path_for(output_dir: str) -> str:
        return os.path.join(output_dir, "ledger.json")

    @staticmethod
    def load(output_dir: str) -> "RunLedger":
        path = RunLedger.path_for(output_dir)
        if not os.path.exists(path):
            return RunLedger()
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
        return RunLedger(doc.get("entries", {}))

    def save(self, output_dir: str) -> None:
        doc = {"schema_version": SCHEMA_VERSION, "entries": self.entries}
        _atomic_write(RunLedger.path_for(output_dir),
                      json.dumps(doc, indent=2, sort_keys=True))

    def mark_done(self, spec_id: str, digest: str) -> None:
        self.entries[spec_id] = {"status": "done", "digest": digest,
                                 "record": f"records/{spec_id}.json",
                                 "error": None}

    def mark_failed(self, spec_id: str, error: str) -> None:
        self.entries[spec_id] = {"status": "failed", "digest": None,
                                 "record": None, "error": error}

    def is_done(self, spec_id: str, output_dir: str) -> bool:
        entry = self.entries.get(spec_id)
        if not entry or entry["status"] != "done":
            return False
        path = record_path(output_dir, spec_id)
        return os.path.exists(path) and file_digest(path) == entry["digest"]


_WORKER_GRID: DatasetGrid | None = None


def _run_spec_in_worker(args):
    spec, output_dir = args
    record = run_one(spec, _WORKER_GRID, output_dir)
    return spec.spec_id(), file_digest(record_path(output_dir, record.experiment_id))


def run_sweep(config: ExperimentConfig, workers: int = 1,
              resume: bool = False) -> RunLedger:
    """Execute every pending spec; failed specs are recorded, not fatal.

    The final result set is byte-identical for any worker count: each record
    depends only on its spec, and the ledger is written with sorted keys.
    """
    global _WORKER_GRID
    output_dir = config.resolved_output_dir()
    os.makedirs(records_dir(output_dir), exist_ok=True)
    specs = expand(config)
    ledger = RunLedger.load(output_dir) if resume else RunLedger()
    pending = [s for s in specs if not (resume and ledger.is_done(s.spec_id(),
                                                                  output_dir))]
    grid = resolve_dataset(config.dataset)
    if workers <= 1:
        for spec in pending:
            sid = spec.spec_id()
            try:
                record = run_one(spec, grid, output_dir)
                ledger.mark_done(sid, file_digest(
                    record_path(output_dir, record.experiment_id)))
            except Exception as exc:  # noqa: BLE001 - failures recorded, sweep continues
                ledger.mark_failed(sid, f"{type(exc).__name__}: {exc}")
            ledger.save(output_dir)
    else:
        _WORKER_GRID = grid
        try:
            with concurrent.futures.ProcessPoolExecutor(max_workers=workers) as pool:
                futures = {pool.submit(_run_spec_in_worker, (spec, output_dir)):
                           spec for spec in pending}
                for fut in concurrent.futures.as_completed(futures):
                    spec = futures[fut]
                    sid = spec.spec_id()
                    try:
                        _, digest = fut.result()
                        ledger.mark_done(sid, digest)
                    except Exception as exc:  # noqa: BLE001
                        ledger.mark_failed(sid, f"{type(exc).__name__}: {exc}")
                    ledger.save(output_dir)
        finally:
            _WORKER_GRID = None
    ledger.save(output_dir)
    return ledger


# -- summaries -----------------------------------------------------------------


def load_records(output_dir: str) -> list[ResultRecord]:
    rdir = records_dir(output_dir)
    if not os.path.isdir(rdir):
        return []
    records = []
    for name in sorted(os.listdir(rdir)):
        if name.endswith(".json"):
            with open(os.path.join(rdir, name), encoding="utf-8") as fh:
                records.append(ResultRecord.from_json(fh.read()))
    return records


def _write_csv(path: str, header: list[str], rows: list[list[str]]) -> None:
    lines = [",".join(header)] + [",".join(row) for row in rows]
    _atomic_write(path, "\n".join(lines) + "\n")


def summarize(output_dir: str) -> list:
    """Emit summary.csv, auc.csv and diff.csv from the stored records."""
    records = load_records(output_dir)
    curves = aggregate_seeds(records)
    curves.sort(key=lambda c: (c.metric, c.model_kind, c.ood_level))

    summary_rows = []
    for c in curves:
        for x, mean, std, n in zip(c.xs, c.mean, c.std, c.n_seeds):
            summary_rows.append([fmt_float(x), c.metric, c.model_kind,
                                 str(c.ood_level), fmt_float(mean),
                                 fmt_float(std), str(n), fmt_float(c.auc)])
    _write_csv(os.path.join(output_dir, "summary.csv"), SUMMARY_HEADER,
               summary_rows)

    auc_rows = [[c.model_kind, c.metric, str(c.ood_level), fmt_float(c.auc),
                 str(len(c.xs))] for c in curves]
    _write_csv(os.path.join(output_dir, "auc.csv"), AUC_HEADER, auc_rows)

    diff_rows = []
    by_key = {(c.model_kind, c.metric, c.ood_level): c for c in curves}
    baselines = sorted({c.model_kind for c in curves} - {"multi-domain"})
    for baseline in baselines:
        for c in curves:
            if c.model_kind != "multi-domain":
                continue
            other = by_key.get((baseline, c.metric, c.ood_level))
            if other is None or set(other.xs) != set(c.xs):
                continue
            d = model_difference(c, other)
            for x, v in zip(d.xs, d.diff):
                diff_rows.append([fmt_float(x), d.metric, str(d.ood_level),
                                  baseline, fmt_float(v)])
    _write_csv(os.path.join(output_dir, "diff.csv"), DIFF_HEADER, diff_rows)
    return curves


def write_counts_csv(path: str, counts: np.ndarray) -> None:
    """Per-cell count matrix as CSV, the data-distribution heatmap input."""
    rows = [[str(c), str(d), str(int(counts[c, d]))]
            for c in range(counts.shape[0]) for d in range(counts.shape[1])]
    _write_csv(path, COUNTS_HEADER, rows)


# -- presets -------------------------------------------------------------------


def polymnist_lite(output_dir: str = "out/polymnist-lite", **overrides) -> ExperimentConfig:
    """Desk-scale default sweep: 10x5 grid, 16px, pools (200,50,40,800),
    the 24-distribution grid at scale 200, levels {0,50,85,100}, 3 seeds.

    Model and cell choices are sized so the full sweep finishes in tens of
    minutes on a few workers; override any field via keyword arguments.
    """
    base = dict(
        dataset={
            "kind": "synthetic",
            "grid": {"n_classes": 10, "n_domains": 5, "image_size": 16,
                     "samples_per_cell": [200, 50, 40, 800], "seed": 1317},
        },
        model_kinds=("multi-domain", "specialized"),
        axis_kind="distribution",
        distributions=tuple(distribution_grid(scale=200)),
        percentages=(),
        ood_levels=(0, 50, 85, 100),
        cells=((2, 1), (7, 3)),
        seeds=(0, 1, 2),
        model=ModelConfig(input_size=16, stem_width=8, n_blocks=3, n_classes=10),
        optimizer=OptimizerHyper(learning_rate=0.005, batch_size=256,
                                 weight_decay=0.001, epochs=10,
                                 lr_decay_factor=0.1, lr_decay_every=5),
        output_dir=output_dir,
    )
    base.update(overrides)
    return ExperimentConfig(**base)
