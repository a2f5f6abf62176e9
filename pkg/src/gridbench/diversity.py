"""Split planning: Gaussian cell counts, sampling percentages, OOD exclusion,
specialized restriction/upsampling and the grouped-domain control.

A SplitPlan is the per-cell list of train/val uids an experiment trains on.
All operations are pure and deterministic given (inputs, seed); none of them
ever touches a grid's test pool.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import CapacityError
from .prng import Stream, derive
from .synthgrid import DatasetGrid, _CellPool

OOD_LEVELS = (0, 25, 50, 75, 85, 95, 100)
SAMPLING_PERCENTAGES = (5, 10, 25, 35, 50, 75, 100)

# Canonical parameter sweep: sigma_class x mu_domain x sigma_domain, mu_class=0.
DIST_SIGMA_CLASS = (3, 5, 9, 17)
DIST_MU_DOMAIN = (0, 2)
DIST_SIGMA_DOMAIN = (1, 3, 5)

DEFAULT_TRAIN_VAL_RATIO = 0.75
DEFAULT_GROUPING = ((0, 5), (1, 6), (2, 7), (3, 8), (4, 9))


def round_half_up(x: float) -> int:
    """Round to nearest integer, halves away from zero (for non-negative x)."""
    return int(math.floor(x + 0.5))


@dataclass(frozen=True)
class DistributionSpec:
    mu_class: float = 0.0
    sigma_class: float = 5.0
    mu_domain: float = 0.0
    sigma_domain: float = 3.0
    scale: int = 1000

    def __post_init__(self):
        if self.sigma_class <= 0 or self.sigma_domain <= 0:
            raise ValueError("sigma_class and sigma_domain must be positive")
        if self.scale < 0:
            raise ValueError("scale must be non-negative")

    def label(self) -> str:
        return (f"sc{self.sigma_class:g}_md{self.mu_domain:g}"
                f"_sd{self.sigma_domain:g}_n{self.scale}")


@dataclass(frozen=True)
class OodSpec:
    cell: tuple[int, int]
    level_pct: int

    def __post_init__(self):
        if self.level_pct not in OOD_LEVELS:
            raise ValueError(
                f"level_pct must be one of {OOD_LEVELS}, got {self.level_pct}"
            )


@dataclass(frozen=True)
class SplitPlan:
    """Resolved per-cell uid selections plus provenance."""

    train: dict[tuple[int, int], tuple[int, ...]]
    val: dict[tuple[int, int], tuple[int, ...]]
    provenance: dict = field(default_factory=dict)

    def cell_train(self, c: int, d: int) -> tuple[int, ...]:
        return self.train.get((c, d), ())

    def cell_val(self, c: int, d: int) -> tuple[int, ...]:
        return self.val.get((c, d), ())

    def total_train(self) -> int:
        return sum(len(v) for v in self.train.values())

    def total_val(self) -> int:
        return sum(len(v) for v in self.val.values())

    def all_train_uids(self) -> list[int]:
        out = []
        for cell in sorted(self.train):
            out.extend(self.train[cell])
        return out

    def all_val_uids(self) -> list[int]:
        out = []
        for cell in sorted(self.val):
            out.extend(self.val[cell])
        return out

    def to_json(self) -> str:
        doc = {
            "schema_version": 1,
            "provenance": self.provenance,
            "train": {f"{c},{d}": list(u) for (c, d), u in sorted(self.train.items())},
            "val": {f"{c},{d}": list(u) for (c, d), u in sorted(self.val.items())},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "SplitPlan":
        doc = json.loads(text)
        def parse(block):
            out = {}
            for key, uids in block.items():
                c, d = key.split(",")
                out[(int(c), int(d))] = tuple(int(u) for u in uids)
            return out
        return SplitPlan(train=parse(doc["train"]), val=parse(doc["val"]),
                         provenance=doc.get("provenance", {}))


def discrete_normal_weights(mean: float, std: float, n: int) -> np.ndarray:
    """Gaussian weights on 0..n-1, max-normalized so the peak equals 1."""
    if std <= 0:
        raise ValueError(f"std must be positive, got {std}")
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    x = np.arange(n, dtype=float)
    w = np.exp(-((x - mean) ** 2) / (2.0 * std * std))
    return w / w.max()


def cell_counts(spec: DistributionSpec, n_classes: int, n_domains: int) -> np.ndarray:
    """Per-cell sample counts: round(w_class[c] * w_domain[d] * scale)."""
    wc = discrete_normal_weights(spec.mu_class, spec.sigma_class, n_classes)
    wd = discrete_normal_weights(spec.mu_domain, spec.sigma_domain, n_domains)
    prod = np.outer(wc, wd) * spec.scale
    return np.floor(prod + 0.5).astype(np.int64)


def counts_median(spec: DistributionSpec, n_classes: int = 10,
                  n_domains: int = 5) -> float:
    """Median of the count matrix; the x-coordinate for distribution curves."""
    return float(np.median(cell_counts(spec, n_classes, n_domains)))


def distribution_grid(scale: int = 1000) -> list[DistributionSpec]:
    """The canonical 24 DistributionSpecs, ascending by count-matrix median."""
    specs = [
        DistributionSpec(mu_class=0.0, sigma_class=sc, mu_domain=float(md),
                         sigma_domain=sd, scale=scale)
        for sc in DIST_SIGMA_CLASS
        for md in DIST_MU_DOMAIN
        for sd in DIST_SIGMA_DOMAIN
    ]
    specs.sort(key=lambda s: (counts_median(s), s.sigma_class, s.mu_domain,
                              s.sigma_domain))
    return specs


def _cell_name(c: int, d: int) -> str:
    return f"(class {c}, domain {d})"


def sample_split(grid: DatasetGrid, counts: np.ndarray, train_val_ratio: float,
                 seed: int) -> SplitPlan:
    """Draw per-cell counts from the train pool, split by the given ratio.

    ceil(ratio * k) uids go to train, the remainder to val.
    """
    if not 0.0 < train_val_ratio <= 1.0:
        raise ValueError(f"train_val_ratio must be in (0, 1], got {train_val_ratio}")
    counts = np.asarray(counts)
    if counts.shape != (grid.n_classes, grid.n_domains):
        raise ValueError(
            f"counts shape {counts.shape} does not match grid "
            f"({grid.n_classes}x{grid.n_domains})"
        )
    train: dict[tuple[int, int], tuple[int, ...]] = {}
    val: dict[tuple[int, int], tuple[int, ...]] = {}
    for c, d in grid.cells():
        k = int(counts[c, d])
        pool = grid.pool(c, d, "train")
        if k > len(pool):
            raise CapacityError(
                f"requested {k} samples from {_cell_name(c, d)} train pool "
                f"of size {len(pool)}"
            )
        if k == 0:
            train[(c, d)] = ()
            val[(c, d)] = ()
            continue
        perm = Stream(derive(seed, "split", c, d)).permutation(len(pool))
        chosen = [int(pool.uids[i]) for i in perm[:k]]
        n_train = math.ceil(train_val_ratio * k)
        train[(c, d)] = tuple(chosen[:n_train])
        val[(c, d)] = tuple(chosen[n_train:])
    return SplitPlan(train=train, val=val, provenance={
        "source": "distribution",
        "train_val_ratio": train_val_ratio,
        "seed": seed,
        "scope": "multi-domain",
    })


def percentage_split(grid: DatasetGrid, pct: int, seed: int) -> SplitPlan:
    """Keep a fixed percentage of each cell's native train and val pools."""
    if pct not in SAMPLING_PERCENTAGES:
        raise ValueError(f"pct must be one of {SAMPLING_PERCENTAGES}, got {pct}")
    train: dict[tuple[int, int], tuple[int, ...]] = {}
    val: dict[tuple[int, int], tuple[int, ...]] = {}
    for c, d in grid.cells():
        for pool_name, target in (("train", train), ("val", val)):
            pool = grid.pool(c, d, pool_name)
            keep = round_half_up(pct / 100.0 * len(pool))
            if keep == 0:
                target[(c, d)] = ()
                continue
            perm = Stream(derive(seed, "pct", pool_name, c, d)).permutation(len(pool))
            target[(c, d)] = tuple(int(pool.uids[i]) for i in perm[:keep])
    return SplitPlan(train=train, val=val, provenance={
        "source": "percentage",
        "percentage": pct,
        "seed": seed,
        "scope": "multi-domain",
    })


def apply_ood(plan: SplitPlan, ood: OodSpec, seed: int) -> SplitPlan:
    """Remove ceil(level/100 * k) uids from the target cell's train and val.

    Removal sets are nested across levels for a fixed seed: the removal order
    is one seeded permutation of the cell lists, independent of the level.
    """
    c, d = ood.cell
    if ood.level_pct == 0:
        return replace(plan, provenance={**plan.provenance, "ood": {
            "cell": [c, d], "level_pct": 0}})
    frac = ood.level_pct / 100.0
    new_train = dict(plan.train)
    new_val = dict(plan.val)
    for pools, tag in ((new_train, "ood-train"), (new_val, "ood-val")):
        uids = pools.get((c, d), ())
        k = len(uids)
        if k == 0:
            continue
        n_remove = math.ceil(frac * k)
        order = Stream(derive(seed, tag, c, d)).permutation(k)
        removed = set(int(uids[i]) for i in order[:n_remove])
        pools[(c, d)] = tuple(u for u in uids if u not in removed)
    return SplitPlan(train=new_train, val=new_val, provenance={
        **plan.provenance, "ood": {"cell": [c, d], "level_pct": ood.level_pct}})


def restrict_to_domain(plan: SplitPlan, domain_id: int) -> SplitPlan:
    """Keep only one domain's column; the specialized training view."""
    train = {cell: uids for cell, uids in plan.train.items() if cell[1] == domain_id}
    val = {cell: uids for cell, uids in plan.val.items() if cell[1] == domain_id}
    return SplitPlan(train=train, val=val, provenance={
        **plan.provenance, "scope": f"specialized({domain_id})"})


def upsample_specialized(plan: SplitPlan, domain_id: int, factor: int,
                         grid: DatasetGrid) -> SplitPlan:
    """Restrict to one domain and multiply each cell's counts by `factor`.

    Extra uids come from the cell's reserve pool, drawn without replacement.
    Because scaling happens after any OOD exclusion, the excluded cell keeps
    exactly the same retained fraction as the non-upsampled plan.
    """
    if factor < 1:
        raise ValueError(f"factor must be >= 1, got {factor}")
    base = restrict_to_domain(plan, domain_id)
    if factor == 1:
        return replace(base, provenance={
            **base.provenance, "scope": f"specialized-upsampled({domain_id})",
            "upsample_factor": 1})
    seed = int(base.provenance.get("seed", 0))
    train = {}
    val = {}
    for (c, d) in sorted(set(base.train) | set(base.val)):
        t_uids = list(base.train.get((c, d), ()))
        v_uids = list(base.val.get((c, d), ()))
        extra_t = (factor - 1) * len(t_uids)
        extra_v = (factor - 1) * len(v_uids)
        reserve = grid.pool(c, d, "reserve")
        if extra_t + extra_v > len(reserve):
            raise CapacityError(
                f"reserve pool of {_cell_name(c, d)} has {len(reserve)} samples, "
                f"need {extra_t + extra_v} for upsampling"
            )
        perm = Stream(derive(seed, "upsample", c, d)).permutation(len(reserve))
        picks = [int(reserve.uids[i]) for i in perm[:extra_t + extra_v]]
        train[(c, d)] = tuple(t_uids + picks[:extra_t])
        val[(c, d)] = tuple(v_uids + picks[extra_t:])
    return SplitPlan(train=train, val=val, provenance={
        **base.provenance, "scope": f"specialized-upsampled({domain_id})",
        "upsample_factor": factor})


def grouped_domain_control(grid: DatasetGrid, grouping=DEFAULT_GROUPING, *,
                           source_domain: int = 0) -> DatasetGrid:
    """Class-pair control grid: pairs become classes, pair position the domain.

    Built from a single source domain's column: pair (a, b) maps class a to
    (new class g, new domain 0) and class b to (new class g, new domain 1).
    Sample pixels and uids are unchanged.  Run once per source domain and
    aggregate the results.
    """
    flat = [c for pair in grouping for c in pair]
    if any(len(pair) != 2 for pair in grouping):
        raise ValueError("grouping must consist of class pairs")
    if sorted(flat) != list(range(grid.n_classes)):
        raise ValueError(
            f"grouping must partition class ids 0..{grid.n_classes - 1}"
        )
    if not 0 <= source_domain < grid.n_domains:
        raise ValueError(f"source_domain {source_domain} out of range")
    pools = {}
    from .synthgrid import POOLS
    for g, pair in enumerate(grouping):
        for j, orig_class in enumerate(pair):
            for pool in POOLS:
                src = grid.pool(orig_class, source_domain, pool)
                pools[(g, j, pool)] = _CellPool(src.pixels, src.uids)
    return DatasetGrid(len(grouping), 2, grid.image_size, pools, synthetic=False)


def uniform_resample(grid: DatasetGrid, per_cell_train: int, per_cell_val: int,
                     seed: int) -> DatasetGrid:
    """Trim every cell to identical train/val sizes; test and reserve untouched."""
    from .synthgrid import POOLS
    pools = {}
    for c, d in grid.cells():
        for pool in POOLS:
            src = grid.pool(c, d, pool)
            if pool not in ("train", "val"):
                pools[(c, d, pool)] = _CellPool(src.pixels, src.uids)
                continue
            want = per_cell_train if pool == "train" else per_cell_val
            if want > len(src):
                raise CapacityError(
                    f"{_cell_name(c, d)} {pool} pool has {len(src)} samples, "
                    f"requested {want}"
                )
            perm = Stream(derive(seed, "uniform", pool, c, d)).permutation(len(src))
            keep = np.sort(perm[:want])
            pools[(c, d, pool)] = _CellPool(src.pixels[keep], src.uids[keep])
    return DatasetGrid(grid.n_classes, grid.n_domains, grid.image_size, pools,
                       synthetic=False)
