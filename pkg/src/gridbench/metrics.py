"""Per-cell recall matrices, ID/OOD averages, AUC and seed aggregation.

"Average balanced accuracy" is the macro mean of per-(class, domain)-cell
recall.  Which cells enter the ID/OOD mean depends on the model kind: a
multi-domain record averages over the whole grid minus the excluded cell, a
specialized record only over its own column, and a cross-domain record over
the columns it was *not* trained on.  Cells without test support are ABSENT
(NaN) and never contribute; skipped excluded cells are tallied.
"""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CellRecallMatrix:
    values: np.ndarray   # float [C, D], NaN where ABSENT
    support: np.ndarray  # int [C, D] test sample counts

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        support = np.asarray(self.support, dtype=np.int64)
        if values.shape != support.shape or values.ndim != 2:
            raise ValueError("values and support must be equal-shape 2-D matrices")
        absent = support == 0
        if not np.all(np.isnan(values[absent])):
            raise ValueError("cells with zero support must be ABSENT (NaN)")
        if np.any(np.isnan(values[~absent])):
            raise ValueError("cells with support must carry a recall value")
        present = values[~absent]
        if present.size and (present.min() < 0 or present.max() > 1):
            raise ValueError("recall values must lie in [0, 1]")
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "support", support)

    @property
    def shape(self) -> tuple[int, int]:
        return self.values.shape


def per_cell_recall(predictions, true_class, true_domain, n_classes: int,
                    n_domains: int) -> CellRecallMatrix:
    """Recall per (class, domain) cell: correct / support, ABSENT when empty."""
    pred = np.asarray(predictions)
    cls = np.asarray(true_class)
    dom = np.asarray(true_domain)
    if not (len(pred) == len(cls) == len(dom)):
        raise ValueError(
            f"misaligned inputs: {len(pred)} predictions, {len(cls)} classes, "
            f"{len(dom)} domains"
        )
    correct = np.zeros((n_classes, n_domains), dtype=np.int64)
    support = np.zeros((n_classes, n_domains), dtype=np.int64)
    np.add.at(support, (cls, dom), 1)
    np.add.at(correct, (cls, dom), (pred == cls).astype(np.int64))
    values = np.full((n_classes, n_domains), np.nan)
    nonzero = support > 0
    values[nonzero] = correct[nonzero] / support[nonzero]
    return CellRecallMatrix(values=values, support=support)


@dataclass(frozen=True)
class ResultRecord:
    experiment_id: str
    model_kind: str      # multi-domain | specialized:d | specialized-upsampled:d | specialized-cross:d
    x_kind: str          # distribution | percentage | control
    x_value: float
    ood_cell: tuple[int, int]
    ood_level: int
    seed: int
    recall: CellRecallMatrix
    provenance: dict

    def to_json(self) -> str:
        values = [[None if math.isnan(v) else v for v in row]
                  for row in self.recall.values.tolist()]
        doc = {
            "schema_version": 1,
            "experiment_id": self.experiment_id,
            "model_kind": self.model_kind,
            "x_kind": self.x_kind,
            "x_value": self.x_value,
            "ood_cell": list(self.ood_cell),
            "ood_level": self.ood_level,
            "seed": self.seed,
            "provenance": self.provenance,
            "recall": {"values": values,
                       "support": self.recall.support.tolist()},
        }
        return json.dumps(doc, indent=2, sort_keys=True)

    @staticmethod
    def from_json(text: str) -> "ResultRecord":
        doc = json.loads(text)
        values = np.array([[np.nan if v is None else v for v in row]
                           for row in doc["recall"]["values"]], dtype=float)
        support = np.array(doc["recall"]["support"], dtype=np.int64)
        return ResultRecord(
            experiment_id=doc["experiment_id"],
            model_kind=doc["model_kind"],
            x_kind=doc["x_kind"],
            x_value=float(doc["x_value"]),
            ood_cell=tuple(doc["ood_cell"]),
            ood_level=int(doc["ood_level"]),
            seed=int(doc["seed"]),
            recall=CellRecallMatrix(values=values, support=support),
            provenance=doc["provenance"],
        )


def experiment_id(provenance: dict) -> str:
    """Stable id: sha256 of the canonical provenance JSON, 16 hex chars."""
    canon = json.dumps(provenance, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canon.encode("utf-8")).hexdigest()[:16]


def kind_family(model_kind: str) -> str:
    return model_kind.split(":", 1)[0]


def scoped_cells(model_kind: str, ood_cell: tuple[int, int], n_classes: int,
                 n_domains: int) -> tuple[np.ndarray, np.ndarray]:
    """Boolean (id_cells, ood_cells) masks for a record's model kind."""
    c_star, d_star = ood_cell
    id_mask = np.zeros((n_classes, n_domains), dtype=bool)
    ood_mask = np.zeros((n_classes, n_domains), dtype=bool)
    family = kind_family(model_kind)
    if family == "multi-domain":
        id_mask[:] = True
        id_mask[c_star, d_star] = False
        ood_mask[c_star, d_star] = True
    elif family in ("specialized", "specialized-upsampled"):
        domain = int(model_kind.split(":", 1)[1])
        id_mask[:, domain] = True
        id_mask[c_star, d_star] = False
        if d_star == domain:
            ood_mask[c_star, d_star] = True
    elif family == "specialized-cross":
        domain = int(model_kind.split(":", 1)[1])
        id_mask[:] = True
        id_mask[:, domain] = False
        id_mask[c_star, :] = False
        ood_mask[c_star, :] = True
        ood_mask[c_star, domain] = False
    else:
        raise ValueError(f"unknown model kind {model_kind!r}")
    return id_mask, ood_mask


def _record_metric(record: ResultRecord, metric: str) -> float | None:
    """One record's scoped mean recall, or None when nothing is in scope."""
    id_mask, ood_mask = scoped_cells(record.model_kind, record.ood_cell,
                                     *record.recall.shape)
    mask = id_mask if metric == "id" else ood_mask
    vals = record.recall.values[mask]
    vals = vals[~np.isnan(vals)]
    if vals.size == 0:
        return None
    return float(vals.mean())


def ood_average(records, level: int, *, with_tally: bool = False):
    """Mean excluded-cell recall over records at one OOD level.

    Records whose excluded cell is out of scope for their model kind, or
    ABSENT in the test grid, are skipped and counted.
    """
    vals = []
    skipped = 0
    for rec in records:
        if rec.ood_level != level:
            continue
        v = _record_metric(rec, "ood")
        if v is None:
            skipped += 1
        else:
            vals.append(v)
    mean = float(np.mean(vals)) if vals else float("nan")
    if with_tally:
        return mean, skipped
    return mean


def id_average(records, level: int) -> float:
    """Mean in-scope, non-excluded cell recall over records at one level."""
    vals = []
    for rec in records:
        if rec.ood_level != level:
            continue
        v = _record_metric(rec, "id")
        if v is not None:
            vals.append(v)
    return float(np.mean(vals)) if vals else float("nan")


def auc_trapezoid(xs, ys) -> float:
    """Trapezoidal area under (xs, ys); xs must be strictly increasing."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    if xs.ndim != 1 or xs.shape != ys.shape:
        raise ValueError("xs and ys must be equal-length vectors")
    if len(xs) < 2:
        raise ValueError("need at least two points")
    if np.any(np.diff(xs) <= 0):
        raise ValueError(f"xs must be strictly increasing, got {xs.tolist()}")
    return float(np.sum((xs[1:] - xs[:-1]) * (ys[1:] + ys[:-1]) * 0.5))


@dataclass(frozen=True)
class CurveSummary:
    model_kind: str            # kind family, e.g. "specialized"
    metric: str                # "id" | "ood"
    ood_level: int
    xs: tuple[float, ...]
    mean: tuple[float, ...]
    std: tuple[float, ...]
    n_seeds: tuple[int, ...]
    auc: float
    n_skipped: int = 0

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.xs, self.xs[1:])):
            raise ValueError("x values must be strictly increasing")
        if any(s < 0 for s in self.std):
            raise ValueError("std must be non-negative")

    @property
    def single_seed(self) -> bool:
        return any(n == 1 for n in self.n_seeds)


def aggregate_seeds(records) -> list[CurveSummary]:
    """Per-(kind family, metric, level) curves: seed mean/std per x plus AUC.

    Single-seed points get std 0 by convention and flag the curve via
    ``single_seed``.  Order of the input records does not matter.
    """
    records = list(records)
    buckets: dict[tuple[str, int, float, int], list[ResultRecord]] = {}
    for rec in records:
        key = (kind_family(rec.model_kind), rec.ood_level, rec.x_value, rec.seed)
        buckets.setdefault(key, []).append(rec)

    curves: list[CurveSummary] = []
    curve_keys = sorted({(fam, lvl) for fam, lvl, _, _ in buckets})
    for fam, lvl in curve_keys:
        xs = sorted({x for f, l, x, _ in buckets if f == fam and l == lvl})
        for metric in ("id", "ood"):
            means, stds, counts = [], [], []
            skipped = 0
            for x in xs:
                per_seed = []
                for (f, l, xv, seed), recs in buckets.items():
                    if (f, l, xv) != (fam, lvl, x):
                        continue
                    if metric == "id":
                        v = id_average(recs, lvl)
                    else:
                        v, sk = ood_average(recs, lvl, with_tally=True)
                        skipped += sk
                    if not math.isnan(v):
                        per_seed.append((seed, v))
                # fixed accumulation order keeps results record-order-invariant
                seed_vals = [v for _, v in sorted(per_seed)]
                if not seed_vals:
                    means.append(float("nan"))
                    stds.append(0.0)
                    counts.append(0)
                    continue
                means.append(float(np.mean(seed_vals)))
                stds.append(float(np.std(seed_vals, ddof=1)) if len(seed_vals) > 1
                            else 0.0)
                counts.append(len(seed_vals))
            auc = auc_trapezoid(xs, means) if len(xs) >= 2 and not any(
                math.isnan(m) for m in means) else float("nan")
            curves.append(CurveSummary(
                model_kind=fam, metric=metric, ood_level=lvl, xs=tuple(xs),
                mean=tuple(means), std=tuple(stds), n_seeds=tuple(counts),
                auc=auc, n_skipped=skipped))
    return curves


@dataclass(frozen=True)
class DifferenceCurve:
    kind_a: str
    kind_b: str
    metric: str
    ood_level: int
    xs: tuple[float, ...]
    diff: tuple[float, ...]  # mean_a - mean_b


def model_difference(curve_a: CurveSummary, curve_b: CurveSummary) -> DifferenceCurve:
    """Pointwise curve_a minus curve_b on a shared x grid.

    Call with the multi-domain curve first to get the conventional
    multi-domain-minus-specialized sign.
    """
    if set(curve_a.xs) != set(curve_b.xs):
        only_a = sorted(set(curve_a.xs) - set(curve_b.xs))
        only_b = sorted(set(curve_b.xs) - set(curve_a.xs))
        raise ValueError(
            f"x grids differ: only in first curve {only_a}, "
            f"only in second {only_b}"
        )
    if curve_a.metric != curve_b.metric or curve_a.ood_level != curve_b.ood_level:
        raise ValueError("curves must share metric and OOD level")
    diff = tuple(a - b for a, b in zip(curve_a.mean, curve_b.mean))
    return DifferenceCurve(kind_a=curve_a.model_kind, kind_b=curve_b.model_kind,
                           metric=curve_a.metric, ood_level=curve_a.ood_level,
                           xs=curve_a.xs, diff=diff)


# -- raw prediction dumps -----------------------------------------------------

PREDICTION_DUMP_HEADER = ["experiment_id", "uid", "true_class", "true_domain",
                          "pred_class"]


def write_prediction_dump(path: str, experiment_id: str, uids, true_class,
                          true_domain, pred_class) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(PREDICTION_DUMP_HEADER)
        for uid, tc, td, pc in zip(uids, true_class, true_domain, pred_class):
            writer.writerow([experiment_id, int(uid), int(tc), int(td), int(pc)])


def read_prediction_dump(path: str):
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader)
        if header != PREDICTION_DUMP_HEADER:
            raise ValueError(f"unexpected dump header {header}")
        rows = [(r[0], int(r[1]), int(r[2]), int(r[3]), int(r[4])) for r in reader]
    return rows
