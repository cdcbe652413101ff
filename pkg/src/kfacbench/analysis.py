"""Targets, iterations-to-target, speedup ratios, heatmaps and robustness summaries."""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .budget import LrSchedule
from .records import RunRecord
from .search import RunSet

TRAIN_LOSS = "train_loss"
TEST_ACCURACY = "test_accuracy"
METRICS = (TRAIN_LOSS, TEST_ACCURACY)
INTERP_FRACTION = 0.8


@dataclass(frozen=True)
class Target:
    metric: str
    value: float
    stage_index: int
    provenance: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")

    def reached(self, v: float | None) -> bool:
        if v is None:
            return False
        return v <= self.value if self.metric == TRAIN_LOSS else v >= self.value


def iterations_to_target(record: RunRecord, target: Target) -> int | None:
    """0-based index of the first iteration at which the target is met, or ``None``.

    Accuracy is measured once per epoch and maps to the last iteration of that
    epoch. Diverged runs only count crossings before the divergence.
    """
    if target.metric == TRAIN_LOSS:
        for i, v in enumerate(record.train_loss):
            if target.reached(v):
                return i * record.record_every
        return None
    for e, a in enumerate(record.test_accuracy):
        if target.reached(a):
            return record.epoch_end_iteration(e)
    return None


def iterations_needed(record: RunRecord, target: Target) -> int | None:
    """Iterations consumed up to and including the one that met the target."""
    idx = iterations_to_target(record, target)
    return None if idx is None else idx + 1


def k_c(records: list[RunRecord], target: Target) -> int | None:
    ks = [k for k in (iterations_needed(r, target) for r in records) if k is not None]
    return min(ks) if ks else None


# -- target selection ---------------------------------------------------------


def _final_train_loss(r: RunRecord) -> float:
    """Mean recorded train loss over the last epoch; ``inf`` for diverged runs."""
    if r.diverged or not r.train_loss:
        return math.inf
    start = (r.total_epochs - 1) * r.iterations_per_epoch
    vals = [v for i, v in zip(r.loss_iterations(), r.train_loss) if i >= start]
    return float(np.mean(vals)) if vals else r.train_loss[-1]


def _schedule(r: RunRecord) -> LrSchedule:
    s = r.config["schedule"]
    return LrSchedule(s["kind"], tuple(s["decay_points"]), s["decay_factor"])


def select_run(runset: RunSet) -> RunRecord:
    """Loss-minimizing run of the (method, batch size) group whose best final loss is worst."""
    if not runset.records:
        raise ValueError("cannot select targets from an empty run set")
    groups: dict[tuple[str, int], list[RunRecord]] = {}
    for r in runset.records:
        groups.setdefault((r.config["method"], r.batch_size), []).append(r)
    best = {}
    for key, recs in sorted(groups.items()):
        run = min(recs, key=lambda r: (_final_train_loss(r), r.config_hash))
        if math.isfinite(_final_train_loss(run)):
            best[key] = run
    if not best:
        raise ValueError("every run in the set diverged")
    worst_key = max(sorted(best), key=lambda k: _final_train_loss(best[k]))
    return best[worst_key]


def interpolate(v_start: float, v_end: float, fraction: float = INTERP_FRACTION) -> float:
    return v_start + fraction * (v_end - v_start)


def stage_targets(record: RunRecord, fraction: float = INTERP_FRACTION) -> list[Target]:
    stages = _schedule(record).stages(record.total_epochs)
    ipe = record.iterations_per_epoch
    its = record.loss_iterations()
    prov = {
        "config_hash": record.config_hash,
        "method": record.config["method"],
        "batch_size": record.batch_size,
        "hyper": record.config["hyper"],
        "rule": f"within-stage endpoints interpolated at {fraction:g}",
    }
    out = []
    for s, (e0, e1) in enumerate(stages):
        lo, hi = e0 * ipe, e1 * ipe
        losses = [v for i, v in zip(its, record.train_loss) if lo <= i < hi]
        if losses:
            out.append(Target(TRAIN_LOSS, interpolate(losses[0], losses[-1], fraction), s,
                              {**prov, "stage_epochs": [e0, e1], "start": losses[0], "end": losses[-1]}))
        accs = [a for a in record.test_accuracy[e0:e1] if a is not None]
        if accs:
            out.append(Target(TEST_ACCURACY, interpolate(accs[0], accs[-1], fraction), s,
                              {**prov, "stage_epochs": [e0, e1], "start": accs[0], "end": accs[-1]}))
    return out


def select_targets(runset: RunSet, fraction: float = INTERP_FRACTION) -> list[Target]:
    return stage_targets(select_run(runset), fraction)


# -- speedup ---------------------------------------------------------------------


@dataclass(frozen=True)
class SpeedupRow:
    method: str
    metric: str
    stage_index: int
    target: float
    batch_size: int
    k: int | None
    speedup: float | None
    ideal: float


@dataclass
class SpeedupReport:
    m0: int
    rows: list[SpeedupRow]

    def lookup(self, method: str, metric: str, stage: int, batch_size: int) -> SpeedupRow:
        for r in self.rows:
            if (r.method, r.metric, r.stage_index, r.batch_size) == (method, metric, stage, batch_size):
                return r
        raise KeyError((method, metric, stage, batch_size))


def speedup_report(runset: RunSet, targets: list[Target], m0: int) -> SpeedupReport:
    rows = []
    for method in runset.methods:
        sizes = runset.batch_sizes(method)
        if m0 not in sizes:
            raise ValueError(f"reference batch size {m0} is not in the study for {method}")
        for t in targets:
            k0 = k_c(runset.select(method, m0), t)
            for m in sizes:
                k = k_c(runset.select(method, m), t)
                s = k0 / k if (k0 is not None and k is not None) else None
                rows.append(SpeedupRow(method, t.metric, t.stage_index, t.value, m, k, s, m / m0))
    return SpeedupReport(m0, rows)


# -- heatmap ---------------------------------------------------------------------


def best_value(record: RunRecord, metric: str) -> float | None:
    if metric == TRAIN_LOSS:
        return min(record.train_loss) if record.train_loss else None
    accs = [a for a in record.test_accuracy if a is not None]
    return max(accs) if accs else None


@dataclass(frozen=True)
class HeatCell:
    method: str
    axis1: str
    value1: float
    axis2: str
    value2: float
    best: float | None
    diverged: bool


def _axes(runset: RunSet, method: str, sample: RunRecord) -> tuple[str, str]:
    g = runset.grid(method)
    if g is not None:
        return g["axis1"]["name"], g["axis2"]["name"]
    return "lr", "damping" if sample.optimizer == "kfac" else "momentum"


def heatmap(runset: RunSet, batch_size: int, metric: str = TEST_ACCURACY, method: str | None = None) -> list[HeatCell]:
    if metric not in METRICS:
        raise ValueError(f"unknown metric {metric!r}")
    if batch_size not in runset.batch_sizes(method):
        raise ValueError(f"batch size {batch_size} is not in the study")
    cells = []
    for meth in [method] if method else runset.methods:
        recs = runset.select(meth, batch_size)
        if not recs:
            continue
        n1, n2 = _axes(runset, meth, recs[0])
        for r in recs:
            h = r.config["hyper"]
            cells.append(HeatCell(meth, n1, h[n1], n2, h[n2], None if r.diverged else best_value(r, metric), r.diverged))
    cells.sort(key=lambda c: (c.method, c.value1, c.value2))
    return cells


# -- robustness ------------------------------------------------------------------


def midpoint_quantile(sorted_values: list[float], p: float) -> float:
    # average of the two order statistics around position p*(n-1); safe with inf
    pos = p * (len(sorted_values) - 1)
    lo, hi = math.floor(pos), math.ceil(pos)
    if lo == hi:
        return sorted_values[lo]
    return 0.5 * (sorted_values[lo] + sorted_values[hi])


def midpoint_summary(values) -> dict:
    v = sorted(float(x) for x in values)
    if not v:
        raise ValueError("cannot summarize an empty distribution")
    q = [midpoint_quantile(v, p) for p in (0.0, 0.25, 0.5, 0.75, 1.0)]
    return {"min": q[0], "q1": q[1], "median": q[2], "q3": q[3], "max": q[4], "count": len(v)}


def best_until(record: RunRecord, checkpoint: int, basis: str) -> tuple[float, float]:
    """Best (accuracy, loss) reached within the first ``checkpoint`` epochs or iterations.

    Diverged runs report (0, inf). A checkpoint with no measurement yet also
    reports the worst value.
    """
    if record.diverged:
        return 0.0, math.inf
    if basis == "epochs":
        n_epochs = checkpoint
        it_limit = checkpoint * record.iterations_per_epoch
    elif basis == "iterations":
        n_epochs = checkpoint // record.iterations_per_epoch
        it_limit = checkpoint
    else:
        raise ValueError(f"unknown basis {basis!r}")
    accs = [a for a in record.test_accuracy[:n_epochs] if a is not None]
    losses = [v for i, v in zip(record.loss_iterations(), record.train_loss) if i < it_limit]
    return (max(accs) if accs else 0.0), (min(losses) if losses else math.inf)


@dataclass(frozen=True)
class RobustnessRow:
    method: str
    batch_size: int
    checkpoint: int
    basis: str
    accuracy: dict
    loss: dict


def robustness(runset: RunSet, checkpoints, basis: str = "epochs") -> list[RobustnessRow]:
    rows = []
    for method in runset.methods:
        for m in runset.batch_sizes(method):
            recs = runset.select(method, m)
            for c in checkpoints:
                pairs = [best_until(r, int(c), basis) for r in recs]
                rows.append(RobustnessRow(method, m, int(c), basis,
                                          midpoint_summary([p[0] for p in pairs]),
                                          midpoint_summary([p[1] for p in pairs])))
    return rows


# -- serialization ---------------------------------------------------------------


def _num(v) -> str:
    if v is None or (isinstance(v, float) and not math.isfinite(v)):
        return ""
    return repr(v)


def _jsonable(v):
    if isinstance(v, float) and not math.isfinite(v):
        return None
    if isinstance(v, dict):
        return {k: _jsonable(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_jsonable(x) for x in v]
    return v


def to_json(obj) -> str:
    if isinstance(obj, list):
        payload = [asdict(x) if hasattr(x, "__dataclass_fields__") else x for x in obj]
    else:
        payload = asdict(obj)
    return json.dumps(_jsonable(payload), sort_keys=True, indent=1, allow_nan=False) + "\n"


def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def speedup_csvs(report: SpeedupReport) -> dict[str, str]:
    """One CSV per (metric, stage): ``speedup_<metric>_<stage>.csv``."""
    files: dict[tuple[str, int], list] = {}
    for r in report.rows:
        files.setdefault((r.metric, r.stage_index), []).append(
            [r.method, r.batch_size, repr(r.target), _num(r.k), _num(r.speedup), repr(r.ideal)]
        )
    header = ["method", "batch_size", "target", "k", "speedup", "ideal"]
    return {f"speedup_{metric}_{stage}.csv": _csv(header, rows) for (metric, stage), rows in sorted(files.items())}


def heatmap_csv(cells: list[HeatCell], metric: str) -> str:
    header = ["method", "axis1", "value1", "axis2", "value2", f"best_{metric}", "diverged"]
    rows = [[c.method, c.axis1, repr(c.value1), c.axis2, repr(c.value2), _num(c.best), int(c.diverged)] for c in cells]
    return _csv(header, rows)


_STATS = ("min", "q1", "median", "q3", "max")


def robustness_csv(rows: list[RobustnessRow]) -> str:
    header = ["method", "batch_size", "basis", "checkpoint", "count"]
    header += [f"accuracy_{s}" for s in _STATS] + [f"loss_{s}" for s in _STATS]
    out = []
    for r in rows:
        out.append([r.method, r.batch_size, r.basis, r.checkpoint, r.accuracy["count"]]
                   + [_num(r.accuracy[s]) for s in _STATS] + [_num(r.loss[s]) for s in _STATS])
    return _csv(header, out)


def targets_json(targets: list[Target]) -> str:
    return json.dumps(_jsonable([asdict(t) for t in targets]), sort_keys=True, indent=1) + "\n"


def targets_from_json(text: str) -> list[Target]:
    return [Target(d["metric"], d["value"], d["stage_index"], d.get("provenance", {})) for d in json.loads(text)]
