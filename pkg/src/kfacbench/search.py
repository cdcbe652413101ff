"""Hyperparameter grids and the study orchestrator.

A study directory holds ``manifest.json`` plus one ``runs/<config-hash>.json``
per (method, hyperparameters, batch size, replica). Finished record files are
reused on resume, so an interrupted study picks up where it stopped.
"""

from __future__ import annotations

import json
import logging
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .budget import Budget, LrSchedule
from .data import Dataset
from .model import Network
from .optim import optimizer_from_dict, run_config, train_run
from .records import DIVERGED, RunRecord
from .seeding import derive_seed, stable_hash

log = logging.getLogger(__name__)

MANIFEST_SCHEMA = 1
DEFAULT_AXIS2 = {"kfac": "damping", "sgd": "momentum"}


class GridError(ValueError):
    pass


class ManifestMismatch(RuntimeError):
    pass


@dataclass(frozen=True)
class Axis:
    name: str
    low: float
    high: float
    points: int

    def __post_init__(self):
        if self.points < 2:
            raise GridError(f"axis {self.name}: needs at least 2 points")
        if not self.low < self.high:
            raise GridError(f"axis {self.name}: low must be below high")
        if self.name == "momentum":
            if not (0 <= self.low and self.high < 1):
                raise GridError("axis momentum: endpoints must lie in [0, 1)")
        elif not self.low > 0:
            raise GridError(f"axis {self.name}: geometric axes need low > 0")

    def values(self) -> list[float]:
        p = self.points
        if self.name == "momentum":
            # geometric in (1 - momentum), increasing in momentum
            lo, hi = 1.0 - self.low, 1.0 - self.high
            inner = [1.0 - lo * (hi / lo) ** (j / (p - 1)) for j in range(1, p - 1)]
        else:
            inner = [self.low * (self.high / self.low) ** (j / (p - 1)) for j in range(1, p - 1)]
        return [float(self.low), *inner, float(self.high)]


@dataclass(frozen=True)
class GridSpec:
    optimizer: str
    axis1: Axis
    axis2: Axis
    fixed: dict = field(default_factory=dict)
    method: str | None = None
    spacing: str = "geometric"

    def __post_init__(self):
        if self.optimizer not in DEFAULT_AXIS2:
            raise GridError(f"unknown optimizer {self.optimizer!r}")
        if self.spacing != "geometric":
            raise GridError("only geometric spacing is supported")
        if isinstance(self.axis1, dict):
            object.__setattr__(self, "axis1", Axis(**self.axis1))
        if isinstance(self.axis2, dict):
            object.__setattr__(self, "axis2", Axis(**self.axis2))
        if self.axis1.name == self.axis2.name:
            raise GridError("grid axes must differ")

    @property
    def label(self) -> str:
        return self.method or self.optimizer

    def to_dict(self) -> dict:
        d = asdict(self)
        d["method"] = self.label
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        d["axis1"] = Axis(**d["axis1"])
        d["axis2"] = Axis(**d["axis2"])
        d["fixed"] = dict(d.get("fixed", {}))
        return cls(**d)


def make_grid(spec: GridSpec) -> list[dict]:
    """Cartesian product of both axes, axis1 outermost, merged with fixed values."""
    out = []
    for v1 in spec.axis1.values():
        for v2 in spec.axis2.values():
            hyper = dict(spec.fixed)
            hyper[spec.axis1.name] = v1
            hyper[spec.axis2.name] = v2
            optimizer_from_dict(spec.optimizer, hyper)
            out.append(hyper)
    return out


@dataclass
class RunSet:
    study_id: str
    manifest: dict
    records: list[RunRecord]

    def __post_init__(self):
        self.records.sort(key=lambda r: (r.config["method"], r.batch_size, r.config_hash))
        hashes = [r.config_hash for r in self.records]
        if len(set(hashes)) != len(hashes):
            raise ValueError("duplicate run configurations in run set")

    @property
    def methods(self) -> list[str]:
        return sorted({r.config["method"] for r in self.records})

    def batch_sizes(self, method: str | None = None) -> list[int]:
        return sorted({r.batch_size for r in self.records if method is None or r.config["method"] == method})

    def select(self, method: str | None = None, batch_size: int | None = None) -> list[RunRecord]:
        return [
            r
            for r in self.records
            if (method is None or r.config["method"] == method) and (batch_size is None or r.batch_size == batch_size)
        ]

    def grid(self, method: str) -> dict | None:
        for g in self.manifest.get("grids", []):
            if g["method"] == method:
                return g
        return None

    @classmethod
    def load(cls, study_dir: str | Path, allow_partial: bool = False) -> "RunSet":
        study_dir = Path(study_dir)
        manifest_path = study_dir / "manifest.json"
        if not manifest_path.is_file():
            raise FileNotFoundError(f"no study manifest at {manifest_path}")
        manifest = json.loads(manifest_path.read_text())
        records = [RunRecord.from_json(p.read_text()) for p in sorted((study_dir / "runs").glob("*.json"))]
        expected = manifest.get("n_runs")
        if not allow_partial and expected is not None and len(records) != expected:
            raise RuntimeError(f"study is incomplete: {len(records)} of {expected} runs present")
        return cls(manifest["study_id"], manifest, records)


def atomic_write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=1, allow_nan=False) + "\n"


@dataclass(frozen=True)
class _Task:
    method: str
    optimizer: str
    hyper: dict
    batch_size: int
    replica: int


def _task_config(task: _Task, budget: Budget, schedule: LrSchedule) -> dict:
    opt = optimizer_from_dict(task.optimizer, task.hyper)
    cfg = run_config(opt, task.batch_size, budget, schedule, task.replica)
    cfg["method"] = task.method
    cfg["hash"] = stable_hash(cfg)
    return cfg


_WORKER: dict = {}


def _init_worker(context: dict) -> None:
    _WORKER.clear()
    _WORKER.update(context)


def _execute(task: _Task) -> RunRecord:
    ctx = _WORKER
    cfg = _task_config(task, ctx["budget"], ctx["schedule"])
    seed = derive_seed(ctx["base_seed"], cfg["hash"])
    cfg["seed"] = seed
    record = train_run(
        ctx["net0"],
        ctx["train"],
        optimizer_from_dict(task.optimizer, task.hyper),
        task.batch_size,
        ctx["budget"],
        ctx["schedule"],
        seed,
        test=ctx["test"],
        record_every=ctx["record_every"],
        drop_last=ctx["drop_last"],
        train_loss_eval=ctx["train_loss_eval"],
        config=cfg,
    )
    if ctx["study_dir"] is not None:
        atomic_write(Path(ctx["study_dir"]) / "runs" / f"{cfg['hash']}.json", record.to_json())
    return record


def run_grid(
    specs: GridSpec | list[GridSpec],
    batch_sizes,
    train: Dataset,
    net0: Network,
    budget: Budget,
    schedule: LrSchedule,
    base_seed: int = 0,
    parallelism: int = 1,
    test: Dataset | None = None,
    study_dir: str | Path | None = None,
    record_every: int = 1,
    replicas: int = 1,
    drop_last: bool = True,
    train_loss_eval: str = "batch",
    extra_manifest: dict | None = None,
) -> RunSet:
    """Run every grid configuration at every batch size.

    Results do not depend on ``parallelism``: each run's seed is derived from
    ``base_seed`` and the hash of its own configuration.
    """
    if isinstance(specs, GridSpec):
        specs = [specs]
    labels = [s.label for s in specs]
    if len(set(labels)) != len(labels):
        raise GridError("grid methods must be unique within a study")
    batch_sizes = sorted(int(b) for b in batch_sizes)
    tasks = [
        _Task(spec.label, spec.optimizer, hyper, b, rep)
        for spec in specs
        for hyper in make_grid(spec)
        for b in batch_sizes
        for rep in range(replicas)
    ]
    manifest = {
        "schema": MANIFEST_SCHEMA,
        "grids": [s.to_dict() for s in specs],
        "batch_sizes": batch_sizes,
        "budget": budget.to_dict(),
        "schedule": schedule.to_dict(),
        "base_seed": int(base_seed),
        "record_every": int(record_every),
        "replicas": int(replicas),
        "drop_last": bool(drop_last),
        "train_loss_eval": train_loss_eval,
        "n_runs": len(tasks),
        **(extra_manifest or {}),
    }
    manifest["study_id"] = stable_hash(manifest)

    done: dict[str, RunRecord] = {}
    if study_dir is not None:
        study_dir = Path(study_dir)
        mpath = study_dir / "manifest.json"
        if mpath.is_file():
            old = json.loads(mpath.read_text())
            if old.get("study_id") != manifest["study_id"]:
                raise ManifestMismatch(f"{mpath} belongs to a different study; refusing to resume")
        else:
            atomic_write(mpath, canonical_json(manifest))
        runs_dir = study_dir / "runs"
        runs_dir.mkdir(parents=True, exist_ok=True)
        for p in runs_dir.glob("*.json"):
            try:
                rec = RunRecord.from_json(p.read_text())
            except (ValueError, KeyError, TypeError):
                log.warning("ignoring unreadable record %s", p)
                continue
            done[rec.config_hash] = rec

    pending = []
    for t in tasks:
        h = _task_config(t, budget, schedule)["hash"]
        if h not in done:
            pending.append(t)
    log.info("%d runs total, %d already finished", len(tasks), len(tasks) - len(pending))

    context = {
        "net0": net0,
        "train": train,
        "test": test,
        "budget": budget,
        "schedule": schedule,
        "base_seed": int(base_seed),
        "record_every": record_every,
        "drop_last": drop_last,
        "train_loss_eval": train_loss_eval,
        "study_dir": None if study_dir is None else str(study_dir),
    }
    if parallelism <= 1 or len(pending) <= 1:
        _init_worker(context)
        fresh = [_execute(t) for t in pending]
    else:
        with ProcessPoolExecutor(max_workers=parallelism, initializer=_init_worker, initargs=(context,)) as pool:
            fresh = list(pool.map(_execute, pending, chunksize=1))
    for rec in fresh:
        done[rec.config_hash] = rec
        if rec.status == DIVERGED:
            log.info("run %s diverged at iteration %s", rec.config_hash, rec.diverged_at)
    wanted = {_task_config(t, budget, schedule)["hash"] for t in tasks}
    return RunSet(manifest["study_id"], manifest, [done[h] for h in wanted])
