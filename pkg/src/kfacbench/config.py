"""Study configuration files (JSON, ``schema: 1``)."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .budget import Budget, BudgetError, LrSchedule, total_epochs
from .data import CLASSIFICATION, Dataset, ParameterError, gen_blobs, gen_linreg, load_csv, train_test_split
from .model import Network, init_network
from .optim import ConfigError
from .search import Axis, GridError, GridSpec

CONFIG_SCHEMA = 1


def _strict(cls, d: dict, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where}: expected an object")
    names = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown field(s) {', '.join(unknown)}")
    try:
        return cls(**d)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


@dataclass(frozen=True)
class DatasetSpec:
    kind: str = "blobs"
    seed: int = 0
    n: int = 4096
    d: int = 10
    k: int = 4
    spread: float = 0.15
    noise_sd: float = 0.1
    path: str | None = None
    task: str = CLASSIFICATION

    def build(self) -> Dataset:
        try:
            if self.kind == "blobs":
                return gen_blobs(self.seed, self.n, self.d, self.k, self.spread)
            if self.kind == "linreg":
                return gen_linreg(self.seed, self.n, self.d, self.noise_sd)
            if self.kind == "csv":
                if not self.path:
                    raise ConfigError("dataset.path: required for csv datasets")
                return load_csv(self.path, self.task)
        except ParameterError as exc:
            raise ConfigError(f"dataset: {exc}") from exc
        raise ConfigError(f"dataset.kind: unknown kind {self.kind!r}")


@dataclass(frozen=True)
class NetworkSpec:
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    init_seed: int | None = None

    def build(self, ds: Dataset, default_seed: int) -> Network:
        if ds.task == CLASSIFICATION:
            out, loss = ds.n_classes, "softmax_cross_entropy"
        else:
            out, loss = 1, "mse"
        sizes = [ds.n_features, *self.hidden, out]
        acts = [self.activation] * len(self.hidden) + ["identity"]
        seed = default_seed if self.init_seed is None else self.init_seed
        try:
            return init_network(sizes, acts, loss, seed)
        except ValueError as exc:
            raise ConfigError(f"network: {exc}") from exc


@dataclass
class StudyConfig:
    grids: list[GridSpec]
    batch_sizes: list[int]
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    network: NetworkSpec = field(default_factory=NetworkSpec)
    budget: Budget = field(default_factory=Budget)
    schedule: LrSchedule = field(default_factory=LrSchedule)
    base_seed: int = 0
    parallelism: int | None = None
    output: str = "study"
    record_every: int = 1
    replicas: int = 1
    drop_last: bool = True
    train_loss_eval: str = "batch"
    schema: int = CONFIG_SCHEMA

    @classmethod
    def from_dict(cls, d: dict) -> "StudyConfig":
        d = dict(d)
        if d.get("schema", CONFIG_SCHEMA) != CONFIG_SCHEMA:
            raise ConfigError(f"schema: unsupported version {d.get('schema')!r}")
        names = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - names)
        if unknown:
            raise ConfigError(f"study: unknown field(s) {', '.join(unknown)}")
        if "grids" not in d or "batch_sizes" not in d:
            raise ConfigError("study: 'grids' and 'batch_sizes' are required")
        grids = []
        for i, g in enumerate(d.pop("grids")):
            g = dict(g)
            try:
                g["axis1"] = _strict(Axis, g.get("axis1", {}), f"grids[{i}].axis1")
                g["axis2"] = _strict(Axis, g.get("axis2", {}), f"grids[{i}].axis2")
            except GridError as exc:
                raise ConfigError(str(exc)) from exc
            grids.append(_strict(GridSpec, g, f"grids[{i}]"))
        out = cls(
            grids=grids,
            batch_sizes=[int(b) for b in d.pop("batch_sizes")],
            dataset=_strict(DatasetSpec, d.pop("dataset", {}), "dataset"),
            network=_strict(NetworkSpec, _tuple_hidden(d.pop("network", {})), "network"),
            budget=_strict(Budget, d.pop("budget", {}), "budget"),
            schedule=_strict(LrSchedule, _tuple_points(d.pop("schedule", {})), "schedule"),
            **d,
        )
        out.validate()
        return out

    @classmethod
    def load(cls, path: str | Path) -> "StudyConfig":
        try:
            d = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        return cls.from_dict(d)

    def validate(self) -> None:
        if not self.batch_sizes or any(b < 1 for b in self.batch_sizes):
            raise ConfigError("batch_sizes: must be a non-empty list of positive integers")
        if self.parallelism is not None and self.parallelism < 1:
            raise ConfigError("parallelism: must be at least 1")
        if self.record_every < 1:
            raise ConfigError("record_every: must be at least 1")
        if self.replicas < 1:
            raise ConfigError("replicas: must be at least 1")
        if self.train_loss_eval not in ("batch", "full"):
            raise ConfigError("train_loss_eval: must be 'batch' or 'full'")
        try:
            if self.budget.mode == "adjusted":
                for b in self.batch_sizes:
                    total_epochs(self.budget, b)
        except BudgetError as exc:
            raise ConfigError(f"budget: {exc}") from exc

    def manifest_extra(self) -> dict:
        return {"dataset": asdict(self.dataset), "network": {**asdict(self.network), "hidden": list(self.network.hidden)}}

    def materialize(self) -> tuple[Dataset, Dataset, Network]:
        ds = self.dataset.build()
        train, test = train_test_split(ds, self.dataset.seed)
        net = self.network.build(ds, self.base_seed)
        return train, test, net


def _tuple_hidden(d: dict) -> dict:
    d = dict(d)
    if "hidden" in d:
        d["hidden"] = tuple(int(h) for h in d["hidden"])
    return d


def _tuple_points(d: dict) -> dict:
    d = dict(d)
    if "decay_points" in d:
        d["decay_points"] = tuple(d["decay_points"])
    return d
