"""Run records: the per-run measurement trace persisted by studies."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

SCHEMA_VERSION = 1
COMPLETED = "completed"
DIVERGED = "diverged"


@dataclass
class RunRecord:
    config: dict
    train_loss: list[float]
    test_accuracy: list[float | None]
    test_loss: list[float]
    iterations_per_epoch: int
    total_epochs: int
    n_iterations: int
    record_every: int = 1
    status: str = COMPLETED
    diverged_at: int | None = None
    schema: int = SCHEMA_VERSION

    @property
    def diverged(self) -> bool:
        return self.status == DIVERGED

    @property
    def optimizer(self) -> str:
        return self.config["optimizer"]

    @property
    def batch_size(self) -> int:
        return int(self.config["batch_size"])

    @property
    def config_hash(self) -> str:
        return self.config["hash"]

    def loss_iterations(self) -> list[int]:
        """Iteration index of every recorded train-loss sample."""
        return [i * self.record_every for i in range(len(self.train_loss))]

    def epoch_end_iteration(self, epoch: int) -> int:
        return (epoch + 1) * self.iterations_per_epoch - 1

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1, allow_nan=False) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "RunRecord":
        if d.get("schema") != SCHEMA_VERSION:
            raise ValueError(f"unsupported run record schema {d.get('schema')!r}")
        return cls(**d)

    @classmethod
    def from_json(cls, text: str) -> "RunRecord":
        return cls.from_dict(json.loads(text))
