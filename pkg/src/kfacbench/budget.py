"""Training budgets and step learning-rate schedules."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

BUDGET_MODES = ("adjusted", "fixed_epochs", "fixed_iterations")
SCHEDULE_KINDS = ("scaled", "fixed")


class BudgetError(ValueError):
    pass


def _is_power_of_two(v: int) -> bool:
    return v >= 1 and v & (v - 1) == 0


@dataclass(frozen=True)
class Budget:
    base_epochs: int = 100
    ref_batch: int = 128
    mode: str = "adjusted"
    fixed_value: int = 0

    def __post_init__(self):
        if self.mode not in BUDGET_MODES:
            raise BudgetError(f"unknown budget mode {self.mode!r}")
        if self.base_epochs < 1:
            raise BudgetError("base_epochs must be at least 1")
        if self.mode == "adjusted" and not _is_power_of_two(self.ref_batch):
            raise BudgetError("ref_batch must be a positive power of 2")
        if self.mode != "adjusted" and self.fixed_value < 1:
            raise BudgetError("fixed budgets need fixed_value >= 1")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class LrSchedule:
    """Step decays.

    For ``scaled`` schedules ``decay_points`` are fractions of the total epoch
    budget; for ``fixed`` schedules they are absolute epochs.
    """

    kind: str = "scaled"
    decay_points: tuple[float, ...] = (0.4, 0.8)
    decay_factor: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "decay_points", tuple(self.decay_points))
        if self.kind not in SCHEDULE_KINDS:
            raise BudgetError(f"unknown schedule kind {self.kind!r}")
        if not self.decay_factor > 1:
            raise BudgetError("decay_factor must exceed 1")
        pts = self.decay_points
        if any(b <= a for a, b in zip(pts, pts[1:])):
            raise BudgetError("decay points must be strictly increasing")
        if self.kind == "scaled" and any(not 0 < p < 1 for p in pts):
            raise BudgetError("scaled decay points must lie in (0, 1)")
        if self.kind == "fixed" and any(p < 0 for p in pts):
            raise BudgetError("fixed decay epochs must be non-negative")

    def decay_epochs(self, total: int) -> list[int]:
        if self.kind == "scaled":
            return [math.floor(p * total) for p in self.decay_points]
        return [int(p) for p in self.decay_points]

    def stages(self, total: int) -> list[tuple[int, int]]:
        """Half-open epoch ranges separated by the decays that fall inside the run."""
        cuts = [e for e in self.decay_epochs(total) if 0 < e < total]
        bounds = [0, *cuts, total]
        return [(a, b) for a, b in zip(bounds, bounds[1:]) if b > a]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["decay_points"] = list(self.decay_points)
        return d


def total_epochs(b: Budget, batch_size: int, n_train: int | None = None) -> int:
    if b.mode == "fixed_epochs":
        return b.fixed_value
    if b.mode == "fixed_iterations":
        if n_train is None:
            raise BudgetError("fixed_iterations budgets need the training-set size")
        return math.ceil(b.fixed_value * batch_size / n_train)
    ratio, rem = divmod(batch_size, b.ref_batch)
    if rem or not _is_power_of_two(ratio):
        raise BudgetError(f"batch size {batch_size} is not a power-of-2 multiple of {b.ref_batch}")
    # log2(ratio) + 1 == bit_length for a power of two
    return ratio.bit_length() * b.base_epochs


def lr_multiplier(s: LrSchedule, epoch: int, total: int) -> float:
    drops = sum(1 for e in s.decay_epochs(total) if epoch >= e)
    return 1.0 / s.decay_factor**drops
