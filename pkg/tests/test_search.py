import json
from pathlib import Path

import pytest

from kfacbench.budget import Budget, LrSchedule
from kfacbench.config import StudyConfig
from kfacbench.data import gen_blobs, train_test_split
from kfacbench.model import init_network
from kfacbench.optim import ConfigError
from kfacbench.search import Axis, GridError, GridSpec, ManifestMismatch, RunSet, make_grid, run_grid
from kfacbench.seeding import derive_seed, stable_hash, stream


def test_lr_axis_ratio_three():
    vals = Axis("lr", 1e-3, 2.187, 8).values()
    expected = [1e-3, 3e-3, 9e-3, 2.7e-2, 8.1e-2, 2.43e-1, 7.29e-1, 2.187]
    assert all(abs(v - e) <= 1e-12 * e for v, e in zip(vals, expected))
    assert vals[0] == 1e-3 and vals[-1] == 2.187


def test_momentum_axis_geometric_in_complement():
    vals = Axis("momentum", 0.9, 0.999, 8).values()
    assert vals[0] == 0.9 and vals[-1] == 0.999
    comp = [1 - v for v in vals]
    ratios = [b / a for a, b in zip(comp, comp[1:])]
    assert max(ratios) - min(ratios) < 1e-9


def test_grid_counts_and_order():
    spec = GridSpec("kfac", Axis("lr", 1e-3, 2.187, 8), Axis("damping", 1e-4, 1e-1, 8))
    grid = make_grid(spec)
    assert len(grid) == 64
    assert len({json.dumps(h, sort_keys=True) for h in grid}) == 64
    assert grid[0]["lr"] == grid[7]["lr"] and grid[0]["damping"] != grid[1]["damping"]


@pytest.mark.parametrize(
    "axis",
    [dict(name="lr", low=0.0, high=1.0, points=3), dict(name="lr", low=1.0, high=0.1, points=3),
     dict(name="lr", low=0.1, high=1.0, points=1), dict(name="momentum", low=0.5, high=1.0, points=3)],
)
def test_axis_validation(axis):
    with pytest.raises(GridError):
        Axis(**axis)


def test_grid_rejects_invalid_hyperparameters():
    spec = GridSpec("kfac", Axis("lr", 0.1, 1.0, 2), Axis("clip_kappa", 0.1, 1.0, 2), fixed={"damping": -1.0})
    with pytest.raises(ConfigError):
        make_grid(spec)


def test_seeding_helpers():
    assert stable_hash({"a": 1, "b": [1, 2]}) == stable_hash({"b": [1, 2], "a": 1})
    assert derive_seed(0, "x") == derive_seed(0, "x") != derive_seed(1, "x")
    assert stream(3, "t").random() == stream(3, "t").random()
    assert stream(3, "t").random() != stream(3, "u").random()


@pytest.fixture(scope="module")
def tiny():
    ds = gen_blobs(0, 200, 3, 2, 0.3)
    train, test = train_test_split(ds, 0)
    net = init_network([3, 4, 2], ["relu", "identity"], "softmax_cross_entropy", 0)
    specs = [
        GridSpec("sgd", Axis("lr", 0.01, 0.1, 2), Axis("momentum", 0.5, 0.9, 2)),
        GridSpec("kfac", Axis("lr", 0.01, 0.1, 2), Axis("damping", 1e-3, 1e-2, 2)),
    ]
    return dict(specs=specs, batch_sizes=[16, 32], train=train, net0=net,
                budget=Budget(mode="fixed_epochs", fixed_value=2), schedule=LrSchedule(), test=test)


def read_dir(d):
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*.json"))}


def test_run_grid_counts(tiny, tmp_path):
    rs = run_grid(**tiny, study_dir=tmp_path)
    assert len(rs.records) == 16
    assert len(list((tmp_path / "runs").glob("*.json"))) == 16
    assert len({r.config_hash for r in rs.records}) == 16
    assert rs.methods == ["kfac", "sgd"]
    assert RunSet.load(tmp_path).records == rs.records


def test_parallelism_does_not_change_results(tiny, tmp_path):
    run_grid(**tiny, study_dir=tmp_path / "p1", parallelism=1)
    run_grid(**tiny, study_dir=tmp_path / "p4", parallelism=4)
    assert read_dir(tmp_path / "p1") == read_dir(tmp_path / "p4")


def test_resume_skips_finished_runs(tiny, tmp_path):
    clean = tmp_path / "clean"
    run_grid(**tiny, study_dir=clean)
    part = tmp_path / "part"
    run_grid(**tiny, study_dir=part)
    victims = sorted((part / "runs").glob("*.json"))[::3]
    for p in victims:
        p.unlink()
    kept = sorted((part / "runs").glob("*.json"))[0]
    mtime = kept.stat().st_mtime_ns
    with pytest.raises(RuntimeError):
        RunSet.load(part)
    assert len(RunSet.load(part, allow_partial=True).records) == 16 - len(victims)
    run_grid(**tiny, study_dir=part)
    assert kept.stat().st_mtime_ns == mtime
    assert read_dir(clean) == read_dir(part)


def test_manifest_mismatch_refuses(tiny, tmp_path):
    run_grid(**tiny, study_dir=tmp_path)
    with pytest.raises(ManifestMismatch):
        run_grid(**{**tiny, "batch_sizes": [16]}, study_dir=tmp_path)


def test_replicas_get_distinct_seeds(tiny):
    rs = run_grid(**{**tiny, "specs": tiny["specs"][:1], "batch_sizes": [16]}, replicas=2)
    assert len(rs.records) == 8
    seeds = {r.config["seed"] for r in rs.records}
    assert len(seeds) == 8


def test_study_config_rejects_unknown_fields():
    base = json.loads((Path(__file__).parents[1] / "configs" / "desk_study.json").read_text())
    StudyConfig.from_dict(base)
    with pytest.raises(ConfigError, match="bogus"):
        StudyConfig.from_dict({**base, "bogus": 1})
    with pytest.raises(ConfigError, match="dataset"):
        StudyConfig.from_dict({**base, "dataset": {"kind": "blobs", "colour": "red"}})
    with pytest.raises(ConfigError, match="budget"):
        StudyConfig.from_dict({**base, "batch_sizes": [24]})
