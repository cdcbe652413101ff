"""End-to-end acceptance checks, one test per criterion.

Each test records a PASS/FAIL line that is printed in the terminal summary.
The desk-scale study (criteria 7, 9, 10, 11) runs once per session and takes
several minutes on a single core.
"""

import json
import math
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import record_verdict
from kfacbench import analysis as A
from kfacbench.budget import Budget, LrSchedule, lr_multiplier, total_epochs
from kfacbench.cli import main, run_study
from kfacbench.config import StudyConfig
from kfacbench.data import gen_linreg
from kfacbench.fisher import precondition_approx, precondition_normal
from kfacbench.model import forward, init_network, loss_and_backward
from kfacbench.optim import KfacConfig, OptState, kfac_step
from kfacbench.search import Axis, GridSpec, RunSet, make_grid
from kfacbench.seeding import stream
from oracles import brute_iterations, dense_preconditioned, factors, grad_check_error, random_net, random_psd, rel_err

CONFIGS = Path(__file__).parents[1] / "configs"
DESK_EPOCH_CHECKPOINTS = "2,5,10"
DESK_ITERATION_CHECKPOINTS = "50,100,200"


def verdict(n, ok, detail):
    record_verdict(n, ok, detail)
    assert ok, f"criterion {n}: {detail}"


def test_criterion_01_gradients_match_finite_differences():
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for loss in ("mse", "softmax_cross_entropy"):
        for act in ("relu", "tanh"):
            for seed in range(6):
                net, x, y = random_net(1000 + seed, loss, act)
                worst = max(worst, grad_check_error(net, x, y))
                n += 1
    elapsed = time.perf_counter() - t0
    verdict(1, worst < 1e-5 and n >= 20 and elapsed < 60,
            f"{n} nets, worst relative error {worst:.2e} (< 1e-5), {elapsed:.1f}s")


def _factor_cases(count, floor=0.0):
    rng = stream(0, "acceptance-factors")
    cases = []
    while len(cases) < count:
        inp, out = int(rng.integers(1, 9)), int(rng.integers(1, 9))
        if inp * out > 36:
            continue
        a, g = random_psd(rng, inp, floor), random_psd(rng, out, floor)
        cases.append((a, g, rng.standard_normal((out, inp))))
    return cases


def test_criterion_02_kronecker_preconditioner_oracle():
    t0 = time.perf_counter()
    worst, n = 0.0, 0
    for a, g, grad in _factor_cases(60):
        for lam in (1e-4, 1e-2, 1.0):
            for method in ("jacobi", "lapack"):
                v = precondition_normal(factors(a, g), grad, lam, method)
                worst = max(worst, rel_err(v, dense_preconditioned(a, g, grad, lam)))
                n += 1
    elapsed = time.perf_counter() - t0
    verdict(2, worst < 1e-8 and elapsed < 60, f"{n} cases, worst relative error {worst:.2e} (< 1e-8), {elapsed:.1f}s")


def test_criterion_03_schemes_agree_without_damping():
    worst, n = 0.0, 0
    for a, g, grad in _factor_cases(30, floor=0.1):
        v1 = precondition_normal(factors(a, g), grad, 0.0, "jacobi")
        v2 = precondition_approx(factors(a, g), grad, 0.0)
        worst = max(worst, rel_err(v1, v2))
        n += 1
    verdict(3, worst < 1e-8, f"{n} cases, worst relative disagreement {worst:.2e} (< 1e-8)")


def test_criterion_04_one_step_newton():
    worst = 0.0
    seeds = range(12)
    for seed in seeds:
        ds = gen_linreg(seed, 64, 1 + seed % 8, 0.0)
        net = init_network([ds.n_features, 1], ["identity"], "mse", seed)
        cfg = KfacConfig(1.0, damping=1e-8, clip_kappa=None, fisher_mode="exact", weight_decay=0.0)
        out, cap = forward(net, ds.x)
        _, grads, cap = loss_and_backward(net, cap, out, ds.y, "exact")
        kfac_step(net, OptState.for_network(net, cfg), grads, cap, cfg, 1.0)
        design = np.hstack([ds.x, np.ones((len(ds), 1))])
        w_ls, *_ = np.linalg.lstsq(design, ds.y, rcond=None)
        worst = max(worst, float(np.max(np.abs(net.weights[0][0] - w_ls))))
    verdict(4, worst < 1e-6, f"{len(seeds)} seeds, worst distance to least squares {worst:.2e} (< 1e-6)")


def test_criterion_05_budget_and_schedule_exactness():
    checks = [
        total_epochs(Budget(100, 128), 128) == 100,
        total_epochs(Budget(100, 128), 16384) == 800,
        total_epochs(Budget(20, 128), 256) == 40,
    ]
    s = LrSchedule("scaled", (0.4, 0.8), 10.0)
    checks += [lr_multiplier(s, 39, 100) == 1.0, lr_multiplier(s, 40, 100) == 0.1,
               lr_multiplier(s, 79, 100) == 0.1, lr_multiplier(s, 80, 100) == 0.01]
    s5 = LrSchedule("scaled", (0.5,), 5.0)
    checks += [lr_multiplier(s5, 19, 40) == 1.0, lr_multiplier(s5, 20, 40) == 0.2]
    verdict(5, all(checks), f"{sum(checks)}/{len(checks)} exact integer-epoch checks")


def test_criterion_06_grid_exactness():
    spec = GridSpec("kfac", Axis("lr", 1e-3, 2.187, 8), Axis("damping", 1e-4, 0.2187, 8))
    lrs = spec.axis1.values()
    expected = [1e-3 * 3**j for j in range(8)]
    worst = max(abs(v - e) / e for v, e in zip(lrs, expected))
    ratio_err = max(abs(b / a - 3) / 3 for a, b in zip(lrs, lrs[1:]))
    grid = make_grid(spec)
    ok = worst <= 1e-12 and ratio_err <= 1e-12 and len(grid) == 64
    verdict(6, ok, f"lr axis error {worst:.1e}, step-ratio error {ratio_err:.1e}, {len(grid)} configurations")


def test_criterion_08_convex_near_linear_scaling(tmp_path):
    cfg = StudyConfig.load(CONFIGS / "linreg_scaling.json")
    cfg.output = str(tmp_path / "linreg")
    t0 = time.perf_counter()
    rs = run_study(cfg, 1)
    elapsed = time.perf_counter() - t0
    train, _, _ = cfg.materialize()
    design = np.hstack([train.x, np.ones((len(train), 1))])
    w, *_ = np.linalg.lstsq(design, train.y, rcond=None)
    floor = 0.5 * float(np.mean((train.y - design @ w) ** 2))
    target = A.Target(A.TRAIN_LOSS, 10 * floor, 0)
    k = {m: A.k_c(rs.select(batch_size=m), target) for m in rs.batch_sizes()}
    ratios = {(m, 2 * m): k[m] / k[2 * m] for m in k if 2 * m in k and k[m] and k[2 * m]}
    linear = [ratios.get((8, 16)), ratios.get((16, 32))]
    ok = all(r is not None and 1.5 <= r <= 2.5 for r in linear)
    ok = ok and ratios.get((128, 256), math.inf) < 1.5 and elapsed < 600
    detail = ", ".join(f"k({a})/k({b})={r:.2f}" for (a, b), r in sorted(ratios.items()))
    verdict(8, ok, f"{detail}; {elapsed:.0f}s")


# -- desk-scale study -------------------------------------------------------------------------


def _analyze_all(study: Path) -> int:
    codes = [
        main(["analyze", "targets", str(study)]),
        main(["analyze", "speedup", str(study), "--reference-batch", "16"]),
        main(["analyze", "heatmap", str(study)]),
        main(["analyze", "robustness", str(study), "--basis", "epochs", "--checkpoints", DESK_EPOCH_CHECKPOINTS]),
        main(["analyze", "robustness", str(study), "--basis", "iterations",
              "--checkpoints", DESK_ITERATION_CHECKPOINTS]),
    ]
    return max(codes)


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    root = tmp_path_factory.mktemp("desk")
    study = root / "p1"
    t0 = time.perf_counter()
    code = main(["grid", str(CONFIGS / "desk_study.json"), "--output", str(study), "--parallelism", "1"])
    elapsed = time.perf_counter() - t0
    analyze_code = _analyze_all(study)
    return {"root": root, "study": study, "code": code, "analyze_code": analyze_code, "elapsed": elapsed,
            "runset": RunSet.load(study)}


def _tree(d: Path) -> dict[str, bytes]:
    return {p.relative_to(d).as_posix(): p.read_bytes() for p in sorted(d.rglob("*")) if p.is_file()}


def test_criterion_07_speedup_arithmetic(desk):
    rs = desk["runset"]
    targets = A.targets_from_json((desk["study"] / "reports" / "targets.json").read_text())
    report = A.speedup_report(rs, targets, 16)
    mismatches, checked = 0, 0
    for method in rs.methods:
        for t in targets:
            def k_scan(m):
                hits = [brute_iterations(r, t) for r in rs.records if r.config["method"] == method and r.batch_size == m]
                hits = [h + 1 for h in hits if h is not None]
                return min(hits) if hits else None

            k0 = k_scan(16)
            for m in rs.batch_sizes(method):
                k = k_scan(m)
                s = k0 / k if k0 is not None and k is not None else None
                row = report.lookup(method, t.metric, t.stage_index, m)
                checked += 1
                mismatches += (row.k != k) or (row.speedup != s)
    n = len(rs.records)
    verdict(7, n >= 128 and mismatches == 0, f"{checked} speedup values over {n} runs, {mismatches} mismatches")


def test_criterion_09_desk_study(desk):
    rs, study = desk["runset"], desk["study"]
    reports = {p.name for p in (study / "reports").iterdir()}
    emitted = (desk["code"] in (0, 2) and desk["analyze_code"] == 0
               and any(r.startswith("speedup_") for r in reports)
               and any(r.startswith("heatmap_") for r in reports)
               and {"robustness_epochs.csv", "robustness_iterations.csv"} <= reports)

    best = {(m, b): max(((A.best_value(r, A.TEST_ACCURACY) or 0.0) for r in rs.select(m, b) if not r.diverged), default=0.0)
            for m in rs.methods for b in rs.batch_sizes(m)}
    accuracy_ok = all(v >= 0.95 for v in best.values())

    targets = A.targets_from_json((study / "reports" / "targets.json").read_text())
    easiest = max((t for t in targets if t.metric == A.TRAIN_LOSS), key=lambda t: t.value)
    report = A.speedup_report(rs, targets, 16)
    monotone_ok, k_desc = True, []
    for m in rs.methods:
        sizes = rs.batch_sizes(m)
        ks = [report.lookup(m, easiest.metric, easiest.stage_index, b).k for b in sizes]
        k_desc.append(f"{m} k={ks}")
        bad = [i + 1 for i, (a, b) in enumerate(zip(ks, ks[1:])) if a is None or b is None or b > a]
        if len(bad) > 1 or (bad and bad[0] != len(sizes) - 1):
            monotone_ok = False
    ratio = max(r.speedup / r.ideal for r in report.rows if r.speedup is not None)
    speedup_ok = ratio <= 1.15

    runtime_ok = desk["elapsed"] < 1800
    ok = emitted and accuracy_ok and monotone_ok and speedup_ok and runtime_ok
    verdict(9, ok, f"(a) reports={'yes' if emitted else 'no'} (b) min best acc {min(best.values()):.4f} "
                   f"(c) easiest loss target {easiest.value:.4f}: {'; '.join(k_desc)} "
                   f"(d) max s/ideal {ratio:.3f}; {len(rs.records)} runs in {desk['elapsed']:.0f}s")


def test_criterion_10_determinism(desk):
    rerun = desk["root"] / "p4"
    code = main(["grid", str(CONFIGS / "desk_study.json"), "--output", str(rerun), "--parallelism", "4"])
    _analyze_all(rerun)
    a, b = _tree(desk["study"]), _tree(rerun)
    differing = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    verdict(10, code == desk["code"] and not differing,
            f"{len(a)} files compared between parallelism 1 and 4, {len(differing)} differ")


def test_criterion_11_robustness_trend(desk):
    rows = json.loads((desk["study"] / "reports" / "robustness_epochs.json").read_text())
    final = max(int(c) for c in DESK_EPOCH_CHECKPOINTS.split(","))
    med = {(r["method"], r["batch_size"]): r["accuracy"]["median"] for r in rows if r["checkpoint"] == final}
    methods = sorted({m for m, _ in med})
    ok = all(med[(m, 1024)] <= med[(m, 16)] for m in methods)
    detail = "; ".join(f"{m}: median best acc b16={med[(m, 16)]:.4f} b1024={med[(m, 1024)]:.4f}" for m in methods)
    verdict(11, ok, f"epoch {final}: {detail}")
