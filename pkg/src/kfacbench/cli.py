"""Command-line entry point: ``kfacbench {generate-data,run,grid,analyze}``.

Exit codes: 0 success, 1 usage or configuration error, 2 finished with
diverged runs.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import analysis
from .budget import Budget, BudgetError, LrSchedule, total_epochs
from .config import DatasetSpec, NetworkSpec, StudyConfig
from .data import save_csv, train_test_split
from .linalg import NumericalError
from .optim import ConfigError, optimizer_from_dict, run_config, train_run
from .search import GridError, ManifestMismatch, RunSet, atomic_write, run_grid
from .seeding import stable_hash

EXIT_OK, EXIT_ERROR, EXIT_DIVERGED = 0, 1, 2
THREADS_ENV = "KFACBENCH_THREADS"

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def _floats(text: str) -> list[float]:
    return [float(t) for t in text.split(",") if t.strip()]


def _ints(text: str) -> list[int]:
    return [int(t) for t in text.split(",") if t.strip()]


def _add_dataset_args(p):
    g = p.add_argument_group("dataset")
    g.add_argument("--dataset", choices=["blobs", "linreg", "csv"], default="blobs")
    g.add_argument("--data-seed", type=int, default=0)
    g.add_argument("--n", type=int, default=4096)
    g.add_argument("--d", type=int, default=10)
    g.add_argument("--k", type=int, default=4)
    g.add_argument("--spread", type=float, default=0.15)
    g.add_argument("--noise-sd", type=float, default=0.1)
    g.add_argument("--data-path")


def _dataset_spec(args) -> DatasetSpec:
    task = "regression" if args.dataset == "linreg" else "classification"
    return DatasetSpec(args.dataset, args.data_seed, args.n, args.d, args.k, args.spread, args.noise_sd,
                       args.data_path, task)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kfacbench", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    gen = sub.add_parser("generate-data", help="write a synthetic dataset as CSV")
    _add_dataset_args(gen)
    gen.add_argument("--out", required=True)

    run = sub.add_parser("run", help="train a single configuration and write run.json")
    run.add_argument("--optimizer", choices=["sgd", "kfac"], required=True)
    run.add_argument("--lr", type=float, required=True)
    run.add_argument("--momentum", type=float, default=0.9)
    run.add_argument("--damping", type=float, default=1e-3)
    run.add_argument("--weight-decay", type=float, default=5e-4)
    run.add_argument("--decay", type=float, default=0.9, help="K-FAC statistics decay")
    run.add_argument("--clip-kappa", type=float, default=0.1)
    run.add_argument("--no-clip", action="store_true")
    run.add_argument("--scheme", choices=["normal", "approximated"], default="normal")
    run.add_argument("--fisher-mode", choices=["sampled", "empirical", "exact"], default="sampled")
    run.add_argument("--t-inv", type=int, default=1)
    run.add_argument("--batch-size", type=int, default=128)
    _add_dataset_args(run)
    run.add_argument("--hidden", type=_ints, default=[32, 32])
    run.add_argument("--activation", choices=["relu", "tanh"], default="relu")
    run.add_argument("--budget-mode", choices=["adjusted", "fixed_epochs", "fixed_iterations"], default="fixed_epochs")
    run.add_argument("--base-epochs", type=int, default=10)
    run.add_argument("--ref-batch", type=int, default=128)
    run.add_argument("--fixed-value", type=int, default=10)
    run.add_argument("--schedule", choices=["scaled", "fixed"], default="scaled")
    run.add_argument("--decay-points", type=_floats, default=[0.4, 0.8])
    run.add_argument("--decay-factor", type=float, default=10.0)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--record-every", type=int, default=1)
    run.add_argument("--train-loss-eval", choices=["batch", "full"], default="batch")
    run.add_argument("--keep-last-batch", action="store_true", help="train on the final partial batch")
    run.add_argument("--spectra", help="write the final Fisher factor spectra (K-FAC only) to this JSON file")
    run.add_argument("--out", default="run.json")

    grid = sub.add_parser("grid", help="run a hyperparameter study from a JSON config")
    grid.add_argument("config")
    grid.add_argument("--output")
    grid.add_argument("--parallelism", type=int)
    grid.add_argument("--replicas", type=int)
    grid.add_argument("--base-seed", type=int)

    an = sub.add_parser("analyze", help="derive reports from a finished study")
    asub = an.add_subparsers(dest="report", required=True, parser_class=_Parser)

    def common(p):
        p.add_argument("study")
        p.add_argument("--out", help="report directory (default: <study>/reports)")
        p.add_argument("--allow-partial", action="store_true")

    p = asub.add_parser("targets")
    common(p)
    p = asub.add_parser("speedup")
    common(p)
    p.add_argument("--reference-batch", type=int)
    p.add_argument("--targets", help="targets JSON (default: auto-selected)")
    p = asub.add_parser("heatmap")
    common(p)
    p.add_argument("--batch", type=int, action="append")
    p.add_argument("--metric", choices=list(analysis.METRICS), default=analysis.TEST_ACCURACY)
    p.add_argument("--method")
    p = asub.add_parser("robustness")
    common(p)
    p.add_argument("--basis", choices=["epochs", "iterations"], default="epochs")
    p.add_argument("--checkpoints", type=_ints, required=True)
    return parser


def cmd_generate(args) -> int:
    ds = _dataset_spec(args).build()
    save_csv(ds, args.out)
    print(f"wrote {len(ds)} samples to {args.out}")
    return EXIT_OK


def cmd_run(args) -> int:
    if args.optimizer == "sgd":
        hyper = {"lr": args.lr, "momentum": args.momentum, "weight_decay": args.weight_decay}
    else:
        hyper = {
            "lr": args.lr,
            "damping": args.damping,
            "decay": args.decay,
            "clip_kappa": None if args.no_clip else args.clip_kappa,
            "scheme": args.scheme,
            "fisher_mode": args.fisher_mode,
            "t_inv": args.t_inv,
            "weight_decay": args.weight_decay,
        }
    opt = optimizer_from_dict(args.optimizer, hyper)
    try:
        budget = Budget(args.base_epochs, args.ref_batch, args.budget_mode, args.fixed_value)
        schedule = LrSchedule(args.schedule, tuple(args.decay_points), args.decay_factor)
    except BudgetError as exc:
        raise ConfigError(f"budget: {exc}") from exc
    ds = _dataset_spec(args).build()
    net = NetworkSpec(tuple(args.hidden), args.activation).build(ds, args.seed)
    train, test = train_test_split(ds, args.data_seed)
    if args.batch_size < 1 or args.batch_size > len(train):
        raise ConfigError(f"batch_size: must be in [1, {len(train)}], got {args.batch_size}")
    try:
        total_epochs(budget, args.batch_size, len(train))
    except BudgetError as exc:
        raise ConfigError(f"budget: {exc}") from exc

    spectra = {}

    def on_finish(_net, state):
        if state.kfac is not None and state.kfac.initialized:
            spectra["layers"] = state.kfac.spectra()

    cfg = run_config(opt, args.batch_size, budget, schedule)
    cfg["method"] = opt.name
    cfg["hash"] = stable_hash(cfg)
    cfg["seed"] = args.seed
    record = train_run(net, train, opt, args.batch_size, budget, schedule, args.seed, test=test,
                       record_every=args.record_every, drop_last=not args.keep_last_batch,
                       train_loss_eval=args.train_loss_eval, config=cfg, on_finish=on_finish)
    atomic_write(Path(args.out), record.to_json())
    if args.spectra and spectra:
        atomic_write(Path(args.spectra), json.dumps(spectra["layers"], indent=1, sort_keys=True) + "\n")
    print(f"{record.status}: {record.n_iterations} iterations, wrote {args.out}")
    return EXIT_DIVERGED if record.diverged else EXIT_OK


def _parallelism(flag: int | None, configured: int | None) -> int:
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    env = os.environ.get(THREADS_ENV)
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise ConfigError(f"{THREADS_ENV}: not an integer ({env!r})") from exc
    return 1


def cmd_grid(args) -> int:
    cfg = StudyConfig.load(args.config)
    if args.output:
        cfg.output = args.output
    if args.replicas is not None:
        cfg.replicas = args.replicas
    if args.base_seed is not None:
        cfg.base_seed = args.base_seed
    cfg.validate()
    par = _parallelism(args.parallelism, cfg.parallelism)
    if par < 1:
        raise ConfigError("parallelism: must be at least 1")
    rs = run_study(cfg, par)
    n_div = sum(r.diverged for r in rs.records)
    print(f"study {rs.study_id}: {len(rs.records)} runs ({n_div} diverged) in {cfg.output}")
    return EXIT_DIVERGED if n_div else EXIT_OK


def run_study(cfg: StudyConfig, parallelism: int = 1) -> RunSet:
    train, test, net = cfg.materialize()
    return run_grid(cfg.grids, cfg.batch_sizes, train, net, cfg.budget, cfg.schedule, cfg.base_seed, parallelism,
                    test=test, study_dir=cfg.output, record_every=cfg.record_every, replicas=cfg.replicas,
                    drop_last=cfg.drop_last, train_loss_eval=cfg.train_loss_eval,
                    extra_manifest=cfg.manifest_extra())


def _report_dir(args) -> Path:
    return Path(args.out) if args.out else Path(args.study) / "reports"


def cmd_analyze(args) -> int:
    if not Path(args.study, "manifest.json").is_file():
        print(f"kfacbench: no study at {args.study}", file=sys.stderr)
        return EXIT_ERROR
    rs = RunSet.load(args.study, allow_partial=args.allow_partial)
    out = _report_dir(args)
    written = write_reports(rs, args.report, out, args)
    for name in written:
        print(out / name)
    return EXIT_OK


def write_reports(rs: RunSet, report: str, out: Path, args) -> list[str]:
    files: dict[str, str] = {}
    if report == "targets":
        targets = analysis.select_targets(rs)
        for t in targets:
            p = t.provenance
            print(f"{t.metric} stage {t.stage_index}: {t.value!r} "
                  f"(from {p['method']} batch {p['batch_size']} run {p['config_hash']}, "
                  f"{p['start']!r} -> {p['end']!r})")
        files["targets.json"] = analysis.targets_json(targets)
    elif report == "speedup":
        if args.targets:
            targets = analysis.targets_from_json(Path(args.targets).read_text())
        else:
            targets = analysis.select_targets(rs)
        m0 = args.reference_batch if args.reference_batch is not None else min(rs.batch_sizes())
        rep = analysis.speedup_report(rs, targets, m0)
        files.update(analysis.speedup_csvs(rep))
        files["speedup.json"] = analysis.to_json(rep)
        files["targets.json"] = analysis.targets_json(targets)
    elif report == "heatmap":
        sizes = args.batch or rs.batch_sizes(args.method)
        for b in sizes:
            cells = analysis.heatmap(rs, b, args.metric, args.method)
            files[f"heatmap_b{b}.csv"] = analysis.heatmap_csv(cells, args.metric)
    elif report == "robustness":
        rows = analysis.robustness(rs, args.checkpoints, args.basis)
        files[f"robustness_{args.basis}.csv"] = analysis.robustness_csv(rows)
        files[f"robustness_{args.basis}.json"] = analysis.to_json(rows)
    for name, text in files.items():
        atomic_write(out / name, text)
    return sorted(files)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    handlers = {"generate-data": cmd_generate, "run": cmd_run, "grid": cmd_grid, "analyze": cmd_analyze}
    try:
        return handlers[args.command](args)
    except (ConfigError, GridError, BudgetError) as exc:
        print(f"kfacbench: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except ManifestMismatch as exc:
        print(f"kfacbench: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (FileNotFoundError, RuntimeError, NumericalError, ValueError) as exc:
        print(f"kfacbench: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
