"""Command-line entry point.

Every subcommand reads the experiment config, writes its artifacts under
``--out``, and prints a one-line JSON summary. Failures exit with status 2
and a single ``error: {...}`` JSON line on stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from ..data import export_synthetic, ingest_external_synthetic, dsd_from_samples
from ..models import Model, load_checkpoint, save_checkpoint
from ..train import evaluate
from .config import dump_config, load_config
from .experiments import (
    PROCEDURE_SPECS,
    Experiment,
    run_ablation_table5,
    run_ablation_table6,
    run_matrix,
)
from .pca import export_pca, write_projection
from .report import ReportTable


def _emit(payload: dict) -> None:
    print(json.dumps(payload, sort_keys=True))


def _experiment(args) -> Experiment:
    return Experiment(args.cfg, args.threads, encoder_dir=Path(args.out) / "encoders")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> dict:
    exp = Experiment(args.cfg, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arrays = {}
    for name, ds in [("pretrain", exp.generated.pretrain), *exp.splits.__dict__.items()]:
        arrays[f"{name}_x"] = ds.features
        arrays[f"{name}_y"] = ds.labels
    np.savez(out / "data.npz", **arrays)
    dsd = exp.dsd(args.cfg.mixer.kind, args.cfg.seeds[0])
    export_synthetic(out / "synthetic.txt", dsd.synthetics)
    return {"data": str(out / "data.npz"), "synthetic": str(out / "synthetic.txt"), "n_synthetic": dsd.n_synthetic}


def cmd_pretrain(args) -> dict:
    exp = _experiment(args)
    written = {}
    for which in ("teacher", "student"):
        exp.encoder(which)
        written[which] = str(exp.encoder_dir / f"{which}.npz")
    return written


def _single(args, procedure: str) -> dict:
    exp = _experiment(args)
    spec = PROCEDURE_SPECS[procedure]
    seed = args.run_seed if args.run_seed is not None else args.cfg.seeds[0]
    teacher_seed = args.teacher_seed if args.teacher_seed is not None else args.cfg.teacher_seeds[0]
    if spec.model == "teacher":
        seed = teacher_seed
    if getattr(args, "external", None):
        samples = ingest_external_synthetic(args.external, args.cfg.task.d_in)
        dsd = dsd_from_samples(exp.splits.train, samples)
        exp.register_dsd("external", seed, dsd)
        spec = replace(spec, name=f"{procedure}+external", mixer="external", kd_synthetic=True)
    model, log = exp.train(spec, seed, teacher_seed)
    out = Path(args.out)
    stem = f"{spec.name}-{seed}"
    save_checkpoint(model, out / f"{stem}.npz")
    log.write(out / f"{stem}.metrics.jsonl")
    return {
        "procedure": spec.name,
        "seed": seed,
        "test_accuracy": evaluate(model, exp.splits.test),
        "checkpoint": str(out / f"{stem}.npz"),
        "synthetic_in_task": log.synthetic_in_task,
    }


def cmd_probe(args) -> dict:
    return _single(args, f"probe-{args.which}")


def cmd_finetune(args) -> dict:
    return _single(args, f"finetune-{args.which}")


def cmd_distill(args) -> dict:
    procedure = "distill+sd" if args.synthetic else "distill"
    return _single(args, procedure)


def cmd_grid(args) -> dict:
    exp = _experiment(args)
    if args.procedure not in args.cfg.grids:
        raise KeyError(f"no grid configured for {args.procedure!r}")
    outcome = exp.grid(args.procedure)
    return {
        "procedure": args.procedure,
        "best_lr": outcome.best[0],
        "best_weight_decay": outcome.best[1],
        "scores": [[lr, wd, acc] for (lr, wd), acc in sorted(outcome.scores.items())],
        "failures": [[lr, wd, msg] for (lr, wd), msg in sorted(outcome.failures.items())],
    }


def _write_tables(out: Path, tables: dict[str, ReportTable]) -> dict:
    written = {}
    for stem, table in tables.items():
        written[stem] = [str(p) for p in table.write(out, stem)]
    return written


def cmd_matrix(args) -> dict:
    exp = _experiment(args)
    tables = {"matrix": run_matrix(args.cfg, args.threads, exp)}
    if "ablations" in args.cfg.procedures:
        tables["table5"] = run_ablation_table5(args.cfg, args.threads, exp)
        tables["table6"] = run_ablation_table6(args.cfg, args.threads, exp)
    dump_config(args.cfg, Path(args.out) / "config.resolved.yaml")
    return _write_tables(Path(args.out), tables)


def cmd_ablation(args) -> dict:
    exp = _experiment(args)
    runner = run_ablation_table5 if args.table == "table5" else run_ablation_table6
    return _write_tables(Path(args.out), {args.table: runner(args.cfg, args.threads, exp)})


def cmd_pca_export(args) -> dict:
    exp = _experiment(args)
    if args.model:
        model = load_checkpoint(args.model)
        if not isinstance(model, Model):
            raise TypeError(f"{args.model} holds a bare encoder, not a model")
    else:
        model = exp.teacher("probed", args.cfg.teacher_seeds[0])
    classes = [int(c) for c in args.classes.split(",")] if args.classes else list(range(args.cfg.task.num_classes))
    data = exp.dsd(args.cfg.mixer.kind, args.cfg.seeds[0]) if args.synthetic else exp.splits.train
    rows, fit = export_pca(model, data, classes, args.k, include_synthetic=args.synthetic)
    path = write_projection(rows, Path(args.out) / "pca.csv")
    return {
        "projection": str(path),
        "rows": len(rows),
        "explained_variance_ratio": [float(r) for r in fit.explained_variance_ratio],
    }


def cmd_report(args) -> dict:
    table = ReportTable.from_json(Path(args.input).read_text())
    sys.stdout.write(table.to_text())
    stem = Path(args.input).stem
    return _write_tables(Path(args.out), {stem: table})


# ---------------------------------------------------------------------------
# parser


GLOBAL_DEFAULTS = {"config": None, "seed": None, "out": "runs", "threads": 1, "strict_batches": False}


def build_parser() -> argparse.ArgumentParser:
    # SUPPRESS lets the global flags appear before or after the subcommand
    common = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    common.add_argument("--config", help="YAML experiment config (defaults built in)")
    common.add_argument("--seed", type=int, help="base seed for data generation and pretraining")
    common.add_argument("--out", help="output directory (default: runs)")
    common.add_argument("--threads", type=int, help="worker threads; 1 (default) is fully deterministic")
    common.add_argument("--strict-batches", action="store_true", help="exact half/half original-synthetic batches")

    parser = argparse.ArgumentParser(prog="tskd", description="Task-specific distillation experiments.", parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=fn)
        return p

    add("gen-data", cmd_gen_data, "generate the task and export the synthetic set")
    add("pretrain", cmd_pretrain, "pretrain teacher and student encoders")
    for name, fn, help_ in (
        ("probe", cmd_probe, "train a head on the frozen pretrained encoder"),
        ("finetune", cmd_finetune, "train encoder and head together on the task"),
    ):
        p = add(name, fn, help_)
        p.add_argument("--which", choices=("teacher", "student"), default="student")
        p.add_argument("--run-seed", type=int)
        p.add_argument("--teacher-seed", type=int)
    p = add("distill", cmd_distill, "distill the probed teacher into the student")
    p.add_argument("--synthetic", action="store_true", help="add built-in mixer synthetics to the distillation loss")
    p.add_argument("--external", help="file of externally generated synthetic samples")
    p.add_argument("--run-seed", type=int)
    p.add_argument("--teacher-seed", type=int)
    p = add("grid", cmd_grid, "grid-search lr and weight decay on the validation split")
    p.add_argument("--procedure", required=True)
    add("matrix", cmd_matrix, "run the configured procedures and write the report")
    p = add("ablation", cmd_ablation, "run an ablation table")
    p.add_argument("table", choices=("table5", "table6"))
    p = add("pca-export", cmd_pca_export, "project embeddings onto principal components")
    p.add_argument("--model", help="model checkpoint (default: probed teacher)")
    p.add_argument("--classes", help="comma-separated class subset")
    p.add_argument("--k", type=int, default=2)
    p.add_argument("--synthetic", action="store_true")
    p = add("report", cmd_report, "re-render a saved report")
    p.add_argument("--input", required=True, help="report JSON written by matrix or ablation")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    for name, default in GLOBAL_DEFAULTS.items():
        if not hasattr(args, name):
            setattr(args, name, default)
    try:
        if args.threads < 1:
            raise ValueError("--threads must be >= 1")
        if args.command != "report":
            cfg = load_config(args.config)
            if args.seed is not None:
                cfg.seed = args.seed
            if args.strict_batches:
                cfg.strict_batches = True
            cfg.validate()
            args.cfg = cfg
        # each run stays single-threaded inside BLAS; parallelism happens across runs
        with threadpool_limits(limits=1):
            result = args.func(args)
    except Exception as exc:  # noqa: BLE001 - reported as a machine-readable line
        print("error: " + json.dumps({"type": type(exc).__name__, "message": str(exc)}, sort_keys=True), file=sys.stderr)
        return 2
    _emit({"command": args.command, **result})
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
