"""Command-line entry point.

Subcommands: pretrain, tune, coldstart, export, report, selftest. Exit codes:
0 ok, 1 runtime error, 2 usage/config error. PCL_SEED overrides the config
seed. Run directories are never overwritten without --force, and every run
directory records its resolved config plus a content hash of its dataset.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import reports
from .backbone import Backbone, BackboneConfig
from .checkpoint import load_tensors, save_tensors
from .config import RunConfig, load_config
from .continual import (POLICIES, ContinualState, TaskRecord, coldstart_runs,
                        export_user_representations, forgetting_audit,
                        freeze_after_pretrain, make_context, pretrain_backbone,
                        run_ablation, run_sequence, validate_order)
from .data import (Dataset, SynthTask, SyntheticSpec, dataset_fingerprint,
                   leave_one_out, load_dataset, standard_suite, synth_generate,
                   write_dataset)
from .errors import ConfigError, PclError
from .prompts import PromptBankEntry
from .rng import Rng
from .selftest import run_selftest


def _parse_set(items: list[str]) -> dict:
    out = {}
    for item in items or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, raw = item.split("=", 1)
        try:
            out[key] = json.loads(raw)
        except json.JSONDecodeError:
            out[key] = raw
    return out


def _prepare_run_dir(path: str, force: bool) -> Path:
    run = Path(path)
    if run.exists() and any(run.iterdir()) and not force:
        raise ConfigError(f"run directory {run} exists; pass --force to overwrite")
    run.mkdir(parents=True, exist_ok=True)
    return run


def _synthetic_spec(cfg: RunConfig) -> SyntheticSpec:
    raw = dict(cfg.synthetic)
    preset = raw.pop("preset", None)
    if preset == "standard":
        return standard_suite(seed=raw.get("seed", cfg.seed),
                              **{k: v for k, v in raw.items() if k != "seed"})
    if preset is not None:
        raise ConfigError(f"unknown synthetic preset {preset!r}")
    tasks = [SynthTask(**t) for t in raw.pop("tasks")]
    return SyntheticSpec(tasks=tasks, **raw)


def _resolve_dataset(cfg: RunConfig, run_dir: Path) -> tuple[Dataset, Path]:
    if cfg.data_dir:
        data_dir = Path(cfg.data_dir)
        if not data_dir.exists():
            raise ConfigError(f"dataset directory not found: {data_dir}")
        return load_dataset(data_dir), data_dir
    if cfg.synthetic:
        data_dir = run_dir / "dataset"
        write_dataset(synth_generate(_synthetic_spec(cfg)), data_dir)
        return load_dataset(data_dir), data_dir
    raise ConfigError("config needs either data_dir or a synthetic block")


def _write_metrics(run_dir: Path, records: list[TaskRecord], protocol: str) -> None:
    (run_dir / "metrics.csv").write_text(reports.metrics_csv(records, protocol))
    payload = [{"task": r.task_id, "order_index": r.order_index, "metrics": r.metrics,
                "val_metric": r.val_metric, "epochs_run": r.epochs_run,
                "train_losses": r.train_losses, "val_curve": r.val_curve}
               for r in records]
    (run_dir / "metrics.json").write_text(json.dumps(payload, indent=1) + "\n")
    (run_dir / "timing.txt").write_text(reports.timing_txt(records))


def _load_records(run_dir: Path) -> list[TaskRecord]:
    payload = json.loads((run_dir / "metrics.json").read_text())
    return [TaskRecord(r["task"], r["order_index"], r["metrics"], r["val_metric"],
                       r["epochs_run"], r.get("train_losses", []), r.get("val_curve", []))
            for r in payload]


def cmd_pretrain(args) -> int:
    cfg = load_config(args.config, _parse_set(args.set))
    run_dir = _prepare_run_dir(args.out, args.force)
    dataset, data_dir = _resolve_dataset(cfg, run_dir)
    backbone, record = pretrain_backbone(cfg, dataset)
    freeze_after_pretrain(backbone)
    save_tensors(run_dir / "backbone.pclt", backbone.params.state_arrays())
    (run_dir / "config.json").write_text(cfg.to_json())
    (run_dir / "dataset.sha256").write_text(dataset_fingerprint(data_dir) + "\n")
    _write_metrics(run_dir, [record], cfg.protocol)
    (run_dir / "report.txt").write_text(
        reports.human_table([record], cfg.protocol, "pretraining (task 1)"))
    print(f"pretrained in {record.epochs_run} epochs; "
          f"test hr@5={record.metrics['hr@5']:.4f} hr@10={record.metrics['hr@10']:.4f}")
    print(f"run directory: {run_dir}")
    return 0


def _load_pretrained(pretrain_dir: Path, cfg: RunConfig) -> tuple[Dataset, Backbone, TaskRecord, Path]:
    if not pretrain_dir.exists():
        raise ConfigError(f"pretrain run directory not found: {pretrain_dir}")
    base_cfg = load_config(pretrain_dir / "config.json")
    data_dir = Path(base_cfg.data_dir) if base_cfg.data_dir else pretrain_dir / "dataset"
    if not data_dir.exists():
        raise ConfigError(f"dataset directory not found: {data_dir}")
    dataset = load_dataset(data_dir)
    arrays = load_tensors(pretrain_dir / "backbone.pclt")
    bb_cfg = BackboneConfig(dataset.num_items, cfg.d, cfg.n, cfg.blocks, cfg.heads,
                            cfg.dropout)
    backbone = Backbone(bb_cfg, Rng(0))
    backbone.params.load_arrays(arrays)
    backbone.freeze()
    t1_records = [r for r in _load_records(pretrain_dir) if r.task_id == 1]
    return dataset, backbone, t1_records[0], data_dir


def _tune_config(args) -> RunConfig:
    """Tune inherits the pretrain run's config, then applies overrides."""
    pretrain_dir = Path(args.pretrain)
    if not (pretrain_dir / "config.json").exists():
        raise ConfigError(f"no config.json under {pretrain_dir}")
    base = json.loads((pretrain_dir / "config.json").read_text())
    overrides = _parse_set(args.set)
    if getattr(args, "policy", None):
        overrides["policy"] = args.policy
    return load_config(args.config, overrides, base=base)


def _save_bank(run_dir: Path, state: ContinualState) -> None:
    tensors: dict[str, np.ndarray] = {}
    for tid in sorted(state.bank):
        entry = state.bank[tid]
        pre = f"task{tid}"
        if entry.prompt is not None:
            tensors[f"{pre}.prompt"] = entry.prompt
        if entry.ctx_prompt is not None:
            tensors[f"{pre}.ctx_prompt"] = entry.ctx_prompt
        tensors[f"{pre}.lambda"] = np.asarray(entry.lam, dtype=np.float32)
        if entry.adapter:
            for name, arr in entry.adapter.items():
                tensors[f"{pre}.adapter.{name}"] = arr
        if entry.attr_table is not None:
            tensors[f"{pre}.attr_table"] = entry.attr_table
        if entry.cold_table is not None:
            tensors[f"{pre}.cold_table"] = entry.cold_table
    save_tensors(run_dir / "bank.pclt", tensors)


def _load_bank(path: Path, t: int) -> dict[int, PromptBankEntry]:
    arrays = load_tensors(path)
    by_task: dict[int, dict[str, np.ndarray]] = {}
    for name, arr in arrays.items():
        pre, rest = name.split(".", 1)
        by_task.setdefault(int(pre[4:]), {})[rest] = arr
    bank = {}
    for tid, parts in by_task.items():
        adapter = {k.split(".", 1)[1]: v for k, v in parts.items()
                   if k.startswith("adapter.")} or None
        bank[tid] = PromptBankEntry(
            tid, parts.get("prompt"), parts.get("ctx_prompt"),
            float(parts["lambda"]), t, adapter, parts.get("attr_table"),
            parts.get("cold_table"))
    return bank


def cmd_tune(args) -> int:
    cfg = _tune_config(args)
    run_dir = _prepare_run_dir(args.out, args.force)
    pretrain_dir = Path(args.pretrain)
    dataset, backbone, t1_record, data_dir = _load_pretrained(pretrain_dir, cfg)
    policy = POLICIES[cfg.policy]
    pretrained = ContinualState(backbone, leave_one_out(dataset, cfg.n), policy,
                                t1_record=t1_record)

    (run_dir / "config.json").write_text(cfg.to_json())
    (run_dir / "pretrain_ref").write_text(str(pretrain_dir.resolve()) + "\n")
    (run_dir / "dataset.sha256").write_text(dataset_fingerprint(data_dir) + "\n")

    if args.ablation:
        variants = ("full", "no_ctx", "no_plm") if args.ablation == "all" else (args.ablation,)
        results = run_ablation(cfg, dataset, pretrained, variants)
        (run_dir / "ablation.csv").write_text(reports.ablation_csv(results, cfg.protocol))
        lines = []
        for variant, records in results.items():
            lines.append(reports.human_table(records, cfg.protocol, f"variant: {variant}"))
        (run_dir / "report.txt").write_text("\n".join(lines))
        print(f"ablation over {list(results)} written to {run_dir}")
        return 0

    if args.order:
        order = [int(x) for x in args.order.split(",")]
    else:
        order = sorted(t.id for t in dataset.downstream_tasks())
    validate_order(dataset, order)
    state, records = run_sequence(cfg, dataset, pretrained, order)
    ctx = make_context(cfg, dataset)
    audit = forgetting_audit(state, ctx)

    _save_bank(run_dir, state)
    _write_metrics(run_dir, records, cfg.protocol)
    (run_dir / "params.csv").write_text(reports.params_csv(records))
    (run_dir / "audit.csv").write_text(reports.audit_csv(audit))
    (run_dir / "report.txt").write_text(
        reports.human_table(records, cfg.protocol, f"tune order {order} policy {cfg.policy}"))
    worst = max((abs(r["delta"]) for r in audit), default=0.0)
    print(f"tuned {len(records)} tasks under {cfg.policy}; "
          f"max |forgetting delta| = {worst:.6f}")
    print(f"run directory: {run_dir}")
    return 0


def cmd_coldstart(args) -> int:
    cfg = load_config(args.config, _parse_set(args.set))
    run_dir = _prepare_run_dir(args.out, args.force)
    dataset, data_dir = _resolve_dataset(cfg, run_dir)
    curves = coldstart_runs(cfg, dataset, args.fraction)
    (run_dir / "config.json").write_text(cfg.to_json())
    (run_dir / "dataset.sha256").write_text(dataset_fingerprint(data_dir) + "\n")
    (run_dir / "curves.csv").write_text(reports.curves_csv(curves))
    lines = [reports.human_table(records, cfg.protocol, f"cold-start variant: {variant}")
             for variant, records in curves.items()]
    (run_dir / "report.txt").write_text("\n".join(lines))
    print(f"cold-start comparison (fraction {args.fraction}) written to {run_dir}")
    return 0


def cmd_export(args) -> int:
    tune_dir = Path(args.state)
    if not tune_dir.exists():
        raise ConfigError(f"tune run directory not found: {tune_dir}")
    cfg = load_config(tune_dir / "config.json")
    pretrain_dir = Path((tune_dir / "pretrain_ref").read_text().strip())
    dataset, backbone, t1_record, _ = _load_pretrained(pretrain_dir, cfg)
    run_dir = _prepare_run_dir(args.out, args.force)
    state = ContinualState(backbone, leave_one_out(dataset, cfg.n), POLICIES[cfg.policy],
                           t1_record=t1_record)
    state.bank = _load_bank(tune_dir / "bank.pclt", cfg.t)
    ctx = make_context(cfg, dataset)
    task_ids = [int(x) for x in args.tasks.split(",")]
    features, manifest = export_user_representations(state, ctx, task_ids)
    save_tensors(run_dir / "features.pclt", {"features": features})
    (run_dir / "features.manifest").write_text(manifest)
    print(f"exported {features.shape[0]}x{features.shape[1]} features to {run_dir}")
    return 0


def cmd_report(args) -> int:
    merged = ["run,task,metric,protocol,value,order_index"]
    per_run: dict[str, list[TaskRecord]] = {}
    for d in args.run_dirs:
        run = Path(d)
        path = run / "metrics.csv"
        if not path.exists():
            print(f"warning: {path} missing, skipped", file=sys.stderr)
            continue
        records = _load_records(run)
        per_run[run.name] = records
        for line in path.read_text().splitlines()[1:]:
            merged.append(f"{run.name},{line}")
    if not per_run:
        raise ConfigError("no readable run directories")
    text = "\n".join(merged) + "\n"
    spread = "\n".join(reports.spread_rows(per_run)) + "\n"
    if args.out:
        out = _prepare_run_dir(args.out, args.force)
        (out / "merged.csv").write_text(text)
        (out / "spread.csv").write_text(spread)
        print(f"merged report written to {out}")
    else:
        print(text)
        print(spread)
    return 0


def cmd_selftest(args) -> int:
    cfg = load_config(args.config, _parse_set(args.set)) if args.config else RunConfig()
    return 0 if run_selftest(cfg) else 1


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="promptcl",
        description="Prompt-tuned continual learning on a frozen next-item backbone")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=False):
        p.add_argument("--config", required=config_required, help="JSON config file")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a config field")
        p.add_argument("--force", action="store_true",
                       help="allow writing into a non-empty run directory")

    p = sub.add_parser("pretrain", help="train and freeze the next-item backbone")
    add_common(p)
    p.add_argument("--out", required=True, help="run directory")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("tune", help="run the downstream task stream")
    add_common(p)
    p.add_argument("--pretrain", required=True, help="pretrain run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--order", help="comma-separated downstream task ids")
    p.add_argument("--policy", choices=sorted(POLICIES))
    p.add_argument("--ablation", choices=["all", "full", "no_ctx", "no_plm"])
    p.set_defaults(fn=cmd_tune)

    p = sub.add_parser("coldstart", help="paired cold-start runs with/without prompts")
    add_common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--fraction", type=float, required=True)
    p.set_defaults(fn=cmd_coldstart)

    p = sub.add_parser("export", help="export universal user representations")
    add_common(p)
    p.add_argument("--state", required=True, help="tune run directory")
    p.add_argument("--out", required=True)
    p.add_argument("--tasks", required=True, help="comma-separated task ids")
    p.set_defaults(fn=cmd_export)

    p = sub.add_parser("report", help="merge metric tables from run directories")
    p.add_argument("run_dirs", nargs="+")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("selftest", help="run the invariant suite")
    add_common(p)
    p.set_defaults(fn=cmd_selftest)

    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return 2 if e.code not in (0, None) else 0
    try:
        return args.fn(args)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 2
    except PclError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
