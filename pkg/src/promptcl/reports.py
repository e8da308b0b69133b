"""Deterministic report emission.

Machine-readable metric rows use the schema
`task,metric,protocol,value,order_index` (comma-separated, one per line,
values printed with 6 decimals). Wall-clock timings are written separately so
the metric files stay byte-identical across reruns.
"""

from __future__ import annotations

from .continual import TaskRecord


def metric_rows(records: list[TaskRecord], protocol: str) -> list[str]:
    rows = []
    for r in records:
        for name in sorted(r.metrics):
            proto = protocol if name.startswith("hr") else "-"
            rows.append(f"{r.task_id},{name},{proto},{r.metrics[name]:.6f},{r.order_index}")
    return rows


def metrics_csv(records: list[TaskRecord], protocol: str) -> str:
    return "\n".join(["task,metric,protocol,value,order_index"]
                     + metric_rows(records, protocol)) + "\n"


def params_csv(records: list[TaskRecord]) -> str:
    rows = ["task,component,count"]
    for r in records:
        for name in sorted(r.trainable_counts):
            rows.append(f"{r.task_id},{name},{r.trainable_counts[name]}")
    return "\n".join(rows) + "\n"


def audit_csv(rows: list[dict]) -> str:
    out = ["task,metric,recorded,current,delta"]
    for r in rows:
        out.append(f"{r['task']},{r['metric']},{r['recorded']:.6f},"
                   f"{r['current']:.6f},{r['delta']:.6f}")
    return "\n".join(out) + "\n"


def curves_csv(curves: dict[str, list[TaskRecord]]) -> str:
    """Per-epoch validation curves, one row per (variant, task, epoch)."""
    rows = ["variant,task,epoch,value"]
    for variant in sorted(curves):
        for record in curves[variant]:
            for epoch, value in enumerate(record.val_curve):
                rows.append(f"{variant},{record.task_id},{epoch},{value:.6f}")
    return "\n".join(rows) + "\n"


def ablation_csv(results: dict[str, list[TaskRecord]], protocol: str) -> str:
    rows = ["variant,task,metric,protocol,value"]
    for variant in sorted(results):
        for r in results[variant]:
            for name in sorted(r.metrics):
                proto = protocol if name.startswith("hr") else "-"
                rows.append(f"{variant},{r.task_id},{name},{proto},{r.metrics[name]:.6f}")
    return "\n".join(rows) + "\n"


def timing_txt(records: list[TaskRecord]) -> str:
    rows = [f"task {r.task_id}: {r.seconds:.2f}s over {r.epochs_run} epochs"
            for r in records]
    return "\n".join(rows) + "\n"


def human_table(records: list[TaskRecord], protocol: str, title: str) -> str:
    lines = [title, "=" * len(title), ""]
    header = f"{'task':>4}  {'order':>5}  {'metric':<8} {'protocol':<8} {'value':>8}  {'epochs':>6}"
    lines.append(header)
    lines.append("-" * len(header))
    for r in records:
        for name in sorted(r.metrics):
            proto = protocol if name.startswith("hr") else "-"
            lines.append(f"{r.task_id:>4}  {r.order_index:>5}  {name:<8} {proto:<8} "
                         f"{r.metrics[name]:>8.4f}  {r.epochs_run:>6}")
    total = sum(sum(r.trainable_counts.values()) for r in records)
    lines += ["", f"trainable parameters across tasks: {total}"]
    return "\n".join(lines) + "\n"


def spread_rows(per_order: dict[str, list[TaskRecord]]) -> list[str]:
    """Across-order spread per task: `task,metric,best,worst,rel_spread`."""
    by_task: dict[tuple[int, str], list[float]] = {}
    for records in per_order.values():
        for r in records:
            for name, value in r.metrics.items():
                by_task.setdefault((r.task_id, name), []).append(value)
    rows = ["task,metric,best,worst,rel_spread"]
    for (tid, name) in sorted(by_task):
        values = by_task[(tid, name)]
        best, worst = max(values), min(values)
        rel = 0.0 if best == 0 else (best - worst) / best
        rows.append(f"{tid},{name},{best:.6f},{worst:.6f},{rel:.6f}")
    return rows
