"""Markdown rendering for run summaries and cross-run comparisons."""

from typing import Any, Dict, List, Optional, Sequence


def _fmt(value: Any, digits: int = 4) -> str:
    if value is None:
        return "n/a"
    if isinstance(value, float):
        return f"{value:.{digits}f}"
    return str(value)


def render_comparison(entries: Sequence[Dict[str, Any]]) -> str:
    """Summary table across runs, then one section per run."""
    lines = ["# IPT Lab Run Comparison\n"]
    lines.append("## Summary")
    lines.append(f"- Runs: {len(entries)}")
    scored = [e for e in entries if e.get("test_accuracy") is not None]
    if scored:
        best = max(scored, key=lambda e: e["test_accuracy"])
        lines.append(f"- Best test accuracy: {_fmt(best['test_accuracy'])} ({best.get('strategy', 'n/a')}, "
                     f"`{best['run']}`)")
    lines.append("")

    if not entries:
        lines.append("No runs to compare.")
        return "\n".join(lines) + "\n"

    lines.append("| run | strategy | seed | best dev acc | best epoch | test acc | trainable | ratio vs FT |")
    lines.append("|---|---|---:|---:|---:|---:|---:|---:|")
    for e in entries:
        lines.append(f"| `{e['run']}` | {e.get('strategy', 'n/a')} | {e.get('seed', 'n/a')} | "
                     f"{_fmt(e.get('best_dev_accuracy'))} | {e.get('best_epoch', 'n/a')} | "
                     f"{_fmt(e.get('test_accuracy'))} | {e.get('trainable_params', 'n/a')} | "
                     f"{_fmt(e.get('param_ratio'), 6)} |")
    lines.append("")

    lines.append("## Runs\n")
    for idx, e in enumerate(entries, 1):
        lines.append(f"### {idx}. {e.get('strategy', 'n/a')} @ `{e['run']}`")
        lines.append("")
        cfg = e.get("strategy_config") or {}
        if cfg:
            knobs = ", ".join(f"{k}={v}" for k, v in sorted(cfg.items()) if v not in (None, "", 0))
            lines.append(f"- **Strategy config:** {knobs}")
        dev = e.get("dev_accuracy") or []
        if dev:
            lines.append(f"- **Dev accuracy by epoch:** {', '.join(_fmt(a, 3) for a in dev)}")
        lines.append(f"- **Train accuracy (best epoch):** {_fmt(e.get('train_accuracy'))}")
        lines.append(f"- **Wall time:** {_fmt(e.get('wall_time'), 1)} s")
        lines.append("")
        lines.append("---")
        lines.append("")
    return "\n".join(lines)


def render_summary(summary: Dict[str, Any]) -> str:
    """A single pipeline's summary as markdown (what the MCP tools reply with)."""
    command = summary.get("command", "run")
    if "markdown" in summary:
        return summary["markdown"]
    lines = [f"# IPT Lab: {command}\n"]
    rows: Optional[List[Dict[str, Any]]] = summary.get("rows")
    scalars = {k: v for k, v in summary.items() if not isinstance(v, (dict, list)) and k != "command"}
    if scalars:
        lines.append("## Summary")
        for k, v in scalars.items():
            lines.append(f"- {k}: {_fmt(v)}")
        lines.append("")
    if rows:
        cols = list(rows[0])
        lines.append("## Rows\n")
        lines.append("| " + " | ".join(cols) + " |")
        lines.append("|" + "---|" * len(cols))
        for r in rows:
            lines.append("| " + " | ".join(_fmt(r.get(c)) for c in cols) + " |")
        lines.append("")
    for key in ("distance_stats", "marker_clustering", "explained_variance"):
        if summary.get(key):
            lines.append(f"## {key.replace('_', ' ').capitalize()}\n")
            for name, value in summary[key].items():
                lines.append(f"- {name}: {value}")
            lines.append("")
    if summary.get("artifacts"):
        lines.append("## Artifacts")
        lines.extend(f"- `{a}`" for a in summary["artifacts"])
    return "\n".join(lines) + "\n"
