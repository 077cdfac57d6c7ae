"""PNG figures for run and intervention reports (headless)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_run_report(report: dict, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    rows = report["rows"]
    ious = [r["iou"] for r in rows if r["kind"] == "grounding"]
    if ious:
        fig, ax = plt.subplots(figsize=(5, 3.2))
        ax.hist(ious, bins=20, range=(0, 1), color="#4c72b0", edgecolor="white")
        ax.axvline(0.5, color="#c44e52", linestyle="--", linewidth=1, label="IoU 0.5")
        ax.set_xlabel("IoU with ground truth")
        ax.set_ylabel("tasks")
        ax.set_title(f"grounding, mean IoU {report['aggregates']['mean_iou']:.3f}")
        ax.legend(frameon=False)
        fig.tight_layout()
        written.append(_save(fig, out / "iou_histogram.png"))

    kinds = sorted({r["kind"] for r in rows})
    if kinds:
        statuses = ("ok", "fallback_used", "error")
        colors = {"ok": "#55a868", "fallback_used": "#dd8452", "error": "#c44e52"}
        fig, ax = plt.subplots(figsize=(5, 3.2))
        bottom = [0] * len(kinds)
        for s in statuses:
            counts = [sum(r["kind"] == k and r["status"] == s for r in rows) for k in kinds]
            ax.bar(kinds, counts, bottom=bottom, label=s, color=colors[s])
            bottom = [b + c for b, c in zip(bottom, counts)]
        ax.set_ylabel("tasks")
        ax.set_title("execution status by task kind")
        ax.legend(frameon=False, fontsize=8)
        fig.tight_layout()
        written.append(_save(fig, out / "status_by_kind.png"))
    return written


def plot_intervention(report: dict, out_dir: str | Path) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    roles = list(report["roles"])
    drops = [-report["roles"][r]["delta"] for r in roles]
    fig, ax = plt.subplots(figsize=(5.5, 0.5 + 0.45 * max(1, len(roles))))
    ax.barh(roles, drops, color="#4c72b0")
    for i, r in enumerate(roles):
        ax.text(drops[i], i, f"  n={report['roles'][r]['n_affected']}", va="center", fontsize=8)
    ax.set_xlabel("score drop when the role returns default output")
    ax.invert_yaxis()
    fig.tight_layout()
    return [_save(fig, out / "intervention_drop.png")]


def _save(fig, path: Path) -> Path:
    fig.savefig(path, dpi=120, metadata={"Software": None})
    plt.close(fig)
    return path
