"""Render run artifacts into human-readable reports.

Reads the training log and evaluation report from an output directory and
writes plain-text tables, CSV data, and matplotlib figures next to them.
Figures are written without date metadata so report output stays byte-stable
for identical inputs.
"""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .errors import DataFormatError  # noqa: E402

_FIG_KW = dict(dpi=120, metadata={"Date": None})


def load_train_log(path: Path) -> list[dict]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                entries.append(json.loads(line))
            except json.JSONDecodeError as exc:
                raise DataFormatError(f"invalid training log JSON ({exc.msg})", lineno) from exc
    return entries


def write_loss_curve(out_dir: Path, entries: list[dict]) -> list[Path]:
    csv_path = out_dir / "loss_curve.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "mean_loss_v", "mean_loss_q"])
        for e in entries:
            writer.writerow([e["epoch"], e["mean_loss_v"], e["mean_loss_q"]])

    fig, ax = plt.subplots(figsize=(6, 4))
    epochs = [e["epoch"] for e in entries]
    ax.plot(epochs, [e["mean_loss_v"] for e in entries], marker="o", label="value loss")
    ax.plot(epochs, [e["mean_loss_q"] for e in entries], marker="s", label="q loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("mean loss")
    ax.set_title("critic training losses")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / "loss_curve.png"
    fig.savefig(png_path, **_FIG_KW)
    plt.close(fig)
    return [csv_path, png_path]


def write_eval_summary(out_dir: Path, report: dict) -> list[Path]:
    modes = report["modes"]
    csv_path = out_dir / "eval_summary.csv"
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["mode", "n_episodes", "AS", "SR", "mean_steps"])
        for m in modes:
            writer.writerow([m["mode"], m["n_episodes"], m["AS"], m["SR"], m["mean_steps"]])

    fig, ax = plt.subplots(figsize=(6, 4))
    names = [m["mode"] for m in modes]
    x = range(len(names))
    width = 0.38
    ax.bar([i - width / 2 for i in x], [m["AS"] for m in modes], width, label="AS")
    ax.bar([i + width / 2 for i in x], [m["SR"] for m in modes], width, label="SR")
    ax.set_xticks(list(x))
    ax.set_xticklabels(names)
    ax.set_ylabel("score (0-100)")
    ax.set_title("evaluation summary")
    ax.legend()
    fig.tight_layout()
    png_path = out_dir / "eval_summary.png"
    fig.savefig(png_path, **_FIG_KW)
    plt.close(fig)
    return [csv_path, png_path]


def render_report(out_dir) -> list[Path]:
    """Write report.txt plus CSV/PNG pairs for whatever artifacts exist."""
    out_dir = Path(out_dir)
    written: list[Path] = []
    lines = ["run report", "=========="]

    train_log = out_dir / "train_log.jsonl"
    if train_log.exists():
        entries = load_train_log(train_log)
        written += write_loss_curve(out_dir, entries)
        lines.append("")
        lines.append(f"training: {len(entries)} epochs")
        lines.append(f"{'epoch':>6} {'loss_v':>12} {'loss_q':>12}")
        for e in entries:
            lines.append(f"{e['epoch']:>6} {e['mean_loss_v']:>12.6f} {e['mean_loss_q']:>12.6f}")

    eval_path = out_dir / "eval_report.json"
    if eval_path.exists():
        with open(eval_path, "r", encoding="utf-8") as fh:
            report = json.load(fh)
        written += write_eval_summary(out_dir, report)
        lines.append("")
        lines.append(f"evaluation: {report.get('episodes')} episodes, config {report.get('config_hash')}")
        lines.append(f"{'mode':>14} {'n':>6} {'AS':>8} {'SR':>8} {'mean_steps':>11}")
        for m in report["modes"]:
            lines.append(
                f"{m['mode']:>14} {m['n_episodes']:>6} {m['AS']:>8.2f} {m['SR']:>8.2f} {m['mean_steps']:>11.2f}"
            )

    if len(lines) == 2:
        lines.append("")
        lines.append("no artifacts found (expected train_log.jsonl and/or eval_report.json)")
    txt_path = out_dir / "report.txt"
    txt_path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return [txt_path, *written]
