"""Report rendering: JSON, markdown table, CSV, and a bar-chart figure."""

from __future__ import annotations

import csv
import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import RobustnessReport


def reports_payload(reports: list[RobustnessReport]) -> dict | list:
    dicts = [r.to_dict() for r in reports]
    return dicts[0] if len(dicts) == 1 else {"reports": dicts}


def load_reports(path: str | Path) -> list[dict]:
    data = json.loads(Path(path).read_text())
    if isinstance(data, dict) and "reports" in data:
        return data["reports"]
    return [data]


def render_markdown(reports: list[dict]) -> str:
    lines = []
    for rep in reports:
        base = rep["baseline"]
        lines.append(f"## {rep['model']} on {rep['benchmark']} ({rep['family']})")
        lines.append("")
        lines.append(f"Evaluation region: {rep['eval_region']}; baseline: {base['name']}.")
        lines.append("")
        names = list(rep["subsets"])
        header = ["Model", base["name"].capitalize()] + [n.capitalize() for n in names] + ["mR"]
        lines.append("| " + " | ".join(header) + " |")
        lines.append("|" + "---|" * len(header))
        row = [rep["model"], f"{base['miou']:.2f}"]
        row += [f"{rep['subsets'][n]['miou']:.2f}" for n in names]
        row += [f"{rep['mr']:.2f}"]
        lines.append("| " + " | ".join(row) + " |")
        lines.append("")
        lines.append(f"RmIoU: {rep['rmiou']:.2f}")
        lines.append("")
    return "\n".join(lines)


def write_csv(reports: list[dict], path: Path):
    with path.open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["model", "benchmark", "family", "subset", "miou", "baseline_name",
             "baseline_miou", "rmiou", "mr", "eval_region"]
        )
        for rep in reports:
            base = rep["baseline"]
            for name, entry in rep["subsets"].items():
                writer.writerow(
                    [rep["model"], rep["benchmark"], rep["family"], name,
                     f"{entry['miou']:.4f}", base["name"], f"{base['miou']:.4f}",
                     f"{rep['rmiou']:.4f}", f"{rep['mr']:.4f}", rep["eval_region"]]
                )


def render_figure(reports: list[dict], path: Path, dpi: int = 150):
    fig, axes = plt.subplots(
        1, len(reports), figsize=(1.5 + 3.5 * len(reports), 3.2), squeeze=False
    )
    for ax, rep in zip(axes[0], reports):
        base = rep["baseline"]
        names = [base["name"]] + list(rep["subsets"])
        values = [base["miou"]] + [rep["subsets"][n]["miou"] for n in rep["subsets"]]
        colors = ["#888888"] + ["#4878d0"] * (len(names) - 1)
        ax.bar(range(len(names)), values, color=colors)
        ax.set_xticks(range(len(names)))
        ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
        ax.set_ylabel("mIoU (%)")
        ax.set_title(f"{rep['family']}  (mR = {rep['mr']:.2f})", fontsize=10)
        ax.axhline(base["miou"], color="#888888", linestyle="--", linewidth=0.8)
    fig.suptitle(f"{reports[0]['model']} on {reports[0]['benchmark']}", fontsize=11)
    fig.tight_layout()
    fig.savefig(path, dpi=dpi)
    plt.close(fig)


def write_reports(reports: list[RobustnessReport], out_dir: str | Path, stem: str = "report") -> dict:
    """Write report.json/.md/.csv/.png; returns the path map."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    payload = reports_payload(reports)
    dicts = [r.to_dict() for r in reports]
    paths = {
        "json": out_dir / f"{stem}.json",
        "md": out_dir / f"{stem}.md",
        "csv": out_dir / f"{stem}.csv",
        "png": out_dir / f"{stem}.png",
    }
    paths["json"].write_text(json.dumps(payload, indent=2, sort_keys=True))
    paths["md"].write_text(render_markdown(dicts))
    write_csv(dicts, paths["csv"])
    render_figure(dicts, paths["png"])
    return {k: str(v) for k, v in paths.items()}
