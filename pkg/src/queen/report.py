"""Render experiment results to delimited text, JSON, and figure files.

The text output is line-oriented and grep-friendly: section headings,
then tab-separated rows. The JSON file carries the same content
machine-readable. Figures are separate PNG files written alongside;
nothing is ever embedded in the text.
"""

from __future__ import annotations

import json
import os

import matplotlib

matplotlib.use("Agg")  # file output only, no display server in scope

import matplotlib.pyplot as plt
import numpy as np

from .pipeline import AblationPoint, RunReport
from .util import canonical_json

CONDITION_ORDER = ("A", "B", "C", "D")


def _fmt(value) -> str:
    if isinstance(value, float):
        return f"{value:.6g}"
    return str(value)


def _rows(*cells) -> str:
    return "\t".join(_fmt(c) for c in cells)


# ------------------------------------------------------------------ run text


def render_run(report: RunReport) -> str:
    """One experiment as sectioned tab-separated text."""
    lines = ["# run"]
    lines.append(_rows("seed", report.seed))
    lines.append(_rows("classes", report.n_classes))
    lines.append(_rows("protectee_accuracy", report.protectee_accuracy))
    lines.append(_rows("defended_accuracy", report.defended_accuracy))
    lines.append(_rows("registry_radius", report.radius))
    lines.append(_rows("mean_region_radius", report.mean_region_radius))

    lines.append("# benign_ratios")
    for key in sorted(report.benign_ratios):
        lines.append(_rows(key, report.benign_ratios[key]))

    lines.append("# attacks")
    lines.append(_rows(
        "kind", "budget", "defended_acc", "defended_agree",
        "undefended_acc", "undefended_agree", "ks_stat", "ks_p",
    ))
    for a in report.attacks:
        lines.append(_rows(
            a.kind, a.budget, a.defended_accuracy, a.defended_agreement,
            a.undefended_accuracy, a.undefended_agreement,
            a.ks_statistic, a.ks_p_value,
        ))

    lines.append("# conditions")
    lines.append(_rows("kind", *CONDITION_ORDER))
    for a in report.attacks:
        lines.append(_rows(a.kind, *(a.conditions[c] for c in CONDITION_ORDER)))

    lines.append("# class_cqs")
    lines.append(_rows("kind", "class", "score"))
    for a in report.attacks:
        for label in sorted(a.class_cqs, key=int):
            lines.append(_rows(a.kind, label, a.class_cqs[label]))

    lines.append("# timings")
    for key, value in report.timings.items():
        lines.append(_rows(key, value))
    return "\n".join(lines) + "\n"


def render_ablation(points: list[AblationPoint]) -> str:
    lines = ["# ablation"]
    lines.append(_rows(
        "parameter", "value", "recorded_ratio", "reversed_ratio",
        "attack_accuracy", "defense_accuracy",
    ))
    for p in points:
        lines.append(_rows(
            p.parameter, p.value, p.recorded_ratio, p.reversed_ratio,
            p.attack_accuracy, p.defense_accuracy,
        ))
    return "\n".join(lines) + "\n"


def render_quartiles(accuracies: dict[str, float]) -> str:
    lines = ["# quartiles", _rows("quartile", "accuracy")]
    for name, acc in accuracies.items():
        lines.append(_rows(name, acc))
    return "\n".join(lines) + "\n"


# ------------------------------------------------------------------- figures


def condition_figure(report: RunReport, path: str) -> None:
    """Stacked per-attack condition mix."""
    fig, ax = plt.subplots(figsize=(6, 4))
    kinds = [a.kind for a in report.attacks]
    bottom = np.zeros(len(kinds))
    for cond in CONDITION_ORDER:
        heights = np.array([a.conditions[cond] for a in report.attacks], dtype=float)
        ax.bar(kinds, heights, bottom=bottom, label=cond)
        bottom += heights
    ax.set_ylabel("queries")
    ax.set_title("per-attack condition mix")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def accuracy_figure(report: RunReport, path: str) -> None:
    """Defended vs undefended piracy accuracy per attack."""
    fig, ax = plt.subplots(figsize=(6, 4))
    kinds = [a.kind for a in report.attacks]
    x = np.arange(len(kinds))
    width = 0.35
    ax.bar(x - width / 2, [a.undefended_accuracy for a in report.attacks],
           width, label="undefended")
    ax.bar(x + width / 2, [a.defended_accuracy for a in report.attacks],
           width, label="defended")
    ax.axhline(report.protectee_accuracy, color="gray", ls="--", lw=1,
               label="protectee")
    ax.set_xticks(x)
    ax.set_xticklabels(kinds)
    ax.set_ylabel("piracy accuracy")
    ax.set_ylim(0, 1)
    ax.set_title("extraction accuracy with and without the defense")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def ablation_figure(points: list[AblationPoint], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    xs = [p.value for p in points]
    ax.plot(xs, [p.recorded_ratio for p in points], "o-", label="recorded")
    ax.plot(xs, [p.reversed_ratio for p in points], "s-", label="reversed")
    ax.plot(xs, [p.attack_accuracy for p in points], "^-", label="attack acc")
    ax.set_xlabel(points[0].parameter if points else "value")
    ax.set_ylabel("ratio / accuracy")
    ax.set_title("sweep")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def quartile_figure(accuracies: dict[str, float], path: str) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    names = list(accuracies)
    ax.bar(names, [accuracies[n] for n in names])
    ax.set_ylabel("test accuracy")
    ax.set_ylim(0, 1)
    ax.set_title("training on one distance quartile per class")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


# ------------------------------------------------------------------- writers


def write_run(report: RunReport, directory: str, stem: str = "run",
              figures: bool = True) -> list[str]:
    """Text + JSON, and PNGs unless disabled. Returns written paths."""
    os.makedirs(directory, exist_ok=True)
    paths = []

    text_path = os.path.join(directory, f"{stem}.txt")
    with open(text_path, "w") as fh:
        fh.write(render_run(report))
    paths.append(text_path)

    json_path = os.path.join(directory, f"{stem}.json")
    with open(json_path, "w") as fh:
        fh.write(canonical_json(report.to_dict()))
    paths.append(json_path)

    if figures and report.attacks:
        cond_path = os.path.join(directory, f"{stem}_conditions.png")
        condition_figure(report, cond_path)
        paths.append(cond_path)
        acc_path = os.path.join(directory, f"{stem}_accuracy.png")
        accuracy_figure(report, acc_path)
        paths.append(acc_path)
    return paths


def write_ablation(points: list[AblationPoint], directory: str,
                   stem: str = "ablation", figures: bool = True) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []

    text_path = os.path.join(directory, f"{stem}.txt")
    with open(text_path, "w") as fh:
        fh.write(render_ablation(points))
    paths.append(text_path)

    payload = [
        {
            "parameter": p.parameter,
            "value": p.value,
            "recorded_ratio": p.recorded_ratio,
            "reversed_ratio": p.reversed_ratio,
            "attack_accuracy": p.attack_accuracy,
            "defense_accuracy": p.defense_accuracy,
        }
        for p in points
    ]
    json_path = os.path.join(directory, f"{stem}.json")
    with open(json_path, "w") as fh:
        fh.write(canonical_json(payload))
    paths.append(json_path)

    if figures and points:
        fig_path = os.path.join(directory, f"{stem}.png")
        ablation_figure(points, fig_path)
        paths.append(fig_path)
    return paths


def write_quartiles(accuracies: dict[str, float], directory: str,
                    stem: str = "quartiles", figures: bool = True) -> list[str]:
    os.makedirs(directory, exist_ok=True)
    paths = []

    text_path = os.path.join(directory, f"{stem}.txt")
    with open(text_path, "w") as fh:
        fh.write(render_quartiles(accuracies))
    paths.append(text_path)

    json_path = os.path.join(directory, f"{stem}.json")
    with open(json_path, "w") as fh:
        fh.write(canonical_json(accuracies))
    paths.append(json_path)

    if figures and accuracies:
        fig_path = os.path.join(directory, f"{stem}.png")
        quartile_figure(accuracies, fig_path)
        paths.append(fig_path)
    return paths


def load_json(path: str):
    with open(path) as fh:
        return json.load(fh)
