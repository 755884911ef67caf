"""
Figures and tables from stored run records.

Everything here reads ``records/*.jsonl``; nothing is retrained. Tables are
written deterministically so a re-render is byte-stable.
"""

import csv
import io
import logging
from collections import defaultdict
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402
from sklearn.decomposition import PCA  # noqa: E402

from .harness import read_records  # noqa: E402
from .lab.exceptions import WorkbenchError  # noqa: E402
from .lab.metrics import mean_std  # noqa: E402
from .lab.network import latents  # noqa: E402
from .statistics import rows_from_records, write_summary_csv  # noqa: E402

logger = logging.getLogger(__name__)


class MissingRecordsError(WorkbenchError):
    def __init__(self, missing):
        self.missing = list(missing)
        super().__init__("missing inputs: " + ", ".join(self.missing))


def _load(directories):
    """Records of every directory, tagged with the directory they came from."""
    records = []
    for directory in directories:
        for record in read_records(directory):
            records.append({**record, "directory": str(directory)})
    return records


def curve_points(records):
    """Detectability-sweep curve points grouped by (r, delta), sorted by m."""
    groups = defaultdict(list)
    for record in records:
        if record["kind"] == "metric" and "curve" in record["payload"]:
            groups[(record["r"], record["delta"])].append(record["payload"]["curve"])
    return {key: sorted(points, key=lambda p: p["m"]) for key, points in groups.items()}


def plot_curves(points, path, title=""):
    """Effectiveness and per-detector AUC against m, with one-std bands."""
    m = np.array([p["m"] for p in points], dtype=float)
    fig, axes = plt.subplots(1, 2, figsize=(11, 4))

    eta = np.array([p["effectiveness"] for p in points])
    eta_std = np.array([p["effectiveness_std"] for p in points])
    axes[0].plot(m, eta, "o-", label="ASR")
    axes[0].fill_between(m, eta - eta_std, eta + eta_std, alpha=0.2)
    axes[0].set_xlabel("poisoned samples m")
    axes[0].set_ylabel("effectiveness")
    axes[0].set_ylim(-0.05, 1.05)
    axes[0].grid(True)

    for name in points[0]["detectability"]:
        rho = np.array([p["detectability"][name] for p in points])
        rho_std = np.array([p["detectability_std"][name] for p in points])
        axes[1].plot(m, rho, "o-", label=name.upper())
        axes[1].fill_between(m, rho - rho_std, rho + rho_std, alpha=0.2)
    axes[1].axhline(0.5, color="grey", linestyle="--", linewidth=1)
    axes[1].set_xlabel("poisoned samples m")
    axes[1].set_ylabel("detection ROC AUC")
    axes[1].set_ylim(-0.05, 1.05)
    axes[1].grid(True)
    axes[1].legend()

    if title:
        fig.suptitle(title)
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def repair_traces(records):
    """(defense, trace) for every stored repair trace."""
    traces = []
    for record in records:
        if record["kind"] != "repair":
            continue
        trace = record["payload"].get("trace", record["payload"])
        if trace and trace.get("records"):
            traces.append((trace["method"], trace))
    return traces


def plot_tradeoff(traces, path):
    """ASR against CDA along every repair trace, one colour per defense."""
    fig, ax = plt.subplots(figsize=(6, 5))
    colours = {}
    for method, trace in traces:
        points = [(r["cda"], r["asr"]) for r in trace["records"] if r.get("asr") is not None]
        if not points:
            continue
        cda, asr = zip(*points)
        if method not in colours:
            colours[method] = f"C{len(colours)}"
            label = method
        else:
            label = None
        ax.plot(cda, asr, ".-", color=colours[method], alpha=0.6, label=label)
        selected = trace.get("selected_step")
        for record in trace["records"]:
            if record["step"] == selected and record.get("asr") is not None:
                ax.plot(record["cda"], record["asr"], "*", color=colours[method], markersize=12)
    ax.set_xlabel("clean data accuracy")
    ax.set_ylabel("attack success rate")
    ax.grid(True)
    if colours:
        ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def efficiency_table(records):
    """
    Mean remaining ASR per (attack, defense) row and r column.

    Returns ``(r_values, rows)`` where each row is
    ``(attack, defense, {r: (mean, std, samples)})``.
    """
    cells = defaultdict(list)
    for record in records:
        payload = record["payload"]
        if record["kind"] == "repair" and "data_efficiency" in payload and "row" in payload:
            row = payload["row"]
            cells[(row["attack"], row["defense"], row["r"])].append(payload["data_efficiency"])
    r_values = sorted({key[2] for key in cells})
    rows = defaultdict(dict)
    for (attack, defense, r), values in cells.items():
        mean, std = mean_std(values)
        rows[(attack, defense)][r] = (mean, std, len(values))
    return r_values, [(attack, defense, rows[(attack, defense)]) for attack, defense in sorted(rows)]


def efficiency_table_csv(r_values, rows):
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["attack", "defense"] + ["r=%g" % r for r in r_values])
    for attack, defense, cells in rows:
        writer.writerow(
            [attack, defense]
            + ["%.6f" % cells[r][0] if r in cells else "" for r in r_values]
        )
    return buffer.getvalue()


def efficiency_table_markdown(r_values, rows):
    header = "| Attack | Defense | " + " | ".join("r=%g" % r for r in r_values) + " |"
    rule = "|---|---|" + "---|" * len(r_values)
    lines = [header, rule]
    for attack, defense, cells in rows:
        values = [
            "%.2f ± %.2f" % cells[r][:2] if r in cells else "-" for r in r_values
        ]
        lines.append(f"| {attack} | {defense} | " + " | ".join(values) + " |")
    return "\n".join(lines) + "\n"


def plot_anomaly(report, path):
    """Per-class anomaly scores, with forced-success rates when the detector reports them."""
    scores = np.asarray(report["scores"], dtype=float)
    classes = np.arange(len(scores))
    fig, ax = plt.subplots(figsize=(7, 4))
    colours = ["C3" if c == report["flagged_class"] else "C0" for c in classes]
    ax.bar(classes, scores, color=colours)
    ax.set_xlabel("class")
    ax.set_ylabel(f"{report['method'].upper()} score")
    ax.set_xticks(classes)
    if report.get("success_rates"):
        twin = ax.twinx()
        twin.plot(classes, report["success_rates"], "k.--", label="forced success rate")
        twin.set_ylim(0, 1.05)
        twin.set_ylabel("success rate")
    ax.set_title(f"flagged class {report['flagged_class']}")
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def latent_scatter(models, data, path, max_points=500, seed=0):
    """
    2-D PCA projection of the latents of each model in ``models`` (label ->
    ModelHandle). One shared projection is fitted so panels are comparable;
    poisoned samples are drawn as crosses.
    """
    if not models:
        raise MissingRecordsError(["model checkpoints"])
    rng = np.random.default_rng(seed)
    index = np.sort(rng.permutation(len(data))[:max_points])
    sample = data.subset(index)
    encoded = {label: latents(sample, model) for label, model in models.items()}
    projection = PCA(n_components=2).fit(np.concatenate(list(encoded.values())))

    fig, axes = plt.subplots(1, len(models), figsize=(5 * len(models), 4.5), squeeze=False)
    poisoned = sample.poisoned
    for ax, (label, values) in zip(axes[0], encoded.items()):
        points = projection.transform(values)
        ax.scatter(
            points[~poisoned, 0], points[~poisoned, 1], c=sample.labels[~poisoned],
            cmap="tab10", s=8, vmin=0, vmax=max(9, sample.class_count - 1),
        )
        if poisoned.any():
            ax.scatter(points[poisoned, 0], points[poisoned, 1], c="k", marker="x", s=16)
        ax.set_title(label)
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
    return path


def render(directories, output=None):
    """
    Emit every figure and table the records of ``directories`` support.
    Returns the written paths; raises MissingRecordsError when there is
    nothing to render.
    """
    directories = [Path(d) for d in directories]
    missing = [str(d / "records") for d in directories if not (d / "records").is_dir()]
    if missing:
        raise MissingRecordsError(missing)
    records = _load(directories)
    if not records:
        raise MissingRecordsError([str(d / "records" / "*.jsonl") for d in directories])
    output = Path(output) if output is not None else directories[0] / "figures"
    output.mkdir(parents=True, exist_ok=True)
    written = []

    for directory in directories:
        directory_records = [r for r in records if r["directory"] == str(directory)]
        rows = rows_from_records(directory_records)
        if rows:
            written.append(write_summary_csv(rows, directory / "summary.csv"))

    for (r, delta), points in sorted(curve_points(records).items()):
        name = f"effectiveness_detectability_r{r}_d{delta:g}.png"
        written.append(plot_curves(points, output / name, title=f"r={r}, delta={delta}"))

    traces = repair_traces(records)
    if traces:
        written.append(plot_tradeoff(traces, output / "tradeoff.png"))

    r_values, rows = efficiency_table(records)
    if rows:
        table_csv = output / "data_efficiency.csv"
        table_csv.write_text(efficiency_table_csv(r_values, rows), encoding="utf-8")
        table_md = output / "data_efficiency.md"
        table_md.write_text(efficiency_table_markdown(r_values, rows), encoding="utf-8")
        written.extend([table_csv, table_md])

    for record in records:
        if record["kind"] == "anomaly":
            written.append(
                plot_anomaly(record["payload"], output / f"anomaly_{record['sequence']:05d}.png")
            )

    figures = [path for path in written if path.name != "summary.csv"]
    if not figures:
        raise MissingRecordsError(
            [
                "metric records with curves (detectability sweep over m)",
                "repair traces",
                "data-efficiency rows",
                "anomaly reports",
            ]
        )
    logger.info("Rendered %d file(s) into %s", len(written), output)
    return written
