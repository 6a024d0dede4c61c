"""SVG charts of training curves and probing results."""
import logging
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Union

from app.crud.reports import read_rows
from app.schemas.probe import ProbeReport

logger = logging.getLogger(__name__)


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def _column(rows: List[Dict[str, str]], name: str) -> List[float]:
    return [float(row[name]) for row in rows if row.get(name) not in (None, "")]


def plot_training(run_dir: Union[str, Path], out: Optional[Union[str, Path]] = None) -> Path:
    """Loss, learning rate and mean gate activations over steps, from metrics.csv."""
    run_dir = Path(run_dir)
    rows = read_rows(run_dir / "metrics.csv")
    gate_columns = [c for c in (rows[0].keys() if rows else []) if c.startswith("gate.")]
    plt = _pyplot()
    panels = 3 if gate_columns else 2
    fig, axes = plt.subplots(1, panels, figsize=(4 * panels, 3.4), constrained_layout=True)
    steps = _column(rows, "step")

    axes[0].plot(steps, _column(rows, "loss"), label="train")
    valid_path = run_dir / "validation.csv"
    if valid_path.exists():
        valid = read_rows(valid_path)
        axes[0].plot(_column(valid, "step"), _column(valid, "loss"), marker="o", label="validation")
    axes[0].set_title("Loss")
    axes[0].legend(loc="best", fontsize=8)
    axes[1].plot(steps, _column(rows, "lr"))
    axes[1].set_title("Learning rate")
    if gate_columns:
        for column in gate_columns:
            axes[2].plot(steps, _column(rows, column), label=column[len("gate."):])
        axes[2].set_title("Mean gate activation")
        axes[2].set_ylim(0.0, 1.0)
        axes[2].legend(loc="best", fontsize=6)
    for ax in axes:
        ax.set_xlabel("Step")
        ax.grid(True, alpha=0.3)

    out = Path(out) if out else run_dir / "training.svg"
    fig.savefig(out)
    plt.close(fig)
    logger.info(f"Training curves written to {out}")
    return out


def plot_probe(reports: Dict[str, ProbeReport], out: Union[str, Path], sides: Sequence[str] = ("encoder", "decoder")) -> Path:
    """Per-layer probe accuracy and cosine similarity, one line per labelled report."""
    plt = _pyplot()
    fig, axes = plt.subplots(2, len(sides), figsize=(4.2 * len(sides), 6.4), constrained_layout=True, squeeze=False)
    for column, side in enumerate(sides):
        for label, report in reports.items():
            accuracy = report.accuracy_by_layer(side)
            axes[0][column].plot(sorted(accuracy), [accuracy[l] for l in sorted(accuracy)], marker="o", label=label)
            cosine = sorted((row.layer, row.cosine) for row in report.cosine if row.side == side)
            axes[1][column].plot([l for l, _ in cosine], [c for _, c in cosine], marker="o", label=label)
        axes[0][column].set_title(f"{side}: probe accuracy")
        axes[0][column].set_ylim(0.0, 1.0)
        axes[1][column].set_title(f"{side}: cos(embedding, state)")
        for row in axes:
            row[column].set_xlabel("Layer")
            row[column].grid(True, alpha=0.3)
            row[column].legend(loc="best", fontsize=8)

    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out)
    plt.close(fig)
    logger.info(f"Probe chart written to {out}")
    return out
