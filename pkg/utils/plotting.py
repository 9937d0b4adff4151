import os
from typing import Optional

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
from loguru import logger  # noqa: E402

from utils.experiment_log import ExperimentLog  # noqa: E402


def plot_curves(
    logs: dict[str, ExperimentLog],
    path: str,
    target_miou: Optional[float] = None,
    log_area: bool = False,
) -> str:
    """
    Write an SVG with mIoU against labeled area (left) and labeled fraction (right).

    Args:
        logs: Run label -> experiment log
        path: Output .svg path
        target_miou: Draws the mIoU@90 rule when given
        log_area: Log scale on the area axis

    Returns:
        The written path
    """
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    fig, (ax_area, ax_fraction) = plt.subplots(1, 2, figsize=(11, 4.5))
    for label, log in sorted(logs.items()):
        area = [row.labeled_area_m2 for row in log.rows]
        fraction = [100.0 * row.labeled_fraction for row in log.rows]
        miou = [row.miou for row in log.rows]
        ax_area.plot(area, miou, marker="o", markersize=3, label=label)
        ax_fraction.plot(fraction, miou, marker="o", markersize=3, label=label)
    for ax in (ax_area, ax_fraction):
        if target_miou is not None:
            ax.axhline(target_miou, color="black", linestyle="--", linewidth=1, label="mIoU@90")
        ax.set_ylabel("mIoU")
        ax.grid(True, alpha=0.3)
    if log_area:
        ax_area.set_xscale("symlog", linthresh=1.0)
    ax_area.set_xlabel("labeled area (m²)")
    ax_fraction.set_xlabel("labeled points (%)")
    ax_fraction.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(path, format="svg")
    plt.close(fig)
    logger.info(f"Wrote curves for {len(logs)} runs to {path}")
    return path
