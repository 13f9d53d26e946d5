"""Figure rendering for evaluation reports and alignment overlays.

All figures go straight to files (Agg backend); the evaluation CLI drops
them next to metrics.json / table.csv, and `infer` writes the overlay
showing the observation footprint on the map patch before and after the
predicted correction.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

from .evaluation import ErrorRecord, RecallReport  # noqa: E402
from .se2 import BEV_SPEC, GridSpec, MAP_SPEC, PoseOffset, inverse, transform_points  # noqa: E402

# channel tints for (lanes/drivable, buildings, nodes) on white
_CHANNEL_COLORS = np.array([
    [70, 70, 70],
    [214, 134, 70],
    [230, 200, 30],
], dtype=float)


def raster_to_rgb(channels: np.ndarray) -> np.ndarray:
    """Binary (3, H, W) planes -> displayable (H, W, 3) uint8."""
    h, w = channels.shape[1:]
    rgb = np.full((h, w, 3), 255.0)
    for k in range(3):
        mask = channels[k] > 0.5
        rgb[mask] = _CHANNEL_COLORS[k]
    return rgb.astype(np.uint8)


def render_recall_figure(report: RecallReport, path, title: str = "recall") -> Path:
    """2x2 bar panels: position / orientation / longitudinal / lateral recall."""
    fig, axes = plt.subplots(2, 2, figsize=(9, 7))
    panels = [
        ("position recall", report.position_recall, "m"),
        ("orientation recall", report.orientation_recall, "deg"),
        ("longitudinal recall", report.longitudinal_recall, "m"),
        ("lateral recall", report.lateral_recall, "m"),
    ]
    for ax, (name, recalls, unit) in zip(axes.ravel(), panels):
        ts = sorted(recalls)
        ax.bar([f"{t:g}{unit}" for t in ts], [recalls[t] for t in ts], color="#4878a8")
        ax.set_ylim(0, 1)
        ax.set_title(name)
        ax.grid(axis="y", alpha=0.3)
    fig.suptitle(f"{title} (n={report.sample_count})")
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def render_error_histogram(records: list[ErrorRecord], path) -> Path:
    fig, (ax0, ax1) = plt.subplots(1, 2, figsize=(9, 3.5))
    ax0.hist([r.position_error for r in records], bins=30, color="#4878a8")
    ax0.set_xlabel("position error [m]")
    ax1.hist([r.orientation_error_deg for r in records], bins=30, color="#a85848")
    ax1.set_xlabel("orientation error [deg]")
    for ax in (ax0, ax1):
        ax.set_ylabel("samples")
        ax.grid(alpha=0.3)
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path


def _footprint_pixels(xi: PoseOffset, bev_spec: GridSpec, map_spec: GridSpec):
    """BEV field-of-view polygon + heading tick in map-patch pixel coords.

    A BEV-frame point e lands at map-frame coordinates inverse(xi)(e).
    """
    x0, x1 = bev_spec.x_range
    y0, y1 = bev_spec.y_range
    corners = np.array([[x1, y1], [x1, y0], [x0, y0], [x0, y1], [x1, y1]])
    heading = np.array([[0.0, 0.0], [0.35 * x1, 0.0]])
    inv = inverse(xi)
    rows_c, cols_c = map_spec.metric_to_pixel(*transform_points(inv, corners).T)
    rows_h, cols_h = map_spec.metric_to_pixel(*transform_points(inv, heading).T)
    return (rows_c, cols_c), (rows_h, cols_h)


def render_alignment_overlay(observation: np.ndarray, map_patch: np.ndarray,
                             xi_gt: PoseOffset, xi_pred: PoseOffset | None, path,
                             bev_spec: GridSpec = BEV_SPEC,
                             map_spec: GridSpec = MAP_SPEC) -> Path:
    """Observation next to the map patch before/after the predicted correction.

    Dashed box: ground-truth footprint (offset xi_gt).  Solid box: the
    assumed footprint, identity before correction and the prediction after.
    """
    fig, axes = plt.subplots(1, 3, figsize=(12, 4.2))
    axes[0].imshow(raster_to_rgb(observation))
    axes[0].set_title("observation (BEV)")

    def draw(ax, xi_solid, label):
        ax.imshow(raster_to_rgb(map_patch))
        (r, c), (rh, ch) = _footprint_pixels(xi_gt, bev_spec, map_spec)
        ax.plot(c, r, "--", color="#208020", linewidth=1.6, label="ground truth")
        (r, c), (rh, ch) = _footprint_pixels(xi_solid, bev_spec, map_spec)
        ax.plot(c, r, "-", color="#202020", linewidth=1.4, label=label)
        ax.plot(ch, rh, "-", color="#202020", linewidth=1.4)
        ax.legend(loc="lower right", fontsize=7)
        ax.set_xlim(0, map_patch.shape[2])
        ax.set_ylim(map_patch.shape[1], 0)

    draw(axes[1], PoseOffset(0, 0, 0), "before correction")
    axes[1].set_title("before correction")
    draw(axes[2], xi_pred if xi_pred is not None else PoseOffset(0, 0, 0),
         "after correction")
    axes[2].set_title("after correction")
    for ax in axes:
        ax.set_xticks([])
        ax.set_yticks([])
    fig.tight_layout()
    path = Path(path)
    fig.savefig(path, dpi=110)
    plt.close(fig)
    return path
