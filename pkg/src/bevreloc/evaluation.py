"""Localization metrics, baselines, ablation matrices, latency benchmark.

Errors are measured on the residual compose(pred, inverse(gt)) so the
longitudinal/lateral decomposition lives in the ground-truth ego frame.
Evaluation scores the cumulative prediction only; per-stage outputs are
diagnostics.
"""

from __future__ import annotations

import csv
import json
import math
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .models.localizer import LocalizationModel
from .raster import NoiseSpec
from .se2 import PoseOffset, compose, inverse
from .training import ArrayDataset, default_device

POSITION_THRESHOLDS = (1.0, 2.0, 5.0, 10.0)   # meters
ORIENTATION_THRESHOLDS = (1.0, 2.0, 5.0, 10.0)  # degrees

MAP_ELEMENT_ROWS = (
    ("lanes+buildings+nodes", (True, True, True)),
    ("lanes+buildings", (True, True, False)),
    ("lanes", (True, False, False)),
)
LOSS_TERM_ROWS = (
    ("pose+bev+map", (1.0, 1.0, 1.0, 1.0)),
    ("pose+bev", (1.0, 1.0, 1.0, 0.0)),
    ("pose", (1.0, 1.0, 0.0, 0.0)),
)
VARIANT_ROWS = ("coarse_to_fine", "one_stage", "detr", "cross_attention")


@dataclass
class ErrorRecord:
    predicted: PoseOffset
    gt: PoseOffset
    position_error: float
    longitudinal_error: float
    lateral_error: float
    orientation_error_deg: float
    latency_ms: float | None = None

    def __post_init__(self):
        gap = abs(self.position_error ** 2
                  - (self.longitudinal_error ** 2 + self.lateral_error ** 2))
        if gap > 1e-9:
            raise ValueError("position error must decompose into components")


def score(pred: PoseOffset, gt: PoseOffset, latency_ms: float | None = None,
          frame: str = "gt") -> ErrorRecord:
    """Errors of one prediction: residual = compose(pred, inverse(gt)).

    The longitudinal/lateral split of the residual translation lives in
    the ground-truth ego frame by default; frame="prediction" conjugates
    the residual so the split lives in the predicted frame instead (the
    position and orientation errors are identical either way).
    """
    residual = compose(pred, inverse(gt))
    vx, vy = residual.dx, residual.dy
    if frame == "prediction":
        c, s = math.cos(residual.dtheta), math.sin(residual.dtheta)
        vx, vy = c * residual.dx + s * residual.dy, -s * residual.dx + c * residual.dy
    elif frame != "gt":
        raise ValueError(f"frame must be 'gt' or 'prediction', got {frame!r}")
    return ErrorRecord(
        predicted=pred,
        gt=gt,
        position_error=math.hypot(vx, vy),
        longitudinal_error=abs(vx),
        lateral_error=abs(vy),
        orientation_error_deg=abs(math.degrees(residual.dtheta)),
        latency_ms=latency_ms,
    )


def _recall(values: np.ndarray, thresholds) -> dict[float, float]:
    return {float(t): float((values <= t).mean()) for t in thresholds}


@dataclass
class RecallReport:
    position_recall: dict[float, float]
    orientation_recall: dict[float, float]
    longitudinal_recall: dict[float, float]
    lateral_recall: dict[float, float]
    sample_count: int
    mean_position_error: float
    mean_orientation_error_deg: float
    latency_median_ms: float | None = None
    latency_p95_ms: float | None = None
    hardware: str | None = None

    def __post_init__(self):
        for recalls in (self.position_recall, self.orientation_recall,
                        self.longitudinal_recall, self.lateral_recall):
            vals = [recalls[t] for t in sorted(recalls)]
            if any(v < 0 or v > 1 for v in vals):
                raise ValueError("recall values must lie in [0, 1]")
            if any(b < a - 1e-12 for a, b in zip(vals, vals[1:])):
                raise ValueError("recall must be non-decreasing in the threshold")

    def to_json_dict(self) -> dict:
        def keyed(d):
            return {f"{t:g}": v for t, v in sorted(d.items())}
        return {
            "position_recall": keyed(self.position_recall),
            "orientation_recall": keyed(self.orientation_recall),
            "longitudinal_recall": keyed(self.longitudinal_recall),
            "lateral_recall": keyed(self.lateral_recall),
            "sample_count": self.sample_count,
            "mean_position_error": self.mean_position_error,
            "mean_orientation_error_deg": self.mean_orientation_error_deg,
            "latency_median_ms": self.latency_median_ms,
            "latency_p95_ms": self.latency_p95_ms,
            "hardware": self.hardware,
        }

    @staticmethod
    def from_json_dict(d: dict) -> "RecallReport":
        def unkeyed(m):
            return {float(k): v for k, v in m.items()}
        return RecallReport(
            unkeyed(d["position_recall"]), unkeyed(d["orientation_recall"]),
            unkeyed(d["longitudinal_recall"]), unkeyed(d["lateral_recall"]),
            d["sample_count"], d["mean_position_error"],
            d["mean_orientation_error_deg"], d.get("latency_median_ms"),
            d.get("latency_p95_ms"), d.get("hardware"),
        )


def aggregate(records: list[ErrorRecord]) -> RecallReport:
    """Recall at the fixed thresholds; latency stats when timing is present."""
    if not records:
        raise ValueError("cannot aggregate zero records")
    pos = np.array([r.position_error for r in records])
    lon = np.array([r.longitudinal_error for r in records])
    lat = np.array([r.lateral_error for r in records])
    ori = np.array([r.orientation_error_deg for r in records])
    lat_ms = [r.latency_ms for r in records if r.latency_ms is not None]
    return RecallReport(
        position_recall=_recall(pos, POSITION_THRESHOLDS),
        orientation_recall=_recall(ori, ORIENTATION_THRESHOLDS),
        longitudinal_recall=_recall(lon, POSITION_THRESHOLDS),
        lateral_recall=_recall(lat, POSITION_THRESHOLDS),
        sample_count=len(records),
        mean_position_error=float(pos.mean()),
        mean_orientation_error_deg=float(ori.mean()),
        latency_median_ms=float(np.median(lat_ms)) if lat_ms else None,
        latency_p95_ms=float(np.percentile(lat_ms, 95)) if lat_ms else None,
        hardware=hardware_descriptor() if lat_ms else None,
    )


def no_op_baseline(noise: NoiseSpec, n: int = 100_000) -> RecallReport:
    """Monte-Carlo recall of the zero-correction predictor under the noise."""
    if n < 10_000:
        raise ValueError("need at least 10^4 draws for a stable baseline")
    rng = np.random.default_rng(noise.rng_seed)
    t, r = noise.max_translation, noise.max_rotation
    dx = rng.uniform(-t, t, n) if t > 0 else np.zeros(n)
    dy = rng.uniform(-t, t, n) if t > 0 else np.zeros(n)
    dth = rng.uniform(-r, r, n) if r > 0 else np.zeros(n)
    # residual of pred = identity is inverse(gt): same translation norm,
    # components rotated into the ground-truth ego frame
    c, s = np.cos(dth), np.sin(dth)
    res_dx = -(c * dx + s * dy)
    res_dy = s * dx - c * dy
    pos = np.hypot(res_dx, res_dy)
    ori = np.degrees(np.abs(dth))
    return RecallReport(
        position_recall=_recall(pos, POSITION_THRESHOLDS),
        orientation_recall=_recall(ori, ORIENTATION_THRESHOLDS),
        longitudinal_recall=_recall(np.abs(res_dx), POSITION_THRESHOLDS),
        lateral_recall=_recall(np.abs(res_dy), POSITION_THRESHOLDS),
        sample_count=n,
        mean_position_error=float(pos.mean()),
        mean_orientation_error_deg=float(ori.mean()),
    )


def hardware_descriptor() -> str:
    device = default_device()
    cpu = platform.processor() or platform.machine()
    return f"{platform.system()} {cpu} device={device} torch_threads={torch.get_num_threads()}"


@torch.no_grad()
def evaluate_model(model: LocalizationModel, dataset: ArrayDataset,
                   batch_size: int = 16, device: str | None = None,
                   channel_mask: tuple[bool, bool, bool] | None = None,
                   baseline: str | None = None) -> list[ErrorRecord]:
    """Score xi_total over a dataset; channel_mask zeroes map planes at input."""
    device = default_device() if device is None else device
    model = model.to(device).eval()
    records = []
    for start in range(0, len(dataset), batch_size):
        idx = list(range(start, min(start + batch_size, len(dataset))))
        batch = dataset.get_batch(idx, device)
        if channel_mask is not None:
            keep = torch.tensor(channel_mask, dtype=batch["map_patch"].dtype,
                                device=device).view(1, -1, 1, 1)
            batch["map_patch"] = batch["map_patch"] * keep
        if baseline == "noop":
            xi_total = torch.zeros(len(idx), 3)
        else:
            xi_total = model(batch)["xi_total"].cpu()
        for row, gt in zip(xi_total.numpy(), batch["xi1"].cpu().numpy()):
            records.append(score(PoseOffset(*[float(v) for v in row]),
                                 PoseOffset(*[float(v) for v in gt])))
    return records


def bench_latency(model: LocalizationModel, dataset: ArrayDataset | None = None,
                  batch: int = 1, warmup: int = 5, iters: int = 50,
                  device: str | None = None) -> dict:
    """Wall-clock forward latency; returns median/p95 ms plus host info."""
    device = default_device() if device is None else device
    model = model.to(device).eval()
    if dataset is not None and len(dataset) > 0:
        sample = dataset.get_batch(list(range(min(batch, len(dataset)))), device)
    else:
        cfg = model.config
        sample = {
            "map_patch": torch.zeros(batch, cfg.n_classes, cfg.map_spec.rows,
                                     cfg.map_spec.cols, device=device)}
        if cfg.mode == "oracle":
            sample["oracle_bev"] = torch.zeros(batch, cfg.n_classes, cfg.bev_spec.rows,
                                               cfg.bev_spec.cols, device=device)
        else:
            h, w = model.rig.image_size
            sample["images"] = torch.zeros(batch, len(model.rig), 3, h, w, device=device)

    times = []
    with torch.no_grad():
        for _ in range(warmup):
            model(sample)
        for _ in range(iters):
            t0 = time.perf_counter()
            model(sample)
            times.append((time.perf_counter() - t0) * 1000.0)
    return {
        "median_ms": float(np.median(times)),
        "p95_ms": float(np.percentile(times, 95)),
        "iters": iters,
        "warmup": warmup,
        "batch": batch,
        "hardware": hardware_descriptor(),
    }


def _row_recalls(report: RecallReport) -> dict:
    out = {}
    for prefix, recalls in (("longitudinal", report.longitudinal_recall),
                            ("lateral", report.lateral_recall),
                            ("orientation", report.orientation_recall),
                            ("position", report.position_recall)):
        for t, v in sorted(recalls.items()):
            out[f"{prefix}_recall@{t:g}"] = v
    return out


def run_ablation(matrix: str, out_dir, dataset: ArrayDataset,
                 checkpoints: dict[str, LocalizationModel] | None = None,
                 train_budget=None, train_dataset: ArrayDataset | None = None,
                 model_factory=None, device: str | None = None) -> list[dict]:
    """Evaluate one ablation matrix and write its table.csv.

    map_elements expects one trained model under the key "model" and
    zeroes raster channels cumulatively at eval time.  loss_terms and
    variants need either a checkpoint per row or a training budget
    (train_budget + train_dataset + model_factory) to fill missing cells.
    """
    from .training import LossWeights, train as train_fn

    checkpoints = checkpoints or {}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []

    def need(cell: str) -> LocalizationModel:
        if cell in checkpoints:
            return checkpoints[cell]
        if train_budget is None or train_dataset is None or model_factory is None:
            raise ValueError(f"missing checkpoint for ablation cell {cell!r} "
                             "and no training budget provided")
        return None

    if matrix == "map_elements":
        model = checkpoints.get("model")
        if model is None:
            raise ValueError("missing checkpoint for ablation cell 'model'")
        for name, mask in MAP_ELEMENT_ROWS:
            report = aggregate(evaluate_model(model, dataset, channel_mask=mask,
                                              device=device))
            row = {"cell": name, "lanes": mask[0], "buildings": mask[1],
                   "nodes": mask[2]}
            row.update(_row_recalls(report))
            rows.append(row)
    elif matrix == "loss_terms":
        for name, weights in LOSS_TERM_ROWS:
            model = need(name)
            if model is None:
                model = model_factory()
                train_fn(train_budget, train_dataset, model,
                         weights=LossWeights(*weights), out_dir=out / f"train_{name}",
                         device=device)
            report = aggregate(evaluate_model(model, dataset, device=device))
            row = {"cell": name, "pose_loss": weights[0] > 0, "bev_loss": weights[2] > 0,
                   "map_loss": weights[3] > 0}
            row.update(_row_recalls(report))
            rows.append(row)
    elif matrix == "variants":
        for variant in VARIANT_ROWS:
            model = need(variant)
            if model is None:
                model = model_factory(variant)
                train_fn(train_budget, train_dataset, model,
                         out_dir=out / f"train_{variant}", device=device)
            report = aggregate(evaluate_model(model, dataset, device=device))
            latency = bench_latency(model, dataset, iters=10, warmup=2, device=device)
            row = {"cell": variant, "variant": variant,
                   "params_m": sum(p.numel() for p in model.parameters()) / 1e6,
                   "latency_median_ms": latency["median_ms"]}
            row.update(_row_recalls(report))
            rows.append(row)
    else:
        raise ValueError(f"unknown ablation matrix {matrix!r}")

    write_table_csv(out / "table.csv", rows)
    return rows


def write_table_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    fields = list(dict.fromkeys(k for row in rows for k in row))
    with path.open("w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path


def write_metrics_json(path, report: RecallReport, extra: dict | None = None) -> Path:
    path = Path(path)
    payload = report.to_json_dict()
    if extra:
        payload.update(extra)
    path.write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")
    return path
