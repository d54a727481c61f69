"""Rasterized BEV metrics and ablation sweeps.

Predictions and ground truth are compared as occupancy masks on a
metric top-down grid: each object's footprint rectangle is rasterized,
masks are unioned per class per scene, and IoU is averaged over scenes.
Centroid localization error complements IoU since small grids quantize
coarsely. The ablation runner trains one model per (level, seed) pair
and aggregates both metrics per level.
"""

import csv
import json
import math
import os
import statistics
from dataclasses import dataclass, replace
from functools import lru_cache
from xml.sax.saxutils import escape

import numpy as np


@dataclass(frozen=True)
class BevGrid:
    """Top-down metric grid: forward z rows, lateral x columns."""

    x_min: float = -25.0
    x_max: float = 25.0
    z_min: float = 0.0
    z_max: float = 50.0
    resolution: float = 0.5

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        for lo, hi, name in ((self.x_min, self.x_max, "x"),
                             (self.z_min, self.z_max, "z")):
            if not lo < hi:
                raise ValueError(f"empty {name} extent ({lo}, {hi})")
            cells = (hi - lo) / self.resolution
            if abs(cells - round(cells)) > 1e-9:
                raise ValueError(
                    f"{name} extent {hi - lo} is not a whole number of "
                    f"{self.resolution} m cells")

    @property
    def num_x(self):
        return int(round((self.x_max - self.x_min) / self.resolution))

    @property
    def num_z(self):
        return int(round((self.z_max - self.z_min) / self.resolution))

    @property
    def shape(self):
        return (self.num_z, self.num_x)


@lru_cache(maxsize=8)
def _cell_centers(grid):
    xs = grid.x_min + (np.arange(grid.num_x) + 0.5) * grid.resolution
    zs = grid.z_min + (np.arange(grid.num_z) + 0.5) * grid.resolution
    return np.meshgrid(xs, zs)


def _box_params(box):
    if hasattr(box, "x"):
        return (box.x, box.z, box.yaw, box.length, box.width)
    x, z, yaw, length, width = box
    return (float(x), float(z), float(yaw), float(length), float(width))


def rasterize_bev_box(box, grid):
    """Boolean mask of grid cells whose centers fall inside the rotated
    footprint rectangle; empty when the box misses the grid entirely.

    Accepts a ground pose or an (x, z, yaw, length, width) sequence.
    Inclusion is strict, so a zero-dimension box covers nothing.
    """
    x, z, yaw, length, width = _box_params(box)
    if not all(math.isfinite(v) for v in (x, z, yaw, length, width)):
        raise ValueError(f"non-finite box ({x}, {z}, {yaw}, "
                         f"{length}, {width})")
    if length <= 0 or width <= 0:
        return np.zeros(grid.shape, dtype=bool)
    cx, cz = _cell_centers(grid)
    dx = cx - x
    dz = cz - z
    sin_y, cos_y = math.sin(yaw), math.cos(yaw)
    along = dx * sin_y + dz * cos_y
    across = dx * cos_y - dz * sin_y
    return (np.abs(along) < 0.5 * length) & (np.abs(across) < 0.5 * width)


def mask_iou(a, b):
    """Intersection over union of two boolean masks; nan when both are
    empty (callers decide whether that case is meaningful)."""
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    union = np.count_nonzero(a | b)
    if union == 0:
        return float("nan")
    return np.count_nonzero(a & b) / union


@dataclass
class SceneBoxes:
    """Index-aligned BEV boxes for one scene.

    centroids (N, 2) holds (x, z); dims (N, 2) holds (length, width).
    Predictions typically reuse ground-truth dims, yaws, and classes
    with their own centroids, isolating localization in the metric.
    """

    centroids: np.ndarray
    yaws: np.ndarray
    dims: np.ndarray
    classes: np.ndarray

    def __post_init__(self):
        self.centroids = np.asarray(self.centroids, dtype=np.float64)
        self.yaws = np.asarray(self.yaws, dtype=np.float64)
        self.dims = np.asarray(self.dims, dtype=np.float64)
        self.classes = np.asarray(self.classes, dtype=np.int64)
        n = len(self.classes)
        if (self.centroids.shape != (n, 2) or self.yaws.shape != (n,)
                or self.dims.shape != (n, 2)):
            raise ValueError("misaligned box arrays")

    @property
    def num_boxes(self):
        return len(self.classes)

    def select(self, index):
        index = np.asarray(index)
        return SceneBoxes(self.centroids[index], self.yaws[index],
                          self.dims[index], self.classes[index])


def _class_mask(boxes, class_id, grid):
    mask = np.zeros(grid.shape, dtype=bool)
    for i in np.flatnonzero(boxes.classes == class_id):
        mask |= rasterize_bev_box(
            (boxes.centroids[i, 0], boxes.centroids[i, 1], boxes.yaws[i],
             boxes.dims[i, 0], boxes.dims[i, 1]), grid)
    return mask


def iou(preds, gts, grid, num_classes):
    """Per-class and mean BEV IoU over aligned scene lists.

    Per scene and class the masks are the unions of that class's boxes;
    a class absent from both prediction and ground truth in a scene is
    skipped, not counted as zero. The mean averages the per-class
    values over classes observed at least once.
    """
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth scene counts differ")
    per_class_values = {c: [] for c in range(num_classes)}
    for pred, gt in zip(preds, gts):
        for c in range(num_classes):
            pred_mask = _class_mask(pred, c, grid)
            gt_mask = _class_mask(gt, c, grid)
            value = mask_iou(pred_mask, gt_mask)
            if not math.isnan(value):
                per_class_values[c].append(value)
    per_class = {c: float(np.mean(v))
                 for c, v in per_class_values.items() if v}
    mean = float(np.mean(list(per_class.values()))) if per_class \
        else float("nan")
    return {"per_class": per_class, "mean": mean}


def localization_error(pred_centroids, gt_centroids):
    """Mean Euclidean distance between aligned centroid arrays."""
    pred = np.asarray(pred_centroids, dtype=np.float64)
    gt = np.asarray(gt_centroids, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 2:
        raise ValueError(f"centroid arrays must align as (N, 2), got "
                         f"{pred.shape} vs {gt.shape}")
    if pred.shape[0] == 0:
        raise ValueError("no objects to score")
    return float(np.mean(np.linalg.norm(pred - gt, axis=1)))


def _validate_bins(edges, grid):
    edges = [float(e) for e in edges]
    if len(edges) < 2 or any(b <= a for a, b in zip(edges, edges[1:])):
        raise ValueError(f"bin edges must increase: {edges}")
    if edges[0] > grid.z_min or edges[-1] < grid.z_max:
        raise ValueError(f"bins {edges} do not cover the grid depth "
                         f"extent [{grid.z_min}, {grid.z_max}]")
    return edges


def distance_binned_metrics(preds, gts, grid, num_classes,
                            edges=(0, 5, 10, 15, 20, 25, 30, 35, 40, 45,
                                   50)):
    """IoU and localization error per depth bin.

    Objects are binned by ground-truth centroid z (prediction follows
    its ground-truth object); a bin with no objects anywhere is left
    out of the result rather than reported as zero.
    """
    edges = _validate_bins(edges, grid)
    if len(preds) != len(gts):
        raise ValueError("prediction and ground-truth scene counts differ")
    result = {}
    for lo, hi in zip(edges, edges[1:]):
        bin_preds, bin_gts = [], []
        errors = []
        count = 0
        for pred, gt in zip(preds, gts):
            z = gt.centroids[:, 1]
            inside = (z >= lo) & (z < hi) if hi < edges[-1] \
                else (z >= lo) & (z <= hi)
            idx = np.flatnonzero(inside)
            if idx.size == 0:
                continue
            count += idx.size
            bin_preds.append(pred.select(idx))
            bin_gts.append(gt.select(idx))
            errors.append(np.linalg.norm(pred.centroids[idx]
                                         - gt.centroids[idx], axis=1))
        if count == 0:
            continue
        result[(lo, hi)] = {
            "iou": iou(bin_preds, bin_gts, grid, num_classes)["mean"],
            "loc_error": float(np.mean(np.concatenate(errors))),
            "count": count,
        }
    return result


def iou_by_distance(preds, gts, grid, num_classes,
                    edges=(0, 5, 10, 15, 20, 25, 30, 35, 40, 45, 50)):
    """Mean IoU per depth bin; empty bins are absent from the result."""
    binned = distance_binned_metrics(preds, gts, grid, num_classes, edges)
    return {span: stats["iou"] for span, stats in binned.items()}


ABLATION_AXES = ("propagation_mode", "node_degree", "feature_set")

PROPAGATION_LEVELS = ("n2n", "n2n+e2n", "n2n+e2n+e2e", "n2n+e2n+e2e+n2e")

FEATURE_LEVELS = ("appearance",
                  "appearance+scanline",
                  "appearance+geometry",
                  "appearance+geometry+scanline",
                  "position+appearance+scanline+geometry")


@dataclass(frozen=True)
class AblationSpec:
    """One sweep axis, its levels, and the shared training recipe."""

    axis: str
    levels: tuple
    train_config: object
    seeds: tuple

    def __post_init__(self):
        if self.axis not in ABLATION_AXES:
            raise ValueError(f"unknown ablation axis {self.axis!r}; "
                             f"expected one of {ABLATION_AXES}")
        if len(self.levels) < 2:
            raise ValueError("an ablation needs at least 2 levels")
        if len(set(self.levels)) != len(self.levels):
            raise ValueError(f"duplicate levels in {self.levels}")
        if len(self.seeds) < 3:
            raise ValueError("an ablation needs at least 3 seeds")


def propagation_level_flags(level):
    """Split a message-direction level label into config flags and the
    matching supervision scheme (edge supervision once edges update)."""
    parts = level.split("+")
    valid = {"n2n", "e2n", "e2e", "n2e"}
    if not parts or set(parts) - valid or len(set(parts)) != len(parts):
        raise ValueError(f"bad propagation level {level!r}")
    if "n2n" not in parts:
        raise ValueError(f"propagation level {level!r} lacks n2n")
    flags = {
        "enable_n2n": True,
        "enable_e2n": "e2n" in parts,
        "enable_e2e": "e2e" in parts,
        "enable_n2e": "n2e" in parts,
    }
    supervision = "nodes+edges" if flags["enable_e2e"] else "nodes"
    return flags, supervision


def ablation_level_config(axis, level, base_config):
    """Specialize the shared training config for one sweep level."""
    if axis == "propagation_mode":
        flags, supervision = propagation_level_flags(level)
        prop = replace(base_config.propagation, **flags)
        weights = base_config.loss_weights
        if supervision == "nodes":
            weights = replace(weights, loc_edges=0.0)
        return replace(base_config, propagation=prop, loss_weights=weights)
    if axis == "node_degree":
        k = int(level)
        if k < 0:
            raise ValueError(f"node degree must be >= 0, got {k}")
        return replace(base_config, k_neighbors=k)
    if axis == "feature_set":
        features = tuple(level.split("+"))
        prop = replace(base_config.propagation,
                       use_position="position" in features)
        return replace(base_config, feature_set=features, propagation=prop)
    raise ValueError(f"unknown ablation axis {axis!r}")


def _level_supervision(axis, level):
    if axis == "propagation_mode":
        return propagation_level_flags(level)[1]
    return ""


def run_ablation(spec, dataset, out_dir=None):
    """Train one model per (level, seed) and aggregate metrics per level.

    Divergent runs (non-finite loss) are recorded and flagged but
    excluded from the aggregates. Results are bit-reproducible for
    fixed seeds. When out_dir is given, per-run rows land in
    ablation_runs.csv and the aggregate in ablation_summary.json.
    """
    from . import training

    rows = []
    for level in spec.levels:
        for seed in spec.seeds:
            config = ablation_level_config(
                spec.axis, level, replace(spec.train_config, seed=seed))
            row = {"axis": spec.axis, "level": str(level), "seed": seed,
                   "supervision": _level_supervision(spec.axis, level)}
            try:
                record = training.train(dataset, config)
            except training.TrainingDivergence as exc:
                row.update(diverged=True, error=str(exc),
                           loc_error=float("nan"), iou=float("nan"),
                           wall_clock=float("nan"))
            else:
                row.update(diverged=False, error="",
                           loc_error=record.final_val_loc_error,
                           iou=record.final_val_iou,
                           wall_clock=record.wall_clock)
            rows.append(row)

    summary = []
    for level in spec.levels:
        values = [r["loc_error"] for r in rows
                  if r["level"] == str(level) and not r["diverged"]]
        ious = [r["iou"] for r in rows
                if r["level"] == str(level) and not r["diverged"]]
        entry = {"axis": spec.axis, "level": str(level),
                 "supervision": _level_supervision(spec.axis, level),
                 "runs": len(spec.seeds),
                 "diverged": len(spec.seeds) - len(values)}
        if values:
            entry.update(
                loc_error_mean=float(np.mean(values)),
                loc_error_std=float(np.std(values)),
                loc_error_median=float(statistics.median(values)),
                iou_mean=float(np.mean(ious)),
                iou_std=float(np.std(ious)),
            )
        summary.append(entry)

    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        write_csv(os.path.join(out_dir, "ablation_runs.csv"), rows)
        write_json(os.path.join(out_dir, "ablation_summary.json"),
                   {"axis": spec.axis, "levels": [str(l) for l in
                                                  spec.levels],
                    "seeds": list(spec.seeds), "summary": summary})
    return {"rows": rows, "summary": summary}


def write_csv(path, rows, fieldnames=None):
    """One dict per row; columns default to the first row's keys."""
    if not rows:
        raise ValueError("no rows to write")
    if fieldnames is None:
        fieldnames = list(rows[0].keys())
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
            "#8c564b", "#17becf")


def _ticks(lo, hi, count=5):
    if hi <= lo:
        hi = lo + 1.0
    step = (hi - lo) / (count - 1)
    return [lo + i * step for i in range(count)]


def _fmt(value):
    return f"{value:.4g}"


def svg_line_plot(path, series, title="", x_label="", y_label="",
                  width=640, height=400):
    """Hand-rolled SVG polyline chart.

    series is an ordered list of (label, points) with points as (x, y)
    pairs; every series shares the axes. No external renderer involved.
    """
    if not series or all(not pts for _, pts in series):
        raise ValueError("nothing to plot")
    margin_l, margin_r, margin_t, margin_b = 60, 140, 36, 44
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    xs = [p[0] for _, pts in series for p in pts]
    ys = [p[1] for _, pts in series for p in pts]
    x_lo, x_hi = min(xs), max(xs)
    y_lo, y_hi = min(ys), max(ys)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi = y_lo + 1.0
    y_lo, y_hi = y_lo - 0.05 * (y_hi - y_lo), y_hi + 0.05 * (y_hi - y_lo)

    def sx(x):
        return margin_l + (x - x_lo) / (x_hi - x_lo) * plot_w

    def sy(y):
        return margin_t + plot_h - (y - y_lo) / (y_hi - y_lo) * plot_h

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle" '
                     f'font-size="14" font-family="sans-serif">'
                     f'{escape(title)}</text>')
    parts.append(f'<rect x="{margin_l}" y="{margin_t}" width="{plot_w}" '
                 f'height="{plot_h}" fill="none" stroke="#333"/>')
    for tx in _ticks(x_lo, x_hi):
        parts.append(f'<line x1="{sx(tx):.1f}" y1="{margin_t + plot_h}" '
                     f'x2="{sx(tx):.1f}" y2="{margin_t + plot_h + 4}" '
                     f'stroke="#333"/>')
        parts.append(f'<text x="{sx(tx):.1f}" y="{margin_t + plot_h + 16}" '
                     f'text-anchor="middle" font-size="10" '
                     f'font-family="sans-serif">{_fmt(tx)}</text>')
    for ty in _ticks(y_lo, y_hi):
        parts.append(f'<line x1="{margin_l - 4}" y1="{sy(ty):.1f}" '
                     f'x2="{margin_l}" y2="{sy(ty):.1f}" stroke="#333"/>')
        parts.append(f'<text x="{margin_l - 8}" y="{sy(ty) + 3:.1f}" '
                     f'text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{_fmt(ty)}</text>')
    if x_label:
        parts.append(f'<text x="{margin_l + plot_w / 2}" '
                     f'y="{height - 8}" text-anchor="middle" '
                     f'font-size="12" font-family="sans-serif">'
                     f'{escape(x_label)}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{margin_t + plot_h / 2}" '
                     f'text-anchor="middle" font-size="12" '
                     f'font-family="sans-serif" transform="rotate(-90 14 '
                     f'{margin_t + plot_h / 2})">{escape(y_label)}</text>')
    for i, (label, pts) in enumerate(series):
        if not pts:
            continue
        color = _PALETTE[i % len(_PALETTE)]
        coords = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in pts)
        parts.append(f'<polyline points="{coords}" fill="none" '
                     f'stroke="{color}" stroke-width="1.6"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{sx(x):.1f}" cy="{sy(y):.1f}" '
                         f'r="2.4" fill="{color}"/>')
        ly = margin_t + 14 + i * 16
        parts.append(f'<line x1="{width - margin_r + 10}" y1="{ly - 3}" '
                     f'x2="{width - margin_r + 30}" y2="{ly - 3}" '
                     f'stroke="{color}" stroke-width="1.6"/>')
        parts.append(f'<text x="{width - margin_r + 34}" y="{ly}" '
                     f'font-size="11" font-family="sans-serif">'
                     f'{escape(str(label))}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")


def svg_bar_chart(path, labels, values, errors=None, title="",
                  y_label="", width=640, height=400):
    """Hand-rolled SVG bar chart with optional error whiskers."""
    if len(labels) != len(values) or not labels:
        raise ValueError("labels and values must align and be non-empty")
    if errors is not None and len(errors) != len(values):
        raise ValueError("errors must align with values")
    margin_l, margin_r, margin_t, margin_b = 60, 24, 36, 70
    plot_w = width - margin_l - margin_r
    plot_h = height - margin_t - margin_b
    tops = [v + (errors[i] if errors else 0.0)
            for i, v in enumerate(values)]
    y_hi = max(tops) * 1.08 if max(tops) > 0 else 1.0
    slot = plot_w / len(values)
    bar_w = slot * 0.6

    def sy(y):
        return margin_t + plot_h - y / y_hi * plot_h

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
             f'height="{height}" viewBox="0 0 {width} {height}">',
             f'<rect width="{width}" height="{height}" fill="white"/>']
    if title:
        parts.append(f'<text x="{width / 2}" y="20" text-anchor="middle" '
                     f'font-size="14" font-family="sans-serif">'
                     f'{escape(title)}</text>')
    parts.append(f'<rect x="{margin_l}" y="{margin_t}" width="{plot_w}" '
                 f'height="{plot_h}" fill="none" stroke="#333"/>')
    for ty in _ticks(0.0, y_hi):
        parts.append(f'<line x1="{margin_l - 4}" y1="{sy(ty):.1f}" '
                     f'x2="{margin_l}" y2="{sy(ty):.1f}" stroke="#333"/>')
        parts.append(f'<text x="{margin_l - 8}" y="{sy(ty) + 3:.1f}" '
                     f'text-anchor="end" font-size="10" '
                     f'font-family="sans-serif">{_fmt(ty)}</text>')
    if y_label:
        parts.append(f'<text x="14" y="{margin_t + plot_h / 2}" '
                     f'text-anchor="middle" font-size="12" '
                     f'font-family="sans-serif" transform="rotate(-90 14 '
                     f'{margin_t + plot_h / 2})">{escape(y_label)}</text>')
    for i, value in enumerate(values):
        x0 = margin_l + i * slot + (slot - bar_w) / 2
        color = _PALETTE[i % len(_PALETTE)]
        parts.append(f'<rect x="{x0:.1f}" y="{sy(value):.1f}" '
                     f'width="{bar_w:.1f}" '
                     f'height="{margin_t + plot_h - sy(value):.1f}" '
                     f'fill="{color}" fill-opacity="0.8"/>')
        if errors is not None and errors[i] > 0:
            cx = x0 + bar_w / 2
            lo, hi = sy(value - errors[i]), sy(value + errors[i])
            parts.append(f'<line x1="{cx:.1f}" y1="{lo:.1f}" '
                         f'x2="{cx:.1f}" y2="{hi:.1f}" stroke="#222"/>')
            for yy in (lo, hi):
                parts.append(f'<line x1="{cx - 4:.1f}" y1="{yy:.1f}" '
                             f'x2="{cx + 4:.1f}" y2="{yy:.1f}" '
                             f'stroke="#222"/>')
        lx = margin_l + i * slot + slot / 2
        parts.append(f'<text x="{lx:.1f}" y="{margin_t + plot_h + 16}" '
                     f'text-anchor="end" font-size="10" '
                     f'font-family="sans-serif" transform="rotate(-30 '
                     f'{lx:.1f} {margin_t + plot_h + 16})">'
                     f'{escape(str(labels[i]))}</text>')
    parts.append("</svg>")
    with open(path, "w") as fh:
        fh.write("\n".join(parts) + "\n")
