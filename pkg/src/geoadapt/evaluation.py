"""Evaluation: segmentation mIoU, depth metrics, per-run reports.

`evaluate` runs a checkpoint over the held-out target labels and writes
eval.csv (one row per frame plus a summary row), summary.json, and a
per-class IoU bar chart. `merge_reports` stacks several summaries into a
comparison table. All numbers are reported with 4 decimal places.
"""

import csv
import json
import os
from dataclasses import dataclass

import numpy as np

from . import diffcore as dc
from .dataset import DatasetReader
from .networks import MultiTaskModel
from .scenegen import CLASS_NAMES, D_MAX


class ConfusionMatrix:
    """C x C pixel counts; rows are ground truth, columns predictions."""

    def __init__(self, num_classes, ignore_index=255):
        self.num_classes = num_classes
        self.ignore_index = ignore_index
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def add(self, predictions, labels):
        pred = np.asarray(predictions).ravel()
        lab = np.asarray(labels).ravel()
        keep = lab != self.ignore_index
        pred, lab = pred[keep], lab[keep]
        if np.any((lab < 0) | (lab >= self.num_classes)):
            raise ValueError("label out of range")
        idx = lab * self.num_classes + pred
        self.counts += np.bincount(idx, minlength=self.num_classes**2).reshape(
            self.num_classes, self.num_classes
        )

    def iou(self):
        """Per-class IoU (NaN for classes absent from both sides) and their mean."""
        tp = np.diag(self.counts).astype(np.float64)
        fp = self.counts.sum(axis=0) - tp
        fn = self.counts.sum(axis=1) - tp
        denom = tp + fp + fn
        with np.errstate(invalid="ignore"):
            per_class = np.where(denom > 0, tp / np.maximum(denom, 1), np.nan)
        present = denom > 0
        mean = float(per_class[present].mean()) if present.any() else float("nan")
        return per_class, mean


def miou(predictions, labels, num_classes, ignore_index=255):
    cm = ConfusionMatrix(num_classes, ignore_index)
    cm.add(predictions, labels)
    return cm.iou()


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    delta_1_25: float
    median_ratio: float

    def to_json(self):
        return {k: round(float(getattr(self, k)), 4) for k in self.__dataclass_fields__}


def depth_metrics(d_hat, d, mask, median_scale=False):
    """Standard depth errors over masked pixels.

    median_ratio = median(d / d_hat) is always reported; when
    ``median_scale`` is set, the prediction is pre-multiplied by it.
    """
    d_hat = np.asarray(d_hat, dtype=np.float64)
    d = np.asarray(d, dtype=np.float64)
    mask = np.asarray(mask, dtype=bool)
    if not mask.any():
        raise ValueError("depth metrics need a non-empty mask")
    p, g = d_hat[mask], d[mask]
    if np.any(p <= 0) or np.any(g <= 0):
        raise ValueError("depth metrics need positive depths under the mask")
    ratio = float(np.median(g / p))
    if median_scale:
        p = p * ratio
    err = p - g
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(err) / g)),
        sq_rel=float(np.mean(err**2 / g)),
        rmse=float(np.sqrt(np.mean(err**2))),
        delta_1_25=float(np.mean(np.maximum(p / g, g / p) < 1.25)),
        median_ratio=ratio,
    )


def _fmt(x):
    return f"{x:.4f}"


def evaluate(ckpt_dir, target_root, out_dir, batch_frames=8, plot=True):
    """Checkpoint + held-out target labels -> metrics report (written to out_dir)."""
    os.makedirs(out_dir, exist_ok=True)
    model, manifest = MultiTaskModel.load_checkpoint(ckpt_dir)
    num_classes = model.config.num_classes
    reader = DatasetReader(target_root, "target", split="eval")
    ids = reader.frame_ids()
    d_cap = model.config.d_max * 0.999

    cm = ConfusionMatrix(num_classes)
    rows = []
    preds_all, gts_all = [], []
    with dc.no_grad():
        for start in range(0, len(ids), batch_frames):
            chunk = ids[start : start + batch_frames]
            frames = [reader.load_frame(seq, fi, with_labels=True) for seq, fi in chunk]
            imgs = np.stack([f[0] for f in frames])
            pyr = model.encoder_forward(dc.constant(imgs))
            depth_pred = model.depth_forward(pyr)[0].data[:, 0]
            sem_pred = model.semantic_forward(pyr).data.argmax(axis=1)
            for j, (seq, fi) in enumerate(chunk):
                _, depth_gt, sem_gt = frames[j]
                cm_frame = ConfusionMatrix(num_classes)
                cm_frame.add(sem_pred[j], sem_gt)
                cm.add(sem_pred[j], sem_gt)
                _, frame_miou = cm_frame.iou()
                mask = (depth_gt > 0) & (depth_gt < d_cap)
                dm = depth_metrics(depth_pred[j], depth_gt, mask)
                preds_all.append(depth_pred[j][mask])
                gts_all.append(depth_gt[mask])
                rows.append(
                    [f"{seq}/frame_{fi:03d}", frame_miou]
                    + [dm.abs_rel, dm.sq_rel, dm.rmse, dm.delta_1_25, dm.median_ratio]
                )

    per_class, mean_iou = cm.iou()
    pred_cat = np.concatenate(preds_all)
    gt_cat = np.concatenate(gts_all)
    ones = np.ones_like(gt_cat, dtype=bool)
    dm_raw = depth_metrics(pred_cat, gt_cat, ones, median_scale=False)
    dm_scaled = depth_metrics(pred_cat, gt_cat, ones, median_scale=True)

    csv_path = os.path.join(out_dir, "eval.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["frame", "miou", "abs_rel", "sq_rel", "rmse", "delta_1_25", "median_ratio"]
        )
        for row in rows:
            writer.writerow([row[0]] + [_fmt(v) for v in row[1:]])
        writer.writerow(
            ["summary", _fmt(mean_iou)]
            + [
                _fmt(v)
                for v in (
                    dm_raw.abs_rel,
                    dm_raw.sq_rel,
                    dm_raw.rmse,
                    dm_raw.delta_1_25,
                    dm_raw.median_ratio,
                )
            ]
        )

    summary = {
        "checkpoint": os.path.abspath(ckpt_dir),
        "mode": manifest.get("mode", "unknown"),
        "n_frames": len(rows),
        "miou": round(mean_iou, 4),
        "per_class_iou": {
            CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c): (
                None if np.isnan(per_class[c]) else round(float(per_class[c]), 4)
            )
            for c in range(num_classes)
        },
        "depth": dm_raw.to_json(),
        "depth_median_scaled": dm_scaled.to_json(),
    }
    with open(os.path.join(out_dir, "summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)

    if plot:
        _plot_summary(summary, os.path.join(out_dir, "summary.png"))
    return summary


def _plot_summary(summary, path):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    names = list(summary["per_class_iou"])
    vals = [summary["per_class_iou"][n] or 0.0 for n in names]
    fig, ax = plt.subplots(figsize=(6, 3))
    ax.bar(names, vals, color="#4878a8")
    ax.axhline(summary["miou"], color="#a84848", ls="--", label=f"mIoU {summary['miou']:.4f}")
    ax.set_ylim(0, 1)
    ax.set_ylabel("IoU")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def merge_reports(summary_paths, out_dir, plot=True):
    """Stack several summary.json files into comparison.csv (+ bar chart)."""
    os.makedirs(out_dir, exist_ok=True)
    reports = []
    for path in summary_paths:
        with open(path) as fh:
            reports.append((path, json.load(fh)))
    csv_path = os.path.join(out_dir, "comparison.csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            ["run", "mode", "miou", "abs_rel", "rmse", "delta_1_25", "median_ratio"]
        )
        for path, rep in reports:
            writer.writerow(
                [
                    os.path.basename(os.path.dirname(os.path.abspath(path))) or path,
                    rep.get("mode", "?"),
                    _fmt(rep["miou"]),
                    _fmt(rep["depth"]["abs_rel"]),
                    _fmt(rep["depth"]["rmse"]),
                    _fmt(rep["depth"]["delta_1_25"]),
                    _fmt(rep["depth"]["median_ratio"]),
                ]
            )
    if plot and reports:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt

        labels = [r[1].get("mode", "?") for r in reports]
        vals = [r[1]["miou"] for r in reports]
        fig, ax = plt.subplots(figsize=(6, 3))
        ax.bar(labels, vals, color="#4878a8")
        ax.set_ylabel("target mIoU")
        ax.set_ylim(0, 1)
        fig.tight_layout()
        fig.savefig(os.path.join(out_dir, "comparison.png"), dpi=110)
        plt.close(fig)
    return csv_path
