"""Depth, segmentation and steering metrics with JSON/CSV serialisation."""
from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import asdict, dataclass

import numpy as np

TASKS = ("panoptic", "instance", "semantic")
DEPTH_COLUMNS = ("abs_rel", "sq_rel", "rmse", "rmse_log", "delta1", "delta2", "delta3")
SEG_COLUMNS = ("pq", "ap", "iou")
STEERING_COLUMNS = ("model", "train_error", "test_error")


def _as_numpy(x):
    if hasattr(x, "detach"):
        x = x.detach().cpu().numpy()
    return np.asarray(x)


@dataclass
class DepthMetrics:
    abs_rel: float
    sq_rel: float
    rmse: float
    rmse_log: float
    delta1: float
    delta2: float
    delta3: float
    median_scaled: bool = True

    def row(self) -> list:
        return [getattr(self, c) for c in DEPTH_COLUMNS]


def depth_metrics(pred, gt, valid=None, median_scale: bool = True,
                  max_depth: float | None = None, min_depth: float = 1e-3) -> DepthMetrics:
    """Standard monocular depth errors over valid pixels.

    With ``median_scale`` the prediction is multiplied by ``median(gt)/median(pred)``
    before scoring. ``max_depth`` clamps both maps and drops ground truth beyond it.
    """
    pred = _as_numpy(pred).astype(np.float64)
    gt = _as_numpy(gt).astype(np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    mask = np.ones(gt.shape, bool) if valid is None else _as_numpy(valid).astype(bool).reshape(gt.shape)
    mask &= gt > min_depth
    if max_depth is not None:
        mask &= gt < max_depth
    if not mask.any():
        raise ValueError("no valid pixels to evaluate")
    p, g = pred[mask], gt[mask]
    if median_scale:
        p = p * np.median(g) / np.median(p)
    p = np.clip(p, min_depth, max_depth if max_depth is not None else np.inf)
    thresh = np.maximum(p / g, g / p)
    return DepthMetrics(
        abs_rel=float(np.mean(np.abs(p - g) / g)),
        sq_rel=float(np.mean((p - g) ** 2 / g)),
        rmse=float(np.sqrt(np.mean((p - g) ** 2))),
        rmse_log=float(np.sqrt(np.mean((np.log(p) - np.log(g)) ** 2))),
        delta1=float(np.mean(thresh < 1.25)),
        delta2=float(np.mean(thresh < 1.25 ** 2)),
        delta3=float(np.mean(thresh < 1.25 ** 3)),
        median_scaled=median_scale,
    )


@dataclass
class SegMetrics:
    iou: float
    pq: float | None = None
    ap: float | None = None
    task: str = "semantic"
    ap_simplified: bool = True

    def row(self) -> list:
        return [self.pq, self.ap, self.iou]


def mean_iou(pred, gt, num_classes: int | None = None) -> float:
    """Mean IoU over the classes present in either map."""
    pred, gt = _as_numpy(pred).ravel(), _as_numpy(gt).ravel()
    n = int(max(pred.max(initial=0), gt.max(initial=0))) + 1 if num_classes is None else num_classes
    conf = np.bincount(gt * n + pred, minlength=n * n).reshape(n, n)
    inter = np.diag(conf)
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return float(np.mean(inter[present] / union[present])) if present.any() else 1.0


def segments(semantic, instance=None) -> dict:
    """Map (class, instance id) keys to boolean pixel masks. Stuff pixels carry instance 0."""
    semantic = _as_numpy(semantic)
    instance = np.zeros_like(semantic) if instance is None else _as_numpy(instance)
    keys = np.stack([semantic.ravel(), instance.ravel()], 1)
    out = {}
    for key in np.unique(keys, axis=0):
        out[(int(key[0]), int(key[1]))] = ((semantic == key[0]) & (instance == key[1]))
    return out


def _iou(a, b) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def panoptic_quality(pred_segments: dict, gt_segments: dict) -> float:
    """``sum(IoU of matches) / (TP + FP/2 + FN/2)``; a match is same class and IoU > 0.5.

    Segment keys are ``(class, id)``; masks within one map must not overlap,
    which makes IoU > 0.5 matches unique.
    """
    if not pred_segments and not gt_segments:
        return 1.0
    matched_iou, tp = 0.0, 0
    used = set()
    for gk, gm in gt_segments.items():
        for pk, pm in pred_segments.items():
            if pk in used or pk[0] != gk[0]:
                continue
            iou = _iou(pm, gm)
            if iou > 0.5:
                matched_iou += iou
                tp += 1
                used.add(pk)
                break
    fp, fn = len(pred_segments) - tp, len(gt_segments) - tp
    return matched_iou / (tp + fp / 2 + fn / 2)


def simplified_ap(pred_instances: dict, gt_instances: dict, thresholds=(0.5, 0.75)) -> float:
    """Mean over IoU thresholds of the fraction of predicted instances matching a same-class instance."""
    if not pred_instances:
        return 1.0 if not gt_instances else 0.0
    scores = []
    for thr in thresholds:
        hits, used = 0, set()
        for pk, pm in pred_instances.items():
            for gk, gm in gt_instances.items():
                if gk in used or gk[0] != pk[0]:
                    continue
                if _iou(pm, gm) > thr:
                    hits += 1
                    used.add(gk)
                    break
        scores.append(hits / len(pred_instances))
    return float(np.mean(scores))


def seg_metrics(pred_semantic, gt_semantic, task: str = "panoptic", pred_instance=None, gt_instance=None,
                num_classes: int | None = None) -> SegMetrics:
    """IoU always; PQ for the panoptic task; simplified AP for the instance task."""
    if task not in TASKS:
        raise ValueError(f"unknown segmentation task {task!r}; expected one of {TASKS}")
    out = SegMetrics(iou=mean_iou(pred_semantic, gt_semantic, num_classes), task=task)
    if task == "semantic":
        return out
    ps = segments(pred_semantic, pred_instance)
    gs = segments(gt_semantic, gt_instance)
    if task == "panoptic":
        out.pq = panoptic_quality(ps, gs)
    else:
        out.ap = simplified_ap({k: v for k, v in ps.items() if k[1] > 0}, {k: v for k, v in gs.items() if k[1] > 0})
    return out


@dataclass
class SteeringReport:
    train_errors: list
    test_errors: list
    train_mean: float
    train_std: float
    test_mean: float
    test_std: float
    std_kind: str = "population"

    @property
    def train_cell(self) -> str:
        return f"{self.train_mean:.2f}±{self.train_std:.2f}"

    @property
    def test_cell(self) -> str:
        return f"{self.test_mean:.2f}±{self.test_std:.2f}"

    def to_dict(self) -> dict:
        d = asdict(self)
        d["folds"] = [{"fold": i, "train_mse": a, "test_mse": b}
                      for i, (a, b) in enumerate(zip(self.train_errors, self.test_errors))]
        d["train_cell"], d["test_cell"] = self.train_cell, self.test_cell
        return d


def steering_report(fold_results, n_folds: int = 10) -> SteeringReport:
    """Aggregate per-fold ``(train_mse, test_mse)`` pairs as mean ± population std."""
    fold_results = list(fold_results)
    if len(fold_results) != n_folds:
        raise ValueError(f"expected {n_folds} fold results, got {len(fold_results)}")
    train = np.array([float(a) for a, _ in fold_results])
    test = np.array([float(b) for _, b in fold_results])
    return SteeringReport(train.tolist(), test.tolist(), float(train.mean()), float(train.std()),
                          float(test.mean()), float(test.std()))


def binarize_mask(mask, threshold: float = 0.5):
    if not 0 < threshold < 1:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    if hasattr(mask, "detach"):
        return (mask >= threshold).to(mask.dtype)
    return (np.asarray(mask) >= threshold).astype(np.float64)


def to_json(metrics, path=None, **extra) -> str:
    payload = metrics.to_dict() if hasattr(metrics, "to_dict") else asdict(metrics)
    payload.update(extra)
    text = json.dumps(payload, indent=2, sort_keys=True)
    if path is not None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            f.write(text + "\n")
    return text


def to_csv(rows, columns, path=None) -> str:
    """Write rows under a header in the standard report column order."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(columns)
    for row in rows:
        writer.writerow(["" if v is None else (f"{v:.6f}" if isinstance(v, float) else v) for v in row])
    text = buf.getvalue()
    if path is not None:
        os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
        with open(path, "w") as f:
            f.write(text)
    return text
