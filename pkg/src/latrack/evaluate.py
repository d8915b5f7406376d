"""OPE metrics with independent brute-force oracles and report emission.

Conventions: frame 0 (initialization) is excluded everywhere; success and
precision count visible-gt frames only, per-sequence averaged; the long-term
Pr/Re/F protocol pools all frames and scores invisible-gt frames as IoU 0.
"""

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConsistencyError, DataError

IOU_THRESHOLDS = np.linspace(0.0, 1.0, 21)
CENTER_THRESHOLDS = np.arange(0, 51, dtype=np.float64)
NORM_THRESHOLDS = np.linspace(0.0, 0.5, 101)


@dataclass
class SeqRun:
    name: str
    pred: np.ndarray  # [K, 4] pixel top-left boxes
    scores: np.ndarray  # [K]
    gt: np.ndarray  # [K, 4]
    visible: np.ndarray  # [K] 0/1

    def __post_init__(self):
        if not (len(self.pred) == len(self.scores) == len(self.gt) == len(self.visible)):
            raise DataError(f"sequence {self.name}: prediction/gt length mismatch")


def load_run(results_dir, dataset):
    """Pair result files of one mode directory with dataset ground truth."""
    results_dir = Path(results_dir)
    runs = []
    for record in dataset.records:
        path = results_dir / f"{record.name}.txt"
        if not path.exists():
            raise DataError(f"missing results file {path}")
        rows = np.asarray([[float(v) for v in line.split(",")]
                           for line in path.read_text().splitlines()])
        runs.append(SeqRun(name=record.name, pred=rows[:, :4], scores=rows[:, 4],
                           gt=record.boxes, visible=record.visible))
    return runs


def iou(a, b):
    """Vectorized IoU of (x, y, w, h) boxes; 0 where the union is empty."""
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    x1 = np.maximum(a[..., 0], b[..., 0])
    y1 = np.maximum(a[..., 1], b[..., 1])
    x2 = np.minimum(a[..., 0] + a[..., 2], b[..., 0] + b[..., 2])
    y2 = np.minimum(a[..., 1] + a[..., 3], b[..., 1] + b[..., 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    union = a[..., 2] * a[..., 3] + b[..., 2] * b[..., 3] - inter
    return np.where(union > 0, inter / np.where(union > 0, union, 1.0), 0.0)


def _counted(seq: SeqRun):
    """Visible frames after the initialization frame."""
    mask = seq.visible.astype(bool).copy()
    mask[0] = False
    return mask


def _per_sequence_curves(runs, values_fn, thresholds):
    curves = []
    for seq in runs:
        mask = _counted(seq)
        if not mask.any():
            continue
        vals = values_fn(seq)[mask]
        curves.append((vals[:, None] >= thresholds[None, :]).mean(axis=0)
                      if thresholds is not None else vals)
    if not curves:
        raise DataError("no visible frames to evaluate")
    return np.asarray(curves)


def success_auc(runs):
    """Success curve over the 21-point overlap grid and its mean (AUC)."""
    curves = _per_sequence_curves(runs, lambda s: iou(s.pred, s.gt), IOU_THRESHOLDS)
    curve = curves.mean(axis=0)
    return curve, float(curve.mean())


def _center_dist(seq):
    pc = seq.pred[:, :2] + seq.pred[:, 2:] / 2
    gc = seq.gt[:, :2] + seq.gt[:, 2:] / 2
    return np.hypot(*(pc - gc).T)


def precision(runs, report_at=20):
    """Center-error curve over 0..50 px and its value at `report_at` px."""
    curves = []
    for seq in runs:
        mask = _counted(seq)
        if not mask.any():
            continue
        d = _center_dist(seq)[mask]
        curves.append((d[:, None] <= CENTER_THRESHOLDS[None, :]).mean(axis=0))
    if not curves:
        raise DataError("no visible frames to evaluate")
    curve = np.asarray(curves).mean(axis=0)
    return curve, float(curve[int(report_at)])


def norm_precision(runs):
    """Per-axis gt-normalized center error, curve mean over the 101-point grid."""
    curves = []
    for seq in runs:
        mask = _counted(seq)
        if not mask.any():
            continue
        gt, pred = seq.gt[mask], seq.pred[mask]
        if (gt[:, 2] <= 0).any() or (gt[:, 3] <= 0).any():
            raise DataError(f"sequence {seq.name}: degenerate gt box")
        pc = pred[:, :2] + pred[:, 2:] / 2
        gc = gt[:, :2] + gt[:, 2:] / 2
        d = np.hypot((pc[:, 0] - gc[:, 0]) / gt[:, 2], (pc[:, 1] - gc[:, 1]) / gt[:, 3])
        curves.append((d[:, None] <= NORM_THRESHOLDS[None, :]).mean(axis=0))
    if not curves:
        raise DataError("no visible frames to evaluate")
    return float(np.asarray(curves).mean(axis=0).mean())


def mean_iou(runs):
    """Per-sequence mean IoU over counted frames, averaged across sequences."""
    vals = []
    for seq in runs:
        mask = _counted(seq)
        if mask.any():
            vals.append(float(iou(seq.pred, seq.gt)[mask].mean()))
    if not vals:
        raise DataError("no visible frames to evaluate")
    return float(np.mean(vals))


def pr_re_fscore(runs):
    """Long-term protocol: max-F over confidence thresholds, pooled frames."""
    if not runs:
        raise DataError("no frames to evaluate")
    ious, scores, visible = [], [], []
    for seq in runs:
        sel = np.ones(len(seq.pred), dtype=bool)
        sel[0] = False
        vis = seq.visible[sel].astype(bool)
        raw = iou(seq.pred[sel], seq.gt[sel])
        ious.append(np.where(vis, raw, 0.0))
        scores.append(seq.scores[sel])
        visible.append(vis)
    ious = np.concatenate(ious)
    scores = np.concatenate(scores)
    visible = np.concatenate(visible)
    if len(ious) == 0:
        raise DataError("no frames to evaluate")
    n_visible = int(visible.sum())
    if n_visible == 0:
        raise DataError("no visible frames to evaluate")

    best = (-1.0, 0.0, 0.0, 0.0)
    for tau in np.unique(scores):
        sel = scores >= tau
        pr = float(ious[sel].sum() / sel.sum())
        re = float(ious[sel & visible].sum() / n_visible)
        f = 0.0 if pr + re == 0 else 2 * pr * re / (pr + re)
        if f > best[0]:
            best = (f, pr, re, float(tau))
    f, pr, re, tau_star = best
    return pr, re, f, tau_star


# ---------------------------------------------------------------------------
# brute-force oracles: plain-python re-implementations kept deliberately
# independent of the vectorized paths above


def _iou_single(a, b):
    ax1, ay1, ax2, ay2 = a[0], a[1], a[0] + a[2], a[1] + a[3]
    bx1, by1, bx2, by2 = b[0], b[1], b[0] + b[2], b[1] + b[3]
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    inter = iw * ih if (iw > 0 and ih > 0) else 0.0
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0


def oracle_success_auc(runs):
    curves = []
    for seq in runs:
        per_thr = []
        frames = [k for k in range(1, len(seq.pred)) if seq.visible[k]]
        if not frames:
            continue
        for thr in IOU_THRESHOLDS:
            hits = 0
            for k in frames:
                if _iou_single(seq.pred[k], seq.gt[k]) >= thr:
                    hits += 1
            per_thr.append(hits / len(frames))
        curves.append(per_thr)
    if not curves:
        raise DataError("no visible frames to evaluate")
    curve = [sum(c[i] for c in curves) / len(curves) for i in range(len(IOU_THRESHOLDS))]
    return curve, sum(curve) / len(curve)


def oracle_precision(runs, report_at=20):
    curves = []
    for seq in runs:
        frames = [k for k in range(1, len(seq.pred)) if seq.visible[k]]
        if not frames:
            continue
        per_thr = []
        for thr in CENTER_THRESHOLDS:
            hits = 0
            for k in frames:
                dx = (seq.pred[k][0] + seq.pred[k][2] / 2) - (seq.gt[k][0] + seq.gt[k][2] / 2)
                dy = (seq.pred[k][1] + seq.pred[k][3] / 2) - (seq.gt[k][1] + seq.gt[k][3] / 2)
                if math.hypot(dx, dy) <= thr:
                    hits += 1
            per_thr.append(hits / len(frames))
        curves.append(per_thr)
    if not curves:
        raise DataError("no visible frames to evaluate")
    curve = [sum(c[i] for c in curves) / len(curves) for i in range(len(CENTER_THRESHOLDS))]
    return curve, curve[int(report_at)]


def oracle_norm_precision(runs):
    curves = []
    for seq in runs:
        frames = [k for k in range(1, len(seq.pred)) if seq.visible[k]]
        if not frames:
            continue
        for k in frames:
            if seq.gt[k][2] <= 0 or seq.gt[k][3] <= 0:
                raise DataError(f"sequence {seq.name}: degenerate gt box")
        per_thr = []
        for thr in NORM_THRESHOLDS:
            hits = 0
            for k in frames:
                dx = (seq.pred[k][0] + seq.pred[k][2] / 2) - (seq.gt[k][0] + seq.gt[k][2] / 2)
                dy = (seq.pred[k][1] + seq.pred[k][3] / 2) - (seq.gt[k][1] + seq.gt[k][3] / 2)
                if math.hypot(dx / seq.gt[k][2], dy / seq.gt[k][3]) <= thr:
                    hits += 1
            per_thr.append(hits / len(frames))
        curves.append(per_thr)
    if not curves:
        raise DataError("no visible frames to evaluate")
    means = [sum(c[i] for c in curves) / len(curves) for i in range(len(NORM_THRESHOLDS))]
    return sum(means) / len(means)


def oracle_pr_re_fscore(runs):
    frames = []
    for seq in runs:
        for k in range(1, len(seq.pred)):
            vis = bool(seq.visible[k])
            val = _iou_single(seq.pred[k], seq.gt[k]) if vis else 0.0
            frames.append((float(seq.scores[k]), val, vis))
    if not frames:
        raise DataError("no frames to evaluate")
    n_visible = sum(1 for _, _, vis in frames if vis)
    if n_visible == 0:
        raise DataError("no visible frames to evaluate")
    best = (-1.0, 0.0, 0.0, 0.0)
    for tau in sorted({s for s, _, _ in frames}):
        chosen = [(v, vis) for s, v, vis in frames if s >= tau]
        pr = sum(v for v, _ in chosen) / len(chosen)
        re = sum(v for v, vis in chosen if vis) / n_visible
        f = 0.0 if pr + re == 0 else 2 * pr * re / (pr + re)
        if f > best[0]:
            best = (f, pr, re, tau)
    f, pr, re, tau_star = best
    return pr, re, f, tau_star


def oracle_check(runs, tol=1e-9):
    """Recompute every metric family naively and compare within `tol`."""
    pairs = {}
    curve, auc = success_auc(runs)
    o_curve, o_auc = oracle_success_auc(runs)
    pairs["success_curve"] = (curve, o_curve)
    pairs["success_auc"] = (auc, o_auc)
    p_curve, p = precision(runs)
    op_curve, op = oracle_precision(runs)
    pairs["precision_curve"] = (p_curve, op_curve)
    pairs["precision"] = (p, op)
    pairs["norm_precision"] = (norm_precision(runs), oracle_norm_precision(runs))
    for name, (a, b) in zip(("pr", "re", "f", "tau_star"),
                            zip(pr_re_fscore(runs), oracle_pr_re_fscore(runs))):
        pairs[name] = (a, b)

    report = {}
    for name, (a, b) in pairs.items():
        diff = float(np.max(np.abs(np.asarray(a) - np.asarray(b))))
        report[name] = diff
        if diff > tol:
            raise ConsistencyError(f"metric {name} disagrees with its oracle by {diff:g}")
    return report


# ---------------------------------------------------------------------------
# reports


def compute_metrics(runs, report_px=20):
    s_curve, auc = success_auc(runs)
    p_curve, p = precision(runs, report_at=report_px)
    pr, re, f, tau_star = pr_re_fscore(runs)
    return {
        "n_sequences": len(runs),
        "success_auc": auc,
        "success_curve": [float(v) for v in s_curve],
        "precision": p,
        "precision_curve": [float(v) for v in p_curve],
        "norm_precision": norm_precision(runs),
        "mean_iou": mean_iou(runs),
        "pr": pr, "re": re, "f_score": f, "tau_star": tau_star,
    }


def _fscore_curve(runs):
    taus, fs = [], []
    ious, scores, visible = [], [], []
    for seq in runs:
        sel = np.ones(len(seq.pred), dtype=bool)
        sel[0] = False
        vis = seq.visible[sel].astype(bool)
        ious.append(np.where(vis, iou(seq.pred[sel], seq.gt[sel]), 0.0))
        scores.append(seq.scores[sel])
        visible.append(vis)
    ious, scores = np.concatenate(ious), np.concatenate(scores)
    visible = np.concatenate(visible)
    for tau in np.unique(scores):
        sel = scores >= tau
        pr = ious[sel].sum() / sel.sum()
        re = ious[sel & visible].sum() / max(int(visible.sum()), 1)
        taus.append(float(tau))
        fs.append(0.0 if pr + re == 0 else float(2 * pr * re / (pr + re)))
    return taus, fs


def emit_report(runs_by_mode, out_dir, report_px=20, config_hash=""):
    """Write report.json, summary.md and SVG curve plots; returns the paths."""
    if not runs_by_mode:
        raise DataError("no runs to report")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    report = {mode: compute_metrics(runs, report_px) for mode, runs in sorted(runs_by_mode.items())}
    if config_hash:
        report["_config_hash"] = config_hash
    report_path = out_dir / "report.json"
    report_path.write_text(json.dumps(report, sort_keys=True, indent=2) + "\n")

    lines = ["| mode | AUC | P@20 | P_norm | mean IoU | Pr | Re | F |",
             "| --- | --- | --- | --- | --- | --- | --- | --- |"]
    for mode, m in sorted(runs_by_mode.items()):
        r = report[mode]
        lines.append(
            f"| {mode} | {r['success_auc']:.3f} | {r['precision']:.3f} | "
            f"{r['norm_precision']:.3f} | {r['mean_iou']:.3f} | {r['pr']:.3f} | "
            f"{r['re']:.3f} | {r['f_score']:.3f} |"
        )
    summary_path = out_dir / "summary.md"
    summary_path.write_text("\n".join(lines) + "\n")

    paths = [report_path, summary_path]
    paths.extend(_emit_plots(runs_by_mode, report, out_dir))
    return paths


def _emit_plots(runs_by_mode, report, out_dir):
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    made = []

    def plot(filename, title, xlabel, series, xvals=None):
        fig, ax = plt.subplots(figsize=(5, 4))
        for label, (xs, ys) in series.items():
            ax.plot(xs, ys, label=label)
        ax.set_title(title)
        ax.set_xlabel(xlabel)
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.legend(fontsize=8)
        path = out_dir / filename
        fig.savefig(path, format="svg", metadata={"Date": None})
        plt.close(fig)
        made.append(path)

    plot("success_plot.svg", "Success", "overlap threshold",
         {m: (list(IOU_THRESHOLDS), report[m]["success_curve"]) for m in runs_by_mode})
    plot("precision_plot.svg", "Precision", "center error [px]",
         {m: (list(CENTER_THRESHOLDS), report[m]["precision_curve"]) for m in runs_by_mode})
    plot("fscore_plot.svg", "F-score vs confidence threshold", "tau",
         {m: _fscore_curve(runs) for m, runs in runs_by_mode.items()})
    return made
