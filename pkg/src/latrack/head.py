"""Anchor-free tracking head: classification / offset / size maps over the
search feature grid, Gaussian training targets, the training losses and box
decoding with an optional motion window."""

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .errors import DataError, NumericError, ShapeError

CLS_EPS = 1e-6


@dataclass
class ScoreMaps:
    cls: torch.Tensor  # [B, h, w] in (0, 1)
    offset: torch.Tensor  # [B, 2, h, w] in (0, 1), (x, y) order
    size: torch.Tensor  # [B, 2, h, w] in (0, 1), (w, h) order

    def single(self, i=0):
        return ScoreMaps(cls=self.cls[i], offset=self.offset[i], size=self.size[i])


@dataclass
class BBox:
    """Box in normalized search-crop coordinates, center + size convention."""

    cx: float
    cy: float
    w: float
    h: float
    confidence: float = 1.0

    def as_tensor(self):
        return torch.tensor([self.cx, self.cy, self.w, self.h], dtype=torch.float64)


@dataclass
class GaussianTarget:
    y: torch.Tensor  # [h_m, w_m], exactly one cell equals 1
    cell: tuple  # (row, col)
    offset: torch.Tensor  # [2], (x, y) fractional parts
    size: torch.Tensor  # [2], (w, h)


class CenterHead(nn.Module):
    """Shared conv stem with three sigmoid branches, grid-preserving."""

    def __init__(self, c_in, width=32, norm_groups=8):
        super().__init__()
        self.stem = nn.Sequential(
            nn.Conv2d(c_in, width, 3, padding=1), nn.GroupNorm(norm_groups, width), nn.SiLU(),
            nn.Conv2d(width, width, 3, padding=1), nn.GroupNorm(norm_groups, width), nn.SiLU(),
        )
        self.cls = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Conv2d(width, 1, 1))
        self.offset = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Conv2d(width, 2, 1))
        self.size = nn.Sequential(nn.Conv2d(width, width, 3, padding=1), nn.SiLU(), nn.Conv2d(width, 2, 1))
        self.c_in = c_in
        nn.init.constant_(self.cls[-1].bias, -2.0)  # low-score prior for focal stability

    def forward(self, features):
        if features.dim() != 4 or features.shape[1] != self.c_in:
            raise ShapeError(f"head expects [B, {self.c_in}, h, w], got {tuple(features.shape)}")
        h = self.stem(features)
        return ScoreMaps(
            cls=torch.sigmoid(self.cls(h))[:, 0],
            offset=torch.sigmoid(self.offset(h)),
            size=torch.sigmoid(self.size(h)),
        )


def _box_fields(box):
    if isinstance(box, BBox):
        return box.as_tensor()
    return torch.as_tensor(box)


def _check_box(t, who):
    w, h = t[..., 2], t[..., 3]
    if (w <= 0).any() or (h <= 0).any():
        raise DataError(f"degenerate {who} box (non-positive size)")


def make_gaussian_target(gt_box, h_m, w_m):
    """CornerNet-style penalty-reduced target around the box-center cell."""
    box = _box_fields(gt_box)
    _check_box(box, "gt")
    cx, cy, w, h = (float(v) for v in box)
    if not (0.0 <= cx < 1.0 and 0.0 <= cy < 1.0):
        raise DataError(f"box center ({cx:.3f}, {cy:.3f}) outside the crop")
    col = min(int(math.floor(cx * w_m)), w_m - 1)
    row = min(int(math.floor(cy * h_m)), h_m - 1)
    diag = math.hypot(w * w_m, h * h_m)
    sigma = max(1.0, diag / 6.0)
    rr, cc = torch.meshgrid(
        torch.arange(h_m, dtype=torch.float64),
        torch.arange(w_m, dtype=torch.float64),
        indexing="ij",
    )
    d2 = (rr - row) ** 2 + (cc - col) ** 2
    y = torch.exp(-d2 / (2.0 * sigma ** 2))
    y[row, col] = 1.0
    offset = torch.tensor([cx * w_m - col, cy * h_m - row], dtype=torch.float64)
    size = torch.tensor([w, h], dtype=torch.float64)
    return GaussianTarget(y=y, cell=(row, col), offset=offset, size=size)


def focal_loss(cls, y, alpha=2.0, beta=4.0):
    """Penalty-reduced focal loss, normalized by the number of peak cells.

    Accepts one map [h, w] or a batch [B, h, w]; batches are averaged.
    """
    p = torch.clamp(cls, CLS_EPS, 1.0 - CLS_EPS)
    y = y.to(p.dtype)
    batched = p.dim() == 3
    if not batched:
        p, y = p.unsqueeze(0), y.unsqueeze(0)
    pos = (y == 1.0).to(p.dtype)
    pos_term = pos * (1.0 - p) ** alpha * torch.log(p)
    neg_term = (1.0 - pos) * (1.0 - y) ** beta * p ** alpha * torch.log(1.0 - p)
    n_pos = torch.clamp(pos.sum(dim=(1, 2)), min=1.0)
    loss = -(pos_term + neg_term).sum(dim=(1, 2)) / n_pos
    return loss.mean()


def _corners(box):
    cx, cy, w, h = box[..., 0], box[..., 1], box[..., 2], box[..., 3]
    return cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2


def giou(pred, gt):
    """Generalized IoU of center-size boxes, in (-1, 1]."""
    px1, py1, px2, py2 = _corners(pred)
    gx1, gy1, gx2, gy2 = _corners(gt)
    iw = torch.clamp(torch.minimum(px2, gx2) - torch.maximum(px1, gx1), min=0)
    ih = torch.clamp(torch.minimum(py2, gy2) - torch.maximum(py1, gy1), min=0)
    inter = iw * ih
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    ew = torch.maximum(px2, gx2) - torch.minimum(px1, gx1)
    eh = torch.maximum(py2, gy2) - torch.minimum(py1, gy1)
    enclose = ew * eh
    return inter / union - (enclose - union) / enclose


def giou_loss(pred, gt):
    """1 - GIoU, averaged over any batch dimensions."""
    pred_t, gt_t = _box_fields(pred), _box_fields(gt)
    _check_box(pred_t, "pred")
    _check_box(gt_t, "gt")
    return (1.0 - giou(pred_t, gt_t)).mean()


def l1_loss(pred, gt):
    """Mean absolute difference over (cx, cy, w, h)."""
    return (_box_fields(pred) - _box_fields(gt)).abs().mean()


def total_loss(cls_loss, giou_l, l1_l, lambda_giou=2.0, lambda_l1=5.0):
    total = cls_loss + lambda_giou * giou_l + lambda_l1 * l1_l
    value = float(total.detach()) if torch.is_tensor(total) else float(total)
    if not math.isfinite(value):
        raise NumericError("non-finite loss component")
    return total


def boxes_at_cells(maps: ScoreMaps, cells):
    """Differentiable boxes decoded at given (row, col) cells, one per sample."""
    b, h_m, w_m = maps.cls.shape
    rows = torch.as_tensor([c[0] for c in cells])
    cols = torch.as_tensor([c[1] for c in cells])
    idx = torch.arange(b)
    off = maps.offset[idx, :, rows, cols]
    size = maps.size[idx, :, rows, cols]
    cx = (cols.to(off.dtype) + off[:, 0]) / w_m
    cy = (rows.to(off.dtype) + off[:, 1]) / h_m
    return torch.stack([cx, cy, size[:, 0], size[:, 1]], dim=-1)


def hanning_window(h, w):
    return np.outer(np.hanning(h), np.hanning(w))


def decode_box(maps: ScoreMaps, window=None, window_weight=0.49):
    """Peak cell (row-major tie-break) -> center via offsets, size at the peak.

    Confidence is the pre-window classification score at the chosen cell.
    """
    cls = maps.cls.detach().cpu().numpy().astype(np.float64)
    if cls.ndim != 2:
        raise ShapeError("decode_box expects unbatched maps; use maps.single(i)")
    h_m, w_m = cls.shape
    score = cls if window is None else (1.0 - window_weight) * cls + window_weight * np.asarray(window)
    flat = int(np.argmax(score))
    r, c = divmod(flat, w_m)
    off = maps.offset.detach().cpu().numpy()
    size = maps.size.detach().cpu().numpy()
    return BBox(
        cx=(c + float(off[0, r, c])) / w_m,
        cy=(r + float(off[1, r, c])) / h_m,
        w=float(size[0, r, c]),
        h=float(size[1, r, c]),
        confidence=float(cls[r, c]),
    )
