"""Sample assignment and the composite loss alpha*L_bbox + beta*(L_pos + L_neg).

A decoded cell is positive iff its AABB IoU with some ground truth exceeds
the threshold (matched to the max-IoU ground truth, ties to the lower index);
every other cell is negative. Any ground truth left unmatched promotes the
nearest free cell of the finest scale so the bbox term always receives a
gradient, even from a freshly initialized model.

L_bbox = mean over positives of (1 - IoU)^2, computed on the autodiff graph
through the AABB half-extent formula (|cos|, |sin| of the predicted heading).
L_pos / L_neg are mean BCE of the positive / negative confidences against
1 / 0, with probabilities clamped to [eps, 1-eps].
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import numcore as nc
from .errors import ConfigError
from .geometry import OrientedBox, iou_aabb, to_aabb
from .model import DecodedScale


@dataclass(frozen=True)
class LossConfig:
    alpha: float = 1.0
    beta: float = 1.0
    iou_pos_threshold: float = 0.5
    bce_epsilon: float = 1e-7

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("loss weights must be >= 0")
        if not 0.0 <= self.iou_pos_threshold <= 1.0:
            raise ConfigError(f"iou_pos_threshold {self.iou_pos_threshold} outside [0,1]")
        if not 0.0 < self.bce_epsilon < 0.5:
            raise ConfigError("bce_epsilon must lie in (0, 0.5)")


@dataclass
class LossBreakdown:
    l_bbox: float
    l_pos_conf: float
    l_neg_conf: float
    total: float
    n_pos: int
    n_neg: int


@dataclass(frozen=True)
class PositiveMatch:
    scale_index: int
    m: int
    n: int
    gt_index: int
    iou: float  # IoU at assignment time (may be below threshold for fallbacks)


@dataclass
class Assignment:
    """Positives plus a per-scale boolean mask of the remaining (negative) cells."""

    positives: list[PositiveMatch]
    negative_masks: list[np.ndarray]

    @property
    def negatives(self) -> list[tuple[int, int, int]]:
        out = []
        for si, mask in enumerate(self.negative_masks):
            for n, m in zip(*np.nonzero(mask)):
                out.append((si, int(m), int(n)))
        return out


def _pred_aabbs(sc: DecodedScale, b: int) -> np.ndarray:
    """(H, W, 4) AABBs of one frame's decoded cells at one scale."""
    x = sc.x.data[b]
    y = sc.y.data[b]
    th = sc.theta.data[b]
    w, h = sc.canonical_size
    ac, as_ = np.abs(np.cos(th)), np.abs(np.sin(th))
    ex = (w * ac + h * as_) / 2.0
    ey = (w * as_ + h * ac) / 2.0
    return np.stack([x - ex, y - ey, x + ex, y + ey], axis=-1)


def assign(scales: list[DecodedScale], batch_index: int,
           gts: list[OrientedBox], cfg: LossConfig) -> Assignment:
    """Assignment rule for one frame; gts must be in the raster frame."""
    per_scale_aabbs = [_pred_aabbs(sc, batch_index) for sc in scales]
    positive = [np.zeros((sc.grid.height, sc.grid.width), dtype=bool) for sc in scales]
    match_gt = [np.full((sc.grid.height, sc.grid.width), -1, dtype=int) for sc in scales]
    match_iou = [np.zeros((sc.grid.height, sc.grid.width)) for sc in scales]

    if gts:
        gt_aabbs = np.array([[a.xmin, a.ymin, a.xmax, a.ymax]
                             for a in map(to_aabb, gts)])
        for si, pa in enumerate(per_scale_aabbs):
            ious = np.stack([
                _iou_grid(pa, gt_aabbs[g]) for g in range(len(gts))
            ])  # (G, H, W)
            best = ious.argmax(axis=0)  # first max wins ties: lower gt index
            best_iou = np.take_along_axis(ious, best[None], axis=0)[0]
            pos = best_iou > cfg.iou_pos_threshold
            positive[si] = pos
            match_gt[si][pos] = best[pos]
            match_iou[si][pos] = best_iou[pos]

        matched = {int(g) for si in range(len(scales))
                   for g in match_gt[si][positive[si]]}
        fine = scales[0]
        fh, fw = fine.grid.height, fine.grid.width
        ccx = (np.arange(fw) + 0.5) / fw
        ccy = (np.arange(fh) + 0.5) / fh
        for g, gt in enumerate(gts):
            if g in matched:
                continue
            # Promote the nearest free finest-scale cell (row-major tie-break).
            d2 = (ccx[None, :] - gt.cx) ** 2 + (ccy[:, None] - gt.cy) ** 2
            for flat in np.argsort(d2, axis=None, kind="stable"):
                n, m = divmod(int(flat), fw)
                if not positive[0][n, m]:
                    positive[0][n, m] = True
                    match_gt[0][n, m] = g
                    match_iou[0][n, m] = _iou_grid(
                        per_scale_aabbs[0][n, m][None, None], gt_aabbs[g])[0, 0]
                    break

    positives = []
    for si in range(len(scales)):
        for n, m in zip(*np.nonzero(positive[si])):
            positives.append(PositiveMatch(
                scale_index=si, m=int(m), n=int(n),
                gt_index=int(match_gt[si][n, m]), iou=float(match_iou[si][n, m]),
            ))
    return Assignment(positives=positives,
                      negative_masks=[~p for p in positive])


def _iou_grid(pred_aabbs: np.ndarray, gt_aabb: np.ndarray) -> np.ndarray:
    """IoU of an (..., 4) AABB array against one gt AABB row."""
    iw = np.minimum(pred_aabbs[..., 2], gt_aabb[2]) - np.maximum(pred_aabbs[..., 0], gt_aabb[0])
    ih = np.minimum(pred_aabbs[..., 3], gt_aabb[3]) - np.maximum(pred_aabbs[..., 1], gt_aabb[1])
    inter = np.clip(iw, 0.0, None) * np.clip(ih, 0.0, None)
    area_p = (pred_aabbs[..., 2] - pred_aabbs[..., 0]) * (pred_aabbs[..., 3] - pred_aabbs[..., 1])
    area_g = (gt_aabb[2] - gt_aabb[0]) * (gt_aabb[3] - gt_aabb[1])
    union = area_p + area_g - inter
    out = np.zeros(pred_aabbs.shape[:-1])
    np.divide(inter, union, out=out, where=union > 0)
    return out


def bbox_loss(pred: OrientedBox, gt: OrientedBox) -> float:
    """Reference scalar form of the bbox term: (1 - AABB IoU)^2."""
    return (1.0 - iou_aabb(to_aabb(pred), to_aabb(gt))) ** 2


def bce(p: float, y: int, eps: float = 1e-7) -> float:
    """Binary cross-entropy with the probability clamped to [eps, 1-eps]."""
    p = min(max(p, eps), 1.0 - eps)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def total_loss(scales: list[DecodedScale], gts_per_frame: list[list[OrientedBox]],
               cfg: LossConfig) -> tuple[nc.Tensor, LossBreakdown]:
    """Batch loss on the graph plus its scalar breakdown.

    gts_per_frame holds each frame's ground truth in the raster frame. Every
    term is a mean over its own sample set; the bbox term is counted once.
    """
    B = scales[0].x.shape[0]
    if len(gts_per_frame) != B:
        raise ConfigError(f"{len(gts_per_frame)} gt lists for batch of {B}")
    eps = cfg.bce_epsilon

    # Per-scale flat indices of positives and the matched gt AABB columns.
    pos_idx: list[list[int]] = [[] for _ in scales]
    gt_cols: list[list[tuple[float, float, float, float, float]]] = [[] for _ in scales]
    neg_masks = [np.zeros((B,) + sc.conf.shape[1:], dtype=bool) for sc in scales]
    n_pos = 0
    for b in range(B):
        a = assign(scales, b, gts_per_frame[b], cfg)
        for si, mask in enumerate(a.negative_masks):
            neg_masks[si][b] = mask
        gt_aabbs = [to_aabb(g) for g in gts_per_frame[b]]
        for p in a.positives:
            sc = scales[p.scale_index]
            H, W = sc.conf.shape[1], sc.conf.shape[2]
            pos_idx[p.scale_index].append(b * H * W + p.n * W + p.m)
            ga = gt_aabbs[p.gt_index]
            gt_cols[p.scale_index].append(
                (ga.xmin, ga.ymin, ga.xmax, ga.ymax, ga.area))
            n_pos += 1
    n_neg = int(sum(mask.sum() for mask in neg_masks))

    conf_clamped = [
        nc.minimum(nc.maximum(sc.conf, eps), 1.0 - eps) for sc in scales
    ]

    zero = nc.Tensor(0.0)
    # Negative confidence term: -mean(log(1 - conf)) over negative cells.
    if n_neg:
        acc = None
        for cc, mask in zip(conf_clamped, neg_masks):
            term = nc.mul(nc.log(nc.sub(1.0, cc)), nc.Tensor(mask.astype(np.float64)))
            s = nc.tsum(term)
            acc = s if acc is None else nc.add(acc, s)
        l_neg = nc.scale(acc, -1.0 / n_neg)
    else:
        l_neg = zero

    if n_pos:
        # Positive confidence term: -mean(log conf) over positive cells.
        parts = [nc.gather(cc, idx) for cc, idx in zip(conf_clamped, pos_idx) if idx]
        p_pos = nc.concat(parts)
        l_pos = nc.scale(nc.tsum(nc.log(p_pos)), -1.0 / n_pos)

        # Bbox term through the AABB IoU of each positive vs its gt.
        xs, ys, ths, cols = [], [], [], []
        for sc, idx, cols_s in zip(scales, pos_idx, gt_cols):
            if not idx:
                continue
            xs.append(nc.gather(sc.x, idx))
            ys.append(nc.gather(sc.y, idx))
            ths.append(nc.gather(sc.theta, idx))
            cols.extend(cols_s)
        xp, yp, thp = nc.concat(xs), nc.concat(ys), nc.concat(ths)
        g = np.array(cols)  # (P, 5): xmin, ymin, xmax, ymax, area
        w, h = scales[0].canonical_size
        act = nc.absolute(nc.cos(thp))
        ast = nc.absolute(nc.sin(thp))
        ex = nc.scale(nc.add(nc.scale(act, w), nc.scale(ast, h)), 0.5)
        ey = nc.scale(nc.add(nc.scale(ast, w), nc.scale(act, h)), 0.5)
        iw = nc.relu(nc.sub(nc.minimum(nc.add(xp, ex), nc.Tensor(g[:, 2])),
                            nc.maximum(nc.sub(xp, ex), nc.Tensor(g[:, 0]))))
        ih = nc.relu(nc.sub(nc.minimum(nc.add(yp, ey), nc.Tensor(g[:, 3])),
                            nc.maximum(nc.sub(yp, ey), nc.Tensor(g[:, 1]))))
        inter = nc.mul(iw, ih)
        area_p = nc.scale(nc.mul(ex, ey), 4.0)
        union = nc.sub(nc.add(area_p, nc.Tensor(g[:, 4])), inter)
        iou = nc.div(inter, union)
        l_bbox = nc.mean(nc.square(nc.sub(1.0, iou)))
    else:
        l_pos = zero
        l_bbox = zero

    total = nc.add(nc.scale(l_bbox, cfg.alpha),
                   nc.scale(nc.add(l_pos, l_neg), cfg.beta))
    breakdown = LossBreakdown(
        l_bbox=l_bbox.item(), l_pos_conf=l_pos.item(), l_neg_conf=l_neg.item(),
        total=total.item(), n_pos=n_pos, n_neg=n_neg,
    )
    return total, breakdown
