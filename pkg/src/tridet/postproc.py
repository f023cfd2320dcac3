"""Prediction decoding, box geometry (IoU / distance-IoU with analytic
gradients), distance-aware NMS, the balanced focal loss, label smoothing,
and the composite detection loss with gradients w.r.t. raw predictions."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import ops

P_CLAMP = 1e-7


@dataclass
class Box:
    cx: float
    cy: float
    w: float
    h: float

    def corners(self):
        return (self.cx - self.w / 2, self.cy - self.h / 2,
                self.cx + self.w / 2, self.cy + self.h / 2)

    @classmethod
    def from_corners(cls, x1, y1, x2, y2):
        return cls((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)

    @property
    def area(self):
        return self.w * self.h


@dataclass
class Detection:
    box: Box
    class_id: int
    score: float


class ClampStats:
    """Counts probability clamps performed by the focal loss."""

    def __init__(self):
        self.count = 0

    def reset(self):
        self.count = 0


clamp_stats = ClampStats()


def iou(a: Box, b: Box) -> float:
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    if union <= 0:
        return 0.0
    return inter / union


def diou(a: Box, b: Box) -> float:
    """IoU minus the squared center distance over the squared diagonal of
    the smallest enclosing box; equals IoU when centers coincide."""
    val = iou(a, b)
    ax1, ay1, ax2, ay2 = a.corners()
    bx1, by1, bx2, by2 = b.corners()
    cw = max(ax2, bx2) - min(ax1, bx1)
    ch = max(ay2, by2) - min(ay1, by1)
    c2 = cw * cw + ch * ch
    if c2 <= 0:
        return val
    rho2 = (a.cx - b.cx) ** 2 + (a.cy - b.cy) ** 2
    return val - rho2 / c2


def diou_grad(pred: Box, gt: Box):
    """d diou(pred, gt) / d (cx, cy, w, h) of pred, gt held fixed.

    Subgradients at geometric ties pick the pred side; call sites keep
    gradcheck inputs off the tie set.
    """
    px1, py1, px2, py2 = pred.corners()
    gx1, gy1, gx2, gy2 = gt.corners()
    iw = min(px2, gx2) - max(px1, gx1)
    ih = min(py2, gy2) - max(py1, gy1)
    overlap = iw > 0 and ih > 0
    inter = iw * ih if overlap else 0.0
    union = pred.area + gt.area - inter
    d_iou = np.zeros(4)
    if union > 0:
        # dI/d corner, active only while overlapping
        dI_dx1 = -ih if overlap and px1 > gx1 else 0.0
        dI_dx2 = ih if overlap and px2 < gx2 else 0.0
        dI_dy1 = -iw if overlap and py1 > gy1 else 0.0
        dI_dy2 = iw if overlap and py2 < gy2 else 0.0
        dI = np.array([
            dI_dx1 + dI_dx2,
            dI_dy1 + dI_dy2,
            0.5 * (dI_dx2 - dI_dx1),
            0.5 * (dI_dy2 - dI_dy1),
        ])
        dA = np.array([0.0, 0.0, pred.h, pred.w])
        dU = dA - dI
        d_iou = (dI * union - inter * dU) / (union * union)
    cw = max(px2, gx2) - min(px1, gx1)
    ch = max(py2, gy2) - min(py1, gy1)
    c2 = cw * cw + ch * ch
    if c2 <= 0:
        return d_iou
    rho2 = (pred.cx - gt.cx) ** 2 + (pred.cy - gt.cy) ** 2
    drho = np.array([2 * (pred.cx - gt.cx), 2 * (pred.cy - gt.cy), 0.0, 0.0])
    ex1_from_pred = 1.0 if px1 < gx1 else 0.0
    ex2_from_pred = 1.0 if px2 > gx2 else 0.0
    ey1_from_pred = 1.0 if py1 < gy1 else 0.0
    ey2_from_pred = 1.0 if py2 > gy2 else 0.0
    dcw = np.array([ex2_from_pred - ex1_from_pred, 0.0,
                    0.5 * (ex2_from_pred + ex1_from_pred), 0.0])
    dch = np.array([0.0, ey2_from_pred - ey1_from_pred, 0.0,
                    0.5 * (ey2_from_pred + ey1_from_pred)])
    dc2 = 2 * cw * dcw + 2 * ch * dch
    dpen = (drho * c2 - rho2 * dc2) / (c2 * c2)
    return d_iou - dpen


def diou_nms(dets, threshold=0.45):
    """Greedy class-wise suppression: keep by descending score (input
    index breaks ties), drop candidates whose distance-IoU with a kept
    detection of the same class exceeds the threshold."""
    order = sorted(range(len(dets)), key=lambda i: (-dets[i].score, i))
    kept = []
    for i in order:
        cand = dets[i]
        ok = True
        for j in kept:
            k = dets[j]
            if k.class_id == cand.class_id and diou(k.box, cand.box) > threshold:
                ok = False
                break
        if ok:
            kept.append(i)
    return [dets[i] for i in kept]


def _clamp_p(p):
    p = np.asarray(p, dtype=np.float64)
    clamped = np.clip(p, P_CLAMP, 1.0 - P_CLAMP)
    clamp_stats.count += int((clamped != p).sum())
    return clamped


def focal_loss(p, y, alpha=0.25, gamma=2.0):
    """Balanced focal loss, elementwise; y may be a soft label in [0, 1].

    For hard labels this is -alpha_t * (1 - p_t)^gamma * log(p_t) with
    p_t = p if y=1 else 1-p and alpha_t = alpha if y=1 else 1-alpha.
    """
    p = _clamp_p(p)
    y = np.asarray(y, dtype=np.float64)
    pos = -alpha * np.power(1.0 - p, gamma) * np.log(p)
    neg = -(1.0 - alpha) * np.power(p, gamma) * np.log(1.0 - p)
    return y * pos + (1.0 - y) * neg


def focal_loss_grad_p(p, y, alpha=0.25, gamma=2.0):
    """d focal_loss / d p (zero subgradient where p was clamped)."""
    praw = np.asarray(p, dtype=np.float64)
    p = np.clip(praw, P_CLAMP, 1.0 - P_CLAMP)
    y = np.asarray(y, dtype=np.float64)
    dpos = alpha * (gamma * np.power(1.0 - p, gamma - 1.0) * np.log(p)
                    - np.power(1.0 - p, gamma) / p)
    dneg = (1.0 - alpha) * (-gamma * np.power(p, gamma - 1.0) * np.log(1.0 - p)
                            + np.power(p, gamma) / (1.0 - p))
    g = y * dpos + (1.0 - y) * dneg
    return np.where(praw == p, g, 0.0)


def label_smooth(onehot, eps):
    """y' = y * (1 - eps) + eps / K; preserves the probability mass."""
    if not 0.0 <= eps < 1.0:
        raise ValueError(f"smoothing factor must lie in [0, 1), got {eps}")
    onehot = np.asarray(onehot, dtype=np.float64)
    return onehot * (1.0 - eps) + eps / onehot.shape[-1]


# ---------------------------------------------------------------------------
# decoding
# ---------------------------------------------------------------------------

def _split_raw(raw, n_anchors, num_classes):
    ch = n_anchors * (5 + num_classes)
    if raw.shape[0] != ch:
        raise ops.ShapeError(
            f"raw prediction has {raw.shape[0]} channels, expected {ch}")
    h, w = raw.shape[1:]
    return raw.reshape(n_anchors, 5 + num_classes, h, w)


def decode_predictions(raw, anchors, stride, conf_threshold, num_classes):
    """Standard anchor decode: centers from sigmoid offsets plus the cell
    origin times the stride, extents from exponential anchor scaling.
    Detections at or below the confidence threshold are dropped."""
    raw = np.asarray(raw, dtype=np.float64)
    r = _split_raw(raw, len(anchors), num_classes)
    h, w = r.shape[2:]
    dets = []
    for a, (aw, ah) in enumerate(anchors):
        obj = ops.sigmoid(r[a, 4])
        cls = ops.sigmoid(r[a, 5:])
        for i in range(h):
            for j in range(w):
                cid = int(cls[:, i, j].argmax())
                score = float(obj[i, j] * cls[cid, i, j])
                if score <= conf_threshold:
                    continue
                cx = (float(ops.sigmoid(r[a, 0, i, j])) + j) * stride
                cy = (float(ops.sigmoid(r[a, 1, i, j])) + i) * stride
                bw = aw * math.exp(float(r[a, 2, i, j]))
                bh = ah * math.exp(float(r[a, 3, i, j]))
                dets.append(Detection(Box(cx, cy, bw, bh), cid, score))
    return dets


def encode_box(box, anchor, stride, cell_ij):
    """Inverse of the decode transform for one assigned anchor/cell."""
    i, j = cell_ij
    sx = box.cx / stride - j
    sy = box.cy / stride - i
    if not (0.0 < sx < 1.0 and 0.0 < sy < 1.0):
        raise ValueError(f"box center does not fall in cell {cell_ij}")
    logit = lambda v: math.log(v / (1.0 - v))
    return (logit(sx), logit(sy),
            math.log(box.w / anchor[0]), math.log(box.h / anchor[1]))


def format_detection(image_id, det):
    b = det.box
    return (f"{image_id} {det.class_id} {det.score:.6f} "
            f"{b.cx:.6f} {b.cy:.6f} {b.w:.6f} {b.h:.6f}")


# ---------------------------------------------------------------------------
# target assignment and composite loss
# ---------------------------------------------------------------------------

def _wh_iou(wh_a, wh_b):
    iw = min(wh_a[0], wh_b[0])
    ih = min(wh_a[1], wh_b[1])
    inter = iw * ih
    return inter / (wh_a[0] * wh_a[1] + wh_b[0] * wh_b[1] - inter)


def assign_targets(targets, anchors_per_level, strides, grid_hw):
    """Single best anchor per ground-truth box by width/height prior IoU.

    Returns {(level, anchor, i, j): (Box, class_id)}; the first box to
    claim a slot keeps it.
    """
    assigned = {}
    for box, cid in targets:
        best = None
        for lvl, anchors in enumerate(anchors_per_level):
            for a, prior in enumerate(anchors):
                q = _wh_iou((box.w, box.h), prior)
                if best is None or q > best[0]:
                    best = (q, lvl, a)
        _, lvl, a = best
        h, w = grid_hw[lvl]
        stride = strides[lvl]
        j = min(max(int(box.cx / stride), 0), w - 1)
        i = min(max(int(box.cy / stride), 0), h - 1)
        assigned.setdefault((lvl, a, i, j), (box, cid))
    return assigned


@dataclass
class LossConfig:
    alpha: float = 0.25
    gamma: float = 2.0
    smooth_eps: float = 0.1
    w_box: float = 0.05
    w_obj: float = 1.0
    w_cls: float = 0.5


def detection_loss(raws, targets, anchors_per_level, strides, num_classes,
                   cfg: LossConfig = LossConfig()):
    """Composite loss over per-level raw prediction tensors.

    total = w_box * mean(1 - diou) over assigned slots
          + w_obj * focal(objectness) summed over every slot, divided by
            the number of positive assignments
          + w_cls * mean focal(smoothed class scores) over assigned slots.

    Returns (total, components, grads) with grads matching raws' shapes.
    """
    views = [_split_raw(np.asarray(r, dtype=np.float64), len(anchors_per_level[l]),
                        num_classes)
             for l, r in enumerate(raws)]
    grid_hw = [v.shape[2:] for v in views]
    assigned = assign_targets(targets, anchors_per_level, strides, grid_hw)
    grads = [np.zeros_like(v) for v in views]

    # objectness: focal summed over every slot, normalized by the number
    # of positive assignments (the customary focal-loss reduction)
    n_norm = max(1, len(assigned))
    obj_loss = 0.0
    for lvl, v in enumerate(views):
        t = v[:, 4]
        y = np.zeros_like(t)
        for (l, a, i, j) in assigned:
            if l == lvl:
                y[a, i, j] = 1.0
        p = ops.sigmoid(t)
        obj_loss += float(focal_loss(p, y, cfg.alpha, cfg.gamma).sum()) / n_norm
        gp = focal_loss_grad_p(p, y, cfg.alpha, cfg.gamma) / n_norm
        grads[lvl][:, 4] += cfg.w_obj * gp * p * (1.0 - p)

    box_loss = 0.0
    cls_loss = 0.0
    n_assigned = len(assigned)
    for (lvl, a, i, j), (gt, cid) in assigned.items():
        v = views[lvl]
        stride = strides[lvl]
        aw, ah = anchors_per_level[lvl][a]
        tx, ty, tw, th = (float(v[a, c, i, j]) for c in range(4))
        sx = float(ops.sigmoid(np.float64(tx)))
        sy = float(ops.sigmoid(np.float64(ty)))
        pred = Box((sx + j) * stride, (sy + i) * stride,
                   aw * math.exp(tw), ah * math.exp(th))
        box_loss += 1.0 - diou(pred, gt)
        dd = diou_grad(pred, gt)   # d diou / d (cx, cy, w, h)
        scale = cfg.w_box / n_assigned
        grads[lvl][a, 0, i, j] += -scale * dd[0] * sx * (1 - sx) * stride
        grads[lvl][a, 1, i, j] += -scale * dd[1] * sy * (1 - sy) * stride
        grads[lvl][a, 2, i, j] += -scale * dd[2] * pred.w
        grads[lvl][a, 3, i, j] += -scale * dd[3] * pred.h

        onehot = np.zeros(num_classes)
        onehot[cid] = 1.0
        ysm = label_smooth(onehot, cfg.smooth_eps)
        tc = v[a, 5:, i, j]
        pc = ops.sigmoid(tc)
        cls_loss += float(focal_loss(pc, ysm, cfg.alpha, cfg.gamma).sum()) / num_classes
        gpc = focal_loss_grad_p(pc, ysm, cfg.alpha, cfg.gamma) / num_classes
        grads[lvl][a, 5:, i, j] += (cfg.w_cls / n_assigned) * gpc * pc * (1.0 - pc)
    if n_assigned:
        box_loss /= n_assigned
        cls_loss /= n_assigned

    components = {"box": box_loss, "obj": obj_loss, "cls": cls_loss}
    total = cfg.w_box * box_loss + cfg.w_obj * obj_loss + cfg.w_cls * cls_loss
    out_grads = [g.reshape(np.asarray(r).shape) for g, r in zip(grads, raws)]
    return total, components, out_grads
