"""Set matching with the frustum hard constraint, box regression and focal losses."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import Box3D, CameraModel, giou_3d, in_frustum


@dataclass
class LossWeights:
    match_giou: float = 1.0
    match_l2: float = 0.2
    giou: float = 1.0
    xyz: float = 0.2
    lwh: float = 0.04
    gamma: float = 2.0
    alpha: float | None = 0.25

    def __post_init__(self):
        for name in ("match_giou", "match_l2", "giou", "xyz", "lwh", "gamma"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if self.alpha is not None and not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


@dataclass
class FrustumContext:
    camera: CameraModel
    alpha_phi: float = 0.03
    alpha_z: float = 5.0


@dataclass
class MatchResult:
    pairs: list
    unmatched_dets: list
    unmatched_gts: list


def cost_matrix(dets, gts, w: LossWeights, frustum_ctx: FrustumContext | None = None) -> np.ndarray:
    """``C_ij = -w_giou * GIoU + w_l2 * |Loc_i - Loc_j|``; +inf outside the detection's frustum.

    The overlap term is negated so that better-overlapping pairs are cheaper.
    """
    C = np.empty((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            if frustum_ctx is not None and not in_frustum(frustum_ctx.camera, d, g,
                                                          frustum_ctx.alpha_phi, frustum_ctx.alpha_z):
                C[i, j] = np.inf
                continue
            C[i, j] = -w.match_giou * giou_3d(d, g) + w.match_l2 * float(np.linalg.norm(d.loc() - g.loc()))
    return C


def hungarian(C) -> MatchResult:
    """Minimum-cost one-to-one assignment; pairs at infinite cost are discarded.

    Infinite entries are replaced by a sentinel larger than any finite
    assignment total, so the solver first maximizes the number of finite
    pairs and then minimizes their cost.
    """
    C = np.asarray(C, dtype=np.float64)
    if C.ndim != 2:
        raise ValueError("cost matrix must be two-dimensional")
    n, m = C.shape
    if n == 0 or m == 0:
        return MatchResult([], list(range(n)), list(range(m)))
    finite = np.isfinite(C)
    span = float(np.abs(C[finite]).sum()) if finite.any() else 0.0
    sentinel = 2.0 * span + 1.0
    rows, cols = linear_sum_assignment(np.where(finite, C, sentinel))
    pairs = sorted((int(i), int(j)) for i, j in zip(rows, cols) if finite[i, j])
    used_d = {i for i, _ in pairs}
    used_g = {j for _, j in pairs}
    return MatchResult(pairs, [i for i in range(n) if i not in used_d], [j for j in range(m) if j not in used_g])


def box_loss(det: Box3D, gt: Box3D, w: LossWeights) -> float:
    d, g = det.loc(), gt.loc()
    return (-w.giou * giou_3d(det, gt)
            + w.xyz * float(np.abs(d[:3] - g[:3]).sum())
            + w.lwh * float(np.abs(d[3:] - g[3:]).sum()))


def _log_sigmoid(x):
    return -np.logaddexp(0.0, -x)


def focal_loss(logits, target, gamma: float = 2.0, alpha: float | None = 0.25):
    """Sigmoid focal loss summed over classes, with its gradient w.r.t. the logits."""
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if not np.all((t == 0) | (t == 1)):
        raise ValueError("targets must be 0 or 1")
    p = np.exp(_log_sigmoid(x))
    log_p = _log_sigmoid(x)
    log_q = _log_sigmoid(-x)   # log(1 - p)
    q = np.exp(log_q)
    a_pos = 1.0 if alpha is None else alpha
    a_neg = 1.0 if alpha is None else 1.0 - alpha
    pos = -a_pos * q ** gamma * log_p
    neg = -a_neg * p ** gamma * log_q
    loss = np.where(t == 1, pos, neg)
    g_pos = a_pos * q ** gamma * (gamma * p * log_p - q)
    g_neg = a_neg * p ** gamma * (p - gamma * q * log_q)
    grad = np.where(t == 1, g_pos, g_neg)
    return float(loss.sum()), grad


@dataclass
class LossBreakdown:
    total: float
    box: float
    classification: float
    matched: int
    detections: int
    match: MatchResult = field(repr=False, default=None)


def total_loss(dets, classes, gts, gt_classes, w: LossWeights | None = None,
               frustum_ctx: FrustumContext | None = None, n_classes: int | None = None) -> LossBreakdown:
    """Mean box loss over matched pairs plus mean focal loss over all detections.

    ``classes`` holds per-detection logits (N, C); ``gt_classes`` are class indices.
    """
    w = w or LossWeights()
    n = len(dets)
    if n == 0:
        return LossBreakdown(0.0, 0.0, 0.0, 0, 0, MatchResult([], [], list(range(len(gts)))))
    logits = np.asarray(classes, dtype=np.float64).reshape(n, -1)
    match = hungarian(cost_matrix(dets, gts, w, frustum_ctx))
    box = sum(box_loss(dets[i], gts[j], w) for i, j in match.pairs)
    box_term = box / len(match.pairs) if match.pairs else 0.0
    targets = np.zeros_like(logits)
    for i, j in match.pairs:
        targets[i, int(gt_classes[j])] = 1.0
    cls = sum(focal_loss(logits[i], targets[i], w.gamma, w.alpha)[0] for i in range(n))
    cls_term = cls / n
    return LossBreakdown(box_term + cls_term, box_term, cls_term, len(match.pairs), n, match)
