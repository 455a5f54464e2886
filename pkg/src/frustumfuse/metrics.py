"""Distance-threshold AP/mAP, frequency-group aggregation and hierarchical (LCA) metrics.

AP integrates the raw precision/recall curve with the trapezoid rule,
starting from (recall 0, precision 1). There is no recall resampling and no
low-precision clipping, so values differ slightly from the official
nuScenes toolkit.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import taxonomy


class EmptyGroup(ValueError):
    pass


@dataclass
class ClassHierarchy:
    classes: tuple = taxonomy.CLASSES
    parent: dict = field(default_factory=lambda: dict(taxonomy.PARENT))
    frequency: dict = field(default_factory=lambda: dict(taxonomy.FREQUENCY))
    ranges: dict = field(default_factory=lambda: {c: taxonomy.PARENT_RANGE[p] for c, p in taxonomy.PARENT.items()})

    def __post_init__(self):
        for c in self.classes:
            if c not in self.parent or c not in self.frequency or c not in self.ranges:
                raise ValueError(f"hierarchy is missing class {c!r}")
            if not self.ranges[c] > 0:
                raise ValueError("evaluation ranges must be positive")

    def group(self, name: str) -> list:
        if name == "All":
            return list(self.classes)
        return [c for c in self.classes if self.frequency[c] == name]


@dataclass
class EvalFrame:
    det_boxes: list
    det_classes: list
    det_scores: list
    gt_boxes: list
    gt_classes: list
    ego: tuple = (0.0, 0.0)

    def __post_init__(self):
        if not (len(self.det_boxes) == len(self.det_classes) == len(self.det_scores)):
            raise ValueError("detection fields must align")
        if len(self.gt_boxes) != len(self.gt_classes):
            raise ValueError("ground-truth fields must align")
        if not all(math.isfinite(s) for s in self.det_scores):
            raise ValueError("scores must be finite")

    def _xy(self, boxes):
        if not boxes:
            return np.zeros((0, 2))
        return np.array([[b.center[0], b.center[1]] for b in boxes], dtype=np.float64)

    @property
    def det_xy(self):
        return self._xy(self.det_boxes)

    @property
    def gt_xy(self):
        return self._xy(self.gt_boxes)


def ap_from_flags(flags, n_gt: int) -> float:
    """Trapezoidal area under the PR curve from per-detection TP(1)/FP(0) flags in rank order."""
    if n_gt == 0:
        return float("nan")
    flags = np.asarray(flags, dtype=np.float64)
    if len(flags) == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = np.concatenate([[0.0], tp / n_gt])
    precision = np.concatenate([[1.0], tp / (tp + fp)])
    return float(np.sum(np.diff(recall) * (precision[1:] + precision[:-1]) / 2.0))


def _candidates(frames, accept_det, gt_class, max_range):
    """Score-sorted candidate detections and per-frame GT positions."""
    cands = []
    gts = []
    n_gt = 0
    for f, frame in enumerate(frames):
        ego = np.asarray(frame.ego, dtype=np.float64)
        gxy = frame.gt_xy
        keep = [j for j, c in enumerate(frame.gt_classes)
                if gt_class(c) and np.hypot(*(gxy[j] - ego)) <= max_range(c)]
        gts.append(gxy[keep] if keep else np.zeros((0, 2)))
        n_gt += len(keep)
        dxy = frame.det_xy
        for i, c in enumerate(frame.det_classes):
            rng_limit = max_range(c)
            if accept_det(c) and np.hypot(*(dxy[i] - ego)) <= rng_limit:
                cands.append((-float(frame.det_scores[i]), f, i, c, dxy[i]))
    cands.sort(key=lambda t: (t[0], t[1], t[2]))
    return cands, gts, n_gt


def _greedy_flags(cands, gts, tau, counts_as_fp):
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    flags = []
    for _, f, _, cls, xy in cands:
        g = gts[f]
        hit = False
        if len(g):
            dist = np.hypot(g[:, 0] - xy[0], g[:, 1] - xy[1])
            dist[matched[f]] = np.inf
            j = int(np.argmin(dist))
            if dist[j] < tau:
                matched[f][j] = True
                hit = True
        if hit:
            flags.append(1)
        elif counts_as_fp(cls):
            flags.append(0)
    return flags


def _tier(cls: str, other: str, hierarchy: ClassHierarchy) -> int:
    """Hierarchy distance: 0 same class, 1 same parent, 2 otherwise."""
    if other == cls:
        return 0
    return 1 if hierarchy.parent.get(other) == hierarchy.parent[cls] else 2


def _level_ap(frames, cls, tau, level, hierarchy: ClassHierarchy) -> float:
    """AP of ``cls`` when labels within ``level`` hierarchy steps count as correct.

    Matching runs tier by tier: own-class detections first, then siblings,
    then everything else, each tier only claiming GT left over by the closer
    ones. Unmatched own-class detections are false positives; unmatched
    detections of other classes may be correct for their own class and are
    ignored. A wider level can therefore only add true positives.
    """
    if tau <= 0:
        raise ValueError("distance threshold must be positive")
    if level not in (0, 1, 2):
        raise ValueError("LCA level must be 0, 1 or 2")
    limit = hierarchy.ranges[cls]
    cands, gts, n_gt = _candidates(frames, lambda c: _tier(cls, c, hierarchy) <= level,
                                   lambda c: c == cls, lambda c: limit)
    matched = [np.zeros(len(g), dtype=bool) for g in gts]
    hits = np.zeros(len(cands), dtype=bool)
    tiers = [_tier(cls, c[3], hierarchy) for c in cands]
    for tier in range(level + 1):
        for k, (_, f, _, _, xy) in enumerate(cands):
            g = gts[f]
            if tiers[k] != tier or not len(g):
                continue
            dist = np.hypot(g[:, 0] - xy[0], g[:, 1] - xy[1])
            dist[matched[f]] = np.inf
            j = int(np.argmin(dist))
            if dist[j] < tau:
                matched[f][j] = True
                hits[k] = True
    flags = [1 if hit else 0 for hit, t in zip(hits, tiers) if hit or t == 0]
    return ap_from_flags(flags, n_gt)


def ap_at_threshold(frames, cls: str, tau: float, hierarchy: ClassHierarchy) -> float:
    return _level_ap(frames, cls, tau, 0, hierarchy)


def _mean(values) -> float:
    values = list(values)
    if any(math.isnan(v) for v in values):
        return float("nan")
    return float(np.mean(values))


def map_class(frames, cls: str, hierarchy: ClassHierarchy, thresholds=taxonomy.METRIC_THRESHOLDS) -> float:
    return _mean(ap_at_threshold(frames, cls, t, hierarchy) for t in thresholds)


def lca_map(frames, cls: str, level: int, hierarchy: ClassHierarchy,
            thresholds=taxonomy.METRIC_THRESHOLDS) -> float:
    return _mean(_level_ap(frames, cls, t, level, hierarchy) for t in thresholds)


def group_map(per_class_map: dict, hierarchy: ClassHierarchy, group: str) -> float:
    """Mean mAP over the group's classes that have ground truth (NaN entries are skipped)."""
    vals = [per_class_map[c] for c in hierarchy.group(group)
            if c in per_class_map and not math.isnan(per_class_map[c])]
    if not vals:
        raise EmptyGroup(f"group {group!r} has no evaluable class")
    return float(np.mean(vals))


def agnostic_ap(frames, tau: float, hierarchy: ClassHierarchy) -> float:
    """Class-agnostic AP: labels ignored, each box kept within its own class range."""
    cands, gts, n_gt = _candidates(frames, lambda c: True, lambda c: True, lambda c: hierarchy.ranges[c])
    return ap_from_flags(_greedy_flags(cands, gts, tau, lambda c: True), n_gt)


@dataclass
class MetricsReport:
    per_class_ap: dict
    per_class_map: dict
    groups: dict
    lca: dict
    lca_groups: dict
    agnostic_ap: dict

    def to_dict(self) -> dict:
        def clean(v):
            if isinstance(v, dict):
                return {str(k): clean(x) for k, x in v.items()}
            if isinstance(v, float) and math.isnan(v):
                return None
            return v
        return clean({
            "per_class_ap": self.per_class_ap,
            "per_class_map": self.per_class_map,
            "groups": self.groups,
            "lca": self.lca,
            "lca_groups": self.lca_groups,
            "agnostic_ap": self.agnostic_ap,
        })

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


def evaluate(frames, hierarchy: ClassHierarchy | None = None,
             thresholds=taxonomy.METRIC_THRESHOLDS) -> MetricsReport:
    hierarchy = hierarchy or ClassHierarchy()
    per_ap = {c: {f"{t:g}": ap_at_threshold(frames, c, t, hierarchy) for t in thresholds}
              for c in hierarchy.classes}
    per_map = {c: _mean(per_ap[c].values()) for c in hierarchy.classes}
    lca = {f"LCA{k}": {c: (per_map[c] if k == 0 else lca_map(frames, c, k, hierarchy, thresholds))
                       for c in hierarchy.classes} for k in (0, 1, 2)}

    def safe_group(table, g):
        try:
            return group_map(table, hierarchy, g)
        except EmptyGroup:
            return float("nan")

    groups = {g: safe_group(per_map, g) for g in ("All", "Many", "Medium", "Few")}
    lca_groups = {k: {g: safe_group(v, g) for g in ("All", "Many", "Medium", "Few")} for k, v in lca.items()}
    agn = {f"{t:g}": agnostic_ap(frames, t, hierarchy) for t in thresholds}
    return MetricsReport(per_ap, per_map, groups, lca, lca_groups, agn)
