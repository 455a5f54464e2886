"""Two-stage multi-modal detector: LiDAR and camera proposals, aggregation, refinement.

Box decoders predict residuals against each query's reference box (center
offset, log size ratio, heading change), and class decoders add to the
reference logits, so zero-initialized output layers pass proposals through.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import taxonomy
from .attention import (MLP, PositionalEncoder, TransformerLayer, deformable_sample, frustum_grid,
                        rect_eye, scaled_uniform)
from .bev import (BevFeatureMap, PointEncoder, RegionOfInterest, bilinear_sample_many, encode_bev,
                  fuse_concat)
from .geometry import (Box2D, Box3D, CameraModel, nms_bev, project_many, unproject,
                       unproject_many)
from .matching import FrustumContext, LossWeights, total_loss
from .priors import (DepthMap, PromptTable, SyntheticScene, assign_prompt_class, filter_priors,
                     nuscenes_prompt_table, owl_feature_map)

log = logging.getLogger(__name__)

_LOGIT_FLOOR = 1e-6


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * np.asarray(x, dtype=np.float64)))


def logit(p):
    p = np.clip(np.asarray(p, dtype=np.float64), _LOGIT_FLOOR, 1 - _LOGIT_FLOOR)
    return np.log(p) - np.log1p(-p)


# ------------------------------------------------------------------- types

@dataclass
class ObjectQuery:
    feature: np.ndarray
    position: np.ndarray
    provenance: str
    box2d: Box2D | None = None
    depth: float | None = None
    ref_size: tuple = (1.0, 1.0, 1.0)
    class_logits: np.ndarray | None = None


@dataclass
class Detection:
    box: Box3D
    class_logits: np.ndarray
    provenance: str
    token: np.ndarray | None = field(default=None, repr=False)
    cell: tuple | None = None

    @property
    def class_probs(self) -> np.ndarray:
        return sigmoid(self.class_logits)

    @property
    def score(self) -> float:
        return float(np.max(self.class_probs))

    @property
    def label(self) -> int:
        return int(np.argmax(self.class_logits))


@dataclass
class Heatmap:
    """Per-cell class logits and regression ``(dx, dy, z, l, w, h, heading)``;
    ``dx, dy`` are offsets from the cell center."""

    logits: np.ndarray
    regression: np.ndarray
    origin: tuple
    cell: tuple

    def __post_init__(self):
        if not (np.all(np.isfinite(self.logits)) and np.all(np.isfinite(self.regression))):
            raise ValueError("heatmap entries must be finite")


@dataclass
class HeatmapNoise:
    peak_logit: float = 6.0
    blob_logit: float = 4.0
    background_logit: float = -10.0
    center_sigma: float = 0.0
    logit_noise: float = 0.0
    spurious: int = 0


@dataclass
class PipelineConfig:
    roi: RegionOfInterest = field(default_factory=lambda: RegionOfInterest(
        (-54.0, -54.0, -5.0), (54.0, 54.0, 3.0), (0.6, 0.6, 0.2)))
    grid_n: tuple = (1, 1, 20)
    delta: float = 10.0
    lidar_conf_threshold: float = 0.01
    nms_iou: float = 0.2
    top_k: int = 500
    camera_blacklist: tuple = taxonomy.CAMERA_BLACKLIST
    min_prior_depth: float = 0.5
    depth_conf_gate: float = 0.5
    camera_blocks: int = 2
    refine_blocks: int = 2
    alpha_phi: float = 0.03
    alpha_z: float = 5.0
    bev_dim: int = 16
    heads: int = 8
    deform_points: int = 4
    init: str = "random"
    seed: int = 0
    classes: tuple = taxonomy.CLASSES
    heatmap: HeatmapNoise = field(default_factory=HeatmapNoise)

    def __post_init__(self):
        if isinstance(self.roi, dict):
            self.roi = RegionOfInterest(**self.roi)
        if isinstance(self.heatmap, dict):
            self.heatmap = HeatmapNoise(**self.heatmap)
        self.grid_n = tuple(int(v) for v in self.grid_n)
        self.classes = tuple(self.classes)
        self.camera_blacklist = tuple(self.camera_blacklist)
        if not set(self.camera_blacklist) <= set(self.classes):
            raise ValueError("camera blacklist must be a subset of the class list")
        for name in ("delta", "lidar_conf_threshold", "nms_iou", "alpha_phi", "alpha_z", "min_prior_depth"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.init not in ("random", "passthrough"):
            raise ValueError("init must be 'random' or 'passthrough'")

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineConfig":
        data = dict(data or {})
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown pipeline keys: {sorted(unknown)}")
        return cls(**data)

    @property
    def n_classes(self) -> int:
        return len(self.classes)


# ----------------------------------------------------------------- weights

@dataclass
class CameraBlock:
    self_attn: TransformerLayer
    cross_attn: TransformerLayer
    box_head: MLP


@dataclass
class RefineBlock:
    lidar_offsets: np.ndarray
    lidar_attn: TransformerLayer
    camera_offsets: np.ndarray
    camera_attn: TransformerLayer
    self_pe: PositionalEncoder
    self_attn: TransformerLayer
    box_head: MLP
    class_head: MLP


@dataclass
class PipelineWeights:
    lidar_encoder: PointEncoder
    owl_encoder: PointEncoder
    token_mlp: MLP
    affinity_mlp: MLP
    pe_uvd: PositionalEncoder
    pe_xyz: PositionalEncoder
    pe_offset_xyz: PositionalEncoder
    pe_offset_uvd: PositionalEncoder
    camera_blocks: list
    camera_class_head: MLP
    camera_to_refine: np.ndarray
    refine_blocks: list

    @classmethod
    def build(cls, cfg: PipelineConfig, token_dim: int, n_prompts: int) -> "PipelineWeights":
        rng = np.random.default_rng(cfg.seed)
        D = cfg.bev_dim
        Dc = 2 * D
        C = cfg.n_classes
        K = cfg.deform_points
        passthrough = cfg.init == "passthrough"
        init = cfg.init

        def zeros_if(shape_arr):
            return np.zeros_like(shape_arr) if passthrough else shape_arr

        cam_blocks = [CameraBlock(TransformerLayer.build(Dc, Dc, heads=cfg.heads, rng=rng, init=init),
                                  TransformerLayer.build(Dc, Dc, heads=cfg.heads, rng=rng, init=init),
                                  MLP.build([Dc, Dc // 2, Dc // 2, 8], rng, zero_last=passthrough))
                      for _ in range(cfg.camera_blocks)]
        ref_blocks = [RefineBlock(zeros_if(scaled_uniform(rng, D, 2 * K)),
                                  TransformerLayer.build(D, 4 * D, heads=cfg.heads, rng=rng, init=init),
                                  zeros_if(scaled_uniform(rng, D, 2 * K)),
                                  TransformerLayer.build(D, 4 * D, r=token_dim, s=token_dim, heads=cfg.heads,
                                                         rng=rng, init=init),
                                  PositionalEncoder.build(3, D, rng),
                                  TransformerLayer.build(D, D, heads=cfg.heads, rng=rng, init=init),
                                  MLP.build([D, D, D, 7], rng, zero_last=passthrough),
                                  MLP.build([D, D, C], rng, zero_last=passthrough))
                      for _ in range(cfg.refine_blocks)]
        to_ref = rect_eye(Dc, D) if passthrough else scaled_uniform(rng, Dc, D)
        return cls(PointEncoder.build(1, D, rng), PointEncoder.build(token_dim, D, rng),
                   MLP.build([token_dim, Dc, Dc, Dc], rng), MLP.build([n_prompts, Dc, Dc, Dc], rng),
                   PositionalEncoder.build(3, Dc, rng), PositionalEncoder.build(3, Dc, rng),
                   PositionalEncoder.build(3, Dc, rng), PositionalEncoder.build(3, Dc, rng),
                   cam_blocks, MLP.build([Dc, Dc // 2, Dc // 2, C], rng, zero_last=passthrough),
                   to_ref, ref_blocks)


# ----------------------------------------------------------- LiDAR branch

def lidar_bev(points, cfg: PipelineConfig, weights: PipelineWeights) -> BevFeatureMap:
    """LiDAR BEV features from raw points with a constant per-point feature."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return encode_bev(points, np.ones(len(points)), cfg.roi, weights.lidar_encoder)


def synthesize_heatmap(gt_boxes, gt_classes, cfg: PipelineConfig, rng=None) -> Heatmap:
    """Stand-in for a LiDAR detection head: a peak cell per object plus a 3x3 blob."""
    noise = cfg.heatmap
    rng = rng if rng is not None else np.random.default_rng(0)
    nx, ny, _ = cfg.roi.grid_shape
    cx, cy = cfg.roi.voxel_size[:2]
    ox, oy = cfg.roi.mins[:2]
    C = cfg.n_classes
    logits = np.full((nx, ny, C), noise.background_logit)
    reg = np.zeros((nx, ny, 7))
    reg[..., 3:6] = 1.0
    for box, cls in zip(gt_boxes, gt_classes):
        x, y, z = box.center
        if noise.center_sigma > 0:
            x, y = x + rng.normal(0, noise.center_sigma), y + rng.normal(0, noise.center_sigma)
        i, j = int(math.floor((x - ox) / cx)), int(math.floor((y - oy) / cy))
        if not (0 <= i < nx and 0 <= j < ny):
            continue
        k = cfg.classes.index(cls)
        for di in (-1, 0, 1):
            for dj in (-1, 0, 1):
                a, b = i + di, j + dj
                if not (0 <= a < nx and 0 <= b < ny):
                    continue
                value = noise.peak_logit if di == dj == 0 else noise.blob_logit
                if value <= logits[a, b].max():
                    continue
                logits[a, b, k] = value
                reg[a, b] = (x - (ox + (a + 0.5) * cx), y - (oy + (b + 0.5) * cy), z, *box.size, box.heading)
    if noise.logit_noise > 0:
        logits = logits + rng.normal(0, noise.logit_noise, size=logits.shape)
    for _ in range(noise.spurious):
        a, b, k = rng.integers(nx), rng.integers(ny), rng.integers(C)
        logits[a, b, k] = noise.peak_logit
        reg[a, b] = (0.0, 0.0, 0.5, 1.0, 1.0, 1.0, 0.0)
    return Heatmap(logits, reg, (ox, oy), (cx, cy))


def decode_lidar_proposals(h: Heatmap, cfg: PipelineConfig) -> list:
    """Confidence filter, BEV NMS and top-k over heatmap cells."""
    conf = sigmoid(h.logits.max(axis=2))
    cells = np.argwhere(conf > cfg.lidar_conf_threshold)
    dets = []
    for i, j in cells:
        r = h.regression[i, j]
        x = h.origin[0] + (i + 0.5) * h.cell[0] + r[0]
        y = h.origin[1] + (j + 0.5) * h.cell[1] + r[1]
        box = Box3D((x, y, r[2]), tuple(np.maximum(r[3:6], 1e-3)), r[6])
        dets.append(Detection(box, h.logits[i, j].copy(), "lidar", cell=(int(i), int(j))))
    keep = nms_bev([(d.box, d.score) for d in dets], cfg.nms_iou)
    return [dets[k] for k in keep[:cfg.top_k]]


# ---------------------------------------------------------- camera branch

def prior_class_logits(affinities, table: PromptTable, classes) -> np.ndarray:
    """Per-class logit of the best affinity among that class's prompts."""
    out = np.full(len(classes), logit(_LOGIT_FLOOR))
    for k, cls in enumerate(classes):
        idx = table.prompts_for(cls)
        if idx:
            out[k] = logit(np.max(np.asarray(affinities)[idx]))
    return out


def init_camera_queries(priors, depth_map: DepthMap, cam: CameraModel, weights: PipelineWeights,
                        cfg: PipelineConfig, table: PromptTable, camera_index: int = 0):
    """Lift prompt-filtered priors to object queries; returns ``(queries, n_discarded)``."""
    queries, discarded = [], 0
    for p in priors:
        u, v = p.box2d.center
        d = depth_map.at(u, v)
        if d < cfg.min_prior_depth:
            discarded += 1
            continue
        q_p = unproject(cam, u, v, d)
        q_p = np.clip(q_p, cfg.roi.mins, np.nextafter(np.array(cfg.roi.maxs), -np.inf))
        aff_logits = logit(p.affinities)
        feat = (weights.token_mlp(p.token) + weights.affinity_mlp(aff_logits)
                + weights.pe_uvd([u, v, d]) + weights.pe_xyz(q_p))
        assigned = assign_prompt_class(p, table)
        cls = assigned[0] if assigned else table.classes[int(np.argmax(p.affinities))]
        queries.append(ObjectQuery(feat, q_p, f"camera:{camera_index}", p.box2d, d, taxonomy.SIZES[cls],
                                   prior_class_logits(p.affinities, table, cfg.classes)))
    return queries, discarded


def lift_prior_pixels(priors, depth_map: DepthMap, cam: CameraModel, gate: float = 0.5):
    """Unproject every confident pixel inside a prior box; returns ``(points, tokens)``.

    A pixel covered by several boxes is lifted once and takes the token of the
    smallest covering box.
    """
    h, w = depth_map.shape
    owner = np.full((h, w), -1, dtype=np.int64)
    order = sorted(range(len(priors)), key=lambda k: -priors[k].box2d.area)
    for k in order:
        u0, v0, u1, v1 = priors[k].box2d.corners
        c0, c1 = max(0, math.ceil(u0 - 0.5)), min(w, math.ceil(u1 - 0.5))
        r0, r1 = max(0, math.ceil(v0 - 0.5)), min(h, math.ceil(v1 - 0.5))
        if c1 > c0 and r1 > r0:
            owner[r0:r1, c0:c1] = k
    mask = (owner >= 0) & (depth_map.confidence > gate) & (depth_map.depth > 0)
    rows, cols = np.nonzero(mask)
    if len(rows) == 0:
        dim = len(priors[0].token) if priors else 0
        return np.zeros((0, 3)), np.zeros((0, dim))
    depth = depth_map.depth[rows, cols].astype(np.float64)
    pts = unproject_many(cam, np.column_stack([cols + 0.5, rows + 0.5, depth]))
    tokens = np.stack([priors[k].token for k in owner[rows, cols]])
    return pts, tokens


def _decode_camera_box(out, query_pos, ref_size) -> Box3D:
    center = query_pos + out[:3]
    size = np.asarray(ref_size) * np.exp(np.clip(out[3:6], -5, 5))
    heading = math.atan2(out[6], 1.0 + out[7])
    return Box3D(tuple(center), tuple(size), heading)


def camera_proposals(queries, fused_bev: BevFeatureMap, cam: CameraModel, cfg: PipelineConfig,
                     weights: PipelineWeights):
    """Frustum attention blocks; returns ``(final detections, per-block box lists)``."""
    if not queries:
        return [], [[] for _ in weights.camera_blocks]
    feats = np.stack([q.feature for q in queries])
    pos = np.stack([q.position for q in queries]).astype(np.float64)
    uvd = np.array([[*q.box2d.center, q.depth] for q in queries])
    per_block = []
    for b, block in enumerate(weights.camera_blocks):
        feats = block.self_attn(feats, feats, feats)
        updated = np.empty_like(feats)
        for i, q in enumerate(queries):
            box2d = Box2D((uvd[i, 0], uvd[i, 1]), q.box2d.size)
            grid = frustum_grid(box2d, uvd[i, 2], cam, cfg.grid_n, cfg.delta, query_position=pos[i])
            g = (bilinear_sample_many(fused_bev, grid.points[:, :2])
                 + weights.pe_offset_xyz(grid.offsets_xyz) + weights.pe_offset_uvd(grid.offsets_uvd))
            updated[i] = block.cross_attn(feats[i:i + 1], g, g)[0]
        feats = updated
        out = block.box_head(feats)
        boxes = [_decode_camera_box(out[i], pos[i], q.ref_size) for i, q in enumerate(queries)]
        per_block.append(boxes)
        pos = np.array([bx.center for bx in boxes])
        # re-center the frustum on the decoded position for the next block
        uv, z = project_many(cam, pos)
        ok = z > cfg.min_prior_depth
        uvd[ok] = np.column_stack([uv[ok], z[ok]])
    logits = np.stack([q.class_logits for q in queries]) + weights.camera_class_head(feats)
    dets = [Detection(per_block[-1][i], logits[i], q.provenance, token=feats[i])
            for i, q in enumerate(queries)]
    return dets, per_block


def aggregate_proposals(lidar: list, camera: list, cfg: PipelineConfig) -> list:
    """Drop blacklisted camera classes, concatenate, BEV NMS."""
    black = {cfg.classes.index(c) for c in cfg.camera_blacklist}
    cams = [d for d in camera if d.label not in black]
    merged = list(lidar) + cams
    keep = nms_bev([(d.box, d.score) for d in merged], cfg.nms_iou)
    return [merged[k] for k in keep]


# ------------------------------------------------------------- refinement

def _camera_attention(feats, pos, owl_maps, cams, block: RefineBlock):
    """Per-camera deformable attention, mean-pooled over cameras with a valid projection."""
    total = np.zeros_like(feats)
    count = np.zeros(len(feats))
    for fmap, cam in zip(owl_maps, cams):
        uv, z = project_many(cam, pos)
        valid = (z > 1e-9) & (uv[:, 0] >= 0) & (uv[:, 0] < cam.image_width) \
            & (uv[:, 1] >= 0) & (uv[:, 1] < cam.image_height)
        if not valid.any():
            continue
        out, _ = deformable_sample(feats[valid], uv[valid], fmap, block.camera_offsets, block.camera_attn.attn)
        total[valid] += out
        count[valid] += 1
    return np.where(count[:, None] > 0, total / np.maximum(count, 1)[:, None], 0.0)


def refine(proposals, f_lidar: BevFeatureMap, owl_maps, cams, cfg: PipelineConfig,
           weights: PipelineWeights):
    """Object-camera-LiDAR attention blocks; returns ``(final detections, per-block lists)``."""
    if not proposals:
        return [], [[] for _ in weights.refine_blocks]
    feats = []
    for d in proposals:
        if d.provenance == "lidar":
            i, j = d.cell if d.cell is not None else f_lidar.cell_index(d.box.center[0], d.box.center[1])
            feats.append(f_lidar.data[i, j])
        else:
            feats.append(d.token @ weights.camera_to_refine)
    feats = np.stack(feats)
    boxes = [d.box for d in proposals]
    logits = np.stack([d.class_logits for d in proposals])
    per_block = []
    for block in weights.refine_blocks:
        pos = np.array([b.center for b in boxes])
        out, _ = deformable_sample(feats, pos[:, :2], f_lidar, block.lidar_offsets, block.lidar_attn.attn)
        feats = block.lidar_attn.update(feats, out)
        feats = block.camera_attn.update(feats, _camera_attention(feats, pos, owl_maps, cams, block))
        tokens = feats + block.self_pe(pos)
        feats = block.self_attn(tokens, tokens, tokens)
        delta = block.box_head(feats)
        boxes = [Box3D(tuple(np.asarray(b.center) + delta[i, :3]),
                       tuple(np.asarray(b.size) * np.exp(np.clip(delta[i, 3:6], -5, 5))),
                       b.heading + delta[i, 6])
                 for i, b in enumerate(boxes)]
        logits = logits + block.class_head(feats)
        per_block.append([Detection(boxes[i], logits[i].copy(), d.provenance, token=feats[i].copy())
                          for i, d in enumerate(proposals)])
    return per_block[-1], per_block


# ------------------------------------------------------------ whole scene

@dataclass
class SceneResult:
    scene_id: int
    lidar_proposals: list
    camera_proposals: list        # per camera
    camera_blocks: list           # per camera, per block box lists
    aggregated: list
    refined: list
    refine_blocks: list
    losses: dict
    discarded_priors: int


def run_scene(scene: SyntheticScene, cfg: PipelineConfig, weights: PipelineWeights | None = None,
              table: PromptTable | None = None, scene_id: int = 0, refine_stage: bool = True,
              loss_weights: LossWeights | None = None) -> SceneResult:
    table = table or nuscenes_prompt_table()
    token_dim = scene.config.token_dim
    weights = weights or PipelineWeights.build(cfg, token_dim, len(table))
    rng = np.random.default_rng([scene.seed, 1])
    f_lidar = lidar_bev(scene.lidar_points, cfg, weights)
    heat = synthesize_heatmap(scene.gt_boxes, scene.gt_classes, cfg, rng)
    lidar_dets = decode_lidar_proposals(heat, cfg)

    rig = scene.config.cameras
    offsets = scene.config.crop_offsets()
    cam_dets, cam_blocks, owl_maps = [], [], []
    discarded = 0
    for k, (cam, depth, priors) in enumerate(zip(scene.cameras, scene.depth_maps, scene.priors)):
        kept = filter_priors(priors, table)
        pts, toks = lift_prior_pixels(kept, depth, cam, cfg.depth_conf_gate)
        owl_bev = encode_bev(pts, toks if len(pts) else np.zeros((0, token_dim)), cfg.roi, weights.owl_encoder)
        fused = fuse_concat(f_lidar, owl_bev)
        queries, n_drop = init_camera_queries(kept, depth, cam, weights, cfg, table, k)
        discarded += n_drop
        dets, blocks = camera_proposals(queries, fused, cam, cfg, weights)
        cam_dets.append(dets)
        cam_blocks.append(blocks)
        owl_maps.append(owl_feature_map(kept, cam, offsets, rig.crop_width, rig.feature_stride, token_dim))

    aggregated = aggregate_proposals(lidar_dets, [d for ds in cam_dets for d in ds], cfg)
    if refine_stage:
        refined, ref_blocks = refine(aggregated, f_lidar, owl_maps, scene.cameras, cfg, weights)
    else:
        refined, ref_blocks = aggregated, []

    lw = loss_weights or LossWeights()
    gt_idx = [cfg.classes.index(c) for c in scene.gt_classes]
    cam_losses = []
    for cam, dets in zip(scene.cameras, cam_dets):
        if dets:
            ctx = FrustumContext(cam, cfg.alpha_phi, cfg.alpha_z)
            cam_losses.append(total_loss([d.box for d in dets], [d.class_logits for d in dets],
                                         scene.gt_boxes, gt_idx, lw, ctx))
    ref_loss = total_loss([d.box for d in refined], [d.class_logits for d in refined], scene.gt_boxes, gt_idx, lw)
    losses = {
        "camera_total": float(np.mean([l.total for l in cam_losses])) if cam_losses else 0.0,
        "camera_box": float(np.mean([l.box for l in cam_losses])) if cam_losses else 0.0,
        "camera_class": float(np.mean([l.classification for l in cam_losses])) if cam_losses else 0.0,
        "camera_matched": int(sum(l.matched for l in cam_losses)),
        "refine_total": ref_loss.total,
        "refine_box": ref_loss.box,
        "refine_class": ref_loss.classification,
        "refine_matched": ref_loss.matched,
    }
    return SceneResult(scene_id, lidar_dets, cam_dets, cam_blocks, aggregated, refined, ref_blocks,
                       losses, discarded)
