"""Mock 2D detector / depth estimator layer.

Synthetic scenes stand in for real images: ground-truth boxes, LiDAR points,
ray-cast depth maps and jittered 2D detections carrying class-prototype
tokens and per-prompt affinities. A small binary cache format stores the
per-camera detections and depth maps.
"""
from __future__ import annotations

import io
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import taxonomy
from .bev import BevFeatureMap
from .geometry import Box2D, Box3D, CameraModel, nms_2d, project_many

CROP_MERGE_IOU = 0.85
MAGIC = b"FOMP"
FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class FormatError(ValueError):
    pass


class CorruptPayload(ValueError):
    pass


@dataclass
class PriorDetection:
    box2d: Box2D
    token: np.ndarray
    affinities: np.ndarray
    source_crop: int = 0

    @property
    def score(self) -> float:
        return float(np.max(self.affinities)) if len(self.affinities) else 0.0

    def shifted(self, du: float, dv: float, crop: int | None = None) -> "PriorDetection":
        return PriorDetection(self.box2d.shifted(du, dv), self.token, self.affinities,
                              self.source_crop if crop is None else crop)


@dataclass
class DepthMap:
    depth: np.ndarray
    confidence: np.ndarray

    def __post_init__(self):
        self.depth = np.asarray(self.depth, dtype=np.float32)
        self.confidence = np.asarray(self.confidence, dtype=np.float32)
        if self.depth.shape != self.confidence.shape:
            raise ValueError("depth and confidence shapes differ")
        if not np.all(np.isfinite(self.depth)):
            raise ValueError("depths must be finite")

    @property
    def shape(self):
        return self.depth.shape

    def at(self, u: float, v: float) -> float:
        """Nearest-neighbor depth at pixel coordinates; 0 outside the image."""
        r, c = math.floor(v), math.floor(u)
        h, w = self.depth.shape
        if 0 <= r < h and 0 <= c < w:
            return float(self.depth[r, c])
        return 0.0


@dataclass
class PromptTable:
    prompts: tuple
    classes: tuple
    thresholds: tuple

    def __post_init__(self):
        if not (len(self.prompts) == len(self.classes) == len(self.thresholds)):
            raise ValueError("prompt, class and threshold lists must align")
        if any(not 0.0 <= t <= 1.0 for t in self.thresholds):
            raise ValueError("thresholds must lie in [0, 1]")

    def __len__(self):
        return len(self.prompts)

    def prompts_for(self, cls: str) -> list:
        return [i for i, c in enumerate(self.classes) if c == cls]

    @property
    def class_names(self) -> list:
        return sorted(set(self.classes), key=self.classes.index)


_NUSCENES_PROMPTS = [
    ("a car", "car", 0.2),
    ("a truck", "truck", 0.2),
    ("a trailer", "trailer", 0.2),
    ("a construction vehicle", "construction_vehicle", 0.2),
    ("a bicycle", "bicycle", 0.15),
    ("a motorcycle", "motorcycle", 0.15),
    ("a bus", "bus", 0.2),
    ("a police vehicle", "emergency_vehicle", 0.2),
    ("an ambulance", "emergency_vehicle", 0.1),
    ("a person", "adult", 0.1),
    ("a child", "child", 0.1),
    ("a stroller", "stroller", 0.2),
    ("a construction worker", "construction_worker", 0.1),
    ("a police officer", "police_officer", 0.1),
    ("a scooter", "personal_mobility", 0.2),
    ("a wheelchair", "personal_mobility", 0.15),
    ("a traffic cone", "traffic_cone", 0.15),
    ("a dolley", "pushable_pullable", 0.15),
    ("a wheel barrow", "pushable_pullable", 0.2),
    ("a shopping cart", "pushable_pullable", 0.15),
    ("a garbage bin", "pushable_pullable", 0.3),
]


def nuscenes_prompt_table() -> PromptTable:
    """Urban prompt list; barrier and debris deliberately have no prompt."""
    p, c, t = zip(*_NUSCENES_PROMPTS)
    return PromptTable(p, c, t)


def assign_prompt_class(det: PriorDetection, table: PromptTable):
    """Class of the arg-max prompt and its affinity, or ``None`` when filtered out.

    Ties resolve to the lowest prompt index.
    """
    if len(det.affinities) != len(table):
        raise ValueError("affinities do not match the prompt table")
    best = int(np.argmax(det.affinities))
    score = float(det.affinities[best])
    if score < table.thresholds[best]:
        return None
    return table.classes[best], score


def filter_priors(dets, table: PromptTable) -> list:
    return [d for d in dets if assign_prompt_class(d, table) is not None]


def merge_crops(dets_per_crop, crop_offsets) -> list:
    """Shift crop detections into the full image and deduplicate at IoU 0.85."""
    merged = []
    for crop, (dets, offset) in enumerate(zip(dets_per_crop, crop_offsets)):
        du, dv = (offset, 0.0) if np.isscalar(offset) else offset
        merged.extend(d.shifted(du, dv, crop) for d in dets)
    keep = nms_2d([d.box2d for d in merged], [d.score for d in merged], CROP_MERGE_IOU)
    return [merged[i] for i in keep]


def split_into_crops(dets, crop_offsets, crop_width) -> list:
    """Crop-local detections for every crop containing each box center."""
    out = [[] for _ in crop_offsets]
    for d in dets:
        for k, off in enumerate(crop_offsets):
            if off <= d.box2d.center[0] < off + crop_width:
                out[k].append(d.shifted(-off, 0.0, k))
    return out


# --------------------------------------------------------------- scene config

@dataclass
class NoiseConfig:
    box_jitter_px: float = 0.0
    depth_bias: float = 0.0
    depth_noise: float = 0.0
    fp_rate: float = 0.0
    fn_rate: float = 0.0
    token_noise: float = 0.1


@dataclass
class CameraRigConfig:
    count: int = 6
    width: int = 400
    height: int = 225
    focal: float = 316.0
    mount_height: float = 1.6
    crop_width: int = 225
    feature_stride: int = 5


@dataclass
class SceneConfig:
    counts: dict = field(default_factory=lambda: {c: 1 for c in taxonomy.CLASSES})
    ranges: dict = field(default_factory=dict)
    noise: NoiseConfig = field(default_factory=NoiseConfig)
    cameras: CameraRigConfig = field(default_factory=CameraRigConfig)
    token_dim: int = 32
    prototype_seed: int = 7
    lidar_points_per_m2: float = 20.0
    ground_points: int = 2000

    def __post_init__(self):
        if isinstance(self.noise, dict):
            self.noise = NoiseConfig(**self.noise)
        if isinstance(self.cameras, dict):
            self.cameras = CameraRigConfig(**self.cameras)
        self.counts = {str(k): int(v) for k, v in self.counts.items()}
        for cls in self.counts:
            if cls not in taxonomy.CLASSES:
                raise ConfigError(f"unknown class {cls!r}")
        for name, value in vars(self.noise).items():
            if value < 0 and name != "depth_bias":
                raise ConfigError(f"noise parameter {name} must be non-negative")
        if self.noise.fn_rate > 1:
            raise ConfigError("fn_rate is a probability")
        if any(v < 0 for v in self.counts.values()):
            raise ConfigError("counts must be non-negative")
        resolved = {}
        for cls in self.counts:
            lo, hi = self.ranges.get(cls, (4.0, taxonomy.PARENT_RANGE[taxonomy.PARENT[cls]] - 2.0))
            if not hi > lo or lo < 0:
                raise ConfigError(f"empty placement range for {cls}: {(lo, hi)}")
            resolved[cls] = (float(lo), float(hi))
        self.ranges = resolved
        if self.cameras.count < 1:
            raise ConfigError("at least one camera is required")

    @classmethod
    def from_dict(cls, data: dict) -> "SceneConfig":
        data = dict(data or {})
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        if "ranges" in data:
            data["ranges"] = {k: tuple(v) for k, v in data["ranges"].items()}
        return cls(**data)

    def crop_offsets(self) -> list:
        cams = self.cameras
        if cams.crop_width >= cams.width:
            return [0]
        return [0, cams.width - cams.crop_width]

    def rig(self) -> list:
        cams = self.cameras
        return [CameraModel.looking_along(2 * math.pi * k / cams.count, (0.0, 0.0, cams.mount_height),
                                          cams.focal, cams.width, cams.height)
                for k in range(cams.count)]


@dataclass
class SyntheticScene:
    gt_boxes: list
    gt_classes: list
    lidar_points: np.ndarray
    cameras: list
    depth_maps: list
    priors: list
    seed: int
    config: SceneConfig


# -------------------------------------------------------------- generation

def class_prototypes(config: SceneConfig) -> np.ndarray:
    rng = np.random.default_rng(config.prototype_seed)
    return rng.normal(size=(len(taxonomy.CLASSES), config.token_dim))


def _place_boxes(config: SceneConfig, rng) -> tuple:
    boxes, labels = [], []
    for cls in taxonomy.CLASSES:
        n = config.counts.get(cls, 0)
        lo, hi = config.ranges.get(cls, (0, 0))
        l, w, h = taxonomy.SIZES[cls]
        for _ in range(n):
            for _attempt in range(200):
                r = rng.uniform(lo, hi)
                az = rng.uniform(-math.pi, math.pi)
                heading = rng.uniform(-math.pi, math.pi)
                cand = Box3D((r * math.cos(az), r * math.sin(az), h / 2), (l, w, h), heading)
                rad = 0.5 * math.hypot(l, w)
                if all(math.hypot(cand.center[0] - b.center[0], cand.center[1] - b.center[1])
                       > rad + 0.5 * math.hypot(b.size[0], b.size[1]) + 0.5 for b in boxes):
                    boxes.append(cand)
                    labels.append(cls)
                    break
    return boxes, labels


def _surface_points(box: Box3D, density: float, rng) -> np.ndarray:
    l, w, h = box.size
    faces = [  # (area, fixed axis, sign)
        (w * h, 0, 1), (w * h, 0, -1), (l * h, 1, 1), (l * h, 1, -1), (l * w, 2, 1),
    ]
    pts = []
    half = np.array([l, w, h]) / 2
    for area, axis, sign in faces:
        n = max(1, int(round(area * density)))
        local = rng.uniform(-1, 1, size=(n, 3)) * half
        local[:, axis] = sign * half[axis]
        pts.append(local)
    local = np.vstack(pts)
    c, s = math.cos(box.heading), math.sin(box.heading)
    world = np.column_stack([c * local[:, 0] - s * local[:, 1], s * local[:, 0] + c * local[:, 1], local[:, 2]])
    return world + np.asarray(box.center)


def pixel_rays(cam: CameraModel) -> np.ndarray:
    """World-frame ray directions through pixel centers, scaled to unit camera-frame z; (H, W, 3)."""
    vs, us = np.mgrid[0:cam.image_height, 0:cam.image_width]
    hom = np.stack([us + 0.5, vs + 0.5, np.ones_like(us, dtype=np.float64)], axis=-1).reshape(-1, 3)
    dirs_cam = np.linalg.solve(cam.intrinsics, hom.T).T
    return (dirs_cam @ cam.rotation).reshape(cam.image_height, cam.image_width, 3)


def ray_box_depth(origin: np.ndarray, dirs: np.ndarray, box: Box3D) -> np.ndarray:
    """Entry parameter of each ray into ``box`` (inf on a miss). Rays are ``origin + t * dir``."""
    c, s = math.cos(box.heading), math.sin(box.heading)
    rot = np.array([[c, s, 0.0], [-s, c, 0.0], [0.0, 0.0, 1.0]])  # world -> box
    o = rot @ (origin - np.asarray(box.center))
    d = dirs @ rot.T
    half = np.asarray(box.size) / 2
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (-half - o) / d
        t2 = (half - o) / d
    tlo = np.where(d == 0, np.where(np.abs(o) <= half, -np.inf, np.inf), np.minimum(t1, t2))
    thi = np.where(d == 0, np.where(np.abs(o) <= half, np.inf, -np.inf), np.maximum(t1, t2))
    tmin = tlo.max(axis=-1)
    tmax = thi.min(axis=-1)
    hit = (tmax >= tmin) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def render_depth(cam: CameraModel, boxes: list) -> tuple:
    """Nearest-hit camera-frame depth and box id per pixel (id -1, depth 0 on a miss)."""
    rays = pixel_rays(cam)
    best = np.full(rays.shape[:2], np.inf)
    ids = np.full(rays.shape[:2], -1, dtype=np.int64)
    origin = cam.center
    h, w = best.shape
    for k, box in enumerate(boxes):
        uv, z = project_many(cam, box.corners())
        if np.all(z <= 1e-6):
            continue
        if np.all(z > 1e-6):
            # only rays inside the projected footprint can hit the box
            c0, r0 = np.floor(uv.min(axis=0)).astype(int) - 1
            c1, r1 = np.ceil(uv.max(axis=0)).astype(int) + 1
            c0, r0, c1, r1 = max(c0, 0), max(r0, 0), min(c1, w), min(r1, h)
            if c1 <= c0 or r1 <= r0:
                continue
        else:
            r0, r1, c0, c1 = 0, h, 0, w
        t = ray_box_depth(origin, rays[r0:r1, c0:c1], box)
        win_best = best[r0:r1, c0:c1]
        closer = t < win_best
        win_best[closer] = t[closer]
        ids[r0:r1, c0:c1][closer] = k
    return np.where(np.isfinite(best), best, 0.0), ids


def gt_box2d(cam: CameraModel, box: Box3D):
    """Image box centered on the projected 3D center, spanning all projected corners.

    Returns ``None`` if any corner lies behind (or within 0.1 m of) the camera plane.
    """
    uv, z = project_many(cam, np.vstack([np.asarray(box.center)[None], box.corners()]))
    if np.any(z <= 0.1):
        return None
    cu, cv = uv[0]
    w = 2 * np.max(np.abs(uv[1:, 0] - cu))
    h = 2 * np.max(np.abs(uv[1:, 1] - cv))
    return Box2D((cu, cv), (w, h))


def _affinities(table: PromptTable, cls: str, rng, peak=(0.5, 0.9)) -> np.ndarray:
    aff = rng.uniform(0.0, 0.05, size=len(table))
    prompts = table.prompts_for(cls)
    aff[prompts[0]] = rng.uniform(*peak)
    return aff


def generate_scene(config: SceneConfig, seed: int, table: PromptTable | None = None) -> SyntheticScene:
    table = table or nuscenes_prompt_table()
    rng = np.random.default_rng(seed)
    noise = config.noise
    protos = class_prototypes(config)
    boxes, labels = _place_boxes(config, rng)

    lidar = [_surface_points(b, config.lidar_points_per_m2, rng) for b in boxes]
    extent = max(hi for _, hi in config.ranges.values()) if config.ranges else 50.0
    ground = np.column_stack([rng.uniform(-extent, extent, size=(config.ground_points, 2)),
                              np.zeros(config.ground_points)])
    lidar_points = np.vstack(lidar + [ground]) if lidar else ground

    cams = config.rig()
    offsets = config.crop_offsets()
    depth_maps, priors = [], []
    for cam in cams:
        depth, ids = render_depth(cam, boxes)
        hit = ids >= 0
        noisy = depth * (1.0 + noise.depth_bias)
        if noise.depth_noise > 0:
            noisy = noisy + rng.normal(0.0, noise.depth_noise, size=depth.shape)
        noisy = np.where(hit, np.maximum(noisy, 0.0), 0.0)
        depth_maps.append(DepthMap(noisy, hit.astype(np.float32)))

        dets = []
        for k, (box, cls) in enumerate(zip(boxes, labels)):
            prompts = table.prompts_for(cls)
            if not prompts:
                continue
            b2 = gt_box2d(cam, box)
            if b2 is None:
                continue
            u, v = b2.center
            if not (0 <= u < cam.image_width and 0 <= v < cam.image_height):
                continue
            if ids[int(v), int(u)] != k:
                continue  # center pixel occluded
            if noise.fn_rate > 0 and rng.random() < noise.fn_rate:
                continue
            if noise.box_jitter_px > 0:
                du, dv, dw, dh = rng.normal(0.0, noise.box_jitter_px, size=4)
                b2 = Box2D((u + du, v + dv), (max(1.0, b2.size[0] + dw), max(1.0, b2.size[1] + dh)))
            token = protos[taxonomy.class_index(cls)] + rng.normal(0.0, noise.token_noise, config.token_dim)
            dets.append(PriorDetection(b2, token, _affinities(table, cls, rng)))
        n_fp = rng.poisson(noise.fp_rate) if noise.fp_rate > 0 else 0
        for _ in range(n_fp):
            cls = table.classes[rng.integers(len(table))]
            size = rng.uniform(10.0, 60.0, size=2)
            center = rng.uniform([0, 0], [cam.image_width, cam.image_height])
            token = protos[taxonomy.class_index(cls)] + rng.normal(0.0, noise.token_noise, config.token_dim)
            dets.append(PriorDetection(Box2D(center, size), token, _affinities(table, cls, rng, (0.1, 0.5))))
        per_crop = split_into_crops(dets, offsets, config.cameras.crop_width)
        priors.append(merge_crops(per_crop, offsets))
    return SyntheticScene(boxes, labels, lidar_points, cams, depth_maps, priors, seed, config)


# ----------------------------------------------------------- feature maps

def owl_feature_map(priors, cam: CameraModel, crop_offsets, crop_width: int, stride: int,
                    dim: int | None = None) -> BevFeatureMap:
    """Image-space token map: each prior paints its token into its source crop,
    crops are zero-padded to full width and averaged where they overlap.

    ``dim`` fixes the token width when a camera has no priors.
    """
    if dim is None:
        dim = len(priors[0].token) if priors else 1
    nu = int(math.ceil(cam.image_width / stride))
    nv = int(math.ceil(cam.image_height / stride))
    total = np.zeros((nu, nv, dim))
    cover = np.zeros((nu, nv))
    centers_u = (np.arange(nu) + 0.5) * stride
    centers_v = (np.arange(nv) + 0.5) * stride
    for k, off in enumerate(crop_offsets):
        width = min(crop_width, cam.image_width)
        in_crop = (centers_u >= off) & (centers_u < off + width)
        crop_map = np.zeros((nu, nv, dim))
        mine = [p for p in priors if p.source_crop == k]
        for p in sorted(mine, key=lambda p: -p.box2d.area):
            u0, v0, u1, v1 = p.box2d.corners
            mu = in_crop & (centers_u >= u0) & (centers_u < u1)
            mv = (centers_v >= v0) & (centers_v < v1)
            crop_map[np.ix_(mu, mv)] = p.token
        total += crop_map
        cover[in_crop] += 1
    return BevFeatureMap(total / np.maximum(cover, 1)[..., None], (0.0, 0.0), (float(stride), float(stride)))


# ---------------------------------------------------------------- file I/O

def save_priors(path, cameras: list) -> None:
    """Write per-camera ``(priors, DepthMap)`` pairs to the binary cache format."""
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<HI", FORMAT_VERSION, len(cameras)))
    for priors, depth in cameras:
        rec = _encode_camera(priors, depth)
        buf.write(struct.pack("<Q", len(rec)))
        buf.write(rec)
    Path(path).write_bytes(buf.getvalue())


def _encode_camera(priors, depth: DepthMap) -> bytes:
    h, w = depth.shape
    parts = [struct.pack("<II", h, w),
             np.ascontiguousarray(depth.depth, dtype="<f4").tobytes(),
             np.ascontiguousarray(depth.confidence, dtype="<f4").tobytes()]
    d_tok = len(priors[0].token) if priors else 0
    n_aff = len(priors[0].affinities) if priors else 0
    parts.append(struct.pack("<III", len(priors), d_tok, n_aff))
    for p in priors:
        if len(p.token) != d_tok or len(p.affinities) != n_aff:
            raise ValueError("all priors of a camera must share token and prompt widths")
        parts.append(struct.pack("<4di", *p.box2d.center, *p.box2d.size, p.source_crop))
        parts.append(np.asarray(p.token, dtype="<f8").tobytes())
        parts.append(np.asarray(p.affinities, dtype="<f8").tobytes())
    return b"".join(parts)


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptPayload(f"payload truncated at byte {self.pos} (needed {n})")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype: str, count: int) -> np.ndarray:
        itemsize = np.dtype(dtype).itemsize
        return np.frombuffer(self.take(itemsize * count), dtype=dtype).copy()


def load_priors(path) -> list:
    data = Path(path).read_bytes()
    r = _Reader(data)
    if len(data) < 4 or r.take(4) != MAGIC:
        raise FormatError("bad magic; not a prior cache file")
    try:
        version, n_cams = r.unpack("<HI")
    except CorruptPayload as exc:
        raise FormatError("truncated header") from exc
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported version {version}")
    out = []
    for _ in range(n_cams):
        (length,) = r.unpack("<Q")
        out.append(_decode_camera(_Reader(r.take(length)), length))
    if r.pos != len(data):
        raise CorruptPayload("trailing bytes after last record")
    return out


def _decode_camera(r: _Reader, length: int):
    h, w = r.unpack("<II")
    depth = r.array("<f4", h * w).reshape(h, w)
    conf = r.array("<f4", h * w).reshape(h, w)
    n, d_tok, n_aff = r.unpack("<III")
    priors = []
    for _ in range(n):
        u, v, bw, bh, crop = r.unpack("<4di")
        token = r.array("<f8", d_tok)
        aff = r.array("<f8", n_aff)
        priors.append(PriorDetection(Box2D((u, v), (bw, bh)), token, aff, crop))
    if r.pos != length:
        raise CorruptPayload("record length does not match its contents")
    return priors, DepthMap(depth, conf)
