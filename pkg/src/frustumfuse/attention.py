"""Positional encoding, multi-head attention, transformer layers and frustum sampling.

All learned parameters are seeded constants. Two initializations exist:
``"random"`` (scaled uniform, +-sqrt(6 / (fan_in + fan_out))) and
``"passthrough"`` (zero query/key projections, identity-like value path,
zero FFN) which leaves geometry untouched so end-to-end checks can run
without trained semantics.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .geometry import Box2D, CameraModel, NonPositiveDepth, unproject_many

LN_EPS = 1e-5


class DimensionMismatch(ValueError):
    pass


def scaled_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out)) if fan_in + fan_out > 0 else 0.0
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


def rect_eye(rows: int, cols: int) -> np.ndarray:
    return np.eye(rows, cols)


def layer_norm(x: np.ndarray, gamma=None, beta=None, eps: float = LN_EPS) -> np.ndarray:
    mu = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    out = (x - mu) / np.sqrt(var + eps)
    if gamma is not None:
        out = out * gamma
    if beta is not None:
        out = out + beta
    return out


def softmax(x: np.ndarray, axis: int = -1) -> np.ndarray:
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def relu(x):
    return np.maximum(x, 0.0)


@dataclass
class MLP:
    """Bias-free ``Linear -> LN -> ReLU -> ... -> Linear`` stack."""

    weights: list
    norm: bool = True
    act: bool = True

    @classmethod
    def build(cls, dims, rng, zero_last=False, norm=True) -> "MLP":
        weights = [scaled_uniform(rng, a, b) for a, b in zip(dims[:-1], dims[1:])]
        if zero_last:
            weights[-1] = np.zeros_like(weights[-1])
        return cls(weights, norm)

    def __call__(self, x: np.ndarray) -> np.ndarray:
        for i, w in enumerate(self.weights):
            if x.shape[-1] != w.shape[0]:
                raise DimensionMismatch(f"MLP layer {i} expects {w.shape[0]}, got {x.shape[-1]}")
            x = x @ w
            if i < len(self.weights) - 1:
                if self.norm:
                    x = layer_norm(x)
                if self.act:
                    x = relu(x)
        return x

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[1]


# ------------------------------------------------------- positional encoding

@dataclass
class PositionalEncoder:
    """Sinusoidal encoding per coordinate, optionally followed by a 3-layer MLP.

    ``dim_per_coord`` sin/cos channels are produced for each input coordinate,
    interleaved as ``(sin f0 x, cos f0 x, sin f1 x, ...)`` with frequencies
    ``base ** (-2 i / dim_per_coord)``.
    """

    n_coords: int
    dim_per_coord: int
    base: float = 10000.0
    mlp: MLP | None = None

    def __post_init__(self):
        if self.dim_per_coord % 2:
            raise ValueError("dim_per_coord must be even")

    @classmethod
    def build(cls, n_coords, out_dim, rng=None, dim_per_coord=None, base=10000.0,
              init="random") -> "PositionalEncoder":
        if dim_per_coord is None:
            dim_per_coord = max(2, 2 * math.ceil(out_dim / n_coords / 2))
        raw = n_coords * dim_per_coord
        if init == "identity":
            mlp = MLP([rect_eye(raw, raw), rect_eye(raw, raw), rect_eye(raw, out_dim)], norm=False, act=False)
        else:
            rng = rng if rng is not None else np.random.default_rng(0)
            mlp = MLP.build([raw, out_dim, out_dim, out_dim], rng, norm=False)
        return cls(n_coords, dim_per_coord, base, mlp)

    @property
    def frequencies(self) -> np.ndarray:
        i = np.arange(self.dim_per_coord // 2)
        return self.base ** (-2.0 * i / self.dim_per_coord)

    @property
    def out_dim(self) -> int:
        return self.mlp.out_dim if self.mlp is not None else self.n_coords * self.dim_per_coord

    def raw(self, coords) -> np.ndarray:
        coords = np.asarray(coords, dtype=np.float64)
        if coords.shape[-1] != self.n_coords:
            raise DimensionMismatch(f"expected {self.n_coords} coordinates, got {coords.shape[-1]}")
        angles = coords[..., :, None] * self.frequencies
        enc = np.empty(coords.shape + (self.dim_per_coord,))
        enc[..., 0::2] = np.sin(angles)
        enc[..., 1::2] = np.cos(angles)
        return enc.reshape(coords.shape[:-1] + (self.n_coords * self.dim_per_coord,))

    def __call__(self, coords) -> np.ndarray:
        enc = self.raw(coords)
        return self.mlp(enc) if self.mlp is not None else enc


# ---------------------------------------------------------------- attention

@dataclass
class AttentionWeights:
    """Projections for ``softmax(QPq (KPk)^T / sqrt(d_k)) V Pv`` followed by ``Po``.

    Shapes: ``P_q (d, l)``, ``P_k (r, l)``, ``P_v (s, d)``, ``P_o (d, d)``.
    """

    P_q: np.ndarray
    P_k: np.ndarray
    P_v: np.ndarray
    P_o: np.ndarray
    heads: int

    def __post_init__(self):
        d, l = self.P_q.shape
        if self.P_k.shape[1] != l:
            raise DimensionMismatch("P_q and P_k latent widths differ")
        if self.P_v.shape[1] != d or self.P_o.shape != (d, d):
            raise DimensionMismatch("value/output projections must map to the query width")
        if l % self.heads or d % self.heads:
            raise DimensionMismatch(f"{self.heads} heads do not divide widths l={l}, d={d}")

    @property
    def query_dim(self):
        return self.P_q.shape[0]

    @property
    def key_dim(self):
        return self.P_k.shape[0]

    @property
    def value_dim(self):
        return self.P_v.shape[0]

    @property
    def head_dim(self):
        return self.P_q.shape[1] // self.heads

    @classmethod
    def build(cls, d, r=None, s=None, latent=None, heads=8, rng=None,
              init="random") -> "AttentionWeights":
        r = d if r is None else r
        s = d if s is None else s
        latent = d if latent is None else latent
        if init == "passthrough":
            return cls(np.zeros((d, latent)), np.zeros((r, latent)), rect_eye(s, d), np.eye(d), heads)
        rng = rng if rng is not None else np.random.default_rng(0)
        return cls(scaled_uniform(rng, d, latent), scaled_uniform(rng, r, latent),
                   scaled_uniform(rng, s, d), scaled_uniform(rng, d, d), heads)


def _as_tokens(x, width, what):
    x = np.asarray(x, dtype=np.float64)
    if x.size == 0:
        return np.zeros((0, width))
    x = np.atleast_2d(x)
    if x.ndim != 2 or x.shape[1] != width:
        raise DimensionMismatch(f"{what} width {x.shape[-1]} != {width}")
    return x


def attention_heads(queries, keys, values, w: AttentionWeights):
    """Per-head attention outputs (before the output projection) and weights.

    Returns ``(heads_out (N, m, d/m), attn (m, N, M))``.
    """
    Q = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    K = _as_tokens(keys, w.key_dim, "key")
    V = _as_tokens(values, w.value_dim, "value")
    if Q.shape[1] != w.query_dim:
        raise DimensionMismatch(f"query width {Q.shape[1]} != {w.query_dim}")
    if K.shape[0] != V.shape[0]:
        raise DimensionMismatch("keys and values must have equal counts")
    n, m = Q.shape[0], w.heads
    d = w.P_v.shape[1]
    if K.shape[0] == 0:
        return np.zeros((n, m, d // m)), np.zeros((m, n, 0))
    q = (Q @ w.P_q).reshape(n, m, -1).transpose(1, 0, 2)
    k = (K @ w.P_k).reshape(len(K), m, -1).transpose(1, 0, 2)
    v = (V @ w.P_v).reshape(len(V), m, -1).transpose(1, 0, 2)
    attn = softmax(q @ k.transpose(0, 2, 1) / math.sqrt(w.head_dim), axis=-1)
    out = (attn @ v).transpose(1, 0, 2)
    return out, attn


def mha(queries, keys, values, w: AttentionWeights) -> np.ndarray:
    """Multi-head attention; an empty key set contributes a zero update."""
    heads, _ = attention_heads(queries, keys, values, w)
    n = heads.shape[0]
    return heads.reshape(n, -1) @ w.P_o


@dataclass
class TransformerLayer:
    """``A = LN(Q + MHA(Q, K, V)); Q <- LN(A + FFN(A))`` with bias-free ReLU FFN."""

    attn: AttentionWeights
    ffn_in: np.ndarray
    ffn_out: np.ndarray
    # dropout is recorded for reference only; evaluation is deterministic
    dropout: float = 0.1

    @classmethod
    def build(cls, d, ffn_dim, r=None, s=None, heads=8, rng=None, init="random"):
        rng = rng if rng is not None else np.random.default_rng(0)
        attn = AttentionWeights.build(d, r, s, heads=heads, rng=rng, init=init)
        if init == "passthrough":
            return cls(attn, np.zeros((d, ffn_dim)), np.zeros((ffn_dim, d)))
        return cls(attn, scaled_uniform(rng, d, ffn_dim), scaled_uniform(rng, ffn_dim, d))

    def ffn(self, x):
        return relu(x @ self.ffn_in) @ self.ffn_out

    def update(self, queries, attended) -> np.ndarray:
        """Residual/LN/FFN update given an already computed attention output."""
        a = layer_norm(queries + attended)
        return layer_norm(a + self.ffn(a))

    def __call__(self, queries, keys, values) -> np.ndarray:
        queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
        return self.update(queries, mha(queries, keys, values, self.attn))


def transformer_layer(queries, keys, values, layer: TransformerLayer) -> np.ndarray:
    return layer(queries, keys, values)


# ------------------------------------------------------------ frustum grid

@dataclass
class SamplingGrid:
    points: np.ndarray        # (K, 3) world samples
    uvd: np.ndarray           # (K, 3) pixel/depth of each sample
    offsets_xyz: np.ndarray   # query position minus sample position
    offsets_uvd: np.ndarray   # query (u, v, d) minus sample (u, v, d)
    dropped: int = 0

    def __len__(self):
        return len(self.points)


def _axis_steps(n: int) -> np.ndarray:
    """Fractions ``p / (2 n)`` for ``p = -n..n``; a zero count gives only the center."""
    if n == 0:
        return np.zeros(1)
    return np.arange(-n, n + 1) / (2.0 * n)


def frustum_grid(box: Box2D, depth: float, cam: CameraModel, n=(1, 1, 20), delta: float = 10.0,
                 query_position=None) -> SamplingGrid:
    """Mesh of unprojected samples spanning the 2D box and a depth window around ``depth``."""
    if not depth > 0:
        raise NonPositiveDepth("frustum depth must be positive")
    nx, ny, nz = (int(v) for v in n)
    if min(nx, ny, nz) < 0:
        raise ValueError("grid counts must be non-negative")
    u, v = box.center
    w, h = box.size
    fu, fv, fd = np.meshgrid(_axis_steps(nx), _axis_steps(ny), _axis_steps(nz), indexing="ij")
    uvd = np.column_stack([u + fu.ravel() * w, v + fv.ravel() * h, depth + fd.ravel() * delta])
    valid = uvd[:, 2] > 0
    dropped = int((~valid).sum())
    uvd = uvd[valid]
    points = unproject_many(cam, uvd) if len(uvd) else np.zeros((0, 3))
    q = unproject_many(cam, np.array([[u, v, depth]]))[0] if query_position is None \
        else np.asarray(query_position, dtype=np.float64)
    return SamplingGrid(points, uvd, q - points, np.array([u, v, depth]) - uvd, dropped)


# ------------------------------------------------------- deformable sampling

def deformable_sample(queries, bases, feature_map, offset_weights, layer_attn: AttentionWeights,
                      n_points: int | None = None):
    """Decode per-query 2D offsets, sample ``feature_map`` there and attend.

    ``queries`` (N, d), ``bases`` (N, 2); ``offset_weights`` (d, 2K).
    Returns the attention output (N, d) and the sampled locations (N, K, 2).
    """
    from .bev import bilinear_sample_many

    queries = np.atleast_2d(np.asarray(queries, dtype=np.float64))
    bases = np.asarray(bases, dtype=np.float64).reshape(-1, 2)
    if offset_weights.shape[0] != queries.shape[1] or offset_weights.shape[1] % 2:
        raise DimensionMismatch("offset head must map query width to 2 x samples")
    k = offset_weights.shape[1] // 2 if n_points is None else n_points
    if offset_weights.shape[1] != 2 * k:
        raise DimensionMismatch("offset head width must equal 2 x sample count")
    offsets = (queries @ offset_weights).reshape(len(queries), k, 2)
    locs = bases[:, None, :] + offsets
    feats = bilinear_sample_many(feature_map, locs.reshape(-1, 2)).reshape(len(queries), k, -1)
    out = np.vstack([mha(queries[i:i + 1], feats[i], feats[i], layer_attn) for i in range(len(queries))]) \
        if len(queries) else np.zeros((0, layer_attn.query_dim))
    return out, locs
