"""Iterative camera-to-BEV construction.

The BEV is a vehicle-centred grid: cell ``(row, col)`` sits at vehicle
coordinates ``x = (col - c) * q_B`` (forward), ``y = (row - c) * q_B`` (left)
with ``c = (d_B - 1) / 2``.  Each refinement step gathers perspective-view
features along point pillars (cross-attention with logits predicted straight
from the BEV tokens) and then mixes the grid with spatial-reduction
self-attention.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, fields, replace
from typing import Mapping, Optional, Sequence

import numpy as np

from .formats import read_params, storable, write_params
from .geometry import CameraRig, project_points
from .grid import FeatureMap, circular_mask, sample_array
from .nn import conv2d, depthwise_conv3x3, layer_norm, mlp, segment_softmax, softplus, uniform


@dataclass(frozen=True)
class BevConfig:
    d_B: int = 32
    q_B: float = 0.5
    c_B: int = 16
    n_blocks: int = 2
    n_heads: int = 2
    z: int = 8
    h_min: float = -1.0
    h_max: float = 3.0
    s_G: int = 4
    s_R: int = 4
    mlp_ratio: int = 2
    offset_gain: float = 1.0
    use_offsets: bool = True
    offset_skip: bool = True
    logit_skip: bool = True
    use_mlp: bool = True
    use_self_attention: bool = True

    def __post_init__(self):
        for name in ("d_B", "c_B", "n_heads", "z", "s_G", "s_R", "mlp_ratio"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be at least 1")
        if self.n_blocks < 0:
            raise ValueError("n_blocks must not be negative")
        if self.z < 2:
            raise ValueError("pillars need at least two points")
        if self.c_B % self.n_heads:
            raise ValueError("c_B must be divisible by n_heads")
        if not (self.q_B > 0 and self.h_max > self.h_min):
            raise ValueError("q_B must be positive and h_max above h_min")

    @classmethod
    def reference(cls, **overrides) -> "BevConfig":
        """Full-size settings of the reference model."""
        base = dict(d_B=320, q_B=2.4, c_B=128, n_blocks=3, n_heads=4, z=16,
                    h_min=-5.0, h_max=10.0, s_G=4, s_R=4)
        return cls(**{**base, **overrides})

    @classmethod
    def from_mapping(cls, values: Mapping[str, str]) -> "BevConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for key, raw in values.items():
            if key not in types:
                continue
            t = types[key]
            if t == "bool":
                kw[key] = str(raw).strip().lower() in ("1", "true", "yes", "on")
            else:
                kw[key] = int(raw) if t == "int" else float(raw)
        return cls(**kw)

    @property
    def centre(self) -> float:
        return (self.d_B - 1) / 2.0


@dataclass(frozen=True, eq=False)
class BevState:
    """Grid, validity mask and the skip-connected offset / logit accumulators.

    ``offsets`` is ``(d_B, d_B, z, 2)`` in PV pixels; ``logits`` is
    ``(d_B, d_B, n_slots, n_heads)`` with one slot per (camera, pillar point).
    ``attention`` holds the weights of the last cross-attention (one row
    per gathered value).
    """

    grid: FeatureMap
    mask: np.ndarray
    offsets: np.ndarray
    logits: Optional[np.ndarray] = None
    attention: Optional[np.ndarray] = None


@dataclass(frozen=True, eq=False)
class ValueList:
    features: np.ndarray
    query_index: np.ndarray
    pillar_index: np.ndarray
    camera_index: np.ndarray
    offsets: np.ndarray = field(repr=False)

    def __len__(self) -> int:
        return len(self.features)

    def counts(self, n_queries: int) -> np.ndarray:
        return np.bincount(self.query_index, minlength=n_queries)


class BevParams(dict):
    """Named block weights; keys look like ``block0.cross.logit.w``."""

    def __init__(self, arrays=None, seed: int = 0):
        super().__init__({k: storable(v) for k, v in (arrays or {}).items()})
        self.seed = int(seed)

    @classmethod
    def seeded(cls, config: BevConfig, n_cameras: int, c_v: int, seed: int) -> "BevParams":
        rng = np.random.default_rng(seed)
        c, h, z = config.c_B, config.n_heads, config.z
        hidden = config.mlp_ratio * c
        p = {}
        for k in range(config.n_blocks):
            pre = f"block{k}.cross."
            p[pre + "logit.w"] = uniform(rng, (c, n_cameras * z * h), c)
            p[pre + "logit.b"] = np.zeros(n_cameras * z * h)
            p[pre + "offset.w"] = uniform(rng, (c, z * 2), c, config.offset_gain)
            p[pre + "offset.b"] = np.zeros(z * 2)
            p[pre + "value.w"] = uniform(rng, (c_v, c), c_v)
            p[pre + "out.w"] = uniform(rng, (c, c), c)
            p[pre + "out.b"] = np.zeros(c)
            p[pre + "mlp.w1"] = uniform(rng, (c, hidden), c)
            p[pre + "mlp.b1"] = np.zeros(hidden)
            p[pre + "mlp.w2"] = uniform(rng, (hidden, c), hidden)
            p[pre + "mlp.b2"] = np.zeros(c)
            pre = f"block{k}.self."
            for name in ("q", "k", "v", "out"):
                p[pre + f"{name}.w"] = uniform(rng, (c, c), c)
            p[pre + "out.b"] = np.zeros(c)
            s = min(config.s_R, config.d_B)
            p[pre + "sr.w"] = uniform(rng, (s, s, c, c), s * s * c)
            p[pre + "sr.b"] = np.zeros(c)
            p[pre + "mlp.w1"] = uniform(rng, (c, hidden), c)
            p[pre + "mlp.b1"] = np.zeros(hidden)
            p[pre + "mlp.dw"] = uniform(rng, (3, 3, hidden), 9)
            p[pre + "mlp.dwb"] = np.zeros(hidden)
            p[pre + "mlp.w2"] = uniform(rng, (hidden, c), hidden)
            p[pre + "mlp.b2"] = np.zeros(c)
        return cls(p, seed)

    def block(self, k: int, kind: str) -> dict[str, np.ndarray]:
        pre = f"block{k}.{kind}."
        out = {key[len(pre):]: v for key, v in self.items() if key.startswith(pre)}
        if not out:
            raise KeyError(f"no parameters for block {k} ({kind})")
        return out

    def save(self, path) -> None:
        write_params(path, self, self.seed)

    @classmethod
    def load(cls, path) -> "BevParams":
        arrays, seed = read_params(path)
        return cls(arrays, seed)


def bev_mask(config: BevConfig) -> np.ndarray:
    return circular_mask(config.d_B, config.q_B)


def init_bev(config: BevConfig, seed: int) -> BevState:
    """Seeded initial grid; accumulators start at zero."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 0xBE5]))
    table = rng.normal(0.0, 1.0, size=(config.d_B, config.d_B, config.c_B))
    offsets = np.zeros((config.d_B, config.d_B, config.z, 2))
    return BevState(FeatureMap(table, config.q_B), bev_mask(config), offsets)


def cell_centres(config: BevConfig) -> tuple[np.ndarray, np.ndarray]:
    """Vehicle-frame ``(x, y)`` of every BEV cell, indexed ``[row, col]``."""
    k = (np.arange(config.d_B) - config.centre) * config.q_B
    return np.meshgrid(k, k)


def pillars(config: BevConfig, rows: np.ndarray, cols: np.ndarray) -> np.ndarray:
    """``(n, z, 3)`` pillar points for the given cells."""
    xs = (cols - config.centre) * config.q_B
    ys = (rows - config.centre) * config.q_B
    heights = np.linspace(config.h_min, config.h_max, config.z)
    pts = np.empty((len(rows), config.z, 3))
    pts[:, :, 0] = xs[:, None]
    pts[:, :, 1] = ys[:, None]
    pts[:, :, 2] = heights[None, :]
    return pts


def _tokens(state: BevState) -> np.ndarray:
    return layer_norm(state.grid.data.astype(np.float64).reshape(-1, state.grid.channels))


def predict_offsets(state: BevState, config: BevConfig, block: Mapping[str, np.ndarray]) -> np.ndarray:
    """This block's offset prediction, ``(d_B, d_B, z, 2)`` in PV pixels."""
    pred = _tokens(state) @ block["offset.w"] + block["offset.b"]
    return pred.reshape(config.d_B, config.d_B, config.z, 2)


def predict_logits(state: BevState, config: BevConfig, block: Mapping[str, np.ndarray]) -> np.ndarray:
    pred = _tokens(state) @ block["logit.w"] + block["logit.b"]
    return pred.reshape(config.d_B, config.d_B, -1, config.n_heads)


def gather_values(
    state: BevState,
    rig: CameraRig,
    pv_maps: Sequence[FeatureMap],
    config: BevConfig,
    block: Mapping[str, np.ndarray],
) -> ValueList:
    """Sample PV features along every valid cell's pillar in every camera.

    ``pv_maps[i]`` belongs to ``rig.cameras[i]``.  Entries are ordered by
    camera id, then pillar point, then cell.
    """
    if len(pv_maps) != len(rig):
        raise ValueError(f"{len(pv_maps)} feature maps for {len(rig)} cameras")
    c_v = {m.channels for m in pv_maps}
    if len(c_v) != 1:
        raise ValueError("all PV feature maps must have the same channel count")
    for cam, fmap in zip(rig, pv_maps):
        expect = (-(-cam.height // config.s_G), -(-cam.width // config.s_G))
        if (fmap.height, fmap.width) != expect:
            raise ValueError(f"feature map for camera {cam.id} is not at stride {config.s_G}")

    if config.use_offsets:
        pred = predict_offsets(state, config, block)
        offsets = state.offsets + pred if config.offset_skip else pred
    else:
        offsets = np.zeros_like(state.offsets)

    rows, cols = np.nonzero(state.mask)
    cells = rows * config.d_B + cols
    pts = pillars(config, rows, cols).reshape(-1, 3)
    cell_offsets = offsets[rows, cols]  # (n, z, 2)

    feats, qi, pj, ci = [], [], [], []
    for rank, pos in enumerate(rig.slot_order()):
        cam, fmap = rig.cameras[pos], pv_maps[pos]
        uv, inside = project_points(pts, cam)
        uv = uv.reshape(len(rows), config.z, 2)
        inside = inside.reshape(len(rows), config.z)
        j_idx, n_idx = np.nonzero(inside.T)  # pillar-major, then cell
        p = (uv[n_idx, j_idx] + cell_offsets[n_idx, j_idx]) / config.s_G
        feats.append(sample_array(fmap.data, p[:, 0], p[:, 1]))
        qi.append(cells[n_idx])
        pj.append(j_idx)
        ci.append(np.full(len(j_idx), rank))
    c = next(iter(c_v))
    return ValueList(
        np.concatenate(feats) if feats else np.zeros((0, c)),
        np.concatenate(qi).astype(np.intp),
        np.concatenate(pj).astype(np.intp),
        np.concatenate(ci).astype(np.intp),
        offsets,
    )


def cross_attention_block(
    state: BevState,
    values: ValueList,
    config: BevConfig,
    block: Mapping[str, np.ndarray],
) -> BevState:
    d, c, h = config.d_B, config.c_B, config.n_heads
    n_q = d * d
    pred = predict_logits(state, config, block)
    if config.logit_skip and state.logits is not None:
        acc = state.logits + pred
    else:
        acc = pred
    flat = acc.reshape(n_q, -1, h)
    slot = values.camera_index * config.z + values.pillar_index
    if len(values) and slot.max() >= flat.shape[1]:
        raise ValueError("value slots exceed the logit map width")
    weights = segment_softmax(flat[values.query_index, slot], values.query_index, n_q)

    v = (values.features @ block["value.w"]).reshape(len(values), h, c // h)
    agg = np.zeros((n_q, h, c // h))
    np.add.at(agg, values.query_index, weights[:, :, None] * v)
    has = values.counts(n_q) > 0
    out = np.zeros((n_q, c))
    out[has] = agg[has].reshape(-1, c) @ block["out.w"] + block["out.b"]

    B = state.grid.data.astype(np.float64).reshape(n_q, c) + out
    if config.use_mlp:
        B = B + mlp(layer_norm(B), block["mlp.w1"], block["mlp.b1"], block["mlp.w2"], block["mlp.b2"])
    grid = FeatureMap(B.reshape(d, d, c), config.q_B)
    return replace(state, grid=grid, offsets=values.offsets, logits=acc, attention=weights)


def value_tokens(x: np.ndarray, config: BevConfig, block: Mapping[str, np.ndarray]) -> np.ndarray:
    """Strided convolutional reduction to ``ceil(d_B / s_R)^2`` tokens."""
    s = min(config.s_R, config.d_B)
    r = conv2d(x, block["sr.w"], block["sr.b"], stride=s, pad=0)
    return layer_norm(r.reshape(-1, x.shape[2]))


def self_attention_block(
    state: BevState,
    config: BevConfig,
    block: Mapping[str, np.ndarray],
    weights_out: Optional[list] = None,
) -> BevState:
    d, c, h = config.d_B, config.c_B, config.n_heads
    ch = c // h
    B = state.grid.data.astype(np.float64)
    x = layer_norm(B)
    q = (x.reshape(-1, c) @ block["q.w"]).reshape(-1, h, ch)
    tok = value_tokens(x, config, block)
    k = (tok @ block["k.w"]).reshape(-1, h, ch)
    v = (tok @ block["v.w"]).reshape(-1, h, ch)
    logits = np.einsum("qhc,thc->qht", q, k) / math.sqrt(ch)
    logits -= logits.max(axis=2, keepdims=True)
    a = np.exp(logits)
    a /= a.sum(axis=2, keepdims=True)
    if weights_out is not None:
        weights_out.append(a)
    att = np.einsum("qht,thc->qhc", a, v).reshape(-1, c) @ block["out.w"] + block["out.b"]
    B = B + att.reshape(d, d, c)
    if config.use_mlp:
        hid = layer_norm(B) @ block["mlp.w1"] + block["mlp.b1"]
        hid = softplus(depthwise_conv3x3(hid, block["mlp.dw"], block["mlp.dwb"]))
        B = B + hid @ block["mlp.w2"] + block["mlp.b2"]
    B = B * state.mask[:, :, None]
    return replace(state, grid=FeatureMap(B, config.q_B))


def apply_mask(state: BevState) -> BevState:
    return replace(state, grid=state.grid.with_data(state.grid.data * state.mask[:, :, None]))


def build_bev(
    config: BevConfig,
    rig: CameraRig,
    pv_maps: Sequence[FeatureMap],
    params: BevParams,
    seed: int,
    trace: Optional[list] = None,
) -> FeatureMap:
    """``n_blocks`` rounds of gather, cross-attention and self-attention.

    If ``trace`` is a list, the state after every sub-block is appended.
    """
    state = init_bev(config, seed)
    for k in range(config.n_blocks):
        cross = params.block(k, "cross")
        values = gather_values(state, rig, pv_maps, config, cross)
        state = cross_attention_block(state, values, config, cross)
        if trace is not None:
            trace.append(state)
        if config.use_self_attention:
            state = self_attention_block(state, config, params.block(k, "self"))
        else:
            state = apply_mask(state)
        if trace is not None:
            trace.append(state)
    return apply_mask(state).grid
