"""Pyramid-fusion encoders over a seeded toy convolutional backbone.

Ground images share one parameter set across the rig and are encoded at
stride 4; the aerial image has its own parameters and is encoded at stride 1
with a full-resolution residual bypass added to the pyramid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .formats import read_params, storable, write_params
from .grid import FeatureMap, resize_array
from .nn import conv2d, mlp, softplus, uniform

STAGE_CHANNELS = (16, 32, 64, 128)
STRIDES = (4, 8, 16, 32)
MIN_INPUT = 32


@dataclass(frozen=True, eq=False)
class BackbonePyramid:
    """Feature levels and their strides relative to the input image.

    The backbone always emits the four standard strides; hand-built pyramids
    (tests, external backbones) may declare their own.
    """

    levels: tuple[FeatureMap, ...]
    input_shape: tuple[int, int]
    base_resolution: float
    strides: tuple[int, ...] = STRIDES

    def __post_init__(self):
        if not self.levels or len(self.levels) != len(self.strides):
            raise ValueError(f"{len(self.levels)} levels for strides {self.strides}")
        h, w = self.input_shape
        for lvl, s in zip(self.levels, self.strides):
            if (lvl.height, lvl.width) != (-(-h // s), -(-w // s)):
                raise ValueError(f"level at stride {s} has dims {lvl.height}x{lvl.width}")


class EncoderParams(dict):
    """Named weight arrays plus the seed they were drawn from.

    Missing fusion or projection entries mean identity maps.
    """

    def __init__(self, arrays=None, seed: int = 0):
        super().__init__({k: storable(v) for k, v in (arrays or {}).items()})
        self.seed = int(seed)
        for k, v in self.items():
            if not np.isfinite(v).all():
                raise ValueError(f"parameter {k} is not finite")

    @classmethod
    def seeded(cls, channels: int, out_channels: int, seed: int, bypass: bool = False) -> "EncoderParams":
        rng = np.random.default_rng(seed)
        p = {}
        c_in = 3
        p["stem.w"] = uniform(rng, (3, 3, c_in, STAGE_CHANNELS[0]), 9 * c_in)
        p["stem.b"] = np.zeros(STAGE_CHANNELS[0])
        c_in = STAGE_CHANNELS[0]
        for i, c_out in enumerate(STAGE_CHANNELS):
            p[f"stage{i}.w"] = uniform(rng, (3, 3, c_in, c_out), 9 * c_in)
            p[f"stage{i}.b"] = np.zeros(c_out)
            c_in = c_out
        top = STAGE_CHANNELS[-1]
        p["context.w1"] = uniform(rng, (top, channels), top)
        p["context.b1"] = np.zeros(channels)
        p["context.w2"] = uniform(rng, (channels, channels), channels)
        p["context.b2"] = np.zeros(channels)
        widths = list(STAGE_CHANNELS[:-1]) + [top + channels]
        for i, c_l in enumerate(widths):
            p[f"proj{i}"] = uniform(rng, (c_l, channels), c_l)
        p["fuse.w1"] = uniform(rng, (channels, 2 * channels), channels)
        p["fuse.b1"] = np.zeros(2 * channels)
        p["fuse.w2"] = uniform(rng, (2 * channels, out_channels), 2 * channels)
        p["fuse.b2"] = np.zeros(out_channels)
        if bypass:
            p["bypass.proj"] = uniform(rng, (3, channels), 3)
            for r in range(2):
                p[f"bypass.res{r}.w1"] = uniform(rng, (3, 3, channels, channels), 9 * channels, 0.5)
                p[f"bypass.res{r}.w2"] = uniform(rng, (3, 3, channels, channels), 9 * channels, 0.5)
        return cls(p, seed)

    @property
    def channels(self) -> int:
        return self["context.w1"].shape[1]

    def save(self, path) -> None:
        write_params(path, self, self.seed)

    @classmethod
    def load(cls, path) -> "EncoderParams":
        arrays, seed = read_params(path)
        return cls(arrays, seed)


def toy_backbone(image: FeatureMap, params: EncoderParams) -> BackbonePyramid:
    """Stride-2 stem, then four stride-2 3x3 stages: levels at strides 4..32."""
    if image.channels != 3:
        raise ValueError(f"backbone expects 3 input channels, got {image.channels}")
    if image.height < MIN_INPUT or image.width < MIN_INPUT:
        raise ValueError(f"backbone input must be at least {MIN_INPUT}x{MIN_INPUT}, got {image.height}x{image.width}")
    x = softplus(conv2d(image.data.astype(np.float64), params["stem.w"], params["stem.b"], stride=2))
    levels = []
    for i, s in enumerate(STRIDES):
        x = softplus(conv2d(x, params[f"stage{i}.w"], params[f"stage{i}.b"], stride=2))
        levels.append(FeatureMap(x, image.resolution * s))
    return BackbonePyramid(tuple(levels), (image.height, image.width), image.resolution)


def context_pool(last_level: FeatureMap, params: EncoderParams) -> FeatureMap:
    """Append the MLP-processed global mean to every pixel."""
    pooled = last_level.data.astype(np.float64).mean(axis=(0, 1))
    ctx = mlp(pooled, params["context.w1"], params["context.b1"], params["context.w2"], params["context.b2"])
    tiled = np.broadcast_to(ctx, last_level.shape[:2] + ctx.shape)
    return FeatureMap(np.concatenate([last_level.data, tiled], axis=2), last_level.resolution)


def fuse_pyramid(
    pyramid: BackbonePyramid,
    extra_levels: Sequence[FeatureMap],
    out_stride: int,
    params: Optional[EncoderParams],
) -> FeatureMap:
    """Project every level to ``c`` channels, resize to ``out_stride``, sum, apply the MLP.

    ``params=None`` (or missing ``proj*`` / ``fuse.*`` entries) uses identity maps.
    """
    if out_stride not in (1, 4):
        raise ValueError("out_stride must be 1 or 4")
    p = params or {}
    h, w = pyramid.input_shape
    th, tw = -(-h // out_stride), -(-w // out_stride)
    for lvl in extra_levels:
        if (lvl.height, lvl.width) != (th, tw):
            raise ValueError(f"extra level {lvl.height}x{lvl.width} is not at stride {out_stride}")
    total = None
    for i, lvl in enumerate(pyramid.levels):
        x = lvl.data.astype(np.float64)
        if f"proj{i}" in p:
            x = x @ p[f"proj{i}"]
        # Fixed summation order keeps the result bit-reproducible.
        x = resize_array(x, th, tw) if x.shape[:2] != (th, tw) else x
        total = x if total is None else total + x
    for lvl in extra_levels:
        total = total + lvl.data.astype(np.float64)
    out = mlp(total, p.get("fuse.w1"), p.get("fuse.b1"), p.get("fuse.w2"), p.get("fuse.b2"))
    return FeatureMap(out, pyramid.base_resolution * out_stride)


def stem_bypass(image: FeatureMap, params: EncoderParams) -> FeatureMap:
    """Stride-1 input projection followed by two residual blocks."""
    x = image.data.astype(np.float64) @ params["bypass.proj"]
    for r in range(2):
        h = softplus(conv2d(x, params[f"bypass.res{r}.w1"]))
        x = x + conv2d(h, params[f"bypass.res{r}.w2"])
    return FeatureMap(x, image.resolution)


def _encode(image: FeatureMap, params: EncoderParams, out_stride: int, bypass: bool) -> FeatureMap:
    pyr = toy_backbone(image, params)
    levels = pyr.levels[:3] + (context_pool(pyr.levels[3], params),)
    pyr = BackbonePyramid(levels, pyr.input_shape, pyr.base_resolution, pyr.strides)
    extra = [stem_bypass(image, params)] if bypass else []
    return fuse_pyramid(pyr, extra, out_stride, params)


def encode_ground(images: Sequence[FeatureMap], params: EncoderParams) -> list[FeatureMap]:
    """Every camera goes through the same parameter set at stride 4."""
    return [_encode(img, params, 4, False) for img in images]


def encode_aerial(image: FeatureMap, params: EncoderParams, use_bypass: bool = True) -> FeatureMap:
    if use_bypass and "bypass.proj" not in params:
        raise ValueError("aerial parameters have no stem-bypass weights")
    return _encode(image, params, 1, use_bypass)
