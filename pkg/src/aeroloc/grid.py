"""Dense feature grids and the sampling / correlation primitives built on them.

Pixel coordinates are ``(x, y) = (col, row)``.  Metric coordinates of a map
are centred on the map: pixel ``(col, row)`` sits at
``((col - (W - 1) / 2) * res, (row - (H - 1) / 2) * res)`` meters, so the
metric x axis runs along columns and y along rows.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional

import numpy as np
import scipy.fft

if TYPE_CHECKING:
    from .geometry import SE2Pose


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """An ``H x W x C`` float32 grid with a metric pixel size."""

    data: np.ndarray
    resolution: float

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"feature map must be H x W x C with positive dims, got {data.shape}")
        if not (np.isfinite(self.resolution) and self.resolution > 0):
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        data = np.ascontiguousarray(data, dtype=np.float32)
        if not np.isfinite(data).all():
            raise ValueError("feature map contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def channels(self) -> int:
        return self.data.shape[2]

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape

    def center(self) -> tuple[float, float]:
        """Pixel coordinates ``(x, y)`` of the metric origin."""
        return (self.width - 1) / 2.0, (self.height - 1) / 2.0

    def with_data(self, data: np.ndarray) -> "FeatureMap":
        return FeatureMap(data, self.resolution)


@dataclass(frozen=True, eq=False)
class CorrelationMap:
    """Correlation planes, one per rotation angle.

    ``values[p, row, col]``; ``center`` is the ``(row, col)`` index at which
    the template centre sits on the reference centre (zero translation).
    """

    values: np.ndarray
    center: tuple[int, int]

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        if values.ndim == 2:
            values = values[None]
        if not np.isfinite(values).all():
            raise ValueError("correlation map contains non-finite values")
        object.__setattr__(self, "values", values)

    @property
    def height(self) -> int:
        return self.values.shape[1]

    @property
    def width(self) -> int:
        return self.values.shape[2]


def sample_array(data: np.ndarray, x, y) -> np.ndarray:
    """Bilinear lookup of ``data`` (H x W x C) at arrays of pixel coords.

    Reads outside the grid are zero.  Returns ``x.shape + (C,)`` in float64.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = data.shape[:2]
    padded = np.zeros((h + 2, w + 2, data.shape[2]), dtype=np.float64)
    padded[1:-1, 1:-1] = data
    x0f = np.floor(x)
    y0f = np.floor(y)
    wx = x - x0f
    wy = y - y0f
    # Anything further out than one cell lands on the zero border.
    x0 = np.clip(x0f, -1, w).astype(np.intp) + 1
    y0 = np.clip(y0f, -1, h).astype(np.intp) + 1
    x1 = np.clip(x0f + 1, -1, w).astype(np.intp) + 1
    y1 = np.clip(y0f + 1, -1, h).astype(np.intp) + 1
    wx = wx[..., None]
    wy = wy[..., None]
    top = padded[y0, x0] * (1.0 - wx) + padded[y0, x1] * wx
    bottom = padded[y1, x0] * (1.0 - wx) + padded[y1, x1] * wx
    return top * (1.0 - wy) + bottom * wy


def bilinear_sample(fmap: FeatureMap, point) -> np.ndarray:
    """Interpolate the channel vector of ``fmap`` at pixel ``point = (x, y)``."""
    x, y = (float(v) for v in point)
    if not (np.isfinite(x) and np.isfinite(y)):
        raise ValueError(f"sample coordinates must be finite, got {point!r}")
    return sample_array(fmap.data, np.array(x), np.array(y))


def _resize_axis(n_in: int, n_out: int):
    # align_corners=False: output centre i reads source (i + 0.5) * n_in / n_out - 0.5,
    # clamped to the valid range so edges replicate.
    src = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    src = np.clip(src, 0.0, n_in - 1)
    i0 = np.floor(src).astype(np.intp)
    i1 = np.minimum(i0 + 1, n_in - 1)
    return i0, i1, src - i0


def resize_array(data: np.ndarray, height: int, width: int) -> np.ndarray:
    """Separable bilinear resize of an ``H x W x C`` array (float64 out)."""
    data = np.asarray(data, dtype=np.float64)
    r0, r1, wr = _resize_axis(data.shape[0], height)
    c0, c1, wc = _resize_axis(data.shape[1], width)
    rows = data[r0] * (1.0 - wr)[:, None, None] + data[r1] * wr[:, None, None]
    return rows[:, c0] * (1.0 - wc)[None, :, None] + rows[:, c1] * wc[None, :, None]


def resize_bilinear(fmap: FeatureMap, target_height: int, target_width: int) -> FeatureMap:
    """Resize with the half-pixel (align-corners false) convention.

    The metric resolution scales with the height ratio.
    """
    if target_height < 1 or target_width < 1:
        raise ValueError("target size must be positive")
    if (target_height, target_width) == (fmap.height, fmap.width):
        return FeatureMap(fmap.data.copy(), fmap.resolution)
    out = resize_array(fmap.data, target_height, target_width)
    return FeatureMap(out, fmap.resolution * fmap.height / target_height)


def warp_coordinates(
    pose: "SE2Pose",
    src_shape: tuple[int, int],
    src_resolution: float,
    out_height: int,
    out_width: int,
    out_resolution: float,
):
    """Source pixel coordinates read by every output pixel of a rigid warp."""
    cols = (np.arange(out_width, dtype=np.float64) - (out_width - 1) / 2.0) * out_resolution
    rows = (np.arange(out_height, dtype=np.float64) - (out_height - 1) / 2.0) * out_resolution
    px, py = np.meshgrid(cols, rows)
    c, s = np.cos(pose.yaw), np.sin(pose.yaw)
    dx = px - pose.x
    dy = py - pose.y
    sx = (c * dx + s * dy) / src_resolution + (src_shape[1] - 1) / 2.0
    sy = (-s * dx + c * dy) / src_resolution + (src_shape[0] - 1) / 2.0
    return sx, sy


def warp_array(
    data: np.ndarray,
    resolution: float,
    pose: "SE2Pose",
    out_height: int,
    out_width: int,
    out_resolution: float,
) -> np.ndarray:
    sx, sy = warp_coordinates(pose, data.shape[:2], resolution, out_height, out_width, out_resolution)
    return sample_array(data, sx, sy)


def rigid_warp(
    fmap: FeatureMap,
    pose: "SE2Pose",
    out_height: int,
    out_width: int,
    out_resolution: float,
) -> FeatureMap:
    """Move the content of ``fmap`` by the rigid motion ``pose``.

    Output pixel ``p`` reads the source at ``pose^-1(p)`` (inverse warping), so
    ``out(pose(q)) = src(q)`` in metric coordinates.  Reads outside the source
    are zero.
    """
    if not out_resolution > 0:
        raise ValueError("out_resolution must be positive")
    out = warp_array(fmap.data, fmap.resolution, pose, out_height, out_width, out_resolution)
    return FeatureMap(out, out_resolution)


def next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def fft_shape(ref_shape, tmpl_shape) -> tuple[int, int]:
    return (
        next_pow2(ref_shape[0] + tmpl_shape[0] - 1),
        next_pow2(ref_shape[1] + tmpl_shape[1] - 1),
    )


def spectrum(data: np.ndarray, shape: tuple[int, int]) -> np.ndarray:
    """Zero-padded real FFT over the two spatial axes."""
    return scipy.fft.rfft2(np.asarray(data, dtype=np.float64), s=shape, axes=(0, 1))


def correlate_spectra(
    ref_spec: np.ndarray,
    tmpl_spec: np.ndarray,
    shape: tuple[int, int],
    ref_hw: tuple[int, int],
    tmpl_hw: tuple[int, int],
    radius: Optional[int] = None,
) -> tuple[np.ndarray, tuple[int, int]]:
    """Inverse transform of the channel-summed cross spectrum.

    Returns the plane and its zero-translation index.  Raw offsets without
    any overlap are set to zero explicitly.
    """
    prod = (ref_spec * np.conj(tmpl_spec)).sum(axis=2)
    circ = scipy.fft.irfft2(prod, s=shape)
    (H, W), (h, w) = ref_hw, tmpl_hw
    base_y, base_x = (H - h) // 2, (W - w) // 2
    if radius is None:
        dy = np.arange(-(h - 1), H)
        dx = np.arange(-(w - 1), W)
        center = (h - 1 + base_y, w - 1 + base_x)
    else:
        dy = base_y + np.arange(-radius, radius + 1)
        dx = base_x + np.arange(-radius, radius + 1)
        center = (radius, radius)
    plane = circ[np.ix_(dy % shape[0], dx % shape[1])]
    valid_y = (dy > -h) & (dy < H)
    valid_x = (dx > -w) & (dx < W)
    plane = np.where(valid_y[:, None] & valid_x[None, :], plane, 0.0)
    return plane, center


def fft_cross_correlate(
    reference: FeatureMap,
    template: FeatureMap,
    radius: Optional[int] = None,
) -> CorrelationMap:
    """Multi-channel cross-correlation through the frequency domain.

    ``out[dy, dx] = sum_{x, y, c} reference(x + dx, y + dy, c) * template(x, y, c)``
    with zero padding.  By default every offset with non-empty overlap is
    returned; with ``radius`` only the ``(2r+1)^2`` offsets around the centred
    alignment are kept.
    """
    if reference.channels != template.channels:
        raise ValueError(
            f"channel mismatch: reference {reference.channels} vs template {template.channels}"
        )
    if template.height > reference.height or template.width > reference.width:
        raise ValueError("template must not be larger than the reference")
    shape = fft_shape(reference.shape, template.shape)
    plane, center = correlate_spectra(
        spectrum(reference.data, shape),
        spectrum(template.data, shape),
        shape,
        reference.shape[:2],
        template.shape[:2],
        radius,
    )
    return CorrelationMap(plane[None], center)


def circular_mask(size: int, resolution: float) -> np.ndarray:
    """Cells whose centre lies strictly within ``size / 2 * resolution`` meters of the grid centre."""
    k = (np.arange(size) - (size - 1) / 2.0) * resolution
    xx, yy = np.meshgrid(k, k)
    return np.hypot(xx, yy) < size / 2.0 * resolution
