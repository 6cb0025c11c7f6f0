"""Scoring SE(2) hypotheses of a BEV map against aerial features.

Hypotheses are poses of the vehicle relative to the centre of the aerial
patch, on a square translation lattice (pitch ``q_A``) restricted to a disc
of radius ``r``, times a discrete set of rotations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .formats import FormatError, atomic_write, fmap_to_bytes, heatmap_to_pgm, read_config, read_fmap
from .geometry import SE2Pose, wrap_angle
from .grid import FeatureMap, correlate_spectra, fft_shape, resize_array, spectrum, warp_array


class OutOfRangeError(ValueError):
    pass


def rotation_set(max_angle: float, bin_width: float = math.radians(2.0)) -> tuple[float, ...]:
    """Rotations at ``bin_width`` spacing covering ``[-max_angle, max_angle]``.

    A bound of pi or more yields the full circle without duplicating +-pi.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be positive")
    if max_angle >= math.pi - 1e-12:
        n = max(1, int(round(2 * math.pi / bin_width)))
        step = 2 * math.pi / n
        return tuple(-math.pi + step * (k + 1) for k in range(n))
    m = int(math.ceil(max_angle / bin_width - 1e-9))
    angles = sorted({wrap_angle(k * bin_width) for k in range(-m, m + 1)})
    return tuple(angles)


@dataclass(frozen=True)
class HypothesisGrid:
    radius: float
    resolution: float
    rotations: tuple[float, ...]

    def __post_init__(self):
        rot = tuple(float(a) for a in self.rotations)
        if not self.radius > 0 or not self.resolution > 0:
            raise ValueError("radius and resolution must be positive")
        if not rot:
            raise ValueError("rotation set must not be empty")
        if any(b <= a for a, b in zip(rot, rot[1:])):
            raise ValueError("rotations must be strictly increasing")
        if rot[0] <= -math.pi or rot[-1] > math.pi:
            raise ValueError("rotations must lie in (-pi, pi]")
        object.__setattr__(self, "rotations", rot)
        object.__setattr__(self, "radius", float(self.radius))
        object.__setattr__(self, "resolution", float(self.resolution))

    @property
    def cells(self) -> int:
        """Translation half-width in lattice cells."""
        return int(math.floor(self.radius / self.resolution + 1e-9))

    @property
    def size(self) -> int:
        return 2 * self.cells + 1

    @property
    def shape(self) -> tuple[int, int, int]:
        return len(self.rotations), self.size, self.size

    def offsets(self) -> tuple[np.ndarray, np.ndarray]:
        """Metric ``(x, y)`` of every lattice cell, indexed ``[row, col]``."""
        k = (np.arange(self.size) - self.cells) * self.resolution
        return np.meshgrid(k, k)

    def admissible(self) -> np.ndarray:
        xs, ys = self.offsets()
        return xs ** 2 + ys ** 2 <= self.radius ** 2 * (1 + 1e-12)

    def admissible_volume(self) -> np.ndarray:
        return np.broadcast_to(self.admissible(), self.shape)

    def hypothesis(self, a: int, row: int, col: int) -> SE2Pose:
        return SE2Pose(
            (col - self.cells) * self.resolution,
            (row - self.cells) * self.resolution,
            self.rotations[a],
        )

    def nearest_index(self, pose: SE2Pose) -> tuple[int, int, int]:
        a = int(np.argmin(np.abs(wrap_angle(np.asarray(self.rotations) - pose.yaw))))
        col = int(round(pose.x / self.resolution)) + self.cells
        row = int(round(pose.y / self.resolution)) + self.cells
        return a, row, col


@dataclass(frozen=True, eq=False)
class PoseDistribution:
    """Normalised probabilities over a :class:`HypothesisGrid`.

    ``logits`` keeps the unnormalised log-weights (``-inf`` outside the
    admissible disc) so that log-probabilities stay exact.
    """

    probs: np.ndarray
    grid: HypothesisGrid
    log_partition: float
    logits: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.shape != self.grid.shape:
            raise ValueError(f"probability volume {p.shape} does not match grid {self.grid.shape}")
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("probabilities must be non-negative and sum to one")
        object.__setattr__(self, "probs", p)

    def log_probs(self) -> np.ndarray:
        if self.logits is not None:
            return self.logits - self.log_partition
        with np.errstate(divide="ignore"):
            return np.log(self.probs)

    def translation_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=0)

    def rotation_marginal(self) -> np.ndarray:
        return self.probs.sum(axis=(1, 2))

    def argmax(self) -> tuple[int, int, int]:
        return tuple(int(v) for v in np.unravel_index(np.argmax(self.probs), self.probs.shape))

    def mode(self) -> SE2Pose:
        return self.grid.hypothesis(*self.argmax())


@dataclass
class MatchParams:
    """Matcher settings.  ``projection`` maps BEV channels to ``c_A``;
    ``None`` means identity (requires equal channel counts)."""

    c_A: int = 8
    q_A: float = 0.3
    d_A: int = 512
    sigma_t: float = 0.5
    sigma_alpha: float = math.radians(2.0)
    projection: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.c_A < 1:
            raise ValueError("c_A must be at least 1")
        if not (self.sigma_t > 0 and self.sigma_alpha > 0 and self.q_A > 0):
            raise ValueError("sigma_t, sigma_alpha and q_A must be positive")
        if self.projection is not None:
            w = np.asarray(self.projection, dtype=np.float64)
            if w.ndim != 2 or w.shape[1] != self.c_A or not np.isfinite(w).all():
                raise ValueError("projection must be a finite (c_B, c_A) matrix")
            self.projection = w

    @classmethod
    def seeded(cls, c_B: int, seed: int, **kw) -> "MatchParams":
        kw.setdefault("c_A", 8)
        rng = np.random.default_rng(seed)
        w = rng.uniform(-1, 1, size=(c_B, kw["c_A"])) / math.sqrt(c_B)
        return cls(projection=w, **kw)


def prepare_bev(B: FeatureMap, mask: np.ndarray, params: MatchParams) -> tuple[FeatureMap, np.ndarray]:
    """Upsample the BEV and its mask to ``q_A``, project to ``c_A`` channels, apply the mask."""
    if params.q_A > B.resolution * (1 + 1e-9):
        raise ValueError(f"aerial resolution {params.q_A} is coarser than the BEV ({B.resolution})")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (B.height, B.width):
        raise ValueError("mask shape does not match the BEV grid")
    factor = B.resolution / params.q_A
    th, tw = int(round(B.height * factor)), int(round(B.width * factor))
    up = resize_array(B.data, th, tw)
    up_mask = resize_array(mask[:, :, None].astype(np.float64), th, tw)[:, :, 0] > 0.5
    if params.projection is None:
        if B.channels != params.c_A:
            raise ValueError(f"identity projection needs {params.c_A} BEV channels, got {B.channels}")
        proj = up
    else:
        if params.projection.shape[0] != B.channels:
            raise ValueError("projection input width does not match BEV channels")
        proj = up @ params.projection
    proj = proj * up_mask[:, :, None]
    return FeatureMap(proj, params.q_A), up_mask


def scale_factor(mask: np.ndarray, c_A: int) -> float:
    n = int(np.count_nonzero(mask))
    if n == 0:
        raise ValueError("mask has no valid cells")
    return 1.0 / math.sqrt(n * c_A)


def _template_size(bev: int, aerial: int) -> int:
    # Room for bilinear spill of rotated content; parity must match the aerial
    # patch so both centres coincide on the pixel lattice.
    t = bev + 4
    if (aerial - t) % 2:
        t += 1
    return min(t, aerial)


def score_hypotheses(
    F_A: FeatureMap,
    B_prime: FeatureMap,
    mask: np.ndarray,
    grid: HypothesisGrid,
) -> np.ndarray:
    """Scaled inner products for every hypothesis, shape ``grid.shape``.

    Cells outside the admissible disc are ``-inf``.
    """
    tol = 1e-6 * grid.resolution
    if abs(F_A.resolution - grid.resolution) > tol or abs(B_prime.resolution - grid.resolution) > tol:
        raise ValueError("aerial features, BEV and grid must share one resolution")
    if F_A.channels != B_prime.channels:
        raise ValueError(f"channel mismatch: aerial {F_A.channels} vs BEV {B_prime.channels}")
    if F_A.height < B_prime.height or F_A.width < B_prime.width:
        raise ValueError("aerial patch must be at least as large as the BEV")
    mask = np.asarray(mask, dtype=bool)
    k = scale_factor(mask, F_A.channels)
    masked = B_prime.data.astype(np.float64) * mask[:, :, None]
    th = _template_size(B_prime.height, F_A.height)
    tw = _template_size(B_prime.width, F_A.width)
    shape = fft_shape(F_A.shape, (th, tw))
    ref_spec = spectrum(F_A.data, shape)
    q = grid.resolution
    out = np.empty(grid.shape)
    for a, alpha in enumerate(grid.rotations):
        tmpl = warp_array(masked, q, SE2Pose(0.0, 0.0, alpha), th, tw, q)
        plane, _ = correlate_spectra(
            ref_spec, spectrum(tmpl, shape), shape, F_A.shape[:2], (th, tw), grid.cells
        )
        out[a] = k * plane
    out[:, ~grid.admissible()] = -np.inf
    return out


def to_distribution(logits: np.ndarray, grid: HypothesisGrid) -> PoseDistribution:
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape != grid.shape:
        raise ValueError("logit volume does not match the grid")
    logits = np.where(grid.admissible_volume(), logits, -np.inf)
    if not np.isfinite(logits).any():
        raise ValueError("no admissible hypothesis")
    m = logits[np.isfinite(logits)].max()
    e = np.exp(logits - m)
    z = e.sum()
    return PoseDistribution(e / z, grid, float(m + math.log(z)), logits)


def gaussian_target(gt: SE2Pose, grid: HypothesisGrid, sigma_t: float, sigma_alpha: float) -> PoseDistribution:
    """Discrete normal target centred on ``gt`` (relative to the patch centre)."""
    if math.hypot(gt.x, gt.y) > grid.radius * (1 + 1e-12):
        raise OutOfRangeError(f"ground truth ({gt.x:.3f}, {gt.y:.3f}) lies outside the search radius {grid.radius}")
    xs, ys = grid.offsets()
    d2 = (xs - gt.x) ** 2 + (ys - gt.y) ** 2
    da = wrap_angle(np.asarray(grid.rotations) - gt.yaw)
    logits = -d2[None] / (2 * sigma_t ** 2) - (da ** 2)[:, None, None] / (2 * sigma_alpha ** 2)
    return to_distribution(logits, grid)


def cross_entropy_loss(P: PoseDistribution, P_true: PoseDistribution) -> float:
    if P.grid != P_true.grid:
        raise ValueError("distributions live on different grids")
    support = P_true.probs > 0
    logp = P.log_probs()
    return float(-np.sum(P_true.probs[support] * logp[support]))


def loss_gradient(logits: np.ndarray, P_true: PoseDistribution) -> np.ndarray:
    """Derivative of the cross-entropy with respect to each admissible logit."""
    P = to_distribution(logits, P_true.grid)
    grad = P.probs - P_true.probs
    grad[~P_true.grid.admissible_volume()] = 0.0
    return grad


def match(
    F_A: FeatureMap,
    B: FeatureMap,
    mask: np.ndarray,
    params: MatchParams,
    grid: HypothesisGrid,
) -> PoseDistribution:
    B_prime, mask_prime = prepare_bev(B, mask, params)
    return to_distribution(score_hypotheses(F_A, B_prime, mask_prime, grid), grid)


# -- export -----------------------------------------------------------------


def write_distribution(prefix, P: PoseDistribution) -> None:
    """``<prefix>.fmap`` (rotations as channels), ``<prefix>.txt`` metadata and
    ``<prefix>.pgm`` heatmap of the translation marginal."""
    prefix = Path(prefix)
    volume = np.moveaxis(P.probs, 0, -1).astype(np.float32)
    atomic_write(prefix.with_suffix(".fmap"), fmap_to_bytes(FeatureMap(volume, P.grid.resolution)))
    meta = (
        f"radius = {P.grid.radius!r}\n"
        f"resolution = {P.grid.resolution!r}\n"
        f"rotations = {','.join(repr(a) for a in P.grid.rotations)}\n"
        f"log_partition = {P.log_partition!r}\n"
    )
    atomic_write(prefix.with_suffix(".txt"), meta)
    atomic_write(prefix.with_suffix(".pgm"), heatmap_to_pgm(P.translation_marginal()))


def read_distribution(prefix) -> PoseDistribution:
    prefix = Path(prefix)
    meta = read_config(prefix.with_suffix(".txt"))
    try:
        grid = HypothesisGrid(
            float(meta["radius"]),
            float(meta["resolution"]),
            tuple(float(v) for v in meta["rotations"].split(",")),
        )
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{prefix.with_suffix('.txt')}: bad distribution metadata ({exc})") from exc
    fmap = read_fmap(prefix.with_suffix(".fmap"))
    probs = np.moveaxis(fmap.data.astype(np.float64), -1, 0)
    if probs.shape != grid.shape:
        raise FormatError(f"{prefix.with_suffix('.fmap')}: volume does not match metadata")
    probs = np.where(grid.admissible_volume(), probs, 0.0)
    total = probs.sum()
    if total <= 0:
        raise FormatError(f"{prefix.with_suffix('.fmap')}: empty distribution")
    return PoseDistribution(probs / total, grid, float(meta.get("log_partition", 0.0)))


def reference_hyperparameters() -> dict:
    """Full-scale settings of the reference model; training entries are metadata only."""
    return {
        "n_heads": 4, "z": 16, "h_min": -5.0, "h_max": 10.0, "s_G": 4, "s_R": 4,
        "n_blocks": 3, "d_B": 320, "q_B": 2.4, "c_B": 128,
        "q_A": 0.3, "d_A": 512, "c_A": 8,
        "sigma_t": 0.5, "sigma_alpha": math.radians(2.0),
        "optimizer": "RectifiedAdam", "learning_rate": 1e-4, "lr_schedule": "polynomial decay",
        "iterations": 100_000, "batch_size": 1,
    }


def world_pose(prior: SE2Pose, relative: SE2Pose) -> SE2Pose:
    """World pose of a hypothesis expressed in the prior-aligned patch frame."""
    return prior @ relative


def relative_pose(prior: SE2Pose, world: SE2Pose) -> SE2Pose:
    return prior.inverse() @ world

