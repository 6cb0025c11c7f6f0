"""Frame records, sampling and pruning utilities, the synthetic scenario
generator and metric reports."""

from __future__ import annotations

import math
import zlib
from collections import defaultdict
from dataclasses import dataclass, field, fields, replace
from typing import Iterable, Iterator, Mapping, Optional, Sequence

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import SE2Pose, se2_compose, vehicle_frame_error
from .grid import FeatureMap, circular_mask, warp_array
from .tracking import OdometryStep, align_3dof


def substream(seed: int, name: str) -> np.random.Generator:
    """Independent generator for a named part of a seeded run."""
    return np.random.default_rng(np.random.SeedSequence([int(seed), zlib.crc32(name.encode())]))


@dataclass(frozen=True)
class FrameRecord:
    frame_id: int
    timestamp: float
    gt: SE2Pose
    prior: SE2Pose
    aerial_path: str = "-"
    bev_path: str = "-"
    rig_path: str = "-"
    camera_paths: tuple[str, ...] = ()


def frames_to_text(frames: Sequence[FrameRecord]) -> str:
    from .formats import fmt_number as f

    lines = []
    for fr in frames:
        cams = ",".join(fr.camera_paths) if fr.camera_paths else "-"
        lines.append(" ".join([
            "frame", str(fr.frame_id), f(fr.timestamp),
            f(fr.gt.x), f(fr.gt.y), f(fr.gt.yaw),
            f(fr.prior.x), f(fr.prior.y), f(fr.prior.yaw),
            fr.aerial_path, fr.bev_path, fr.rig_path, cams,
        ]))
    return "\n".join(lines) + "\n"


def frames_from_rows(rows, source: str) -> list[FrameRecord]:
    from .formats import FormatError

    out = []
    for row in rows:
        if row[0] != "frame" or len(row) != 13:
            raise FormatError(f"{source}: bad frame line {' '.join(row)!r}")
        try:
            v = [float(t) for t in row[2:9]]
            out.append(FrameRecord(
                int(row[1]), v[0], SE2Pose(*v[1:4]), SE2Pose(*v[4:7]),
                row[9], row[10], row[11], tuple(row[12].split(",")) if row[12] != "-" else (),
            ))
        except ValueError as exc:
            raise FormatError(f"{source}: {exc}") from exc
    return out


def odometry_to_text(steps: Sequence[OdometryStep]) -> str:
    from .formats import fmt_number as f, upper_triangle

    lines = []
    for i, s in enumerate(steps):
        vals = [s.relative.x, s.relative.y, s.relative.yaw, *upper_triangle(s.noise)]
        lines.append(f"odom {i} {i + 1} " + " ".join(f(v) for v in vals))
    return "\n".join(lines) + "\n"


def odometry_from_rows(rows, source: str) -> list[OdometryStep]:
    from .formats import FormatError, from_upper_triangle

    out = []
    for k, row in enumerate(rows):
        if row[0] != "odom" or len(row) != 12:
            raise FormatError(f"{source}: bad odometry line {' '.join(row)!r}")
        if int(row[1]) != k or int(row[2]) != k + 1:
            raise FormatError(f"{source}: odometry steps must chain consecutive frames")
        v = [float(t) for t in row[3:]]
        out.append(OdometryStep(SE2Pose(*v[:3]), from_upper_triangle(v[3:])))
    return out


# -- sampling, coverage, pruning ----------------------------------------------


def _cell(p: SE2Pose, size: float) -> tuple[int, int]:
    return math.floor(p.x / size), math.floor(p.y / size)


def cell_sampler(frames: Sequence[FrameRecord], cell_size: float = 1.0, seed: int = 0) -> Iterator[FrameRecord]:
    """Endless stream: a uniformly random occupied cell, then a uniform frame in it."""
    if not frames:
        raise ValueError("cell_sampler needs at least one frame")
    cells = defaultdict(list)
    for fr in frames:
        cells[_cell(fr.gt, cell_size)].append(fr)
    groups = [cells[k] for k in sorted(cells)]
    rng = substream(seed, "cell_sampler")
    while True:
        group = groups[rng.integers(len(groups))]
        yield group[rng.integers(len(group))]


def coverage(frames: Iterable[FrameRecord], cell_size: float = 100.0) -> int:
    return len({_cell(fr.gt, cell_size) for fr in frames})


def prune(
    frames: Sequence[FrameRecord],
    difficulty: Sequence[float],
    fraction: float = 0.01,
) -> list[FrameRecord]:
    """Drop the ``ceil(fraction * n)`` frames with the largest difficulty.

    Ties drop the larger frame id first; kept frames stay in input order.
    """
    if not 0 <= fraction < 1:
        raise ValueError("fraction must lie in [0, 1)")
    if len(difficulty) != len(frames):
        raise ValueError("one difficulty value per frame required")
    n_drop = math.ceil(fraction * len(frames) - 1e-12)
    order = sorted(range(len(frames)), key=lambda i: (-difficulty[i], -frames[i].frame_id))
    dropped = set(order[:n_drop])
    return [fr for i, fr in enumerate(frames) if i not in dropped]


# -- synthetic scenarios --------------------------------------------------------


@dataclass(frozen=True)
class ScenarioConfig:
    seed: int = 0
    frames: int = 200
    dt: float = 0.1
    speed: float = 1.0
    resolution: float = 0.5
    channels: int = 4
    patch_size: int = 80
    bev_size: int = 44
    bev_resolution: float = 0.5
    smoothing: float = 2.0
    blob_density: float = 0.004
    blob_sigma: float = 1.5
    sigma_n: float = 2.0
    odometry_sigma_xy: float = 0.02
    odometry_sigma_yaw: float = 0.002
    search_radius: float = 6.0
    rotation_bound_deg: float = 10.0
    margin: float = 4.0
    bev_source: str = "crop"

    def __post_init__(self):
        positive = ("frames", "dt", "speed", "resolution", "channels", "patch_size", "bev_size",
                    "bev_resolution", "smoothing", "blob_sigma", "search_radius")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        for name in ("sigma_n", "blob_density", "odometry_sigma_xy", "odometry_sigma_yaw",
                     "rotation_bound_deg", "margin"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must not be negative")
        if self.bev_source not in ("crop", "transformer"):
            raise ValueError("bev_source must be 'crop' or 'transformer'")

    @classmethod
    def from_mapping(cls, values: Mapping[str, str], **overrides) -> "ScenarioConfig":
        kw = {}
        types = {f.name: f.type for f in fields(cls)}
        for key, raw in {**values, **overrides}.items():
            if raw is None:
                continue
            if key not in types:
                raise ValueError(f"unknown scenario key {key!r}")
            t = types[key]
            kw[key] = raw if t == "str" else (int(raw) if t == "int" else float(raw))
        return cls(**kw)

    def to_mapping(self) -> dict[str, object]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @property
    def rotation_bound(self) -> float:
        return math.radians(self.rotation_bound_deg)


@dataclass
class Scenario:
    config: ScenarioConfig
    aerial: FeatureMap
    frames: list[FrameRecord]
    odometry: list[OdometryStep]
    bev: list[FeatureMap] = field(default_factory=list)
    mask: Optional[np.ndarray] = None
    rig: object = None
    images: list[list[FeatureMap]] = field(default_factory=list)


def _trajectory(cfg: ScenarioConfig, rng) -> list[SE2Pose]:
    yaw = rng.uniform(-math.pi, math.pi)
    omega = 0.0
    x = y = 0.0
    out = []
    for _ in range(cfg.frames):
        out.append(SE2Pose(x, y, yaw))
        x += cfg.speed * math.cos(yaw)
        y += cfg.speed * math.sin(yaw)
        omega = float(np.clip(0.95 * omega + rng.normal(0.0, 0.01), -0.08, 0.08))
        yaw += omega
    return out


def _aerial_features(cfg: ScenarioConfig, height: int, width: int, rng) -> np.ndarray:
    data = np.empty((height, width, cfg.channels))
    for c in range(cfg.channels):
        layer = gaussian_filter(rng.standard_normal((height, width)), cfg.smoothing, mode="wrap")
        data[:, :, c] = layer / layer.std()
    n_blobs = rng.poisson(cfg.blob_density * height * width)
    if n_blobs:
        spikes = np.zeros((height, width, cfg.channels))
        rows = rng.integers(0, height, n_blobs)
        cols = rng.integers(0, width, n_blobs)
        amps = rng.normal(0.0, 2.0, size=(n_blobs, cfg.channels))
        np.add.at(spikes, (rows, cols), amps * 2 * math.pi * cfg.blob_sigma ** 2)
        for c in range(cfg.channels):
            data[:, :, c] += gaussian_filter(spikes[:, :, c], cfg.blob_sigma, mode="constant")
    data -= data.mean(axis=(0, 1))
    data /= data.std(axis=(0, 1))
    return data


def simulate(cfg: ScenarioConfig) -> Scenario:
    """Seeded synthetic scenario: aerial map, trajectory, priors, BEV crops, odometry."""
    traj = _trajectory(cfg, substream(cfg.seed, "trajectory"))
    xy = np.array([[p.x, p.y] for p in traj])
    lo, hi = xy.min(axis=0), xy.max(axis=0)
    centre = (lo + hi) / 2
    traj = [SE2Pose(p.x - centre[0], p.y - centre[1], p.yaw) for p in traj]
    q = cfg.resolution
    reach = cfg.patch_size * q / math.sqrt(2) + cfg.search_radius + cfg.margin
    width = int(math.ceil((hi[0] - lo[0] + 2 * reach) / q)) + 1
    height = int(math.ceil((hi[1] - lo[1] + 2 * reach) / q)) + 1
    aerial = FeatureMap(_aerial_features(cfg, height, width, substream(cfg.seed, "aerial")), q)

    prior_rng = substream(cfg.seed, "prior")
    frames = []
    for i, gt in enumerate(traj):
        rho = cfg.search_radius * math.sqrt(prior_rng.uniform())
        phi = prior_rng.uniform(-math.pi, math.pi)
        dyaw = prior_rng.uniform(-cfg.rotation_bound, cfg.rotation_bound)
        # prior^-1 * gt must stay inside the search disc and rotation bound
        rel = SE2Pose(rho * math.cos(phi), rho * math.sin(phi), -dyaw)
        prior = se2_compose(gt, rel.inverse())
        frames.append(FrameRecord(i, i * cfg.dt, gt, prior))

    odo_rng = substream(cfg.seed, "odometry")
    noise = np.diag([cfg.odometry_sigma_xy ** 2, cfg.odometry_sigma_xy ** 2, cfg.odometry_sigma_yaw ** 2])
    odometry = []
    for a, b in zip(traj, traj[1:]):
        true_rel = se2_compose(a.inverse(), b)
        eps = SE2Pose(*odo_rng.normal(0.0, [cfg.odometry_sigma_xy, cfg.odometry_sigma_xy, cfg.odometry_sigma_yaw]))
        odometry.append(OdometryStep(se2_compose(true_rel, eps), noise))

    scenario = Scenario(cfg, aerial, frames, odometry)
    if cfg.bev_source == "crop":
        _add_crops(scenario)
    else:
        from .render import add_camera_images

        add_camera_images(scenario)
    return scenario


def _add_crops(scenario: Scenario) -> None:
    cfg = scenario.config
    mask = circular_mask(cfg.bev_size, cfg.bev_resolution)
    rng = substream(cfg.seed, "observation")
    std = float(scenario.aerial.data.std())
    for fr in scenario.frames:
        crop = warp_array(
            scenario.aerial.data, scenario.aerial.resolution, fr.gt.inverse(),
            cfg.bev_size, cfg.bev_size, cfg.bev_resolution,
        )
        clean_rms = math.sqrt(float(np.mean(crop[mask] ** 2)))
        crop += cfg.sigma_n * std * rng.standard_normal(crop.shape)
        crop *= mask[:, :, None]
        # Bounded feature energy: noise displaces signal instead of adding to it.
        noisy_rms = math.sqrt(float(np.mean(crop[mask] ** 2)))
        if noisy_rms > 0:
            crop *= clean_rms / noisy_rms
        scenario.bev.append(FeatureMap(crop, cfg.bev_resolution))
    scenario.mask = mask


def aerial_patch(aerial: FeatureMap, prior: SE2Pose, size: int) -> FeatureMap:
    """Aerial features in the prior-aligned frame, centred on the prior."""
    return FeatureMap(warp_array(aerial.data, aerial.resolution, prior.inverse(), size, size, aerial.resolution),
                      aerial.resolution)


# -- metrics ----------------------------------------------------------------


@dataclass
class EvalReport:
    metrics: dict[str, float]
    thresholds: tuple[float, ...]
    lateral: np.ndarray
    longitudinal: np.ndarray
    position: np.ndarray

    def to_text(self, label: str = "result") -> str:
        m = self.metrics
        head = ["", *[f"lat@{t:g}m" for t in self.thresholds], *[f"lon@{t:g}m" for t in self.thresholds],
                "median", "ME", "RMSE", "APE"]
        row = [label, *[f"{m[f'recall_lateral_{t:g}m']:.1f}" for t in self.thresholds],
               *[f"{m[f'recall_longitudinal_{t:g}m']:.1f}" for t in self.thresholds],
               *[f"{m[k]:.3f}" for k in ("median_error", "mean_error", "rmse", "ape")]]
        widths = [max(len(a), len(b)) for a, b in zip(head, row)]
        lines = [
            "  ".join(h.rjust(w) for h, w in zip(head, widths)),
            "  ".join(r.rjust(w) for r, w in zip(row, widths)),
            "",
        ]
        from .formats import fmt_number

        lines += [f"metric {k} {fmt_number(v)}" for k, v in m.items()]
        return "\n".join(lines) + "\n"


def eval_report(
    pred: Sequence[SE2Pose],
    gt: Sequence[SE2Pose],
    thresholds: Sequence[float] = (1.0, 3.0, 5.0),
) -> EvalReport:
    if len(pred) != len(gt):
        raise ValueError(f"prediction count {len(pred)} differs from ground-truth count {len(gt)}")
    if not pred:
        raise ValueError("nothing to evaluate")
    errs = np.array([vehicle_frame_error(p, g) for p, g in zip(pred, gt)])
    lat, lon = errs[:, 0], errs[:, 1]
    pos = np.hypot(lat, lon)
    m: dict[str, float] = {"frames": float(len(pred))}
    for t in thresholds:
        m[f"recall_lateral_{t:g}m"] = 100.0 * float(np.mean(lat <= t))
    for t in thresholds:
        m[f"recall_longitudinal_{t:g}m"] = 100.0 * float(np.mean(lon <= t))
    m["median_error"] = float(np.median(pos))
    m["mean_error"] = float(pos.mean())
    m["rmse"] = float(np.sqrt(np.mean(pos ** 2)))
    m["ape"] = align_3dof(pred, gt)[1] if len(pred) >= 2 else float("nan")
    m["mean_angular_error_deg"] = math.degrees(float(errs[:, 2].mean()))
    return EvalReport(m, tuple(thresholds), lat, lon, pos)


def with_overrides(cfg: ScenarioConfig, **kw) -> ScenarioConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
