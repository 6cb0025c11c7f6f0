"""Statistics of pose distributions, Kalman tracking and trajectory alignment."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .geometry import SE2Pose, rotation_2d, se2_compose, wrap_angle
from .matcher import PoseDistribution

COVARIANCE_FLOOR = np.diag([1e-4, 1e-4, 1e-6])


class NumericalError(ArithmeticError):
    pass


@dataclass(frozen=True)
class DistributionStats:
    mode: SE2Pose
    mean: SE2Pose
    covariance: np.ndarray
    generalized_variance: float


@dataclass(frozen=True)
class KalmanState:
    mean: SE2Pose
    covariance: np.ndarray


@dataclass(frozen=True)
class OdometryStep:
    """Relative motion from frame ``t`` to ``t + 1`` in the vehicle frame."""

    relative: SE2Pose
    noise: np.ndarray

    def __post_init__(self):
        n = np.asarray(self.noise, dtype=np.float64)
        if n.shape != (3, 3) or np.linalg.eigvalsh((n + n.T) / 2).min() < -1e-12:
            raise ValueError("odometry noise must be a 3x3 positive semi-definite matrix")
        object.__setattr__(self, "noise", n)


def _weighted_stats(probs: np.ndarray, P: PoseDistribution):
    grid = P.grid
    xs, ys = grid.offsets()
    w = probs / probs.sum()
    tm = w.sum(axis=0)
    rm = w.sum(axis=(1, 2))
    mx = float(np.sum(tm * xs))
    my = float(np.sum(tm * ys))
    alphas = np.asarray(grid.rotations)
    myaw = math.atan2(float(np.sum(rm * np.sin(alphas))), float(np.sum(rm * np.cos(alphas))))
    da = wrap_angle(alphas - myaw)
    dx = xs - mx
    dy = ys - my
    cov = np.empty((3, 3))
    cov[0, 0] = np.sum(tm * dx * dx)
    cov[1, 1] = np.sum(tm * dy * dy)
    cov[0, 1] = cov[1, 0] = np.sum(tm * dx * dy)
    cov[2, 2] = np.sum(rm * da * da)
    # cross terms need the joint volume
    per_rot_x = np.sum(w * dx[None], axis=(1, 2))
    per_rot_y = np.sum(w * dy[None], axis=(1, 2))
    cov[0, 2] = cov[2, 0] = np.sum(per_rot_x * da)
    cov[1, 2] = cov[2, 1] = np.sum(per_rot_y * da)
    return SE2Pose(mx, my, myaw), cov


def moments(P: PoseDistribution) -> DistributionStats:
    """Mode, mean (circular in yaw), covariance and generalised variance."""
    mean, cov = _weighted_stats(P.probs, P)
    return DistributionStats(P.mode(), mean, cov, max(0.0, float(np.linalg.det(cov[:2, :2]))))


def gaussian_measurement(
    P: PoseDistribution,
    window_radius: int = 10,
    floor: np.ndarray = COVARIANCE_FLOOR,
) -> tuple[SE2Pose, np.ndarray]:
    """Moment-matched Gaussian over the translations within ``window_radius``
    cells (Chebyshev distance) of the global mode, all rotations kept.

    ``floor`` is added to the covariance so delta-like inputs stay invertible.
    """
    _, row, col = P.argmax()
    n = P.grid.size
    keep = np.zeros((n, n), dtype=bool)
    keep[max(0, row - window_radius):row + window_radius + 1, max(0, col - window_radius):col + window_radius + 1] = True
    probs = np.where(keep[None], P.probs, 0.0)
    mean, cov = _weighted_stats(probs, P)
    return mean, cov + floor


def measurement_to_world(prior: SE2Pose, mean: SE2Pose, cov: np.ndarray) -> tuple[SE2Pose, np.ndarray]:
    """Express a patch-frame measurement in the world frame of ``prior``."""
    rot = np.eye(3)
    rot[:2, :2] = rotation_2d(prior.yaw)
    return se2_compose(prior, mean), rot @ cov @ rot.T


def kf_predict(state: KalmanState, odom: OdometryStep) -> KalmanState:
    m, u = state.mean, odom.relative
    c, s = math.cos(m.yaw), math.sin(m.yaw)
    J = np.array([
        [1.0, 0.0, -s * u.x - c * u.y],
        [0.0, 1.0, c * u.x - s * u.y],
        [0.0, 0.0, 1.0],
    ])
    G = np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])
    cov = J @ state.covariance @ J.T + G @ odom.noise @ G.T
    return KalmanState(se2_compose(m, u), (cov + cov.T) / 2)


def kf_update(state: KalmanState, measurement: tuple[SE2Pose, np.ndarray]) -> KalmanState:
    """Direct pose measurement update (Joseph form)."""
    z, R = measurement
    R = np.asarray(R, dtype=np.float64)
    P = state.covariance
    S = P + R
    if not np.isfinite(S).all() or np.linalg.cond(S) > 1e15:
        raise NumericalError("innovation covariance is singular")
    m = state.mean
    y = np.array([z.x - m.x, z.y - m.y, wrap_angle(z.yaw - m.yaw)])
    try:
        K = np.linalg.solve(S, P).T
    except np.linalg.LinAlgError as exc:
        raise NumericalError("innovation covariance is singular") from exc
    dx = K @ y
    I_K = np.eye(3) - K
    cov = I_K @ P @ I_K.T + K @ R @ K.T
    return KalmanState(SE2Pose(m.x + dx[0], m.y + dx[1], m.yaw + dx[2]), (cov + cov.T) / 2)


def track(
    measurements: Sequence[tuple[SE2Pose, np.ndarray]],
    odometry: Sequence[OdometryStep],
) -> list[KalmanState]:
    """Run the filter over world-frame measurements; ``odometry[t]`` moves frame t to t+1."""
    if len(odometry) != len(measurements) - 1:
        raise ValueError("need exactly one odometry step between consecutive measurements")
    mean, cov = measurements[0]
    state = KalmanState(mean, np.asarray(cov, dtype=np.float64))
    out = [state]
    for odom, meas in zip(odometry, measurements[1:]):
        state = kf_update(kf_predict(state, odom), meas)
        out.append(state)
    return out


def _positions(traj) -> np.ndarray:
    return np.array([[p.x, p.y] for p in traj], dtype=np.float64)


def _kabsch_2d(p: np.ndarray, g: np.ndarray, w: np.ndarray):
    w = w / w.sum()
    pc, gc = w @ p, w @ g
    a, b = p - pc, g - gc
    cross = float(np.sum(w * (a[:, 0] * b[:, 1] - a[:, 1] * b[:, 0])))
    dot = float(np.sum(w * (a[:, 0] * b[:, 0] + a[:, 1] * b[:, 1])))
    theta = math.atan2(cross, dot) if (abs(cross) > 0 or abs(dot) > 0) else 0.0
    R = rotation_2d(theta)
    return R, gc - R @ pc, theta


def align_3dof(pred: Sequence[SE2Pose], gt: Sequence[SE2Pose], iterations: int = 100) -> tuple[SE2Pose, float]:
    """Rigid 2D alignment of ``pred`` onto ``gt`` (no scale).

    Starts from the closed-form least-squares solution, then reweights
    (Weiszfeld style) so the result minimises the mean Euclidean error, which
    is what the returned APE measures.  Returns the transform applied to
    ``pred`` and the APE.
    """
    if len(pred) != len(gt):
        raise ValueError("trajectories must have equal length")
    if len(pred) < 2:
        raise ValueError("alignment needs at least two poses")
    p = _positions(pred)
    g = _positions(gt)

    def ape_of(R, t):
        return float(np.mean(np.linalg.norm(p @ R.T + t - g, axis=1)))

    R, t, theta = _kabsch_2d(p, g, np.ones(len(p)))
    best = (ape_of(R, t), R, t, theta)
    scale = max(float(np.abs(g).max()), 1.0)
    for _ in range(iterations):
        r = np.linalg.norm(p @ best[1].T + best[2] - g, axis=1)
        if best[0] <= 1e-15 * scale:
            break
        R, t, theta = _kabsch_2d(p, g, 1.0 / np.maximum(r, 1e-12 * scale))
        ape = ape_of(R, t)
        if ape >= best[0] - 1e-15 * scale:
            break
        best = (ape, R, t, theta)
    ape, R, t, theta = best
    unaligned = ape_of(np.eye(2), np.zeros(2))
    if unaligned < ape:
        return SE2Pose(0.0, 0.0, 0.0), unaligned
    return SE2Pose(t[0], t[1], theta), ape


def mean_position_error(pred: Sequence[SE2Pose], gt: Sequence[SE2Pose]) -> float:
    return float(np.mean(np.linalg.norm(_positions(pred) - _positions(gt), axis=1)))


def rmse(pred: Sequence[SE2Pose], gt: Sequence[SE2Pose]) -> float:
    d = _positions(pred) - _positions(gt)
    return float(np.sqrt(np.mean(np.sum(d * d, axis=1))))
