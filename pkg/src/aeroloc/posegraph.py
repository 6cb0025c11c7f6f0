"""Least-squares fusion of relative odometry and absolute pose measurements.

Residuals use the compact ``(x, y, yaw)`` coordinates of a relative SE(2)
error with the yaw part wrapped.  Odometry edges only join consecutive
nodes, so the normal equations are banded (bandwidth 5 in the 3n state) and
every step costs linear time.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .formats import FormatError, atomic_write, fmt_number, from_upper_triangle, read_rows, upper_triangle
from .geometry import SE2Pose, wrap_angle
from .matcher import PoseDistribution
from .pipeline import FrameRecord
from .tracking import OdometryStep, gaussian_measurement, measurement_to_world

_BAND = 5


def _check_information(m, what: str) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    if m.shape != (3, 3) or not np.isfinite(m).all():
        raise ValueError(f"{what} information must be a finite 3x3 matrix")
    if not np.allclose(m, m.T, atol=1e-9 * max(1.0, np.abs(m).max())):
        raise ValueError(f"{what} information must be symmetric")
    if np.linalg.eigvalsh(m).min() < -1e-9 * max(1.0, np.abs(m).max()):
        raise ValueError(f"{what} information must be positive semi-definite")
    return (m + m.T) / 2


@dataclass
class PoseGraph:
    nodes: list[SE2Pose]
    odometry: list[tuple[int, int, SE2Pose, np.ndarray]] = field(default_factory=list)
    measurements: list[tuple[int, SE2Pose, np.ndarray]] = field(default_factory=list)

    def add_odometry(self, i: int, j: int, relative: SE2Pose, information) -> None:
        if j != i + 1 or not 0 <= i < len(self.nodes) - 1:
            raise ValueError(f"odometry edge ({i}, {j}) must join consecutive nodes")
        self.odometry.append((i, j, relative, _check_information(information, "odometry")))

    def add_measurement(self, i: int, pose: SE2Pose, information) -> None:
        if not 0 <= i < len(self.nodes):
            raise ValueError(f"measurement edge refers to missing node {i}")
        self.measurements.append((i, pose, _check_information(information, "measurement")))

    def validate(self) -> None:
        if not self.nodes:
            raise ValueError("pose graph has no nodes")
        if not self.measurements:
            raise ValueError("pose graph needs at least one measurement edge to fix the gauge")

    def _arrays(self):
        odo_i = np.array([e[0] for e in self.odometry], dtype=np.intp)
        odo_z = np.array([e[2].as_array() for e in self.odometry]).reshape(-1, 3)
        odo_info = np.array([e[3] for e in self.odometry]).reshape(-1, 3, 3)
        meas_i = np.array([e[0] for e in self.measurements], dtype=np.intp)
        meas_z = np.array([e[1].as_array() for e in self.measurements]).reshape(-1, 3)
        meas_info = np.array([e[2] for e in self.measurements]).reshape(-1, 3, 3)
        return odo_i, odo_z, odo_info, meas_i, meas_z, meas_info


def _odometry_errors(X: np.ndarray, odo_i: np.ndarray, odo_z: np.ndarray):
    xi, xj = X[odo_i], X[odo_i + 1]
    ci, si = np.cos(xi[:, 2]), np.sin(xi[:, 2])
    cz, sz = np.cos(odo_z[:, 2]), np.sin(odo_z[:, 2])
    dx, dy = xj[:, 0] - xi[:, 0], xj[:, 1] - xi[:, 1]
    # relative translation in frame i, minus the measured one, seen from the measured frame
    ux = ci * dx + si * dy - odo_z[:, 0]
    uy = -si * dx + ci * dy - odo_z[:, 1]
    err = np.stack([cz * ux + sz * uy, -sz * ux + cz * uy,
                    wrap_angle(xj[:, 2] - xi[:, 2] - odo_z[:, 2])], axis=1)
    return err, (ci, si, cz, sz, dx, dy)


def _measurement_errors(X: np.ndarray, meas_i: np.ndarray, meas_z: np.ndarray) -> np.ndarray:
    x = X[meas_i]
    return np.stack([x[:, 0] - meas_z[:, 0], x[:, 1] - meas_z[:, 1], wrap_angle(x[:, 2] - meas_z[:, 2])], axis=1)


def _quadratic(err: np.ndarray, info: np.ndarray) -> float:
    return float(np.einsum("ka,kab,kb->", err, info, err)) if len(err) else 0.0


def residuals(graph: PoseGraph, poses: Sequence[SE2Pose]) -> tuple[np.ndarray, float]:
    """Stacked residuals (odometry edges first) and the information-weighted cost."""
    if len(poses) != len(graph.nodes):
        raise ValueError("one pose per node required")
    X = np.array([p.as_array() for p in poses])
    odo_i, odo_z, odo_info, meas_i, meas_z, meas_info = graph._arrays()
    e_odo, _ = _odometry_errors(X, odo_i, odo_z)
    e_meas = _measurement_errors(X, meas_i, meas_z)
    cost = _quadratic(e_odo, odo_info) + _quadratic(e_meas, meas_info)
    return np.concatenate([e_odo.ravel(), e_meas.ravel()]), cost


def _normal_equations(X, arrays):
    odo_i, odo_z, odo_info, meas_i, meas_z, meas_info = arrays
    n = len(X)
    diag = np.zeros((n, 3, 3))
    upper = np.zeros((max(n - 1, 0), 3, 3))
    grad = np.zeros((n, 3))

    e_odo, (ci, si, cz, sz, dx, dy) = _odometry_errors(X, odo_i, odo_z)
    if len(e_odo):
        m = len(e_odo)
        # e_t = Rz^T Ri^T (t_j - t_i) - Rz^T t_z
        RzT = np.stack([np.stack([cz, sz], -1), np.stack([-sz, cz], -1)], axis=1)
        RiT = np.stack([np.stack([ci, si], -1), np.stack([-si, ci], -1)], axis=1)
        dRiT = np.stack([np.stack([-si, ci], -1), np.stack([-ci, -si], -1)], axis=1)
        M = RzT @ RiT
        d = np.stack([dx, dy], axis=1)
        Ai = np.zeros((m, 3, 3))
        Aj = np.zeros((m, 3, 3))
        Ai[:, :2, :2] = -M
        Ai[:, :2, 2] = np.einsum("kab,kbc,kc->ka", RzT, dRiT, d)
        Ai[:, 2, 2] = -1.0
        Aj[:, :2, :2] = M
        Aj[:, 2, 2] = 1.0
        AiT_O = np.einsum("kba,kbc->kac", Ai, odo_info)
        AjT_O = np.einsum("kba,kbc->kac", Aj, odo_info)
        np.add.at(diag, odo_i, AiT_O @ Ai)
        np.add.at(diag, odo_i + 1, AjT_O @ Aj)
        np.add.at(upper, odo_i, AiT_O @ Aj)
        np.add.at(grad, odo_i, np.einsum("kab,kb->ka", AiT_O, e_odo))
        np.add.at(grad, odo_i + 1, np.einsum("kab,kb->ka", AjT_O, e_odo))

    e_meas = _measurement_errors(X, meas_i, meas_z)
    if len(e_meas):
        np.add.at(diag, meas_i, meas_info)
        np.add.at(grad, meas_i, np.einsum("kab,kb->ka", meas_info, e_meas))

    cost = _quadratic(e_odo, odo_info) + _quadratic(e_meas, meas_info)
    return diag, upper, grad.ravel(), cost


def _banded(diag: np.ndarray, upper: np.ndarray) -> np.ndarray:
    """Upper banded storage of the block-tridiagonal system."""
    n = len(diag)
    ab = np.zeros((_BAND + 1, 3 * n))
    base = 3 * np.arange(n)
    for a in range(3):
        for b in range(a, 3):
            ab[_BAND + a - b, base + b] = diag[:, a, b]
    for a in range(3):
        for b in range(3):
            ab[_BAND + a - 3 - b, base[:-1] + 3 + b] = upper[:, a, b]
    return ab


def _cost(X, arrays) -> float:
    odo_i, odo_z, odo_info, meas_i, meas_z, meas_info = arrays
    e_odo, _ = _odometry_errors(X, odo_i, odo_z)
    return _quadratic(e_odo, odo_info) + _quadratic(_measurement_errors(X, meas_i, meas_z), meas_info)


@dataclass
class OptimizeResult:
    poses: list[SE2Pose]
    cost: float
    iterations: int
    converged: bool
    history: list[float]


def optimize(
    graph: PoseGraph,
    max_iters: int = 100,
    tol: float = 1e-10,
    initial_damping: float = 1e-4,
) -> OptimizeResult:
    """Levenberg-Marquardt with additive damping, starting from ``graph.nodes``.

    Stops once an accepted step lowers the cost by less than ``tol``
    (relative), when the cost is numerically zero, or when no damping level
    produces a descent step.  ``converged`` is false only if ``max_iters``
    ran out first.
    """
    graph.validate()
    arrays = graph._arrays()
    X = np.array([p.as_array() for p in graph.nodes], dtype=np.float64)
    lam = initial_damping
    diag, upper, grad, cost = _normal_equations(X, arrays)
    history = [cost]
    converged = cost < 1e-24
    it = 0
    while not converged and it < max_iters:
        it += 1
        ab = _banded(diag, upper)
        ab[_BAND] += lam
        try:
            step = solveh_banded(ab, -grad, check_finite=False)
        except (LinAlgError, ValueError):
            step = None
        if step is not None:
            cand = X + step.reshape(-1, 3)
            cand[:, 2] = wrap_angle(cand[:, 2])
            new_cost = _cost(cand, arrays)
        if step is not None and np.isfinite(new_cost) and new_cost < cost:
            decrease = (cost - new_cost) / max(cost, 1e-300)
            X, cost = cand, new_cost
            history.append(cost)
            lam = max(lam / 10.0, 1e-12)
            if decrease < tol or cost < 1e-24:
                converged = True
            else:
                diag, upper, grad, _ = _normal_equations(X, arrays)
        else:
            lam *= 10.0
            if lam > 1e10:
                converged = True
    poses = [SE2Pose(*row) for row in X]
    return OptimizeResult(poses, float(cost), it, converged, history)


# -- pseudo-labels ----------------------------------------------------------


def pseudolabel_graph(
    frames: Sequence[FrameRecord],
    distributions: Sequence[PoseDistribution],
    odometry: Sequence[OdometryStep],
    ratio: float = 100.0,
    window_radius: int = 10,
) -> PoseGraph:
    """Measurement edges from each distribution, odometry edges weighted
    ``ratio`` times the typical measurement information."""
    if len(frames) != len(distributions) or len(odometry) != len(frames) - 1:
        raise ValueError("need one distribution per frame and one odometry step between frames")
    if not ratio > 0:
        raise ValueError("ratio must be positive")
    local = [gaussian_measurement(P, window_radius) for P in distributions]
    world = [measurement_to_world(fr.prior, m, c) for fr, (m, c) in zip(frames, local)]
    graph = PoseGraph([m for m, _ in world])
    for i, (mean, cov) in enumerate(world):
        graph.add_measurement(i, mean, np.linalg.inv(cov))
    # Patch frames are prior-aligned, hence close to the vehicle frame the
    # odometry lives in; their median covariance sets the odometry scale.
    typical = np.median(np.array([c for _, c in local]), axis=0)
    odo_info = ratio * np.linalg.inv(typical)
    odo_info = (odo_info + odo_info.T) / 2
    for i, step in enumerate(odometry):
        graph.add_odometry(i, i + 1, step.relative, odo_info)
    return graph


def pseudolabel(
    frames: Sequence[FrameRecord],
    distributions: Sequence[PoseDistribution],
    odometry: Sequence[OdometryStep],
    ratio: float = 100.0,
    window_radius: int = 10,
    max_iters: int = 100,
) -> list[SE2Pose]:
    graph = pseudolabel_graph(frames, distributions, odometry, ratio, window_radius)
    return optimize(graph, max_iters=max_iters).poses


# -- text dump --------------------------------------------------------------


def graph_to_text(graph: PoseGraph) -> str:
    f = fmt_number
    lines = [f"node {i} {f(p.x)} {f(p.y)} {f(p.yaw)}" for i, p in enumerate(graph.nodes)]
    for i, j, z, info in graph.odometry:
        vals = [z.x, z.y, z.yaw, *upper_triangle(info)]
        lines.append(f"odo {i} {j} " + " ".join(f(v) for v in vals))
    for i, z, info in graph.measurements:
        vals = [z.x, z.y, z.yaw, *upper_triangle(info)]
        lines.append(f"meas {i} " + " ".join(f(v) for v in vals))
    return "\n".join(lines) + "\n"


def write_graph(path, graph: PoseGraph) -> None:
    atomic_write(path, graph_to_text(graph))


def read_graph(path) -> PoseGraph:
    nodes: dict[int, SE2Pose] = {}
    odo, meas = [], []
    try:
        for row in read_rows(path):
            kind = row[0]
            if kind == "node" and len(row) == 5:
                nodes[int(row[1])] = SE2Pose(*map(float, row[2:]))
            elif kind == "odo" and len(row) == 12:
                v = [float(t) for t in row[3:]]
                odo.append((int(row[1]), int(row[2]), SE2Pose(*v[:3]), from_upper_triangle(v[3:])))
            elif kind == "meas" and len(row) == 11:
                v = [float(t) for t in row[2:]]
                meas.append((int(row[1]), SE2Pose(*v[:3]), from_upper_triangle(v[3:])))
            else:
                raise FormatError(f"{path}: bad graph line {' '.join(row)!r}")
        if sorted(nodes) != list(range(len(nodes))):
            raise FormatError(f"{path}: node ids must be 0..n-1")
        graph = PoseGraph([nodes[i] for i in range(len(nodes))])
        for e in odo:
            graph.add_odometry(*e)
        for e in meas:
            graph.add_measurement(*e)
    except FormatError:
        raise
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return graph


def mean_error(poses: Sequence[SE2Pose], truth: Sequence[SE2Pose]) -> float:
    return float(np.mean([math.hypot(p.x - t.x, p.y - t.y) for p, t in zip(poses, truth)]))
