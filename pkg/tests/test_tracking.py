import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from aeroloc.geometry import SE2Pose, compose_many
from aeroloc.matcher import HypothesisGrid, PoseDistribution, gaussian_target, to_distribution
from aeroloc.tracking import (
    COVARIANCE_FLOOR,
    KalmanState,
    NumericalError,
    OdometryStep,
    align_3dof,
    gaussian_measurement,
    kf_predict,
    kf_update,
    mean_position_error,
    moments,
    track,
)

GRID = HypothesisGrid(3.0, 0.5, (-0.04, -0.02, 0.0, 0.02, 0.04))


def delta(a, r, c, grid=GRID):
    p = np.zeros(grid.shape)
    p[a, r, c] = 1.0
    return PoseDistribution(p, grid, 0.0)


class TestMoments:
    def test_delta(self):
        P = delta(3, 4, 8)
        s = moments(P)
        assert np.abs(s.covariance).max() < 1e-15 and s.generalized_variance == 0.0
        assert s.mean.x == pytest.approx(s.mode.x) and s.mean.y == pytest.approx(s.mode.y)
        assert s.mean.yaw == pytest.approx(s.mode.yaw)

    @pytest.mark.parametrize("m", [1, 2, 3])
    def test_discrete_uniform_variance(self, m):
        p = np.zeros(GRID.shape)
        c = GRID.cells
        p[2, c - m:c + m + 1, c - m:c + m + 1] = 1.0
        P = PoseDistribution(p / p.sum(), GRID, 0.0)
        cov = moments(P).covariance
        expect = GRID.resolution ** 2 * m * (m + 1) / 3
        assert cov[0, 0] == pytest.approx(expect, rel=1e-12)
        assert cov[1, 1] == pytest.approx(expect, rel=1e-12)
        assert abs(cov[0, 1]) < 1e-15

    def test_mixture_spreads(self):
        p = np.zeros(GRID.shape)
        p[2, 1, 2] = p[2, 10, 9] = 0.5
        s = moments(PoseDistribution(p, GRID, 0.0))
        assert s.generalized_variance > 0 or np.linalg.matrix_rank(s.covariance[:2, :2]) == 1
        assert np.trace(s.covariance[:2, :2]) > 1.0

    def test_psd_and_symmetric(self):
        rng = np.random.default_rng(0)
        P = to_distribution(rng.normal(size=GRID.shape) * 2, GRID)
        cov = moments(P).covariance
        assert np.allclose(cov, cov.T, atol=1e-12)
        assert np.linalg.eigvalsh(cov).min() >= -1e-9

    def test_lattice_rotation(self):
        rng = np.random.default_rng(1)
        P = to_distribution(rng.normal(size=GRID.shape) * 2, GRID)
        # rotating the translation plane by +90 degrees maps (x, y) -> (-y, x)
        rot = np.rot90(P.probs, k=1, axes=(2, 1))
        Q = PoseDistribution(rot, GRID, 0.0)
        R = np.array([[0.0, -1.0], [1.0, 0.0]])
        expect = R @ moments(P).covariance[:2, :2] @ R.T
        np.testing.assert_allclose(moments(Q).covariance[:2, :2], expect, atol=1e-12)


class TestMeasurement:
    def test_delta_is_floored(self):
        mean, cov = gaussian_measurement(delta(1, 5, 6))
        mode = GRID.hypothesis(1, 5, 6)
        assert (mean.x, mean.y, mean.yaw) == pytest.approx((mode.x, mode.y, mode.yaw))
        np.testing.assert_allclose(cov, COVARIANCE_FLOOR, atol=1e-15)

    def test_gaussian_centre(self):
        gt = SE2Pose(0.8, -0.35, 0.01)
        T = gaussian_target(gt, GRID, 0.6, 0.03)
        mean, _ = gaussian_measurement(T)
        assert abs(mean.x - gt.x) <= GRID.resolution / 2 and abs(mean.y - gt.y) <= GRID.resolution / 2

    def test_full_window_equals_moments(self):
        P = to_distribution(np.random.default_rng(2).normal(size=GRID.shape), GRID)
        mean, cov = gaussian_measurement(P, window_radius=GRID.size, floor=np.zeros((3, 3)))
        s = moments(P)
        np.testing.assert_allclose(cov, s.covariance, atol=1e-14)
        assert mean.x == pytest.approx(s.mean.x, abs=1e-14)

    def test_window_cuts_far_mode(self):
        p = np.zeros(GRID.shape)
        p[2, 6, 6] = 0.7
        p[2, 0, 6] = 0.3
        mean, cov = gaussian_measurement(PoseDistribution(p, GRID, 0.0), window_radius=2)
        assert mean.y == pytest.approx(0.0) and cov[1, 1] == pytest.approx(COVARIANCE_FLOOR[1, 1])


def state(x=0.0, y=0.0, yaw=0.0, s=0.1):
    return KalmanState(SE2Pose(x, y, yaw), np.eye(3) * s)


class TestPredict:
    def test_identity(self):
        st0 = state(1, 2, 0.3)
        out = kf_predict(st0, OdometryStep(SE2Pose(), np.zeros((3, 3))))
        assert out.mean == st0.mean
        np.testing.assert_allclose(out.covariance, st0.covariance, atol=1e-15)

    def test_chain(self):
        rng = np.random.default_rng(3)
        steps = [SE2Pose(*rng.uniform(-1, 1, 2), rng.uniform(-0.3, 0.3)) for _ in range(30)]
        st0 = state(0.5, -1.0, 1.0)
        s = st0
        for u in steps:
            s = kf_predict(s, OdometryStep(u, np.zeros((3, 3))))
        ref = compose_many([st0.mean, *steps])
        assert (s.mean.x, s.mean.y, s.mean.yaw) == pytest.approx((ref.x, ref.y, ref.yaw), abs=1e-12)

    @settings(max_examples=50)
    @given(st.floats(-2, 2), st.floats(-2, 2), st.floats(-3, 3), st.floats(0, 0.5))
    def test_trace_grows(self, ux, uy, uyaw, n):
        s = state(0.2, 0.1, 0.4, 0.05)
        out = kf_predict(s, OdometryStep(SE2Pose(ux, uy, uyaw), np.eye(3) * n))
        assert np.trace(out.covariance) >= np.trace(s.covariance) - 1e-12


class TestUpdate:
    def test_consistent_measurement(self):
        s = state(1.0, 2.0, 0.5)
        out = kf_update(s, (s.mean, np.eye(3) * 0.2))
        assert out.mean == s.mean
        assert np.trace(out.covariance) < np.trace(s.covariance)

    def test_uninformative_measurement(self):
        s = state(1.0, 2.0, 0.5)
        out = kf_update(s, (SE2Pose(5.0, -3.0, 2.0), np.eye(3) * 1e12))
        assert math.hypot(out.mean.x - 1.0, out.mean.y - 2.0) < 1e-6

    def test_wraps_innovation(self):
        s = KalmanState(SE2Pose(0, 0, math.pi - 0.01), np.eye(3))
        out = kf_update(s, (SE2Pose(0, 0, -math.pi + 0.01), np.eye(3)))
        assert abs(abs(out.mean.yaw) - math.pi) < 0.02

    def test_singular(self):
        s = KalmanState(SE2Pose(), np.zeros((3, 3)))
        with pytest.raises(NumericalError):
            kf_update(s, (SE2Pose(), np.zeros((3, 3))))

    def test_static_pose_batch_oracle(self):
        """Repeated iid measurements reproduce the batch least-squares mean."""
        rng = np.random.default_rng(4)
        truth = np.array([2.0, -1.0, 0.3])
        R = np.diag([0.5, 0.5, 0.01])
        zs = truth + rng.multivariate_normal(np.zeros(3), R, size=100)
        s = KalmanState(SE2Pose(*zs[0]), R)
        errors = []
        for n in range(2, 101):
            s = kf_update(s, (SE2Pose(*zs[n - 1]), R))
            batch = zs[:n].mean(axis=0)
            assert np.abs(s.mean.as_array() - batch).max() < 1e-9
            np.testing.assert_allclose(s.covariance, R / n, rtol=1e-9)
            errors.append(np.hypot(*(s.mean.as_array() - truth)[:2]))
        assert np.mean(errors[-20:]) < np.mean(errors[:5])

    def test_two_measurements_match_information_form(self):
        rng = np.random.default_rng(5)
        P0 = np.diag([1.0, 2.0, 0.1])
        x0 = np.array([0.1, 0.2, 0.05])
        A = rng.normal(size=(3, 3))
        R1 = A @ A.T * 0.1 + np.eye(3) * 0.05
        R2 = np.diag([0.3, 0.1, 0.02])
        z1 = np.array([0.3, -0.1, 0.1])
        z2 = np.array([0.0, 0.4, 0.02])
        s = KalmanState(SE2Pose(*x0), P0)
        ab = kf_update(kf_update(s, (SE2Pose(*z1), R1)), (SE2Pose(*z2), R2))
        ba = kf_update(kf_update(s, (SE2Pose(*z2), R2)), (SE2Pose(*z1), R1))
        info = np.linalg.inv(P0) + np.linalg.inv(R1) + np.linalg.inv(R2)
        rhs = np.linalg.solve(P0, x0) + np.linalg.solve(R1, z1) + np.linalg.solve(R2, z2)
        batch = np.linalg.solve(info, rhs)
        for out in (ab, ba):
            assert np.abs(out.mean.as_array() - batch).max() < 1e-6
            np.testing.assert_allclose(out.covariance, np.linalg.inv(info), atol=1e-6)


def test_track_lengths():
    meas = [(SE2Pose(i, 0, 0), np.eye(3)) for i in range(4)]
    odo = [OdometryStep(SE2Pose(1, 0, 0), np.eye(3) * 0.01)] * 3
    assert len(track(meas, odo)) == 4
    with pytest.raises(ValueError):
        track(meas, odo[:2])


class TestAlign:
    def traj(self, seed=6, n=40):
        rng = np.random.default_rng(seed)
        poses = [SE2Pose()]
        for _ in range(n - 1):
            poses.append(poses[-1] @ SE2Pose(1.0, 0.0, rng.normal(0, 0.1)))
        return poses

    def test_identity(self):
        gt = self.traj()
        T, ape = align_3dof(gt, gt)
        assert abs(T.x) < 1e-9 and abs(T.y) < 1e-9 and abs(T.yaw) < 1e-12 and ape < 1e-9

    def test_known_transform(self):
        gt = self.traj()
        A = SE2Pose(3.0, -2.0, 0.7)
        T, ape = align_3dof([A @ p for p in gt], gt)
        inv = A.inverse()
        assert (T.x, T.y, T.yaw) == pytest.approx((inv.x, inv.y, inv.yaw), abs=1e-9)
        assert ape < 1e-9

    def test_grid_search_oracle(self):
        gt = self.traj(n=20)
        rng = np.random.default_rng(7)
        off = SE2Pose(0.4, -0.3, 0.05)
        pred = [off @ SE2Pose(p.x + rng.normal(0, 0.3), p.y + rng.normal(0, 0.3), p.yaw) for p in gt]
        _, ape = align_3dof(pred, gt)
        P = np.array([[p.x, p.y] for p in pred])
        G = np.array([[p.x, p.y] for p in gt])
        inv = off.inverse()
        best = np.inf
        # coarse grid around the known offset, then a fine one around its best cell
        centre = (inv.x, inv.y, inv.yaw)
        for span, n in ((0.4, 21), (0.02, 21)):
            cand = None
            for th in np.linspace(centre[2] - span / 4, centre[2] + span / 4, n):
                c, s = math.cos(th), math.sin(th)
                rotated = P @ np.array([[c, s], [-s, c]])
                for tx in np.linspace(centre[0] - span, centre[0] + span, n):
                    for ty in np.linspace(centre[1] - span, centre[1] + span, n):
                        e = np.mean(np.hypot(rotated[:, 0] + tx - G[:, 0], rotated[:, 1] + ty - G[:, 1]))
                        if e < best:
                            best, cand = e, (tx, ty, th)
            centre = cand
        assert abs(ape - best) <= 1e-3

    def test_never_worse_than_unaligned(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            gt = self.traj(seed=int(rng.integers(1000)), n=15)
            pred = [SE2Pose(p.x + rng.normal(0, 1), p.y + rng.normal(0, 1), p.yaw) for p in gt]
            assert align_3dof(pred, gt)[1] <= mean_position_error(pred, gt) + 1e-12

    def test_degenerate(self):
        pts = [SE2Pose(1.0, 1.0, 0.0)] * 3
        T, ape = align_3dof(pts, [SE2Pose(2.0, 0.0, 0.0)] * 3)
        assert T.yaw == 0.0 and ape == pytest.approx(0.0)

    def test_preconditions(self):
        with pytest.raises(ValueError):
            align_3dof([SE2Pose()], [SE2Pose()])
        with pytest.raises(ValueError):
            align_3dof([SE2Pose()] * 2, [SE2Pose()] * 3)
