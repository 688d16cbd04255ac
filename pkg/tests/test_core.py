import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from occslam.core import (
    DEFAULT_ODOM_SIGMA,
    Dataset,
    OdomIncrement,
    Pose2,
    ScanRecord,
    SolverConfig,
    Z_FREE,
    Z_OCC,
    anchor_poses,
    apply_increment,
    compose_increments,
    integrate_odometry,
    pose_compose_relative,
    rot,
    subsample_dataset,
    wrap_angle,
)
from occslam.objective import odometry_residual

finite = st.floats(-1e6, 1e6, allow_nan=False)
angles = st.floats(-50.0, 50.0, allow_nan=False)


def wrap_oracle(a):
    # repeatedly add/subtract 2 pi until in range
    while a > math.pi:
        a -= 2 * math.pi
    while a < -math.pi:
        a += 2 * math.pi
    return a


def scan(n=3, odom=None, gt=None):
    return ScanRecord(0.0, np.full(n, 2.0), -1.0, 0.5, 30.0, odom, gt)


class TestWrapAngle:
    def test_examples(self):
        assert wrap_angle(0.0) == 0.0
        assert wrap_angle(3 * math.pi / 2) == pytest.approx(-math.pi / 2, abs=1e-15)
        assert wrap_angle(-7 * math.pi / 3) == pytest.approx(wrap_oracle(-7 * math.pi / 3), abs=1e-12)
        assert wrap_angle(-7 * math.pi / 3) == pytest.approx(-math.pi / 3, abs=1e-12)

    @pytest.mark.parametrize("bad", [math.inf, -math.inf, math.nan])
    def test_non_finite(self, bad):
        with pytest.raises(ValueError):
            wrap_angle(bad)

    def test_array(self):
        a = np.array([0.0, 4.0, -4.0, 10.0])
        np.testing.assert_allclose(wrap_angle(a), [wrap_oracle(v) for v in a], atol=1e-12)

    @given(angles)
    def test_range_and_congruence(self, a):
        w = wrap_angle(a)
        assert -math.pi <= w <= math.pi
        k = (a - w) / (2 * math.pi)
        assert abs(k - round(k)) < 1e-9

    @given(angles)
    def test_idempotent(self, a):
        assert wrap_angle(wrap_angle(a)) == wrap_angle(a)


class TestPose:
    @given(angles)
    def test_rotation_orthonormal(self, th):
        R = Pose2(0, 0, th).R
        np.testing.assert_allclose(R @ R.T, np.eye(2), atol=1e-12)
        # convention: first row (cos, sin)
        assert R[0, 1] == pytest.approx(math.sin(wrap_angle(th)))

    def test_theta_stored_wrapped(self):
        assert Pose2(1, 2, 3 * math.pi / 2).theta == pytest.approx(-math.pi / 2)

    def test_rejects_nan(self):
        with pytest.raises(ValueError):
            Pose2(math.nan, 0, 0)

    def test_array_round_trip(self):
        p = Pose2(1.5, -2.0, 0.25)
        assert Pose2.from_array(p.as_array()) == p


class TestComposeRelative:
    def test_identity_rotation(self):
        dt, dth = pose_compose_relative(Pose2(0, 0, 0), Pose2(1, 2, 0.3))
        np.testing.assert_allclose(dt, [1, 2])
        assert dth == pytest.approx(0.3)

    def test_zero(self):
        p = Pose2(3, -1, 2.0)
        dt, dth = pose_compose_relative(p, p)
        np.testing.assert_allclose(dt, [0, 0], atol=1e-15)
        assert dth == 0.0

    def test_quarter_turn(self):
        prev, nxt = Pose2(1, 0, math.pi / 2), Pose2(1, 1, math.pi / 2)
        dt, dth = pose_compose_relative(prev, nxt)
        c, s = math.cos(math.pi / 2), math.sin(math.pi / 2)
        expected = np.array([[c, s], [-s, c]]) @ np.array([0.0, 1.0])
        np.testing.assert_allclose(dt, expected, atol=1e-15)
        res = odometry_residual(OdomIncrement(dt, dth), prev, nxt)
        np.testing.assert_allclose(res, 0.0, atol=1e-15)

    @given(finite, finite, angles, finite, finite, angles)
    def test_residual_zero(self, x0, y0, t0, x1, y1, t1):
        prev, nxt = Pose2(x0, y0, t0), Pose2(x1, y1, t1)
        dt, dth = pose_compose_relative(prev, nxt)
        res = odometry_residual(OdomIncrement(dt, dth), prev, nxt)
        scale = max(1.0, abs(x0), abs(y0), abs(x1), abs(y1))
        assert np.all(np.abs(res[:2]) <= 1e-15 * scale * 4)
        assert abs(res[2]) <= 1e-15 * 8

    @given(st.floats(-100, 100), st.floats(-100, 100), angles, st.floats(-5, 5), st.floats(-5, 5), angles)
    def test_apply_inverts(self, x, y, th, dx, dy, dth):
        prev = Pose2(x, y, th)
        nxt = apply_increment(prev, [dx, dy], dth)
        dt, d = pose_compose_relative(prev, nxt)
        np.testing.assert_allclose(dt, [dx, dy], atol=1e-9)
        assert abs(wrap_angle(d - dth)) < 1e-9


class TestOdomIncrement:
    def test_default_sigma(self):
        o = OdomIncrement([1, 0], 0.1)
        np.testing.assert_array_equal(o.sigma, DEFAULT_ODOM_SIGMA)
        np.testing.assert_allclose(np.diag(o.sigma), [0.04**2, 0.04**2, 0.003**2])

    def test_rejects_indefinite(self):
        with pytest.raises(ValueError, match="positive definite"):
            OdomIncrement([0, 0], 0, np.diag([1.0, 1.0, 0.0]))

    def test_rejects_asymmetric(self):
        s = np.eye(3)
        s[0, 1] = 0.5
        with pytest.raises(ValueError, match="symmetric"):
            OdomIncrement([0, 0], 0, s)

    def test_dtheta_wrapped(self):
        assert OdomIncrement([0, 0], 7.0).dtheta == pytest.approx(wrap_oracle(7.0))


class TestScanRecordAndDataset:
    def test_angles(self):
        r = scan(4)
        np.testing.assert_allclose(r.angles, [-1.0, -0.5, 0.0, 0.5])

    def test_sentinel(self):
        r = ScanRecord(0, [1.0, 31.0], 0, 0.1, 30.0)
        np.testing.assert_array_equal(r.no_return, [False, True])
        with pytest.raises(ValueError):
            ScanRecord(0, [1.0, 35.0], 0, 0.1, 30.0)

    @pytest.mark.parametrize("ranges", [[], [0.0], [-1.0], [math.inf]])
    def test_bad_ranges(self, ranges):
        with pytest.raises(ValueError):
            ScanRecord(0, ranges, 0, 0.1, 30.0)

    def test_odometry_on_first_record(self):
        with pytest.raises(ValueError, match="odometry on first record"):
            Dataset([scan(odom=OdomIncrement([1, 0], 0)), scan(odom=OdomIncrement([1, 0], 0))])

    def test_needs_two(self):
        with pytest.raises(ValueError):
            Dataset([scan()])

    def test_mixed_odometry(self):
        with pytest.raises(ValueError):
            Dataset([scan(), scan(odom=OdomIncrement([1, 0], 0)), scan()])

    def test_integrate(self):
        ds = Dataset([scan(), scan(odom=OdomIncrement([1, 0], math.pi / 2)), scan(odom=OdomIncrement([1, 0], 0))])
        poses = integrate_odometry(ds)
        np.testing.assert_allclose(poses[2].as_array(), [1, 1, math.pi / 2], atol=1e-12)


class TestConfig:
    def test_defaults(self):
        c = SolverConfig()
        assert (c.w_Z, c.w_O, c.w_S_initial, c.tau_S, c.d_S) == (1, 1, 0.1, 18, 10)
        assert (c.tau_k, c.tau_Delta, c.w_S_floor, c.map_margin, c.step_control) == (60, 1e-8, 1e-4, 1.0, True)

    @pytest.mark.parametrize("kw", [{"resolution_s": 0}, {"tau_S": 0}, {"tau_k": 0}, {"tau_Delta": 0},
                                    {"d_S": 1.0}, {"gradient_mode": "bogus"}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            SolverConfig(**kw)


def test_evidence_constants():
    assert Z_OCC == pytest.approx(0.8473, abs=5e-5)
    assert Z_FREE == pytest.approx(-0.4055, abs=5e-5)


@given(st.lists(st.tuples(st.floats(-2, 2), st.floats(-2, 2), st.floats(-1, 1)), min_size=2, max_size=6))
def test_compose_increments_matches_chained_poses(steps):
    incs = [OdomIncrement([a, b], c) for a, b, c in steps]
    total = incs[0]
    p = apply_increment(Pose2(0, 0, 0), incs[0].dt, incs[0].dtheta)
    for inc in incs[1:]:
        total = compose_increments(total, inc)
        p = apply_increment(p, inc.dt, inc.dtheta)
    q = apply_increment(Pose2(0, 0, 0), total.dt, total.dtheta)
    np.testing.assert_allclose(q.t, p.t, atol=1e-9)
    assert abs(wrap_angle(q.theta - p.theta)) < 1e-9
    assert np.linalg.eigvalsh(total.sigma).min() > 0


def test_compose_increments_covariance_against_monte_carlo():
    rng = np.random.default_rng(3)
    a = OdomIncrement([1.0, 0.2], 0.4, np.diag([0.01, 0.02, 0.005]))
    b = OdomIncrement([0.5, -0.3], -0.2, np.diag([0.015, 0.01, 0.004]))
    c = compose_increments(a, b)
    va = rng.multivariate_normal(a.as_array(), a.sigma, 200_000)
    vb = rng.multivariate_normal(b.as_array(), b.sigma, 200_000)
    th = va[:, 2]
    # t = ta + R(tha)^T tb
    t = va[:, :2] + np.column_stack([np.cos(th) * vb[:, 0] - np.sin(th) * vb[:, 1],
                                     np.sin(th) * vb[:, 0] + np.cos(th) * vb[:, 1]])
    emp = np.cov(np.column_stack([t, th + vb[:, 2]]).T)
    np.testing.assert_allclose(c.sigma, emp, atol=2e-3)


def test_subsample_half_rate():
    from occslam.simulator import NoiseSpec, SensorSpec, generate_dataset, make_scenario

    world, traj = make_scenario("room", 21)
    ds = generate_dataset(world, traj, SensorSpec(n_beams=9), NoiseSpec(0.0, 0.0, 1))
    half = subsample_dataset(ds, 0.5)
    assert len(half) == 11
    assert half.records[1] == ds.records[2].replace(odom=half.records[1].odom)
    poses = integrate_odometry(half)
    for p, g in zip(poses, half.gt_poses()):
        np.testing.assert_allclose(p.t, g.t, atol=1e-9)
    assert half.meta["subsample_rate"] == "0.5"
    # covariance grows when two increments are chained
    assert np.all(np.diag(half.records[1].odom.sigma) > np.diag(ds.records[1].odom.sigma))


def test_anchor_poses():
    poses = [Pose2(1, 2, 0.5), Pose2(2, 2, 0.7)]
    a = anchor_poses(poses)
    assert a[0] == Pose2(0, 0, 0)
    np.testing.assert_allclose(a[1].t, rot(0.5) @ np.array([1.0, 0.0]))
