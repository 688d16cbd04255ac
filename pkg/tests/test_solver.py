import numpy as np
import pytest
import scipy.sparse as sp

from occslam import solver as solver_mod
from occslam.core import SolverConfig, integrate_odometry
from occslam.grid import project_samples, stencil
from occslam.objective import StateLayout, Weights, assemble_system, build_smoothing_matrix
from occslam.sampling import pack_samples, sample_dataset
from occslam.simulator import NoiseSpec, SensorSpec, generate_dataset, make_scenario
from occslam.solver import (
    LinearSolveError,
    SolverError,
    extract_covariance,
    smoothing_weight,
    solve,
    solve_linear,
)


@pytest.fixture(scope="module")
def small_dataset():
    world, traj = make_scenario("room", 20)
    return generate_dataset(world, traj, SensorSpec(n_beams=181), NoiseSpec(seed=2))


@pytest.fixture(scope="module")
def small_run(small_dataset):
    cfg = SolverConfig(resolution_s=0.25, tau_k=25, tau_S=8)
    calls = []
    out = solve(small_dataset, integrate_odometry(small_dataset), cfg, lambda *a: calls.append(a))
    return cfg, out, calls


def random_spd(n, seed):
    rng = np.random.default_rng(seed)
    B = rng.normal(size=(n, n))
    return B @ B.T + n * np.eye(n)


class TestSchedule:
    def test_values(self):
        cfg = SolverConfig()
        assert smoothing_weight(1, cfg) == 0.1
        assert smoothing_weight(17, cfg) == 0.1
        assert smoothing_weight(18, cfg) == pytest.approx(0.01)
        assert smoothing_weight(36, cfg) == pytest.approx(0.001)
        assert smoothing_weight(54, cfg) == pytest.approx(1e-4)
        assert smoothing_weight(500, cfg) == 1e-4  # floor


class TestLinearSolve:
    def test_identity(self):
        b = np.arange(5.0)
        np.testing.assert_allclose(solve_linear(sp.identity(5), b), b)

    def test_random_spd_against_dense(self):
        H = random_spd(50, 0)
        b = np.random.default_rng(1).normal(size=50)
        x = solve_linear(sp.csr_matrix(H), b)
        np.testing.assert_allclose(x, np.linalg.solve(H, b), rtol=1e-9, atol=1e-12)
        assert np.linalg.norm(H @ x - b) / np.linalg.norm(b) < 1e-10

    def test_singular_without_regularization(self):
        with pytest.raises(LinearSolveError):
            solve_linear(sp.csr_matrix((4, 4)), np.ones(4))

    def test_regularization_retry(self):
        # rank-deficient PSD: fails at lambda=1e-20 and succeeds after tenfold increases
        H = sp.csr_matrix(np.diag([1.0, 2.0, 0.0]))
        x = solve_linear(H, np.array([1.0, 2.0, 0.0]), tikhonov=1e-20)
        np.testing.assert_allclose(x[:2], [1.0, 1.0], rtol=1e-6)

    def test_indefinite_exhausts_retries(self):
        H = sp.csr_matrix(np.diag([1.0, -1.0]))
        with pytest.raises(LinearSolveError):
            solve_linear(H, np.ones(2), tikhonov=1e-8)

    def test_rejects_asymmetric(self):
        with pytest.raises(ValueError):
            solve_linear(sp.csr_matrix(np.array([[2.0, 1.0], [0.0, 2.0]])), np.ones(2))


class TestCovariance:
    def test_diagonal(self):
        d = np.array([1.0, 2.0, 4.0, 5.0, 8.0])
        cov = extract_covariance(sp.diags(d), StateLayout(1, 2))
        np.testing.assert_allclose(np.diag(cov.pose_marginals[0]), 1 / d[:3])
        np.testing.assert_allclose(cov.node_variances, 1 / d[3:])

    @pytest.mark.parametrize("chunk", [3, 256])
    def test_dense_oracle(self, chunk):
        H = random_spd(10, 4)
        inv = np.linalg.inv(H)
        cov = extract_covariance(sp.csr_matrix(H), StateLayout(2, 4), chunk=chunk)
        np.testing.assert_allclose(cov.node_variances, np.diag(inv)[6:], rtol=1e-9)
        np.testing.assert_allclose(cov.pose_marginals[1], inv[3:6, 3:6], rtol=1e-9)
        for blk in cov.pose_marginals:
            np.testing.assert_array_equal(blk, blk.T)

    def test_indefinite_reported(self):
        with pytest.raises(LinearSolveError):
            extract_covariance(sp.csr_matrix(np.diag([1.0, -1.0, 1.0, 1.0])), StateLayout(1, 1))

    def test_more_weight_less_variance(self, toy):
        A = build_smoothing_matrix(toy.geom)
        var = []
        for wz in (1.0, 2.0):
            ns = assemble_system(toy.pose_arr, toy.map, toy.hitmap, toy.samples, toy.odoms, A, Weights(wz, 1.0, 0.1))
            H = ns.H + 1e-8 * sp.identity(ns.layout.dim)
            c = extract_covariance(H, ns.layout, toy.geom)
            var.append(np.r_[np.concatenate([np.diag(b) for b in c.pose_marginals]), c.node_variances.ravel()])
        assert np.all(var[1] <= var[0] * (1 + 1e-12))
        assert np.all(var[0] >= 0)


class TestSolve:
    def test_report_shape(self, small_run):
        cfg, (poses, gmap, rep), calls = small_run
        assert len(rep.cost_history) == rep.iterations + 1
        assert len(rep.w_S_history) == rep.iterations + 1
        assert len(calls) == rep.iterations
        assert rep.final_cost == rep.cost_history[-1]

    def test_gauge_fixed(self, small_run):
        _, (poses, _, _), _ = small_run
        assert poses[0].as_array().tolist() == [0.0, 0.0, 0.0]

    def test_schedule_recorded(self, small_run):
        cfg, (_, _, rep), calls = small_run
        for k, _, _, w_S, _ in calls:
            assert w_S == smoothing_weight(k, cfg)

    def test_monotone_within_windows(self, small_run):
        _, (_, _, rep), _ = small_run
        h, w = rep.cost_history, rep.w_S_history
        for k in range(1, len(h)):
            if w[k] == w[k - 1]:
                assert h[k] <= h[k - 1] * (1 + 1e-12)

    def test_hitmap_refresh_conserves(self, small_run, small_dataset):
        cfg, (poses, gmap, rep), _ = small_run
        ss = pack_samples(sample_dataset(small_dataset, cfg.resolution_s))
        P = project_samples(ss, poses, gmap.geom)
        inside = stencil(P, gmap.geom).inside
        assert rep.hitmap.total == pytest.approx(inside.sum(), rel=1e-9)
        assert rep.hitmap.skipped == (~inside).sum()

    def test_improves_on_odometry(self, small_run, small_dataset):
        from occslam.evaluation import pose_errors

        _, (poses, _, _), _ = small_run
        gt = small_dataset.gt_poses()
        assert pose_errors(poses, gt).mae_translation < pose_errors(integrate_odometry(small_dataset), gt).mae_translation

    def test_deterministic(self, small_dataset):
        cfg = SolverConfig(resolution_s=0.3, tau_k=4)
        init = integrate_odometry(small_dataset)
        a = solve(small_dataset, init, cfg)
        b = solve(small_dataset, init, cfg)
        assert [p.as_array().tolist() for p in a[0]] == [p.as_array().tolist() for p in b[0]]
        np.testing.assert_array_equal(a[1].values, b[1].values)
        assert a[2].cost_history == b[2].cost_history

    def test_reanchors_initial_guess(self, small_dataset):
        from occslam.core import Pose2

        cfg = SolverConfig(resolution_s=0.3, tau_k=2)
        init = integrate_odometry(small_dataset)
        shifted = integrate_odometry(small_dataset, Pose2(3.0, -2.0, 0.7))
        a, b = solve(small_dataset, init, cfg), solve(small_dataset, shifted, cfg)
        np.testing.assert_allclose([p.as_array() for p in a[0]], [p.as_array() for p in b[0]], atol=1e-6)

    def test_covariance_optional(self, small_dataset):
        cfg = SolverConfig(resolution_s=0.4, tau_k=2, compute_covariance=True)
        _, gmap, rep = solve(small_dataset, integrate_odometry(small_dataset), cfg)
        cov = rep.covariance
        assert cov.node_variances.shape == gmap.geom.shape
        assert np.all(cov.node_variances >= 0)
        assert cov.pose_marginals.shape == (len(small_dataset) - 1, 3, 3)

    def test_wrong_length(self, small_dataset):
        with pytest.raises(ValueError):
            solve(small_dataset, integrate_odometry(small_dataset)[:-1])

    def test_linear_failure_aborts(self, small_dataset, monkeypatch):
        def boom(*a, **k):
            raise LinearSolveError("not positive definite")

        monkeypatch.setattr(solver_mod, "solve_linear", boom)
        with pytest.raises(SolverError):
            solve(small_dataset, integrate_odometry(small_dataset), SolverConfig(resolution_s=0.4, tau_k=2))

    def test_discrete_map_runs(self, small_dataset):
        cfg = SolverConfig(resolution_s=0.3, tau_k=3, continuous_map=False)
        poses, gmap, rep = solve(small_dataset, integrate_odometry(small_dataset), cfg)
        assert rep.iterations >= 1
        # one-hot scatter: every in-bounds sample lands whole on one node
        assert np.allclose(rep.hitmap.counts, np.round(rep.hitmap.counts))


class TestStallFallback:
    def test_block_step_solves_subsystem(self):
        from types import SimpleNamespace

        H = random_spd(9, 4)
        rhs = np.random.default_rng(5).normal(size=9)
        part = slice(3, 9)
        delta = solver_mod._block_step(SimpleNamespace(H=sp.csr_matrix(H), rhs=rhs), part, 0.0)
        assert np.all(delta[:3] == 0)
        np.testing.assert_allclose(delta[part], np.linalg.solve(H[3:, 3:], rhs[3:]), rtol=1e-10)

    def test_unknown_mode_rejected(self):
        with pytest.raises(ValueError):
            SolverConfig(stall_fallback="retry")

    @pytest.mark.parametrize("mode", ["block", "anneal"])
    def test_modes_descend(self, small_dataset, mode):
        cfg = SolverConfig(resolution_s=0.3, tau_k=12, tau_S=4, stall_fallback=mode)
        _, _, rep = solve(small_dataset, integrate_odometry(small_dataset), cfg)
        h, w = rep.cost_history, rep.w_S_history
        for k in range(1, len(h)):
            if w[k] == w[k - 1]:
                assert h[k] <= h[k - 1] * (1 + 1e-12)
