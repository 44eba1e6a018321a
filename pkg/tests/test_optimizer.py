import math

import numpy as np
import pytest

from t1pilot.decay_model import WeightedSequence, cardiac_phantom_config, generate_phantom, render_sequence
from t1pilot.optimizer import (EmptyFitError, NonFiniteLossError, OptimRun, ScheduleConfig, StageConfig,
                               control_point_gradient, decay_loss, evaluate_objective, initial_run,
                               kinematic_penalty, recon_loss, run_schedule, run_stage, support_mask)
from t1pilot.sampling import ReconConfig
from t1pilot.trajectory import (KinematicLimits, Trajectory, cartesian_trajectory, feasibility_report,
                                golden_angle_init, radial_scheme)

L = KinematicLimits()
TIMES3 = (100.0, 900.0, 2500.0)
CG = ReconConfig(tikhonov_lambda=2.0, solver="cholesky")


def _seq(n=16, seed=0, times=TIMES3):
    return render_sequence(generate_phantom(cardiac_phantom_config(n, n, seed)), times)


def _cp_fd(f, traj, c, s, idx, h):
    """Central difference of ``f`` wrt one control coordinate of frame/shot (c, s)."""
    vals = []
    for sign in (1, -1):
        cp = np.array(traj.control_points)
        cp[c, s][idx] += sign * h
        vals.append(f(Trajectory.from_control_points(cp, traj.m_points, None)))
    return (vals[0] - vals[1]) / (2 * h)


class TestReconLoss:
    def test_full_cartesian_adjoint_is_exact(self):
        seq = _seq()
        traj = cartesian_trajectory(16, 16, seq.n_frames)
        cfg = ReconConfig(method="adjoint-dcf", dcf=False)
        assert recon_loss(traj, seq, cfg) < 1e-6

    def test_zero_sequence_leaves_penalty_only(self):
        zero = WeightedSequence(np.zeros((3, 16, 16)), TIMES3)
        cp = np.zeros((3, 2, 5, 2))
        cp[..., 0] = np.linspace(-0.4, 0.4, 5)     # 0.05 per sample, above v_max
        traj = Trajectory.from_control_points(cp, 17, None)
        pen = kinematic_penalty(traj.samples, L, 1.0)[0]
        assert pen > 0
        assert recon_loss(traj, zero, CG, L, 1.0) == pytest.approx(pen, rel=1e-12)

    def test_non_negative(self):
        rng = np.random.default_rng(0)
        for _ in range(3):
            traj = golden_angle_init(2, 17, 3, 5, L)
            seq = WeightedSequence(rng.normal(size=(3, 16, 16)), TIMES3)
            assert recon_loss(traj, seq, CG) >= 0


class TestDecayLoss:
    def test_full_sampling_near_zero(self):
        seq = _seq(seed=1)
        traj = cartesian_trajectory(16, 16, seq.n_frames)
        assert decay_loss(traj, seq, ReconConfig(method="adjoint-dcf", dcf=False)) < 1e-4

    def test_single_point_worse_than_full(self):
        seq = _seq(seed=1)
        cfg = ReconConfig(method="adjoint-dcf", dcf=False)
        full = decay_loss(cartesian_trajectory(16, 16, 3), seq, cfg)
        point = Trajectory(np.zeros((3, 1, 1, 2)))
        assert decay_loss(point, seq, cfg) > full

    @pytest.mark.parametrize("seed", [2, 3, 4])
    def test_monotone_in_information(self, seed):
        seq = _seq(seed=seed)
        cfg = ReconConfig(method="adjoint-dcf", dcf=False)
        full = decay_loss(cartesian_trajectory(16, 16, 3), seq, cfg)
        under = decay_loss(radial_scheme(4, 17, 3), seq, CG)
        assert full <= under

    def test_non_negative(self):
        assert decay_loss(golden_angle_init(2, 17, 3, 5, L), _seq(seed=5), CG) >= 0

    def test_empty_fit_raises(self):
        seq = _seq()
        with pytest.raises(EmptyFitError):
            decay_loss(golden_angle_init(2, 17, 3, 5, L), seq, CG, masks=[np.zeros((16, 16), bool)])


class TestGradients:
    def test_recon_control_point_gradient(self):
        seq = _seq(seed=6)
        traj = golden_angle_init(2, 65, 3, 5, L)
        _, g, _ = evaluate_objective(traj.samples, seq, CG, "recon")
        gcp = control_point_gradient(traj, g)
        # 65-point spokes are kinematically feasible, so samples are exactly the spline of the control points
        assert feasibility_report(traj, L)["n_violations"] == 0
        # the centre control point of a symmetric spoke has a vanishing gradient; probe off-centre ones
        f = lambda t: evaluate_objective(t.samples, seq, CG, "recon", need_grad=False)[0]
        for c, s, idx in [(0, 0, (1, 1)), (1, 1, (3, 1)), (2, 0, (1, 0))]:
            fd = _cp_fd(f, traj, c, s, idx, 1e-6)
            assert fd == pytest.approx(gcp[c, s][idx], rel=1e-4)

    def test_decay_control_point_gradient(self):
        # 16x16, 2 shots; three frames is the smallest count a three-parameter fit accepts
        seq = _seq(seed=7)
        traj = golden_angle_init(2, 65, 3, 5, L)
        _, g, _ = evaluate_objective(traj.samples, seq, CG, "decay")
        gcp = control_point_gradient(traj, g)
        f = lambda t: evaluate_objective(t.samples, seq, CG, "decay", need_grad=False)[0]
        for c, s, idx in [(0, 0, (1, 1)), (1, 1, (3, 0)), (2, 1, (3, 1))]:
            fd = _cp_fd(f, traj, c, s, idx, 1e-6)
            assert fd == pytest.approx(gcp[c, s][idx], rel=1e-3)

    def test_lambda_gradient(self):
        seq = _seq(seed=8)
        traj = golden_angle_init(2, 17, 3, 5, L)
        _, _, gl = evaluate_objective(traj.samples, seq, CG, "decay")
        h = 1e-4
        up = evaluate_objective(traj.samples, seq, ReconConfig(tikhonov_lambda=2.0 + h, solver="cholesky"),
                                "decay", need_grad=False)[0]
        dn = evaluate_objective(traj.samples, seq, ReconConfig(tikhonov_lambda=2.0 - h, solver="cholesky"),
                                "decay", need_grad=False)[0]
        assert (up - dn) / (2 * h) == pytest.approx(gl, rel=1e-3)

    def test_penalty_gradient(self):
        rng = np.random.default_rng(9)
        raw = np.cumsum(rng.normal(scale=0.05, size=(2, 12, 2)), axis=-2)
        _, g = kinematic_penalty(raw, L, 3.0)
        h = 1e-7
        for idx in [(0, 3, 0), (1, 7, 1), (0, 0, 1)]:
            p, q = raw.copy(), raw.copy()
            p[idx] += h
            q[idx] -= h
            fd = (kinematic_penalty(p, L, 3.0)[0] - kinematic_penalty(q, L, 3.0)[0]) / (2 * h)
            assert fd == pytest.approx(g[idx], rel=1e-5)


def _run(mode="full", frames=3, shared=False):
    traj = golden_angle_init(2, 17, frames, 5, L, shared=shared)
    return OptimRun(traj, CG, L, frozen=mode == "fixed")


class TestRunStage:
    def test_zero_learning_rate_keeps_trajectory(self):
        run = _run()
        out = run_stage(run, [_seq()], StageConfig("recon_pretrain", 3, learning_rate=0.0))
        assert np.array_equal(out.trajectory.samples, run.trajectory.samples)
        assert len(out.loss_history) == 3

    def test_deterministic(self):
        st = StageConfig("decay", 4, learning_rate=1e-2, batch_size=1, seed=3)
        data = [_seq(seed=1), _seq(seed=2)]
        a = run_stage(_run(), data, st, "decay")
        b = run_stage(_run(), data, st, "decay")
        assert a.loss_history == b.loss_history
        assert np.array_equal(a.trajectory.samples, b.trajectory.samples)

    def test_descent_over_100_iterations(self):
        rng = np.random.default_rng(10)
        base = radial_scheme(2, 65, 3)
        cp = np.linspace(base.samples[..., 0, :], base.samples[..., -1, :], 5, axis=-2)
        cp = np.clip(cp + rng.normal(scale=0.02, size=cp.shape), -0.5, 0.5)
        run = OptimRun(Trajectory.from_control_points(cp, 65, L), CG, L)
        out = run_stage(run, [_seq(seed=11)], StageConfig("recon_pretrain", 100, learning_rate=1e-3))
        hist = [h["loss"] for h in out.loss_history]
        assert len(hist) == 100
        assert hist[-1] <= hist[0]

    def test_feasible_after_every_step(self):
        run = _run()
        seq = [_seq(seed=12)]
        for _ in range(5):
            run = run_stage(run, seq, StageConfig("recon_pretrain", 1, learning_rate=5e-2))
            assert feasibility_report(run.trajectory, L)["n_violations"] == 0

    def test_frozen_refuses_updates(self):
        run = _run()
        run.frozen = True
        with pytest.raises(RuntimeError):
            run_stage(run, [_seq()], StageConfig("recon_pretrain", 1))

    def test_per_sample_keeps_trajectory_bitwise(self):
        run = _run()
        data = [_seq(seed=13), _seq(seed=14)]
        out = run_stage(run, data, StageConfig("per_sample", 6), "decay")
        assert out.frozen
        assert np.array_equal(out.trajectory.samples, run.trajectory.samples)
        assert len(out.sample_lambdas) == 2
        assert all(lam > 0 for lam in out.sample_lambdas)

    def test_non_finite_aborts_with_snapshot(self):
        seq = WeightedSequence(np.full((3, 16, 16), np.nan), TIMES3)
        with pytest.raises(NonFiniteLossError) as err:
            run_stage(_run(), [seq], StageConfig("recon_pretrain", 2))
        assert err.value.snapshot["iteration"] == 0

    def test_loss_history_columns(self):
        out = run_stage(_run(), [_seq()], StageConfig("recon_pretrain", 2, learning_rate=1e-3))
        assert list(out.loss_history[0]) == ["iteration", "stage", "loss", "data_term", "penalty_term"]
        assert out.stage_log[0]["start"] == 0 and out.stage_log[0]["end"] == 2

    def test_stage_config_validation(self):
        with pytest.raises(ValueError):
            StageConfig("warmup", 1)
        with pytest.raises(ValueError):
            StageConfig("decay", 0)
        with pytest.raises(ValueError):
            StageConfig("decay", 1, learning_rate=-1.0)


def _bundle(mode, iters=3):
    return ScheduleConfig((StageConfig("recon_pretrain", iters, learning_rate=1e-2),
                           StageConfig("decay", iters, learning_rate=1e-2)),
                          mode, CG, L, n_shots=2, m_points=17, n_control=5)


class TestSchedule:
    def test_fixed_keeps_input(self):
        tr = golden_angle_init(2, 17, 3, 5, L)
        out = run_schedule([_seq()], _bundle("fixed"), tr)
        assert np.array_equal(out.trajectory.samples, tr.samples)
        assert out.loss_history == []

    def test_single_mask_tied_every_iteration(self):
        run = initial_run(3, _bundle("single_mask"))
        assert run.shared
        data = [_seq(seed=15)]
        for _ in range(3):
            run = run_stage(run, data, StageConfig("decay", 1, learning_rate=2e-2), "decay")
            s = run.trajectory.samples
            assert np.array_equal(s[1], s[0]) and np.array_equal(s[2], s[0])
        assert not np.array_equal(run.trajectory.samples, initial_run(3, _bundle("single_mask")).trajectory.samples)

    def test_full_mode_frames_diverge(self):
        # identical starting frames become distinct once the decay objective drives them
        cp = np.array(golden_angle_init(2, 17, 1, 5, L).control_points)
        tr = Trajectory.from_control_points(np.repeat(cp, 3, axis=0), 17, L)
        out = run_schedule([_seq(seed=16)], _bundle("full"), tr)
        s = out.trajectory.samples
        assert np.abs(s[0] - s[1]).max() > 0 and np.abs(s[1] - s[2]).max() > 0

    def test_recon_only_never_uses_decay(self):
        out = run_schedule([_seq()], _bundle("recon_only", 2))
        assert [s["loss"] for s in out.stage_log] == ["recon", "recon"]
        assert [s["stage"] for s in out.stage_log] == ["recon_pretrain", "decay"]

    def test_resume_skips_finished_stages(self):
        b = _bundle("full", 2)
        pre = run_schedule([_seq()], ScheduleConfig(b.stages[:1], "full", CG, L, 2, 17, 5))
        out = run_schedule([_seq()], b, start=pre)
        assert [s["stage"] for s in out.stage_log] == ["recon_pretrain", "decay"]
        assert len(out.loss_history) == 4

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            ScheduleConfig((), "joint")


def test_support_mask():
    seq = _seq()
    m = support_mask(seq)
    assert m.any() and not m.all()
    assert not support_mask(WeightedSequence(np.zeros((3, 4, 4)), TIMES3)).any()
