"""Trajectory learning: reconstruction pre-training, decay-guided training and
per-sample refinement with the acquisition frozen.

Gradients flow loss -> reconstructed frames -> sample coordinates ->
control points. The kinematic projection applied when control points are
turned into samples is treated as the identity in the backward pass; a soft
quadratic penalty on the raw spline keeps it close to inactive.
"""

from __future__ import annotations

import copy
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from . import metrics
from .decay_model import WeightedSequence
from .fitting import T1_RANGE, fit_curves, fit_vjp
from .sampling import FrameRecon, ReconConfig
from .trajectory import (K_MAX, KinematicLimits, Trajectory, golden_angle_init,
                         interpolation_jacobian)

log = logging.getLogger(__name__)

STAGES = ("recon_pretrain", "decay", "per_sample")
MODES = ("full", "recon_only", "single_mask", "fixed")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, message, snapshot):
        super().__init__(message)
        self.snapshot = snapshot


class EmptyFitError(RuntimeError):
    pass


@dataclass(frozen=True)
class StageConfig:
    stage: str
    iterations: int
    learning_rate: float = 1e-3
    batch_size: int = 0
    kinematic_penalty_weight: float = 1.0
    seed: int = 0
    momentum: float = 0.9
    lambda_learning_rate: float = 0.0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if not self.learning_rate >= 0:
            raise ValueError("learning_rate must be non-negative")
        if self.kinematic_penalty_weight < 0:
            raise ValueError("kinematic_penalty_weight must be non-negative")


@dataclass
class OptimRun:
    trajectory: Trajectory
    recon: ReconConfig
    limits: KinematicLimits | None = None
    loss_history: list = field(default_factory=list)
    stage_log: list = field(default_factory=list)
    frozen: bool = False
    sample_lambdas: list | None = None

    @property
    def shared(self):
        return self.trajectory.shared_across_frames


def support_mask(seq: WeightedSequence, fraction=0.1) -> np.ndarray:
    """Pixels whose peak magnitude over the sequence exceeds ``fraction`` of the global peak."""
    peak = np.max(np.abs(seq.frames), axis=0)
    return peak > fraction * peak.max() if peak.max() > 0 else np.zeros(seq.shape, dtype=bool)


# ---------------------------------------------------------------- penalties

def kinematic_penalty(raw, limits: KinematicLimits | None, weight):
    """``weight * sum(excess^2)`` over speed and acceleration bounds, with gradient."""
    if limits is None or weight == 0:
        return 0.0, np.zeros_like(raw)
    grad = np.zeros_like(raw)
    d1 = np.diff(raw, axis=-2) / limits.dt
    n1 = np.linalg.norm(d1, axis=-1, keepdims=True)
    ex1 = np.maximum(n1 - limits.v_max, 0.0)
    g1 = 2.0 * weight * ex1 * d1 / np.maximum(n1, 1e-300) / limits.dt
    grad[..., 1:, :] += g1
    grad[..., :-1, :] -= g1
    d2 = np.diff(raw, n=2, axis=-2) / limits.dt**2
    n2 = np.linalg.norm(d2, axis=-1, keepdims=True)
    ex2 = np.maximum(n2 - limits.a_max, 0.0)
    g2 = 2.0 * weight * ex2 * d2 / np.maximum(n2, 1e-300) / limits.dt**2
    grad[..., 2:, :] += g2
    grad[..., 1:-1, :] -= 2.0 * g2
    grad[..., :-2, :] += g2
    return float(weight * (np.sum(ex1**2) + np.sum(ex2**2))), grad


# ---------------------------------------------------------------- losses

def _stack(seqs):
    seqs = [seqs] if isinstance(seqs, WeightedSequence) else list(seqs)
    X = np.stack([s.frames for s in seqs])
    return seqs, X


def _frame_ops(samples, shape, cfg, m_points):
    return [FrameRecon(samples[f].reshape(-1, 2), shape, cfg, m_points) for f in range(samples.shape[0])]


def _recon_term(X, Xh):
    diff = Xh - X
    norms = np.sqrt(np.sum(diff**2, axis=(-2, -1)))
    P, N = norms.shape
    g = diff / np.maximum(norms, 1e-300)[..., None, None] / (P * N)
    return float(norms.mean()), g


def _decay_term(seqs, X, Xh, masks, t1_range):
    P, N = X.shape[:2]
    total = 0.0
    g = np.zeros_like(Xh)
    any_valid = False
    for p, seq in enumerate(seqs):
        m = masks[p]
        Y = Xh[p][:, m]
        out = fit_curves(Y, seq.inversion_times, t1_range)
        v = out["valid"]
        any_valid |= bool(v.any())
        t = seq.inversion_times[:, None]
        model = np.where(v, out["a"] - out["b"] * np.exp(-t / np.where(v, out["t1_star"], 1.0)), 0.0)
        resid = X[p][:, m] - model
        norms = np.sqrt(np.sum(resid**2, axis=1))
        total += norms.sum()
        dm = -resid / np.maximum(norms, 1e-300)[:, None] / P
        if v.any():
            a, b, ts = out["a"][v], out["b"][v], out["t1_star"][v]
            e = np.exp(-t / ts)
            dmv = dm[:, v]
            gy = fit_vjp(Y[:, v], seq.inversion_times, a, b, ts,
                         dmv.sum(axis=0), -(dmv * e).sum(axis=0), -(dmv * b * e * t / ts**2).sum(axis=0))
            gp = np.zeros_like(Y)
            gp[:, v] = gy
            g[p][:, m] = gp
    if not any_valid:
        raise EmptyFitError("decay fit produced no valid pixels")
    return total / P, g


def evaluate_objective(samples, seqs, cfg: ReconConfig, objective="recon", masks=None,
                       need_grad=True, t1_range=T1_RANGE, m_points=None, tied=False):
    """Data term of the recon / decay objective at ``samples`` (``(F, n, m, 2)``).

    Returns ``(value, grad_samples, grad_lambda)``; gradients are ``None``
    unless ``need_grad``. With ``tied`` all frames share frame 0's samples and
    each frame receives an equal share of the total sample gradient.
    """
    seqs, X = _stack(seqs)
    samples = np.asarray(samples, dtype=float)
    if samples.shape[0] != X.shape[1]:
        raise ValueError("trajectory and sequence frame counts differ")
    shape = X.shape[-2:]
    P, N = X.shape[:2]
    shared = tied and all(np.array_equal(samples[0], samples[f]) for f in range(1, N))
    if shared:
        # one operator serves every frame of a tied trajectory
        ops = _frame_ops(samples[:1], shape, cfg, m_points or samples.shape[2])
        Xh = ops[0].forward(X.reshape((P * N,) + shape)).reshape(X.shape)
    else:
        ops = _frame_ops(samples, shape, cfg, m_points or samples.shape[2])
        Xh = np.stack([ops[f].forward(X[:, f]) for f in range(len(ops))], axis=1)
    if objective == "recon":
        value, g = _recon_term(X, Xh)
    elif objective == "decay":
        if masks is None:
            masks = [support_mask(s) for s in seqs]
        value, g = _decay_term(seqs, X, Xh, masks, t1_range)
    else:
        raise ValueError(f"unknown objective {objective!r}")
    if not need_grad:
        return value, None, None
    grad = np.zeros_like(samples)
    glam = 0.0
    if shared:
        gc, glam = ops[0].backward(g.reshape((P * N,) + shape))
        grad[:] = gc.reshape(samples.shape[1:]) / N
        return value, grad, glam
    for f, op in enumerate(ops):
        gc, gl = op.backward(g[:, f])
        grad[f] = gc.reshape(samples.shape[1:])
        glam += gl
    return value, grad, glam


def recon_loss(traj: Trajectory, seqs, cfg: ReconConfig, limits=None, penalty_weight=0.0):
    """Mean per-frame L2 distance between frames and their reconstructions, plus kinematic penalty."""
    value, _, _ = evaluate_objective(traj.samples, seqs, cfg, "recon", need_grad=False, m_points=traj.m_points)
    return value + _penalty_of(traj, limits, penalty_weight)


def decay_loss(traj: Trajectory, seqs, cfg: ReconConfig, limits=None, penalty_weight=0.0, masks=None):
    """Decay-model residual of fits to reconstructed frames, against the original frames.

    ``sum_i |x_i - (A - B exp(-t_i / T1*))|_2`` averaged over sequences,
    plus the kinematic penalty.
    """
    value, _, _ = evaluate_objective(traj.samples, seqs, cfg, "decay", masks=masks,
                                     need_grad=False, m_points=traj.m_points)
    return value + _penalty_of(traj, limits, penalty_weight)


def _raw_samples(traj):
    J = interpolation_jacobian(traj.control_points.shape[-2], traj.m_points)
    return J @ traj.control_points


def _penalty_of(traj, limits, weight):
    if traj.control_points is None:
        return 0.0
    return kinematic_penalty(_raw_samples(traj), limits, weight)[0]


def control_point_gradient(traj: Trajectory, grad_samples):
    """Chain sample-coordinate gradients to control points (clamped samples get zero)."""
    J = interpolation_jacobian(traj.control_points.shape[-2], traj.m_points)
    raw = J @ traj.control_points
    g = np.where(np.abs(raw) > K_MAX, 0.0, grad_samples)
    return np.swapaxes(J, 0, 1) @ g


# ---------------------------------------------------------------- stages

def _tie(grad_cp):
    # frame mean, so tied and untied runs share a learning-rate scale
    return np.broadcast_to(grad_cp.mean(axis=0, keepdims=True), grad_cp.shape)


def run_stage(run: OptimRun, data, stage: StageConfig, loss="recon", masks=None, callback=None) -> OptimRun:
    """Run one stage of the schedule and return the updated run (input left untouched).

    ``callback(iteration, trajectory)`` is invoked after every update, if given.
    """
    run = copy.deepcopy(run)
    seqs = [data] if isinstance(data, WeightedSequence) else list(data)
    if masks is None:
        masks = [support_mask(s) for s in seqs]
    start = len(run.loss_history)
    if stage.stage == "per_sample":
        run.frozen = True
        _refine_per_sample(run, seqs, masks, stage)
        run.stage_log.append({"stage": stage.stage, "loss": "decay", "start": start,
                              "end": len(run.loss_history), "config": stage})
        return run
    if run.frozen:
        raise RuntimeError("trajectory is frozen")
    traj = run.trajectory
    if traj.control_points is None:
        raise ValueError("trajectory has no control points to optimize")
    rng = np.random.default_rng(stage.seed)
    cp = np.array(traj.control_points)
    vel = np.zeros_like(cp)
    log_lam = math.log(run.recon.tikhonov_lambda) if run.recon.tikhonov_lambda > 0 else None
    vel_lam = 0.0
    for it in range(stage.iterations):
        batch = seqs
        bmasks = masks
        if 0 < stage.batch_size < len(seqs):
            idx = np.sort(rng.choice(len(seqs), stage.batch_size, replace=False))
            batch = [seqs[i] for i in idx]
            bmasks = [masks[i] for i in idx]
        data_term, g_samples, g_lam = evaluate_objective(
            traj.samples, batch, run.recon, loss, masks=bmasks, m_points=traj.m_points, tied=run.shared)
        pen, g_pen = kinematic_penalty(_raw_samples(traj), run.limits, stage.kinematic_penalty_weight)
        value = data_term + pen
        if not np.isfinite(value) or not np.all(np.isfinite(g_samples)):
            raise NonFiniteLossError(f"non-finite loss at {stage.stage} iteration {it}",
                                     {"iteration": it, "control_points": cp.copy(), "loss": value})
        run.loss_history.append({"iteration": len(run.loss_history), "stage": stage.stage,
                                 "loss": value, "data_term": data_term, "penalty_term": pen})
        if it == 0:
            scale = max(abs(data_term), 1e-300)
        g_cp = control_point_gradient(traj, g_samples) / scale
        J = interpolation_jacobian(cp.shape[-2], traj.m_points)
        g_cp = g_cp + np.swapaxes(J, 0, 1) @ g_pen
        if run.shared:
            g_cp = _tie(g_cp)
        vel = stage.momentum * vel - stage.learning_rate * g_cp
        cp = cp + vel
        if run.shared:
            cp = np.broadcast_to(cp[:1], cp.shape).copy()
        traj = Trajectory.from_control_points(cp, traj.m_points, run.limits, run.shared)
        if callback is not None:
            callback(it, traj)
        if log_lam is not None and stage.lambda_learning_rate > 0:
            vel_lam = stage.momentum * vel_lam - stage.lambda_learning_rate * g_lam * math.exp(log_lam) / scale
            log_lam += vel_lam
            run.recon = replace(run.recon, tikhonov_lambda=math.exp(log_lam))
    run.trajectory = traj
    run.stage_log.append({"stage": stage.stage, "loss": loss, "start": start,
                          "end": len(run.loss_history), "config": stage})
    return run


def sample_decay_objective(ops, seq, mask, lam, t1_range=T1_RANGE):
    """Decay residual and model sequence of one sample for a given ``lam`` (frozen frame operators)."""
    X = seq.frames
    for op in ops:
        op.lam = lam
        op._chol = None
    Xh = np.stack([op.forward(X[f][None])[0] for f, op in enumerate(ops)])
    value, _ = _decay_term([seq], X[None], Xh[None], [mask], t1_range)
    return value, Xh


def decay_psnr_of(seq, Xh, mask, t1_range=T1_RANGE):
    from .fitting import fit_map, model_sequence
    fit = fit_map(WeightedSequence(Xh, seq.inversion_times), mask, t1_range)
    model = model_sequence(fit, seq.inversion_times)
    return metrics.decay_psnr(seq.frames, model.frames, mask)


def _golden_section(f, lo, hi, iterations):
    inv = (math.sqrt(5.0) - 1.0) / 2.0
    c, d = hi - inv * (hi - lo), lo + inv * (hi - lo)
    fc, fd = f(c), f(d)
    for _ in range(max(iterations - 2, 0)):
        if fc < fd:
            hi, d, fd = d, c, fc
            c = hi - inv * (hi - lo)
            fc = f(c)
        else:
            lo, c, fc = c, d, fd
            d = lo + inv * (hi - lo)
            fd = f(d)
    return (c, fc) if fc < fd else (d, fd)


def _refine_per_sample(run, seqs, masks, stage):
    """Golden-section search of log(lambda) per sample on its decay residual.

    A candidate replaces the incumbent only if it lowers the residual without
    lowering the sample's decay PSNR.
    """
    traj = run.trajectory
    shape = seqs[0].shape
    lam0 = run.recon.tikhonov_lambda
    if run.recon.method != "cg-least-squares" or lam0 <= 0:
        run.sample_lambdas = [lam0] * len(seqs)
        return
    ops = _frame_ops(traj.samples, shape, run.recon, traj.m_points)
    out = []
    span = 4.0
    for p, seq in enumerate(seqs):
        base, Xh0 = sample_decay_objective(ops, seq, masks[p], lam0)
        cache = {}

        def f(ll):
            if ll not in cache:
                cache[ll] = sample_decay_objective(ops, seq, masks[p], math.exp(ll))[0]
            return cache[ll]

        ll, val = _golden_section(f, math.log(lam0) - span, math.log(lam0) + span, stage.iterations)
        lam = lam0
        if val < base:
            _, Xh = sample_decay_objective(ops, seq, masks[p], math.exp(ll))
            if decay_psnr_of(seq, Xh, masks[p]) >= decay_psnr_of(seq, Xh0, masks[p]):
                lam = math.exp(ll)
        run.loss_history.append({"iteration": len(run.loss_history), "stage": "per_sample",
                                 "loss": min(val, base) if lam != lam0 else base,
                                 "data_term": min(val, base) if lam != lam0 else base, "penalty_term": 0.0})
        out.append(lam)
    run.sample_lambdas = out


# ---------------------------------------------------------------- schedule

@dataclass(frozen=True)
class ScheduleConfig:
    stages: tuple
    mode: str = "full"
    recon: ReconConfig = ReconConfig()
    limits: KinematicLimits = KinematicLimits()
    n_shots: int = 8
    m_points: int = 65
    n_control: int = 9

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}")


def initial_run(n_frames, bundle: ScheduleConfig, trajectory: Trajectory | None = None) -> OptimRun:
    if trajectory is None:
        trajectory = golden_angle_init(bundle.n_shots, bundle.m_points, n_frames, bundle.n_control,
                                       bundle.limits, shared=bundle.mode == "single_mask")
    return OptimRun(trajectory, bundle.recon, bundle.limits, frozen=bundle.mode == "fixed")


def run_schedule(data, bundle: ScheduleConfig, trajectory: Trajectory | None = None,
                 masks=None, start: OptimRun | None = None) -> OptimRun:
    """Run the configured stages in order.

    ``recon_only`` keeps the reconstruction objective in the decay stage,
    ``single_mask`` ties control points across frames, ``fixed`` never
    updates the trajectory (only the per-sample stage runs). ``start`` resumes
    from a finished earlier stage (its stages are skipped).
    """
    seqs = [data] if isinstance(data, WeightedSequence) else list(data)
    run = start if start is not None else initial_run(seqs[0].n_frames, bundle, trajectory)
    done = {s["stage"] for s in run.stage_log}
    for stage in bundle.stages:
        if stage.stage in done:
            continue
        if bundle.mode == "fixed" and stage.stage != "per_sample":
            continue
        loss = "decay" if stage.stage == "decay" and bundle.mode != "recon_only" else "recon"
        log.info("stage %s (%s loss, %d iterations)", stage.stage, loss, stage.iterations)
        run = run_stage(run, seqs, stage, loss, masks)
    return run
