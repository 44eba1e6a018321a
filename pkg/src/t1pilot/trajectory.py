"""Per-frame non-Cartesian trajectories.

Coordinates are normalized k-space (cycles per pixel), both components in
[-0.5, 0.5]. Arrays are laid out ``(frame, shot, point, 2)`` with the last
axis holding ``(kx, ky)``; ``kx`` pairs with image columns.
"""

from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass

import numpy as np
import scipy.linalg

GOLDEN_ANGLE = math.pi * 2.0 / (1.0 + math.sqrt(5.0))
K_MAX = 0.5


class KinematicProjectionError(RuntimeError):
    def __init__(self, message, worst_violation):
        super().__init__(f"{message} (worst violation {worst_violation:.3e})")
        self.worst_violation = worst_violation


@dataclass(frozen=True)
class KinematicLimits:
    """Discrete speed / acceleration bounds in normalized k-space units.

    ``v_max`` bounds ``|x[k+1] - x[k]| / dt`` (gradient amplitude proxy) and
    ``a_max`` bounds ``|x[k+1] - 2 x[k] + x[k-1]| / dt**2`` (slew rate proxy).
    """

    v_max: float = 1.0 / 32.0
    a_max: float = 1.0 / 256.0
    dt: float = 1.0

    def __post_init__(self):
        if not (self.v_max > 0 and self.a_max > 0 and self.dt > 0):
            raise ValueError("kinematic limits must be positive")


@dataclass(frozen=True)
class Trajectory:
    samples: np.ndarray
    control_points: np.ndarray | None = None
    shared_across_frames: bool = False

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.ndim != 4 or s.shape[-1] != 2:
            raise ValueError(f"samples must be (frames, shots, points, 2), got {s.shape}")
        if np.any(np.abs(s) > K_MAX + 1e-12):
            raise ValueError("sample coordinates must lie in [-0.5, 0.5]^2")
        s.setflags(write=False)
        object.__setattr__(self, "samples", s)
        if self.control_points is not None:
            cp = np.array(self.control_points, dtype=float)
            if cp.shape[:2] != s.shape[:2] or cp.shape[-1] != 2:
                raise ValueError("control points must be (frames, shots, C, 2) matching samples")
            cp.setflags(write=False)
            object.__setattr__(self, "control_points", cp)

    @property
    def n_frames(self) -> int:
        return self.samples.shape[0]

    @property
    def n_shots(self) -> int:
        return self.samples.shape[1]

    @property
    def m_points(self) -> int:
        return self.samples.shape[2]

    def frame_coords(self, frame: int) -> np.ndarray:
        """All samples of one frame flattened to ``(n_shots * m_points, 2)``."""
        return self.samples[frame].reshape(-1, 2)

    @classmethod
    def from_control_points(cls, control_points, m_points, limits=None, shared=False):
        """Spline-interpolate, clamp to the k-space box and (optionally) project onto ``limits``."""
        cp = np.asarray(control_points, dtype=float)
        samples = np.clip(interpolation_jacobian(cp.shape[-2], m_points) @ cp, -K_MAX, K_MAX)
        if limits is not None:
            samples = project_kinematic(samples, limits)
        return cls(samples, cp, shared)


def _radial_spoke(angle, m_points):
    radii = np.linspace(-K_MAX, K_MAX, m_points)
    return np.stack([radii * np.cos(angle), radii * np.sin(angle)], axis=-1)


def radial_angles(n_shots):
    return np.arange(n_shots) * math.pi / n_shots


def golden_angles(n_shots, n_frames):
    """Spoke angles ``(frame, shot)`` of one golden-angle progression continued across frames."""
    idx = np.arange(n_frames * n_shots).reshape(n_frames, n_shots)
    return np.mod(idx * GOLDEN_ANGLE, math.pi)


def _check_scheme(n_shots, m_points, n_frames):
    if n_shots < 1 or m_points < 2 or n_frames < 1:
        raise ValueError("need n_shots >= 1, m_points >= 2, n_frames >= 1")


def radial_scheme(n_shots, m_points, n_frames) -> Trajectory:
    """Uniformly spaced diameters, identical in every frame."""
    _check_scheme(n_shots, m_points, n_frames)
    frame = np.stack([_radial_spoke(a, m_points) for a in radial_angles(n_shots)])
    return Trajectory(np.broadcast_to(frame, (n_frames,) + frame.shape).copy(), None, True)


def golden_angle_scheme(n_shots, m_points, n_frames) -> Trajectory:
    _check_scheme(n_shots, m_points, n_frames)
    ang = golden_angles(n_shots, n_frames)
    samples = np.stack([np.stack([_radial_spoke(a, m_points) for a in row]) for row in ang])
    return Trajectory(samples, None, False)


def golden_angle_init(n_shots, m_points, n_frames, n_control, limits=None, shared=False) -> Trajectory:
    """Learnable starting point: golden-angle spokes carried by ``n_control`` control points.

    With ``shared`` every frame starts from frame 0's spokes.
    """
    _check_scheme(n_shots, m_points, n_frames)
    ang = golden_angles(n_shots, 1 if shared else n_frames)
    if shared:
        ang = np.broadcast_to(ang, (n_frames, n_shots))
    cp = np.stack([np.stack([_radial_spoke(a, n_control) for a in row]) for row in ang])
    return Trajectory.from_control_points(cp, m_points, limits, shared)


def cartesian_coords(height, width) -> np.ndarray:
    """Full Cartesian grid, ``(height * width, 2)``; frequencies in [-0.5, 0.5)."""
    ky = (np.arange(height) - height // 2) / height
    kx = (np.arange(width) - width // 2) / width
    kyy, kxx = np.meshgrid(ky, kx, indexing="ij")
    return np.stack([kxx.ravel(), kyy.ravel()], axis=-1)


def cartesian_trajectory(height, width, n_frames) -> Trajectory:
    """Fully sampled grid packed as one shot per image row (full-sampling oracle)."""
    frame = cartesian_coords(height, width).reshape(height, width, 2)
    return Trajectory(np.broadcast_to(frame, (n_frames,) + frame.shape).copy(), None, True)


@functools.lru_cache(maxsize=64)
def _jacobian_cached(n_control, m_points):
    C = n_control
    h = 1.0 / (C - 1)
    # second derivatives of the natural spline: M = Q @ y
    Q = np.zeros((C, C))
    if C > 2:
        T = np.zeros((C - 2, C - 2))
        D = np.zeros((C - 2, C))
        for i in range(C - 2):
            T[i, i] = 4.0
            if i > 0:
                T[i, i - 1] = 1.0
            if i < C - 3:
                T[i, i + 1] = 1.0
            D[i, i:i + 3] = np.array([1.0, -2.0, 1.0]) * 6.0 / h**2
        Q[1:-1] = np.linalg.solve(T, D)
    u = np.linspace(0.0, 1.0, m_points)
    seg = np.minimum((u / h).astype(int), C - 2)
    t = u / h - seg
    rows = np.arange(m_points)
    E = np.zeros((m_points, C))
    W = np.zeros((m_points, C))
    E[rows, seg] += 1.0 - t
    E[rows, seg + 1] += t
    W[rows, seg] += h**2 / 6.0 * ((1.0 - t) ** 3 - (1.0 - t))
    W[rows, seg + 1] += h**2 / 6.0 * (t**3 - t)
    J = E + W @ Q
    J.setflags(write=False)
    return J


def interpolation_jacobian(n_control, m_points) -> np.ndarray:
    """Linear map ``J`` (``m_points x n_control``) with ``samples = J @ control_points``.

    Natural cubic spline with uniform knots, evaluated at ``m_points``
    equispaced parameters.
    """
    if n_control < 2:
        raise ValueError("at least two control points are required")
    if m_points < 1:
        raise ValueError("m_points must be positive")
    return _jacobian_cached(int(n_control), int(m_points))


def spline_interpolate(control_points, m_points) -> np.ndarray:
    cp = np.asarray(control_points, dtype=float)
    if cp.shape[-2] < 2:
        raise ValueError("at least two control points are required")
    return np.clip(interpolation_jacobian(cp.shape[-2], m_points) @ cp, -K_MAX, K_MAX)


def speeds(samples, dt=1.0):
    return np.linalg.norm(np.diff(samples, axis=-2), axis=-1) / dt


def accelerations(samples, dt=1.0):
    return np.linalg.norm(np.diff(samples, n=2, axis=-2), axis=-1) / dt**2


def max_violation(samples, limits: KinematicLimits):
    """Largest excess over the speed/acceleration bounds and the k-space box (0 if feasible)."""
    worst = np.max(np.abs(samples), initial=0.0) - K_MAX
    if samples.shape[-2] >= 2:
        worst = max(worst, np.max(speeds(samples, limits.dt), initial=0.0) - limits.v_max)
    if samples.shape[-2] >= 3:
        worst = max(worst, np.max(accelerations(samples, limits.dt), initial=0.0) - limits.a_max)
    return max(float(worst), 0.0)


@functools.lru_cache(maxsize=32)
def _admm_factor(m_points, rho):
    # banded Cholesky of (1 + rho) I + rho (D1^T D1 + D2^T D2)
    eye = np.eye(m_points)
    d1, d2 = np.diff(eye, axis=0), np.diff(eye, n=2, axis=0)
    M = (1.0 + rho) * eye + rho * (d1.T @ d1 + d2.T @ d2)
    banded = np.zeros((3, m_points))
    for k in range(3):
        banded[2 - k, k:] = np.diagonal(M, k)
    return scipy.linalg.cholesky_banded(banded)


def _ball(v, bound):
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    return v * np.minimum(1.0, bound / np.maximum(n, 1e-300))


def _d1t(y, m):
    out = np.zeros(y.shape[:-2] + (m, 2))
    out[..., 1:, :] += y
    out[..., :-1, :] -= y
    return out


def _d2t(y, m):
    out = np.zeros(y.shape[:-2] + (m, 2))
    out[..., 2:, :] += y
    out[..., 1:-1, :] -= 2.0 * y
    out[..., :-2, :] += y
    return out


def _pull_to_centroid(x, vb, ab):
    # convex combination with the constant curve at the centroid (speed and
    # acceleration zero, inside the box) just strong enough to meet both bounds
    z = np.clip(x.mean(axis=-2, keepdims=True), -K_MAX, K_MAX)
    v = np.linalg.norm(np.diff(x, axis=-2), axis=-1).max(axis=-1)
    a = np.linalg.norm(np.diff(x, n=2, axis=-2), axis=-1).max(axis=-1)
    shrink = np.minimum(np.minimum(vb / np.maximum(v, 1e-300), ab / np.maximum(a, 1e-300)), 1.0)
    theta = np.where(shrink < 1.0, 1.0 - shrink * (1.0 - 1e-12), 0.0)[:, None, None]
    return np.clip((1.0 - theta) * x + theta * z, -K_MAX, K_MAX)


def project_kinematic(samples, limits: KinematicLimits, tol=1e-6, max_iter=3000, repair=True,
                      rho=3.0) -> np.ndarray:
    """Nearest curve satisfying the speed, acceleration and k-space box bounds.

    ADMM on ``min |x - x0|^2`` with the splits ``z1 = D1 x`` (speed balls),
    ``z2 = D2 x`` (acceleration balls) and ``z3 = x`` (box); the x-update is
    one banded solve, factored once per curve length. Works on any leading
    batch shape; curves that are already feasible are returned untouched.
    The residual violation left at convergence (or at ``max_iter``) is removed
    by a convex pull toward the curve centroid; ``repair=False`` raises
    instead if it exceeds ``tol``.
    """
    x0 = np.asarray(samples, dtype=float)
    if x0.shape[-2] < 3:
        raise ValueError("need at least three samples per curve")
    lead = x0.shape[:-2]
    m = x0.shape[-2]
    flat = x0.reshape((-1, m, 2))
    vb = limits.v_max * limits.dt
    ab = limits.a_max * limits.dt**2
    bad = [i for i in range(flat.shape[0]) if max_violation(flat[i], limits) > 0.0]
    if not bad:
        return x0.copy()
    y0 = flat[bad]
    B = y0.shape[0]
    chol = _admm_factor(m, rho)
    x = y0.copy()
    z1, z2, z3 = _ball(np.diff(x, axis=1), vb), _ball(np.diff(x, n=2, axis=1), ab), np.clip(x, -K_MAX, K_MAX)
    u1, u2, u3 = np.zeros_like(z1), np.zeros_like(z2), np.zeros_like(z3)
    # residuals at tol leave a violation the centroid pull removes at a cost of ~tol / a_max
    eps = tol if repair else 1e-3 * tol
    for it in range(max_iter):
        rhs = y0 + rho * (_d1t(z1 - u1, m) + _d2t(z2 - u2, m) + (z3 - u3))
        sol = scipy.linalg.cho_solve_banded((chol, False), rhs.transpose(1, 0, 2).reshape(m, -1))
        x = sol.reshape(m, B, 2).transpose(1, 0, 2)
        a1, a2 = np.diff(x, axis=1), np.diff(x, n=2, axis=1)
        p1, p2, p3 = z1, z2, z3
        z1, z2, z3 = _ball(a1 + u1, vb), _ball(a2 + u2, ab), np.clip(x + u3, -K_MAX, K_MAX)
        u1 += a1 - z1
        u2 += a2 - z2
        u3 += x - z3
        if it % 10 == 9:
            primal = max(np.abs(a1 - z1).max(), np.abs(a2 - z2).max(), np.abs(x - z3).max())
            dual = rho * max(np.abs(z1 - p1).max(), np.abs(z2 - p2).max(), np.abs(z3 - p3).max())
            if primal < eps and dual < eps:
                break
    if repair and np.all(np.isfinite(x)):
        x = _pull_to_centroid(x, vb, ab)
    worst = max_violation(x, limits)
    if not worst <= tol:
        raise KinematicProjectionError("kinematic projection did not converge", worst)
    out = flat.copy()
    out[bad] = x
    return out.reshape(lead + (m, 2))


def feasibility_report(traj: Trajectory, limits: KinematicLimits, tol=1e-6) -> dict:
    """Per-shot maxima of the discrete speed and acceleration, with violation flags."""
    s = traj.samples
    vmax = speeds(s, limits.dt).max(axis=-1) if s.shape[-2] >= 2 else np.zeros(s.shape[:2])
    amax = accelerations(s, limits.dt).max(axis=-1) if s.shape[-2] >= 3 else np.zeros(s.shape[:2])
    speed_flags = vmax > limits.v_max + tol
    accel_flags = amax > limits.a_max + tol
    return {
        "max_speed": vmax,
        "max_acceleration": amax,
        "speed_violation": speed_flags,
        "acceleration_violation": accel_flags,
        "n_violations": int(speed_flags.sum() + accel_flags.sum()),
    }


CSV_HEADER = ("frame", "shot", "index", "kx", "ky")


def write_trajectory_csv(traj: Trajectory, path_or_file):
    own = isinstance(path_or_file, (str, bytes)) or hasattr(path_or_file, "__fspath__")
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CSV_HEADER)
        F, n, m, _ = traj.samples.shape
        for f in range(F):
            for j in range(n):
                for i in range(m):
                    kx, ky = traj.samples[f, j, i]
                    w.writerow((f, j, i, f"{kx:.17g}", f"{ky:.17g}"))
    finally:
        if own:
            fh.close()


def read_trajectory_csv(path_or_file) -> Trajectory:
    if isinstance(path_or_file, str) and "\n" in path_or_file:
        path_or_file = io.StringIO(path_or_file)
    own = not hasattr(path_or_file, "read")
    fh = open(path_or_file, newline="") if own else path_or_file
    try:
        rows = list(csv.reader(fh))
    finally:
        if own:
            fh.close()
    if not rows or tuple(rows[0]) != CSV_HEADER:
        raise ValueError(f"trajectory CSV must start with header {','.join(CSV_HEADER)}")
    body = rows[1:]
    idx = np.array([[int(r[0]), int(r[1]), int(r[2])] for r in body], dtype=int).reshape(-1, 3)
    vals = np.array([[float(r[3]), float(r[4])] for r in body], dtype=float).reshape(-1, 2)
    F, n, m = (idx.max(axis=0) + 1) if len(body) else (0, 0, 0)
    samples = np.full((F, n, m, 2), np.nan)
    samples[idx[:, 0], idx[:, 1], idx[:, 2]] = vals
    if np.isnan(samples).any():
        raise ValueError("trajectory CSV is missing samples")
    shared = bool(F > 0 and np.all(samples == samples[:1]))
    return Trajectory(samples, None, shared)
