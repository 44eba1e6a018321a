"""Per-pixel three-parameter inversion-recovery fits by variable projection.

For a fixed ``T1*`` the model ``A - B exp(-t / T1*)`` is linear in
``(A, B)``, so the residual is a function of ``T1*`` alone. That function is
scanned on a log-spaced grid, and the best candidate is polished with
Gauss-Newton steps on ``T1*`` (re-solving ``(A, B)`` at every step).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .decay_model import WeightedSequence, molli_correct

T1_RANGE = (50.0, 5000.0)
N_GRID = 64
GN_MAX_ITER = 50
GN_RTOL = 1e-8


@dataclass(frozen=True)
class DecayFit:
    a_map: np.ndarray
    b_map: np.ndarray
    t1_star_map: np.ndarray
    t1_map: np.ndarray
    residual_map: np.ndarray
    valid_mask: np.ndarray
    boundary_mask: np.ndarray

    @property
    def shape(self):
        return self.a_map.shape


def _linear_solve(e, Y):
    """Least-squares ``(a, b)`` against basis ``{1, -e}``; ``e`` is (N,) or (N, P)."""
    if e.ndim == 1:
        e = e[:, None]
    n = Y.shape[0]
    s1 = e.sum(axis=0)
    s2 = (e * e).sum(axis=0)
    sy = Y.sum(axis=0)
    sey = (e * Y).sum(axis=0)
    det = n * s2 - s1 * s1
    det = np.where(np.abs(det) > 1e-300, det, np.nan)
    # normal equations for [1, e] then flip the sign of the e-coefficient
    a = (s2 * sy - s1 * sey) / det
    c = (n * sey - s1 * sy) / det
    return a, -c


def _residual(Y, times, a, b, t1s):
    return Y - (a - b * np.exp(-times[:, None] / t1s))


def _hessian(Y, t, a, b, t1s):
    e = np.exp(-t / t1s)
    r = Y - (a - b * e)
    J = np.stack([np.ones_like(e), -e, -b * e * t / t1s**2], axis=-1)      # (N, P, 3)
    Hm = np.einsum("npi,npj->pij", J, J)
    h_bt = np.sum(r * (-e * t / t1s**2), axis=0)
    Hm[:, 1, 2] -= h_bt
    Hm[:, 2, 1] -= h_bt
    Hm[:, 2, 2] -= np.sum(r * (-b * e * t * (t - 2.0 * t1s) / t1s**4), axis=0)
    return J, Hm, r


def _newton_polish(Y, times, t1s, lo, hi, steps=2):
    # full Newton steps on (a, b, T1*): GN stalls linearly on non-zero residuals
    t = times[:, None]
    a, b = _linear_solve(np.exp(-t / t1s), Y)
    ss = np.sum(_residual(Y, times, a, b, t1s) ** 2, axis=0)
    for _ in range(steps):
        J, Hm, r = _hessian(Y, t, a, b, t1s)
        g = np.einsum("npi,np->pi", J, r)
        ok = np.linalg.det(Hm) > 0
        Hs = np.where(ok[:, None, None], Hm, np.eye(3))
        d = np.linalg.solve(Hs, g[..., None])[..., 0]
        ok &= np.all(np.linalg.eigvalsh(Hs) > 0, axis=1)
        tn = np.clip(t1s + d[:, 2], lo, hi)
        an, bn = _linear_solve(np.exp(-t / tn), Y)
        ssn = np.sum(_residual(Y, times, an, bn, tn) ** 2, axis=0)
        take = ok & (ssn <= ss * (1.0 + 1e-12) + 1e-300)
        a, b, t1s, ss = (np.where(take, an, a), np.where(take, bn, b),
                         np.where(take, tn, t1s), np.where(take, ssn, ss))
    return a, b, t1s


def fit_curves(Y, times, t1_range=T1_RANGE, n_grid=N_GRID):
    """Fit every column of ``Y`` (``(N, P)``) sampled at ``times`` (``(N,)``).

    Returns a dict of ``(P,)`` arrays: ``a``, ``b``, ``t1_star``, ``residual``
    (RMS), ``valid``, ``boundary``, and ``grid_residual`` (RMS of the best grid
    candidate).
    """
    Y = np.asarray(Y, dtype=float)
    times = np.asarray(times, dtype=float)
    if Y.ndim == 1:
        Y = Y[:, None]
    N, P = Y.shape
    if N < 3:
        raise ValueError("need at least three samples per curve")
    if times.shape != (N,) or np.any(np.diff(times) <= 0):
        raise ValueError("times must be strictly increasing, one per sample")
    lo, hi = float(t1_range[0]), float(t1_range[1])
    grid = np.geomspace(lo, hi, n_grid)

    # grid stage
    best_ss = np.full(P, np.inf)
    best_t = np.full(P, grid[0])
    for t1 in grid:
        e = np.exp(-times / t1)
        a, b = _linear_solve(e, Y)
        ss = np.sum((Y - (a - b * e[:, None])) ** 2, axis=0)
        better = ss < best_ss
        best_ss = np.where(better, ss, best_ss)
        best_t = np.where(better, t1, best_t)
    grid_ss = best_ss.copy()

    # Gauss-Newton polish on T1*
    t1s = best_t.copy()
    ss = best_ss.copy()
    active = np.ones(P, dtype=bool)
    tt = times[:, None]
    for _ in range(GN_MAX_ITER):
        if not active.any():
            break
        idx = np.nonzero(active)[0]
        T = t1s[idx]
        y = Y[:, idx]
        e = np.exp(-tt / T)
        a, b = _linear_solve(e, y)
        r = y - (a - b * e)
        d = -b * e * tt / T**2
        # project d off span{1, e}
        da, db = _linear_solve(e, d)
        d_perp = d - (da - db * e)
        den = np.sum(d_perp**2, axis=0)
        step = np.where(den > 0, np.sum(d * r, axis=0) / np.where(den > 0, den, 1.0), 0.0)
        cur = ss[idx]
        accepted = np.zeros(idx.size, dtype=bool)
        new_t = T.copy()
        new_ss = cur.copy()
        lam = np.ones(idx.size)
        for _ in range(40):
            todo = ~accepted
            if not todo.any():
                break
            cand = np.clip(T + lam * step, lo, hi)
            e_c = np.exp(-tt / cand)
            a_c, b_c = _linear_solve(e_c, y)
            ss_c = np.sum((y - (a_c - b_c * e_c)) ** 2, axis=0)
            ok = todo & (ss_c <= cur)
            new_t = np.where(ok, cand, new_t)
            new_ss = np.where(ok, ss_c, new_ss)
            accepted |= ok
            lam = np.where(accepted, lam, 0.5 * lam)
        rel = np.abs(new_t - T) / T
        t1s[idx] = new_t
        ss[idx] = new_ss
        active[idx] = accepted & (rel >= GN_RTOL)

    a, b, t1s = _newton_polish(Y, times, t1s, lo, hi)
    e = np.exp(-tt / t1s)
    rms = np.sqrt(np.sum((Y - (a - b * e)) ** 2, axis=0) / N)
    scale = np.max(np.abs(Y), axis=0)
    flat = np.ptp(Y, axis=0) <= 1e-12 * np.maximum(scale, 1e-300)
    boundary = (t1s <= lo * (1 + 1e-9)) | (t1s >= hi * (1 - 1e-9))
    tiny_b = np.abs(b) <= 1e-9 * np.maximum(scale, 1e-300)
    valid = ~flat & ~boundary & ~tiny_b & (a > 0) & np.isfinite(a) & np.isfinite(b)
    return {
        "a": a, "b": b, "t1_star": t1s, "residual": rms, "valid": valid,
        "boundary": boundary & ~flat, "grid_residual": np.sqrt(grid_ss / N),
    }


def fit_pixel(values, times, t1_range=T1_RANGE, n_grid=N_GRID):
    """Fit one curve; returns ``(a, b, t1_star, rms_residual, valid)``."""
    out = fit_curves(np.asarray(values, dtype=float)[:, None], times, t1_range, n_grid)
    return (float(out["a"][0]), float(out["b"][0]), float(out["t1_star"][0]),
            float(out["residual"][0]), bool(out["valid"][0]))


def fit_map(seq: WeightedSequence, mask=None, t1_range=T1_RANGE, n_grid=N_GRID) -> DecayFit:
    """Independent per-pixel fits of a sequence; pixels outside ``mask`` are invalid."""
    H, W = seq.shape
    sel = np.ones((H, W), dtype=bool) if mask is None else np.asarray(mask, dtype=bool)
    maps = {k: np.zeros((H, W)) for k in ("a", "b", "t1_star", "residual")}
    valid = np.zeros((H, W), dtype=bool)
    boundary = np.zeros((H, W), dtype=bool)
    if sel.any():
        out = fit_curves(seq.frames[:, sel], seq.inversion_times, t1_range, n_grid)
        for k in maps:
            maps[k][sel] = out[k]
        valid[sel] = out["valid"]
        boundary[sel] = out["boundary"]
    t1 = np.zeros((H, W))
    t1[valid] = molli_correct(maps["a"][valid], maps["b"][valid], maps["t1_star"][valid])
    for k in ("a", "b", "t1_star"):
        maps[k][~valid] = 0.0
    return DecayFit(maps["a"], maps["b"], maps["t1_star"], t1, maps["residual"], valid, boundary)


def model_sequence(fit: DecayFit, times) -> WeightedSequence:
    """Evaluate the fitted model at ``times``; invalid pixels emit zero."""
    times = np.asarray(times, dtype=float)
    frames = np.zeros((times.size,) + fit.shape)
    v = fit.valid_mask
    if v.any():
        frames[:, v] = fit.a_map[v] - fit.b_map[v] * np.exp(-times[:, None] / fit.t1_star_map[v])
    return WeightedSequence(frames, times)


def fit_vjp(Y, times, a, b, t1s, grad_a, grad_b, grad_t1s):
    """Pull cotangents of fitted parameters back to the data ``Y`` (``(N, P)``).

    Implicit-function theorem at the least-squares stationary point, using
    the full Hessian of ``0.5 |y - f(p)|^2``.
    """
    J, Hm, _ = _hessian(Y, np.asarray(times, dtype=float)[:, None], a, b, t1s)
    gp = np.stack([grad_a, grad_b, grad_t1s], axis=-1)
    z = np.linalg.solve(Hm, gp[..., None])[..., 0]    # (P, 3)
    return np.einsum("npi,pi->np", J, z)
