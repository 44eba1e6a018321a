"""Non-uniform DFT, its adjoint, density compensation and classical reconstruction.

Pixel offsets ``r`` are integers centred on the grid midpoint
(``arange(n) - n // 2`` per axis) and a sample at ``k = (kx, ky)`` is
``s = sum_r x(r) exp(-2i pi (kx rx + ky ry))``. The kernel is separable, so
each transform is one matrix product per axis pair.

Two reconstructions are provided. ``adjoint-dcf`` is the density-compensated
adjoint. ``cg-least-squares`` minimizes ``|F x - s|^2 + lam |x|^2`` over real
images with conjugate gradients on the normal equations. Iterates stay in the
range of the real adjoint ``R^T``, so CG runs on the coefficients ``c`` of
``x = R^T c`` against the Gram matrix ``R R^T`` (size ``2M``). This is the
same Krylov iteration at a cost independent of the image size.

Both reconstructions are differentiable with respect to the sample
coordinates. The CG solution is differentiated implicitly at the solution of
the normal equations.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
import scipy.linalg

from .trajectory import K_MAX, Trajectory

TWO_PI = 2.0 * np.pi


class CoordinateRangeError(ValueError):
    pass


@dataclass(frozen=True)
class ReconConfig:
    """Reconstruction settings.

    ``dcf`` toggles the radial density ramp of the adjoint method (unit
    weights otherwise). ``cg_tol`` stops CG early once the normal-equation
    residual has dropped by that factor; 0 runs all ``cg_iterations``.
    ``solver="cholesky"`` replaces the CG iteration of ``cg-least-squares`` by
    a factorization of the dual system, i.e. the converged CG solution; it
    needs ``tikhonov_lambda > 0``.
    """

    method: str = "cg-least-squares"
    cg_iterations: int = 60
    tikhonov_lambda: float = 0.0
    dcf: bool = True
    cg_tol: float = 1e-10
    solver: str = "cg"

    def __post_init__(self):
        if self.method not in ("adjoint-dcf", "cg-least-squares"):
            raise ValueError(f"unknown reconstruction method {self.method!r}")
        if self.method == "cg-least-squares" and self.cg_iterations < 1:
            raise ValueError("cg_iterations must be >= 1")
        if not self.tikhonov_lambda >= 0:
            raise ValueError("tikhonov_lambda must be non-negative")
        if self.solver not in ("cg", "cholesky"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.solver == "cholesky" and self.method == "cg-least-squares" and self.tikhonov_lambda <= 0:
            raise ValueError("the cholesky solver needs tikhonov_lambda > 0")


@dataclass(frozen=True)
class KSpaceData:
    traj: Trajectory
    values: np.ndarray
    shape: tuple

    def __post_init__(self):
        v = np.asarray(self.values, dtype=complex)
        expected = (self.traj.n_frames, self.traj.n_shots * self.traj.m_points)
        if v.shape[-2:] != expected:
            raise ValueError(f"values must end with shape {expected}, got {v.shape}")
        object.__setattr__(self, "values", v)
        object.__setattr__(self, "shape", tuple(int(s) for s in self.shape))


def pixel_offsets(n: int) -> np.ndarray:
    return np.arange(n) - n // 2


def _check_coords(coords) -> np.ndarray:
    k = np.asarray(coords, dtype=float)
    if k.ndim != 2 or k.shape[1] != 2:
        raise ValueError(f"coords must be (M, 2), got {k.shape}")
    if np.any(np.abs(k) > K_MAX + 1e-12):
        raise CoordinateRangeError("k-space coordinates must lie in [-0.5, 0.5]^2")
    return k


def _phases(k, shape):
    H, W = shape
    ey = np.exp(-1j * TWO_PI * np.outer(k[:, 1], pixel_offsets(H)))
    ex = np.exp(-1j * TWO_PI * np.outer(k[:, 0], pixel_offsets(W)))
    return ey, ex


def _forward(ey, ex, image):
    return np.sum((ey @ image) * ex, axis=-1)


def _adjoint(ey, ex, samples):
    return (ey.conj().T * samples[..., None, :]) @ ex.conj()


def nudft_forward(image, coords) -> np.ndarray:
    """Samples of ``image`` (``(..., H, W)``) at ``coords`` (``(M, 2)``)."""
    x = np.asarray(image)
    if x.ndim < 2 or x.size == 0:
        raise ValueError("image must be a non-empty (..., H, W) array")
    k = _check_coords(coords)
    ey, ex = _phases(k, x.shape[-2:])
    return _forward(ey, ex, x)


def nudft_adjoint(samples, coords, shape) -> np.ndarray:
    """``x(r) = sum_j s_j exp(+2i pi k_j . r)``; exact adjoint of :func:`nudft_forward`."""
    k = _check_coords(coords)
    s = np.asarray(samples, dtype=complex)
    if s.shape[-1] != k.shape[0]:
        raise ValueError("samples and coords lengths differ")
    ey, ex = _phases(k, tuple(shape))
    return _adjoint(ey, ex, s)


def _coord_gradient(ey, ex, shape, image, upstream):
    H, W = shape
    ry = pixel_offsets(H)
    rx = pixel_offsets(W)
    t = ey @ image                                   # (..., M, W)
    dkx = np.sum(t * (ex * (-1j * TWO_PI * rx)), axis=-1)
    dky = np.sum(((ey * (-1j * TWO_PI * ry)) @ image) * ex, axis=-1)
    up = np.conj(upstream)
    g = np.stack([np.real(up * dkx), np.real(up * dky)], axis=-1)
    return g.reshape((-1,) + g.shape[-2:]).sum(axis=0)


def coord_gradient(image, coords, upstream) -> np.ndarray:
    """Gradient wrt each coordinate of ``Re sum_j conj(upstream_j) * s_j``.

    ``s = nudft_forward(image, coords)``; this is the real gradient of a
    scalar loss whose cotangent with respect to ``s`` is ``upstream``. Leading
    batch axes of ``image`` / ``upstream`` are summed. Returns ``(M, 2)``.
    """
    x = np.asarray(image)
    k = _check_coords(coords)
    ey, ex = _phases(k, x.shape[-2:])
    return _coord_gradient(ey, ex, x.shape[-2:], x, np.asarray(upstream))


def density_weights(coords, m_points=None) -> np.ndarray:
    """Radial ramp ``|k|`` floored at ``1 / m_points``, normalized to sum to the sample count."""
    k = np.asarray(coords, dtype=float).reshape(-1, 2)
    if k.shape[0] == 0:
        return np.zeros(0)
    floor = 1.0 / (m_points or k.shape[0])
    rho = np.maximum(np.linalg.norm(k, axis=1), floor)
    return rho * (k.shape[0] / rho.sum())


def _density_weights_vjp(k, m_points, g_w):
    floor = 1.0 / (m_points or k.shape[0])
    rad = np.linalg.norm(k, axis=1)
    rho = np.maximum(rad, floor)
    S = rho.sum()
    M = k.shape[0]
    g_rho = M / S * (g_w - np.dot(g_w, rho) / S)
    active = rad > floor
    out = np.zeros_like(k)
    out[active] = (g_rho[active] / rad[active])[:, None] * k[active]
    return out


def dirichlet(delta, n: int) -> np.ndarray:
    """``sum_r exp(-2i pi delta r)`` over ``r = -n//2 .. n - 1 - n//2`` (periodic in delta)."""
    d = np.asarray(delta, dtype=float)
    d = d - np.round(d)
    w = TWO_PI * d
    r0 = -(n // 2)
    center = r0 + (n - 1) / 2.0
    half = np.sin(0.5 * w)
    small = np.abs(half) < 1e-12
    ratio = np.where(small, float(n), np.sin(0.5 * n * w) / np.where(small, 1.0, half))
    return np.exp(-1j * w * center) * ratio


def dirichlet_gram(coords, shape):
    """``(F F^H, F F^T)`` in closed form from the Dirichlet kernel."""
    k = _check_coords(coords)
    H, W = shape
    G = dirichlet(k[:, None, 0] - k[None, :, 0], W) * dirichlet(k[:, None, 1] - k[None, :, 1], H)
    G2 = dirichlet(k[:, None, 0] + k[None, :, 0], W) * dirichlet(k[:, None, 1] + k[None, :, 1], H)
    return G, G2


def real_gram(coords, shape, phases=None) -> np.ndarray:
    """Gram matrix ``R R^T`` of the real-image sampling operator.

    ``R x = [Re F x; Im F x]`` for real ``x``; the result is ``2M x 2M``,
    symmetric positive semi-definite. Built from the separable phase
    matrices, ``F F^H = (Ey Ey^H) * (Ex Ex^H)`` elementwise.
    """
    k = _check_coords(coords)
    ey, ex = phases if phases is not None else _phases(k, tuple(shape))
    G = (ey @ ey.conj().T) * (ex @ ex.conj().T)
    G2 = (ey @ ey.T) * (ex @ ex.T)
    top = np.hstack([G.real + G2.real, G2.imag - G.imag])
    bot = np.hstack([G.imag + G2.imag, G.real - G2.real])
    K = 0.5 * np.vstack([top, bot])
    return 0.5 * (K + K.T)


def _split(s):
    return np.concatenate([s.real, s.imag], axis=-1)


def _merge(c):
    m = c.shape[-1] // 2
    return c[..., :m] + 1j * c[..., m:]


@dataclass
class CGResult:
    coefficients: np.ndarray
    residual_norms: np.ndarray
    iterations: int
    breakdown: bool


def cg_coefficients(K, y, lam, iterations, tol=0.0) -> CGResult:
    """CG on ``(R^T R + lam) x = R^T y`` with ``x = R^T c`` tracked through ``c``.

    ``K = R R^T``; ``y`` is ``(P, 2M)`` (one right-hand side per row).
    ``residual_norms[i]`` is ``|R x_i - y|`` after ``i`` iterations
    (``i = 0`` is the zero start).
    """
    y = np.atleast_2d(y)
    P = y.shape[0]
    c = np.zeros_like(y)
    r = y.copy()
    p = r.copy()
    Kx = np.zeros_like(y)
    Kr = r @ K
    rho = np.einsum("ij,ij->i", r, Kr)
    rho0 = rho.copy()
    hist = [np.linalg.norm(y, axis=1)]
    active = rho > 0
    breakdown = False
    it = 0
    for it in range(1, iterations + 1):
        if not active.any():
            it -= 1
            break
        w = p @ K
        denom = np.einsum("ij,ij->i", w, w) + lam * np.einsum("ij,ij->i", p, w)
        ok = active & (denom > 1e-300 * np.maximum(rho0, 1e-300))
        if np.any(active & ~ok):
            breakdown = True
        alpha = np.where(ok, rho / np.where(ok, denom, 1.0), 0.0)
        c += alpha[:, None] * p
        Kx += alpha[:, None] * w
        r -= alpha[:, None] * (w + lam * p)
        Kr = r @ K
        rho_new = np.einsum("ij,ij->i", r, Kr)
        hist.append(np.linalg.norm(Kx - y, axis=1))
        active = ok & (rho_new > (tol**2) * rho0)
        beta = np.where(active, rho_new / np.where(rho > 0, rho, 1.0), 0.0)
        p = r + beta[:, None] * p
        rho = rho_new
    return CGResult(c, np.array(hist).T.reshape(P, -1), it, breakdown)


class FrameRecon:
    """Differentiable reconstruction of one frame's sample set.

    :meth:`forward` samples real images ``x_data`` (``(P, H, W)``) at the
    frame's coordinates and reconstructs them; :meth:`backward` maps an image
    cotangent to cotangents of the coordinates and of ``tikhonov_lambda``.
    """

    def __init__(self, coords, shape, cfg: ReconConfig, m_points=None):
        self.k = _check_coords(coords)
        self.shape = tuple(shape)
        self.cfg = cfg
        self.m_points = m_points
        self.ey, self.ex = _phases(self.k, self.shape)
        self.lam = float(cfg.tikhonov_lambda)
        self._chol = None
        if cfg.method == "cg-least-squares":
            self.K = real_gram(self.k, self.shape, (self.ey, self.ex))
        else:
            self.weights = density_weights(self.k, m_points) if cfg.dcf else np.ones(len(self.k))

    @property
    def n_pixels(self):
        return self.shape[0] * self.shape[1]

    def sample(self, images):
        return _forward(self.ey, self.ex, images)

    def reconstruct_samples(self, s):
        """Real images from complex samples ``s`` (``(P, M)``)."""
        s = np.atleast_2d(s)
        if self.cfg.method == "adjoint-dcf":
            return np.real(_adjoint(self.ey, self.ex, self.weights * s)) / self.n_pixels
        if self.cfg.solver == "cholesky":
            return np.real(_adjoint(self.ey, self.ex, _merge(self._solve(_split(s)))))
        res = cg_coefficients(self.K, _split(s), self.lam, self.cfg.cg_iterations, self.cfg.cg_tol)
        self.last_cg = res
        if res.breakdown:
            warnings.warn("CG breakdown: returning last iterate", RuntimeWarning, stacklevel=2)
        return np.real(_adjoint(self.ey, self.ex, _merge(res.coefficients)))

    def forward(self, x_data):
        self.x_data = np.asarray(x_data, dtype=float)
        self.s = self.sample(self.x_data)
        self.x_hat = self.reconstruct_samples(self.s)
        return self.x_hat

    def _solve(self, rhs):
        if self._chol is None:
            if self.lam <= 0:
                raise ValueError("implicit CG gradient requires tikhonov_lambda > 0")
            A = self.K + self.lam * np.eye(self.K.shape[0])
            self._chol = scipy.linalg.cho_factor(A, lower=True, check_finite=False)
        return scipy.linalg.cho_solve(self._chol, rhs.T, check_finite=False).T

    def backward(self, g):
        """Return ``(grad_coords (M, 2), grad_lambda)`` for image cotangent ``g``."""
        g = np.asarray(g, dtype=float).reshape(self.x_hat.shape)
        if self.cfg.method == "adjoint-dcf":
            n = self.n_pixels
            fg = self.sample(g)
            ws = self.weights * self.s
            grad = _coord_gradient(self.ey, self.ex, self.shape, g, ws) / n
            grad += _coord_gradient(self.ey, self.ex, self.shape, self.x_data, self.weights * fg) / n
            if self.cfg.dcf:
                g_w = np.real(np.conj(fg) * self.s).sum(axis=0) / n
                grad += _density_weights_vjp(self.k, self.m_points, g_w)
            return grad, 0.0
        # u = (R^T R + lam)^-1 g via push-through: u = (g - R^T (K + lam)^-1 R g) / lam
        w = self._solve(_split(self.sample(g)))
        u = (g - np.real(_adjoint(self.ey, self.ex, _merge(w)))) / self.lam
        e = self.x_data - self.x_hat
        grad = _coord_gradient(self.ey, self.ex, self.shape, u, self.sample(e))
        grad += _coord_gradient(self.ey, self.ex, self.shape, e, self.sample(u))
        grad_lam = -float(np.sum(u * self.x_hat))
        return grad, grad_lam


def acquire(frames, traj: Trajectory) -> KSpaceData:
    """Sample ``frames`` (``(N, H, W)`` or ``(P, N, H, W)``) along ``traj``."""
    x = np.asarray(frames, dtype=float)
    if x.shape[-3] != traj.n_frames:
        raise ValueError("trajectory and sequence frame counts differ")
    vals = np.stack([nudft_forward(x[..., f, :, :], traj.frame_coords(f)) for f in range(traj.n_frames)], axis=-2)
    return KSpaceData(traj, vals, x.shape[-2:])


def reconstruct(ksp: KSpaceData, cfg: ReconConfig) -> np.ndarray:
    """Per-frame real images from acquired samples, ``(..., N, H, W)``."""
    out = []
    for f in range(ksp.traj.n_frames):
        op = FrameRecon(ksp.traj.frame_coords(f), ksp.shape, cfg, ksp.traj.m_points)
        v = ksp.values[..., f, :]
        out.append(op.reconstruct_samples(v.reshape(-1, v.shape[-1])).reshape(v.shape[:-1] + ksp.shape))
    return np.stack(out, axis=-3)
