"""Inversion-recovery signal model, MOLLI correction and synthetic phantoms.

The signal of a pixel with parameters ``(A, B, T1*)`` sampled at inversion
time ``t`` is ``A - B * exp(-t / T1*)``. Phantoms are rasterized from a list
of ellipses, each carrying its own tissue parameters, and rendered into a
sequence of T1-weighted frames.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Inversion times (ms) of a 5(3)3-like MOLLI protocol, nine frames.
DEFAULT_INVERSION_TIMES = (100.0, 180.0, 260.0, 1000.0, 1080.0, 1160.0, 1900.0, 1980.0, 2800.0)


class DomainError(ValueError):
    """Raised when a model parameter lies outside its domain."""


class CorrectionError(ValueError):
    """Raised when the MOLLI correction is undefined (A <= 0)."""


@dataclass(frozen=True)
class T1Phantom:
    """Ground-truth parameter maps over a ``height x width`` pixel grid."""

    a_map: np.ndarray
    b_map: np.ndarray
    t1_star_map: np.ndarray
    region_labels: np.ndarray

    @property
    def height(self) -> int:
        return self.a_map.shape[0]

    @property
    def width(self) -> int:
        return self.a_map.shape[1]

    @property
    def shape(self) -> tuple[int, int]:
        return self.a_map.shape

    @property
    def tissue_mask(self) -> np.ndarray:
        return self.region_labels > 0

    @property
    def t1_map(self) -> np.ndarray:
        """Corrected T1 map, zero on background."""
        out = np.zeros(self.shape)
        m = self.tissue_mask
        out[m] = molli_correct(self.a_map[m], self.b_map[m], self.t1_star_map[m])
        return out


@dataclass(frozen=True)
class WeightedSequence:
    """``N`` T1-weighted frames with their inversion times (ms)."""

    frames: np.ndarray
    inversion_times: np.ndarray = field()

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=float)
        times = np.asarray(self.inversion_times, dtype=float)
        if frames.ndim != 3:
            raise ValueError(f"frames must be (N, H, W), got shape {frames.shape}")
        if times.shape != (frames.shape[0],):
            raise ValueError("one inversion time per frame required")
        if times.size < 3:
            raise ValueError("at least three frames are needed to fit three parameters")
        if np.any(times <= 0) or np.any(np.diff(times) <= 0):
            raise ValueError("inversion times must be positive and strictly increasing")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "inversion_times", times)

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.frames.shape[1:]


def signal(a, b, t1_star, t):
    """Evaluate ``a - b * exp(-t / t1_star)`` (broadcasting)."""
    t1_star = np.asarray(t1_star, dtype=float)
    if np.any(t1_star <= 0):
        raise DomainError("t1_star must be positive")
    t = np.asarray(t, dtype=float)
    if np.any(t < 0):
        raise DomainError("inversion time must be non-negative")
    out = np.asarray(a, dtype=float) - np.asarray(b, dtype=float) * np.exp(-t / t1_star)
    return out[()] if out.ndim == 0 else out


def molli_correct(a, b, t1_star):
    """Look-Locker correction ``T1 = T1* * (B / A - 1)``."""
    a = np.asarray(a, dtype=float)
    if np.any(a <= 0):
        raise CorrectionError("correction undefined for A <= 0")
    t1_star = np.asarray(t1_star, dtype=float)
    if np.any(t1_star <= 0):
        raise DomainError("t1_star must be positive")
    out = t1_star * (np.asarray(b, dtype=float) / a - 1.0)
    return out[()] if out.ndim == 0 else out


def pixel_centers(height: int, width: int) -> tuple[np.ndarray, np.ndarray]:
    """Normalized pixel-center coordinates in (-1, 1); y grows with the row index."""
    x = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    y = (np.arange(height) + 0.5) / height * 2.0 - 1.0
    return np.meshgrid(x, y)


def ellipse_mask(xx, yy, center, axes, rotation_deg) -> np.ndarray:
    cx, cy = center
    ax, ay = axes
    th = np.deg2rad(rotation_deg)
    dx, dy = xx - cx, yy - cy
    u = dx * np.cos(th) + dy * np.sin(th)
    v = -dx * np.sin(th) + dy * np.cos(th)
    return (u / ax) ** 2 + (v / ay) ** 2 <= 1.0


def generate_phantom(config: dict) -> T1Phantom:
    """Rasterize a phantom description.

    ``config`` holds ``width``, ``height`` and a list ``ellipses``; every
    ellipse has ``center`` and ``axes`` (normalized units, the grid spans
    [-1, 1] on both axes), ``rotation`` (degrees), ``label`` (> 0) and tissue
    values ``a``, ``b``, ``t1_star`` (ms). Later ellipses overwrite earlier
    ones; ellipses reaching outside the grid are clipped.
    """
    width, height = int(config["width"]), int(config["height"])
    if width <= 0 or height <= 0:
        raise ValueError("grid dimensions must be positive")
    xx, yy = pixel_centers(height, width)
    a_map = np.zeros((height, width))
    b_map = np.zeros((height, width))
    t1s_map = np.zeros((height, width))
    labels = np.zeros((height, width), dtype=np.int64)
    for i, ell in enumerate(config.get("ellipses") or []):
        label = int(ell.get("label", i + 1))
        if label <= 0:
            raise ValueError(f"ellipse {i}: label must be positive")
        if ell["t1_star"] <= 0:
            raise DomainError(f"ellipse {i}: t1_star must be positive")
        m = ellipse_mask(xx, yy, ell["center"], ell["axes"], ell.get("rotation", 0.0))
        a_map[m] = ell["a"]
        b_map[m] = ell["b"]
        t1s_map[m] = ell["t1_star"]
        labels[m] = label
    return T1Phantom(a_map, b_map, t1s_map, labels)


def render_sequence(phantom: T1Phantom, inversion_times=DEFAULT_INVERSION_TIMES,
                    noise_sigma: float = 0.0, seed=None) -> WeightedSequence:
    """Evaluate the signal model per pixel and frame, plus optional Gaussian noise."""
    times = np.asarray(inversion_times, dtype=float)
    if times.size < 3:
        raise ValueError("at least three inversion times are required")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    frames = np.zeros((times.size,) + phantom.shape)
    m = phantom.tissue_mask
    frames[:, m] = signal(phantom.a_map[m], phantom.b_map[m], phantom.t1_star_map[m], times[:, None])
    if noise_sigma > 0:
        rng = np.random.default_rng(seed)
        frames = frames + rng.normal(0.0, noise_sigma, frames.shape)
    return WeightedSequence(frames, times)


def cardiac_phantom_config(width: int = 64, height: int = 64, seed: int = 0) -> dict:
    """Randomized short-axis-like phantom: body, myocardial ring, blood pool, lesions.

    Tissue values are defaults for synthetic data only (myocardium T1* ~ 700 ms,
    blood ~ 1100 ms).
    """
    rng = np.random.default_rng(seed)

    def tissue(t1_star, a, ratio):
        return {"t1_star": float(t1_star), "a": float(a), "b": float(a * ratio)}

    jitter = lambda s: float(rng.uniform(-s, s))  # noqa: E731
    cx, cy = jitter(0.08), jitter(0.08)
    ell = []
    ell.append({"label": 1, "center": [jitter(0.03), jitter(0.03)], "axes": [0.86 + jitter(0.05), 0.72 + jitter(0.05)],
                "rotation": jitter(15), **tissue(rng.uniform(380, 520), rng.uniform(700, 900), rng.uniform(1.9, 2.1))})
    ell.append({"label": 5, "center": [0.45 + jitter(0.05), -0.35 + jitter(0.05)], "axes": [0.22, 0.14],
                "rotation": jitter(40), **tissue(rng.uniform(200, 280), rng.uniform(900, 1100), rng.uniform(1.9, 2.0))})
    r_out = 0.42 + jitter(0.05)
    ell.append({"label": 2, "center": [cx, cy], "axes": [r_out, r_out * rng.uniform(0.85, 1.0)],
                "rotation": jitter(30), **tissue(rng.uniform(650, 750), rng.uniform(500, 650), rng.uniform(2.0, 2.3))})
    r_in = r_out * rng.uniform(0.55, 0.7)
    ell.append({"label": 3, "center": [cx + jitter(0.03), cy + jitter(0.03)], "axes": [r_in, r_in * rng.uniform(0.8, 1.0)],
                "rotation": jitter(30), **tissue(rng.uniform(1000, 1200), rng.uniform(900, 1100), rng.uniform(1.9, 2.1))})
    for _ in range(int(rng.integers(1, 4))):
        ang = rng.uniform(0, 2 * np.pi)
        rad = 0.5 * (r_out + r_in)
        size = rng.uniform(0.04, 0.08)
        ell.append({"label": 4, "center": [cx + rad * np.cos(ang), cy + rad * np.sin(ang)], "axes": [size, size * 0.7],
                    "rotation": float(np.rad2deg(ang)),
                    **tissue(rng.uniform(850, 1000), rng.uniform(550, 650), rng.uniform(2.0, 2.2))})
    for e in ell:
        e["center"] = [float(c) for c in e["center"]]
        e["axes"] = [float(c) for c in e["axes"]]
    return {"width": width, "height": height, "ellipses": ell}
