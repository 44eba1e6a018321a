"""Image-quality measures and the two comparison layouts (decay curves, T1 maps)."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage

VIF_SCALES = 4
VIF_WINDOW = 11
VIF_SIGMA = VIF_WINDOW / 5.0
VIF_NOISE_VAR = 2.0
VIF_EPS = 1e-10
VIF_PEAK = 255.0


def psnr(reference, test) -> float:
    """``10 log10(peak^2 / MSE)`` with ``peak`` the dynamic range of ``reference``.

    Identical inputs give ``inf``.
    """
    ref = np.asarray(reference, dtype=float)
    tst = np.asarray(test, dtype=float)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {tst.shape}")
    peak = float(ref.max() - ref.min())
    if peak <= 0:
        raise ValueError("reference is constant; PSNR peak undefined")
    mse = float(np.mean((ref - tst) ** 2))
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak**2 / mse)


def gaussian_window(length=VIF_WINDOW, sigma=VIF_SIGMA) -> np.ndarray:
    ax = np.arange(length) - (length - 1) / 2.0
    g = np.exp(-(ax**2) / (2.0 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _local_stats(win, ref, dst):
    f = lambda im: ndimage.correlate(im, win, mode="reflect")  # noqa: E731
    mu1, mu2 = f(ref), f(dst)
    s1 = np.maximum(f(ref * ref) - mu1 * mu1, 0.0)
    s2 = np.maximum(f(dst * dst) - mu2 * mu2, 0.0)
    s12 = f(ref * dst) - mu1 * mu2
    return s1, s2, s12


def vif_terms(s1, s2, s12, noise_var=VIF_NOISE_VAR, eps=VIF_EPS):
    """Per-location (numerator, denominator) information terms from local moments."""
    g = s12 / (s1 + eps)
    sv = s2 - g * s12
    low1 = s1 < eps
    g = np.where(low1, 0.0, g)
    sv = np.where(low1, s2, sv)
    s1 = np.where(low1, 0.0, s1)
    low2 = s2 < eps
    g = np.where(low2, 0.0, g)
    sv = np.where(low2, 0.0, sv)
    neg = g < 0
    sv = np.where(neg, s2, sv)
    g = np.where(neg, 0.0, g)
    sv = np.maximum(sv, eps)
    num = np.log10(1.0 + g * g * s1 / (sv + noise_var))
    den = np.log10(1.0 + s1 / noise_var)
    return num, den


def vif(reference, test) -> float:
    """Pixel-domain visual information fidelity.

    Both images are mapped to the 8-bit range of ``reference`` before the
    local statistics are taken, so the fixed channel noise variance has the
    same meaning for maps in ms and frames in signal units.
    """
    ref = np.asarray(reference, dtype=float)
    tst = np.asarray(test, dtype=float)
    if ref.shape != tst.shape:
        raise ValueError(f"shape mismatch {ref.shape} vs {tst.shape}")
    if ref.ndim != 2 or min(ref.shape) < 32:
        raise ValueError("VIF needs 2D images of at least 32 x 32")
    lo, hi = float(ref.min()), float(ref.max())
    if hi <= lo:
        raise ValueError("reference has zero variance")
    scale = VIF_PEAK / (hi - lo)
    ref = (ref - lo) * scale
    tst = (tst - lo) * scale
    win = gaussian_window()
    num = den = 0.0
    for s in range(VIF_SCALES):
        if s > 0:
            ref = ndimage.correlate(ref, win, mode="reflect")[::2, ::2]
            tst = ndimage.correlate(tst, win, mode="reflect")[::2, ::2]
        n, d = vif_terms(*_local_stats(win, ref, tst))
        num += float(n.sum())
        den += float(d.sum())
    return num / den


def _masked(img, mask):
    return np.where(mask, img, 0.0)


def decay_psnr(frames, model_frames, mask) -> float:
    """Mean over frames of the PSNR restricted to ``mask``."""
    m = np.asarray(mask, dtype=bool)
    return float(np.mean([psnr(f[m], g[m]) for f, g in zip(frames, model_frames)]))


@dataclass
class EvalReport:
    decay_psnr_db: float
    decay_vif: float
    map_psnr_db: float
    map_vif: float
    per_frame_psnr: list = field(default_factory=list)
    roi_metrics: dict | None = None

    def as_row(self, **keys) -> dict:
        row = dict(keys)
        row.update({k: v for k, v in asdict(self).items() if k not in ("per_frame_psnr", "roi_metrics")})
        return row


def evaluate(run_map, oracle_map, run_seq_model, original_seq, mask, regions=None) -> EvalReport:
    """Compare a run against the fully-sampled oracle.

    T1-map metrics: ``run_map`` vs ``oracle_map`` on ``mask`` (PSNR on the
    masked pixels, VIF on the maps zeroed outside the mask). Decay metrics:
    each fitted model frame vs the original frame on the same mask, averaged
    over frames. ``regions`` optionally maps names to sub-masks for ROI PSNR.
    """
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("evaluation mask is empty")
    run_map = np.asarray(run_map, dtype=float)
    oracle_map = np.asarray(oracle_map, dtype=float)
    frames = original_seq.frames if hasattr(original_seq, "frames") else np.asarray(original_seq)
    model = run_seq_model.frames if hasattr(run_seq_model, "frames") else np.asarray(run_seq_model)
    per_frame = [psnr(f[m], g[m]) for f, g in zip(frames, model)]
    decay_vif = float(np.mean([vif(_masked(f, m), _masked(g, m)) for f, g in zip(frames, model)]))
    roi = None
    if regions:
        roi = {}
        for name, rm in regions.items():
            rm = np.asarray(rm, dtype=bool) & m
            if rm.any() and np.ptp(oracle_map[rm]) > 0:
                roi[name] = psnr(oracle_map[rm], run_map[rm])
    return EvalReport(
        decay_psnr_db=float(np.mean(per_frame)),
        decay_vif=decay_vif,
        map_psnr_db=psnr(oracle_map[m], run_map[m]),
        map_vif=vif(_masked(oracle_map, m), _masked(run_map, m)),
        per_frame_psnr=per_frame,
        roi_metrics=roi,
    )
