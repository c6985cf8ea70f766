"""Domain randomization applied to rendered images during training.

The pipeline applies, in this fixed order: Gaussian smoothing, noise
injection, lower/upper bound normalization, linear intensity scaling, gamma
adjustment, nonlinear sine scaling, and random erasing. Interval constants
follow the protocol this toolkit targets; "max" always means the maximum
intensity of the image at the stage where the transform runs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.ndimage import correlate1d


@dataclass
class RandomizationConfig:
    smooth: bool = True
    smooth_prob: float = 0.5
    smooth_kernels: tuple = (3, 5)
    noise: bool = True
    noise_mean_frac: tuple = (-0.15, 0.1)
    noise_sigma_frac: float = 0.05
    bound_norm: bool = True
    bound_low_frac: tuple = (-0.04, 0.02)
    bound_high_frac: tuple = (0.9, 1.05)
    linear: bool = True
    linear_range: tuple = (0.9, 1.05)
    gamma: bool = True
    gamma_range: tuple = (0.7, 1.3)
    sine: bool = True
    sine_a: tuple = (0.8, 1.1)
    sine_b: tuple = (0.8, 1.1)
    sine_c: tuple = (-0.5, 0.4)
    erase: bool = True
    erase_area: tuple = (0.02, 0.4)
    erase_aspect: tuple = (0.3, 1.0)

    def __post_init__(self):
        for name in (
            "noise_mean_frac",
            "bound_low_frac",
            "bound_high_frac",
            "linear_range",
            "gamma_range",
            "sine_a",
            "sine_b",
            "sine_c",
            "erase_area",
            "erase_aspect",
        ):
            lo, hi = getattr(self, name)
            if lo > hi:
                raise ValueError(f"{name} interval is not ordered: ({lo}, {hi})")
        if not 0.0 <= self.smooth_prob <= 1.0:
            raise ValueError("smooth_prob must be a probability")


def smooth_image(img: np.ndarray, kernel_size: int) -> np.ndarray:
    """Separable Gaussian blur, sigma = kernel_size / 6, edge replication."""
    sigma = kernel_size / 6.0
    radius = kernel_size // 2
    x = np.arange(-radius, radius + 1, dtype=float)
    w = np.exp(-0.5 * (x / sigma) ** 2)
    w /= w.sum()
    out = correlate1d(np.asarray(img, dtype=float), w, axis=0, mode="nearest")
    return correlate1d(out, w, axis=1, mode="nearest")


def inject_noise(img: np.ndarray, mean: float, sigma: float, rng) -> np.ndarray:
    return img + rng.normal(mean, sigma, img.shape)


def bound_normalize(img: np.ndarray, lo: float, hi: float, stage_max: float) -> np.ndarray:
    """Affinely map [0, max] onto [lo, hi] and clip into the new interval."""
    if stage_max <= 0:
        return np.full_like(img, lo)
    return np.clip(lo + (hi - lo) * img / stage_max, lo, hi)


def gamma_adjust(img: np.ndarray, gamma: float) -> np.ndarray:
    """Gamma on the min-max normalized intensities, rescaled back."""
    lo, hi = float(img.min()), float(img.max())
    if hi <= lo:
        return img.copy()
    unit = (img - lo) / (hi - lo)
    return lo + (hi - lo) * unit ** gamma


def sine_scale(img: np.ndarray, a: float, b: float, c: float) -> np.ndarray:
    return a * np.sin(b * img + c)


def _erase_geometry(shape: tuple, area_frac: float, aspect: float, rng):
    """Integer rectangle whose realized area fraction stays in [0.02, 0.4]."""
    h_img, w_img = shape
    total = h_img * w_img
    area = area_frac * total
    eh = int(round(np.sqrt(area * aspect)))
    ew = int(round(np.sqrt(area / aspect)))
    eh = min(max(eh, 1), h_img)
    ew = min(max(ew, 1), w_img)
    # nudge the rectangle until its true fraction is inside the target range
    for _ in range(4 * (h_img + w_img)):
        frac = eh * ew / total
        if frac < 0.02:
            if ew < w_img:
                ew += 1
            elif eh < h_img:
                eh += 1
            else:
                break
        elif frac > 0.4:
            if ew > 1:
                ew -= 1
            elif eh > 1:
                eh -= 1
            else:
                break
        else:
            break
    top = int(rng.integers(0, h_img - eh + 1))
    left = int(rng.integers(0, w_img - ew + 1))
    return top, left, eh, ew


def random_erase(img: np.ndarray, area_frac_range, aspect_range, rng) -> np.ndarray:
    """Fill one random rectangle with the pre-erase global mean intensity."""
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    img = np.asarray(img, dtype=float)
    area_frac = float(rng.uniform(*area_frac_range))
    aspect = float(rng.uniform(*aspect_range))
    top, left, eh, ew = _erase_geometry(img.shape, area_frac, aspect, rng)
    out = img.copy()
    out[top : top + eh, left : left + ew] = img.mean()
    return out


def randomize(img: np.ndarray, cfg: RandomizationConfig, seed, return_trace: bool = False):
    """Run the full randomization pipeline; deterministic given the seed.

    With ``return_trace`` the applied stages and their sampled parameters
    are returned alongside the image, in application order.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = np.asarray(img, dtype=float).copy()
    trace = []

    if cfg.smooth:
        apply = bool(rng.uniform() < cfg.smooth_prob)
        ksize = int(rng.choice(cfg.smooth_kernels))
        if apply:
            out = smooth_image(out, ksize)
            trace.append(("smooth", {"kernel": ksize}))
    if cfg.noise:
        m = float(out.max())
        mean = float(rng.uniform(cfg.noise_mean_frac[0] * m, cfg.noise_mean_frac[1] * m))
        sigma = cfg.noise_sigma_frac * m
        out = inject_noise(out, mean, sigma, rng)
        trace.append(("noise", {"mean": mean, "sigma": sigma, "max": m}))
    if cfg.bound_norm:
        m = float(out.max())
        lo = float(rng.uniform(cfg.bound_low_frac[0] * m, cfg.bound_low_frac[1] * m))
        hi = float(rng.uniform(cfg.bound_high_frac[0] * m, cfg.bound_high_frac[1] * m))
        out = bound_normalize(out, lo, hi, m)
        trace.append(("bound_norm", {"lo": lo, "hi": hi, "max": m}))
    if cfg.linear:
        s = float(rng.uniform(*cfg.linear_range))
        out = out * s
        trace.append(("linear", {"scale": s}))
    if cfg.gamma:
        g = float(rng.uniform(*cfg.gamma_range))
        out = gamma_adjust(out, g)
        trace.append(("gamma", {"gamma": g}))
    if cfg.sine:
        a = float(rng.uniform(*cfg.sine_a))
        b = float(rng.uniform(*cfg.sine_b))
        c = float(rng.uniform(*cfg.sine_c))
        out = sine_scale(out, a, b, c)
        trace.append(("sine", {"a": a, "b": b, "c": c}))
    if cfg.erase:
        area_frac = float(rng.uniform(*cfg.erase_area))
        aspect = float(rng.uniform(*cfg.erase_aspect))
        top, left, eh, ew = _erase_geometry(out.shape, area_frac, aspect, rng)
        fill = out.mean()
        out[top : top + eh, left : left + ew] = fill
        trace.append(
            (
                "erase",
                {
                    "area_frac": area_frac,
                    "aspect": aspect,
                    "realized_frac": eh * ew / out.size,
                    "fill": float(fill),
                },
            )
        )
    if return_trace:
        return out, trace
    return out
