"""Unit-sphere feature embeddings and the spherical similarity.

Feature maps are ``(H, W, D)`` arrays; an embedded field is ``(H, W, D+1)``
with every pixel on the unit sphere. Two embedding modes exist:

* ``orthogonal-tangent`` (default): the exponential map at the north pole
  with the tangent lift ``[phi, 0]``, which lands exactly on the sphere.
* ``paper-verbatim-normalized``: the lift ``[phi, 1]`` followed by an
  explicit renormalization, kept for ablation.
"""

from __future__ import annotations

import numpy as np

from .errors import NotUnit, ShapeMismatch

MODES = ("orthogonal-tangent", "paper-verbatim-normalized")

# sin(r)/r and its derivative-related factor switch to Taylor below this.
_TINY = 1e-8


def _sinc(r: np.ndarray) -> np.ndarray:
    """sin(r)/r with a Taylor branch at r = 0."""
    r = np.asarray(r, dtype=float)
    safe = np.maximum(r, _TINY)
    return np.where(r < _TINY, 1.0 - r * r / 6.0, np.sin(safe) / safe)


def _embed(phi: np.ndarray, mode: str) -> np.ndarray:
    """Vectorized embedding of ``(..., D)`` tangent vectors onto S^D."""
    phi = np.asarray(phi, dtype=float)
    d = phi.shape[-1]
    if mode == "orthogonal-tangent":
        r = np.linalg.norm(phi, axis=-1)
        out = np.empty(phi.shape[:-1] + (d + 1,))
        out[..., :d] = phi * _sinc(r)[..., None]
        out[..., d] = np.cos(r)
        return out
    if mode == "paper-verbatim-normalized":
        bar = np.concatenate([phi, np.ones(phi.shape[:-1] + (1,))], axis=-1)
        n = np.linalg.norm(bar, axis=-1)  # >= 1, never zero
        raw = bar * (np.sin(n) / n)[..., None]
        raw[..., d] += np.cos(n)
        return raw / np.linalg.norm(raw, axis=-1, keepdims=True)
    raise ValueError(f"unknown embedding mode {mode!r}")


def spherical_exp(phi: np.ndarray, mode: str = "orthogonal-tangent") -> np.ndarray:
    """Map a D-vector to a unit (D+1)-vector; ``spherical_exp(0) = N``."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 1:
        raise ShapeMismatch(f"expected a 1-D feature vector, got shape {phi.shape}")
    return _embed(phi, mode)


def spherical_distance(a: np.ndarray, b: np.ndarray) -> float:
    """Great-circle distance ``arccos(<a, b>)`` in [0, pi].

    Both inputs must be unit vectors within 1e-6; the inner product is
    clamped to [-1, 1] before arccos.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if abs(np.linalg.norm(a) - 1.0) > 1e-6 or abs(np.linalg.norm(b) - 1.0) > 1e-6:
        raise NotUnit("spherical_distance expects unit vectors")
    return float(np.arccos(np.clip(np.dot(a, b), -1.0, 1.0)))


def embed_feature_map(phi: np.ndarray, mode: str = "orthogonal-tangent") -> np.ndarray:
    """Embed every pixel of an ``(H, W, D)`` feature map onto the sphere."""
    phi = np.asarray(phi, dtype=float)
    if phi.ndim != 3:
        raise ShapeMismatch(f"expected an (H, W, D) feature map, got shape {phi.shape}")
    return _embed(phi, mode)


def spherical_similarity(phi_m: np.ndarray, phi_f: np.ndarray) -> float:
    """Sum over pixels of one minus the inner product of the unit features.

    Zero iff the fields are identical; at most ``2 * H * W``.
    """
    phi_m = np.asarray(phi_m, dtype=float)
    phi_f = np.asarray(phi_f, dtype=float)
    if phi_m.shape != phi_f.shape:
        raise ShapeMismatch(f"field shapes differ: {phi_m.shape} vs {phi_f.shape}")
    return float(np.sum(1.0 - np.einsum("ijk,ijk->ij", phi_m, phi_f)))


def residual_field(phi_m: np.ndarray, phi_f: np.ndarray) -> np.ndarray:
    """Per-pixel ``1 - <m, f>`` residuals flattened in row-major order.

    The sum of the residual vector equals ``spherical_similarity``.
    """
    phi_m = np.asarray(phi_m, dtype=float)
    phi_f = np.asarray(phi_f, dtype=float)
    if phi_m.shape != phi_f.shape:
        raise ShapeMismatch(f"field shapes differ: {phi_m.shape} vs {phi_f.shape}")
    return (1.0 - np.einsum("ijk,ijk->ij", phi_m, phi_f)).ravel()


def embed_vjp(phi: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    """Pull an ambient cotangent at ``EXP(phi)`` back to the tangent space.

    Only the default ``orthogonal-tangent`` mode is differentiated; ``phi``
    is ``(..., D)``, ``upstream`` is ``(..., D+1)``.
    """
    phi = np.asarray(phi, dtype=float)
    upstream = np.asarray(upstream, dtype=float)
    d = phi.shape[-1]
    r = np.linalg.norm(phi, axis=-1)
    s = _sinc(r)
    t = _dsinc_over_r(r)
    u_head = upstream[..., :d]
    u_last = upstream[..., d]
    dot = np.einsum("...k,...k->...", u_head, phi)
    return u_head * s[..., None] + phi * (dot * t - u_last * s)[..., None]


def embed_jvp(phi: np.ndarray, tangent: np.ndarray) -> np.ndarray:
    """Push a tangent-space perturbation forward through the embedding."""
    phi = np.asarray(phi, dtype=float)
    tangent = np.asarray(tangent, dtype=float)
    d = phi.shape[-1]
    r = np.linalg.norm(phi, axis=-1)
    s = _sinc(r)
    t = _dsinc_over_r(r)
    dot = np.einsum("...k,...k->...", phi, tangent)
    out = np.empty(phi.shape[:-1] + (d + 1,))
    out[..., :d] = tangent * s[..., None] + phi * (dot * t)[..., None]
    out[..., d] = -s * dot
    return out


def _dsinc_over_r(r: np.ndarray) -> np.ndarray:
    """(r cos r - sin r) / r^3 with a Taylor branch at r = 0."""
    r = np.asarray(r, dtype=float)
    safe = np.maximum(r, 1e-4)
    taylor = -1.0 / 3.0 + r * r / 30.0
    return np.where(r < 1e-4, taylor, (safe * np.cos(safe) - np.sin(safe)) / safe ** 3)
