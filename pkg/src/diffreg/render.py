"""Pinhole C-arm projector with exact ray-driven DRR synthesis.

Geometry conventions
--------------------
The world frame is anchored at the isocenter. The X-ray source sits at
``(0, 0, -f/2)``, the detector plane at ``z = +f/2`` with the principal
point at the detector center, so ``f`` is the full source-to-detector
distance and the magnification at the isocenter is 2.

A volume stores its ``origin`` as the low corner of the voxel box, i.e.
voxel ``(i, j, k)`` spans ``origin + [i, j, k] * spacing`` to
``origin + [i+1, j+1, k+1] * spacing``. ``Camera.iso_offset`` shifts the
box relative to the isocenter.

A pose ``theta`` moves the volume: a volume-frame point ``q`` sits at
``se3_exp(theta).apply(q)`` in world coordinates; rays are therefore cast
in the volume frame through the inverse transform. Line integrals are
exact sums of density times intersection length over the voxels crossed
(Siddon), with everything outside the box contributing zero.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import BadEnergy, BadFocal, DegenerateRay, ShapeMismatch
from .lie import Transform3, compose, invert, se3_exp

#: Default finite-difference steps for pose gradients: radians, millimeters.
DEFAULT_FD_ROT = 1e-3
DEFAULT_FD_TRANS = 1e-1


@dataclass
class Volume:
    """Scalar attenuation grid with physical spacing (mm) and origin (mm)."""

    spacing: np.ndarray
    origin: np.ndarray
    data: np.ndarray

    def __post_init__(self):
        self.spacing = np.broadcast_to(np.asarray(self.spacing, dtype=float), 3).copy()
        self.origin = np.asarray(self.origin, dtype=float).copy()
        self.data = np.asarray(self.data, dtype=float)
        if self.data.ndim != 3:
            raise ShapeMismatch(f"volume data must be 3-D, got shape {self.data.shape}")
        if np.any(self.spacing <= 0):
            raise ValueError("voxel spacing must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("volume data must be finite")

    @property
    def dims(self) -> tuple:
        return self.data.shape

    @property
    def extent(self) -> np.ndarray:
        """Physical size of the box (mm)."""
        return np.array(self.data.shape) * self.spacing

    @property
    def center(self) -> np.ndarray:
        return self.origin + 0.5 * self.extent


@dataclass
class Camera:
    """Symmetric C-arm layout: ``f`` is source-to-detector distance (mm)."""

    f: float = 600.0
    det_w: int = 48
    det_h: int = 48
    pixel_mm: float = 5.0
    iso_offset: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        if self.f <= 0:
            raise BadFocal(f"source-to-detector distance must be positive, got {self.f}")
        if self.det_w < 1 or self.det_h < 1:
            raise ValueError("detector must have at least one pixel per axis")
        if self.pixel_mm <= 0:
            raise ValueError("pixel pitch must be positive")
        self.iso_offset = np.asarray(self.iso_offset, dtype=float).copy()

    def source(self) -> np.ndarray:
        return np.array([0.0, 0.0, -0.5 * self.f])

    def pixel_centers(self) -> np.ndarray:
        """(det_h, det_w, 3) world positions of the detector pixel centers."""
        u = (np.arange(self.det_w) - (self.det_w - 1) / 2.0) * self.pixel_mm
        v = (np.arange(self.det_h) - (self.det_h - 1) / 2.0) * self.pixel_mm
        px = np.empty((self.det_h, self.det_w, 3))
        px[..., 0] = u[None, :]
        px[..., 1] = v[:, None]
        px[..., 2] = 0.5 * self.f
        return px


def _raycast_batch(vol: Volume, origin: np.ndarray, p0: np.ndarray, p1: np.ndarray) -> np.ndarray:
    """Exact line integrals for a batch of segments, volume box at ``origin``.

    Traverses voxel crossings in parameter order and identifies each voxel
    by its segment midpoint, which is robust at plane/corner ties. Output
    is bit-deterministic: accumulation order along each ray is fixed.
    """
    data = vol.data
    nx, ny, nz = data.shape
    dims = np.array([nx, ny, nz])
    sp = vol.spacing
    lo = origin
    hi = origin + dims * sp
    flat = data.ravel()

    p0 = np.asarray(p0, dtype=float).reshape(-1, 3)
    p1 = np.asarray(p1, dtype=float).reshape(-1, 3)
    n = p0.shape[0]
    d = p1 - p0
    seg_len = np.linalg.norm(d, axis=1)

    zero = d == 0.0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv_d = np.where(zero, np.inf, 1.0 / d)
        t1 = (lo[None, :] - p0) * inv_d
        t2 = (hi[None, :] - p0) * inv_d
    t_lo = np.where(zero, -np.inf, np.minimum(t1, t2))
    t_hi = np.where(zero, np.inf, np.maximum(t1, t2))
    a_in = np.maximum(t_lo.max(axis=1), 0.0)
    a_out = np.minimum(t_hi.min(axis=1), 1.0)
    outside_slab = np.any(zero & ((p0 < lo[None, :]) | (p0 >= hi[None, :])), axis=1)
    active = (a_in < a_out) & ~outside_slab & (seg_len > 0.0)

    # alpha advance per voxel crossing and first crossing after entry
    t_delta = sp[None, :] * np.abs(inv_d)
    x_in = p0 + a_in[:, None] * d
    cell = np.floor((x_in - lo[None, :]) / sp[None, :])
    next_bound = np.where(d > 0, lo[None, :] + (cell + 1.0) * sp[None, :], lo[None, :] + cell * sp[None, :])
    t_max = np.where(zero, np.inf, (next_bound - p0) * inv_d)

    # per-axis views keep the hot loop on flat arrays
    tmx, tmy, tmz = t_max[:, 0].copy(), t_max[:, 1].copy(), t_max[:, 2].copy()
    tdx, tdy, tdz = t_delta[:, 0], t_delta[:, 1], t_delta[:, 2]
    p0x, p0y, p0z = p0[:, 0], p0[:, 1], p0[:, 2]
    dx, dy, dz = d[:, 0], d[:, 1], d[:, 2]
    inv_spx, inv_spy, inv_spz = 1.0 / sp[0], 1.0 / sp[1], 1.0 / sp[2]

    acc = np.zeros(n)
    a_cur = a_in.copy()
    max_steps = int(nx + ny + nz + 8)
    for _ in range(max_steps):
        if not active.any():
            break
        a_next = np.minimum(np.minimum(np.minimum(tmx, tmy), tmz), a_out)
        mid = 0.5 * (a_cur + a_next)
        ix = np.floor((p0x + mid * dx - lo[0]) * inv_spx).astype(np.int64)
        iy = np.floor((p0y + mid * dy - lo[1]) * inv_spy).astype(np.int64)
        iz = np.floor((p0z + mid * dz - lo[2]) * inv_spz).astype(np.int64)
        take = (
            active
            & (a_next > a_cur)
            & (ix >= 0) & (ix < nx)
            & (iy >= 0) & (iy < ny)
            & (iz >= 0) & (iz < nz)
        )
        flat_idx = (ix * ny + iy) * nz + iz
        np.clip(flat_idx, 0, flat.size - 1, out=flat_idx)
        np.add(acc, flat[flat_idx] * ((a_next - a_cur) * seg_len), out=acc, where=take)
        np.add(tmx, tdx, out=tmx, where=(tmx <= a_next) & active)
        np.add(tmy, tdy, out=tmy, where=(tmy <= a_next) & active)
        np.add(tmz, tdz, out=tmz, where=(tmz <= a_next) & active)
        np.copyto(a_cur, a_next, where=active)
        active = active & (a_cur < a_out)
    return acc


def siddon_raycast(vol: Volume, p0: np.ndarray, p1: np.ndarray) -> float:
    """Exact attenuation line integral along the segment ``p0 -> p1`` (mm)."""
    p0 = np.asarray(p0, dtype=float)
    p1 = np.asarray(p1, dtype=float)
    if np.array_equal(p0, p1):
        raise DegenerateRay("ray endpoints coincide")
    return float(_raycast_batch(vol, vol.origin, p0[None, :], p1[None, :])[0])


def render_transforms(vol: Volume, cam: Camera, transforms) -> np.ndarray:
    """Render one DRR per rigid transform, batched into a single traversal.

    Returns ``(len(transforms), det_h, det_w)``.
    """
    src = cam.source()
    px = cam.pixel_centers().reshape(-1, 3)
    n_pix = px.shape[0]
    k = len(transforms)
    p0 = np.empty((k * n_pix, 3))
    p1 = np.empty((k * n_pix, 3))
    for i, T in enumerate(transforms):
        Tin = invert(T)
        p0[i * n_pix : (i + 1) * n_pix] = Tin.apply(src)[None, :]
        p1[i * n_pix : (i + 1) * n_pix] = Tin.apply(px)
    vals = _raycast_batch(vol, vol.origin + cam.iso_offset, p0, p1)
    return vals.reshape(k, cam.det_h, cam.det_w)


def render_drr(vol: Volume, cam: Camera, theta: np.ndarray) -> np.ndarray:
    """DRR of the volume posed by ``se3_exp(theta)`` about the isocenter."""
    return render_transforms(vol, cam, [se3_exp(theta)])[0]


def enhance_volume(vol: Volume, psi=None) -> Volume:
    """Additive enhancement hook ``V + psi(V)``; ``psi=None`` is the zero operator."""
    if psi is None:
        return vol
    extra = np.asarray(psi(vol.data), dtype=float)
    if extra.shape != vol.data.shape:
        raise ShapeMismatch(
            f"enhancement output {extra.shape} does not match volume {vol.data.shape}"
        )
    return Volume(vol.spacing, vol.origin, vol.data + extra)


def invert_intensity(img: np.ndarray, i0: float) -> np.ndarray:
    """Log inversion ``1 - log(1+I)/log(1+I0)`` mapping [0, I0] onto [0, 1]."""
    if i0 <= 0:
        raise BadEnergy(f"beam energy must be positive, got {i0}")
    img = np.asarray(img, dtype=float)
    return 1.0 - np.log1p(img) / np.log1p(i0)


def invert_intensity_grad(img: np.ndarray, i0: float) -> np.ndarray:
    """Elementwise derivative of ``invert_intensity`` with respect to I."""
    if i0 <= 0:
        raise BadEnergy(f"beam energy must be positive, got {i0}")
    img = np.asarray(img, dtype=float)
    return -1.0 / ((1.0 + img) * np.log1p(i0))


def perturbed_transforms(theta: np.ndarray, steps: np.ndarray):
    """Transforms for central differences along each twist axis.

    Returns 12 transforms ordered ``[+d0, -d0, +d1, -d1, ...]``; each is the
    left-multiplied perturbation ``exp(+-step_k e_k) compose exp(theta)``.
    """
    T = se3_exp(theta)
    out = []
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = steps[k]
        out.append(compose(se3_exp(delta), T))
        out.append(compose(se3_exp(-delta), T))
    return out


def fd_steps(rot_step: float = DEFAULT_FD_ROT, trans_step: float = DEFAULT_FD_TRANS) -> np.ndarray:
    return np.array([rot_step] * 3 + [trans_step] * 3)


def render_pose_gradient(
    vol: Volume, cam: Camera, theta: np.ndarray, steps: np.ndarray | None = None
) -> np.ndarray:
    """Central-difference images ``dI/dtheta_k`` for the six twist axes.

    Uses left-multiplied perturbations; returns ``(6, det_h, det_w)``.
    """
    steps = fd_steps() if steps is None else np.asarray(steps, dtype=float)
    if np.any(steps <= 0):
        raise ValueError("finite-difference steps must be positive")
    imgs = render_transforms(vol, cam, perturbed_transforms(theta, steps))
    return (imgs[0::2] - imgs[1::2]) / (2.0 * steps[:, None, None])
