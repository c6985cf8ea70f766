"""Synthetic phantoms with embedded landmarks, plus registration metrics.

A phantom spec is a dict::

    {"name": ..., "dims": (nx, ny, nz), "spacing": s, "background": 0.1,
     "shapes": [{"kind": "sphere", "center": ..., "radius": ..., "density": ...},
                {"kind": "box", "center": ..., "half": ..., "density": ...},
                {"kind": "tube", "center": ..., "axis": 0|1|2, "radius": ...,
                 "half_length": ..., "density": ...}]}

Coordinates are mm in the volume frame (the box is centered on the frame
origin). Shapes are rasterized at voxel centers in declaration order, later
shapes overwriting earlier ones; each shape contributes landmark keypoints
(centers, corners, poles).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import EmptyInput, EmptySpec, NoLandmarks
from .lie import se3_exp
from .render import Volume


@dataclass
class Phantom:
    volume: Volume
    landmarks: np.ndarray  # (n, 3) mm, volume frame
    name: str
    seed: int

    def __post_init__(self):
        self.landmarks = np.asarray(self.landmarks, dtype=float)
        lo = self.volume.origin
        hi = self.volume.origin + self.volume.extent
        if np.any(self.landmarks < lo) or np.any(self.landmarks > hi):
            raise ValueError("landmarks must lie inside the volume bounding box")
        if len(self.landmarks) < 4 or _coplanar(self.landmarks):
            raise ValueError("need at least 4 non-coplanar landmarks")


@dataclass
class MetricsReport:
    mtre_values: np.ndarray
    smsr: float
    median: float
    p75: float
    p95: float


def _coplanar(points: np.ndarray) -> bool:
    q = points - points.mean(axis=0)
    return np.linalg.matrix_rank(q, tol=1e-9) < 3


def _voxel_centers(dims, spacing, origin):
    axes = [origin[k] + (np.arange(dims[k]) + 0.5) * spacing[k] for k in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _shape_distance(sh: dict, cx, cy, cz) -> np.ndarray:
    """Signed distance (mm, negative inside) from voxel centers to a shape.

    An optional per-shape ``rotate_deg`` axis-angle (degrees) tilts the shape
    about its center, which also keeps flat faces off the voxel lattice.
    """
    c = np.asarray(sh["center"], dtype=float)
    if "rotate_deg" in sh:
        from .lie import so3_exp

        R = so3_exp(np.deg2rad(np.asarray(sh["rotate_deg"], dtype=float)))
        # rotate sampling coordinates into the shape frame
        dx, dy, dz = cx - c[0], cy - c[1], cz - c[2]
        rx = R[0, 0] * dx + R[1, 0] * dy + R[2, 0] * dz + c[0]
        ry = R[0, 1] * dx + R[1, 1] * dy + R[2, 1] * dz + c[1]
        rz = R[0, 2] * dx + R[1, 2] * dy + R[2, 2] * dz + c[2]
        sh = {k: v for k, v in sh.items() if k != "rotate_deg"}
        return _shape_distance(sh, rx, ry, rz)
    kind = sh["kind"]
    if kind == "sphere":
        r = float(sh["radius"])
        return np.sqrt((cx - c[0]) ** 2 + (cy - c[1]) ** 2 + (cz - c[2]) ** 2) - r
    if kind == "box":
        half = np.asarray(sh["half"], dtype=float)
        qx = np.abs(cx - c[0]) - half[0]
        qy = np.abs(cy - c[1]) - half[1]
        qz = np.abs(cz - c[2]) - half[2]
        outside = np.sqrt(
            np.maximum(qx, 0.0) ** 2 + np.maximum(qy, 0.0) ** 2 + np.maximum(qz, 0.0) ** 2
        )
        inside = np.minimum(np.maximum(qx, np.maximum(qy, qz)), 0.0)
        return outside + inside
    if kind == "tube":
        axis = int(sh["axis"])
        r = float(sh["radius"])
        hl = float(sh["half_length"])
        coords = [cx, cy, cz]
        along = np.abs(coords[axis] - c[axis]) - hl
        perp = [coords[k] - c[k] for k in range(3) if k != axis]
        radial = np.sqrt(perp[0] ** 2 + perp[1] ** 2) - r
        outside = np.sqrt(np.maximum(radial, 0.0) ** 2 + np.maximum(along, 0.0) ** 2)
        inside = np.minimum(np.maximum(radial, along), 0.0)
        return outside + inside
    raise ValueError(f"unknown shape kind {kind!r}")


def _shape_landmarks(sh: dict) -> list:
    """Keypoints: sphere center + 6 poles, box center + 8 corners, tube
    center + 2 end centers + 2 radial poles (along the first cross axis).
    Keypoints follow the shape's ``rotate_deg`` tilt."""
    c = np.asarray(sh["center"], dtype=float)
    kind = sh["kind"]
    if kind == "sphere":
        r = float(sh["radius"])
        offsets = [r * np.eye(3)[k] for k in range(3)] + [-r * np.eye(3)[k] for k in range(3)]
    elif kind == "box":
        half = np.asarray(sh["half"], dtype=float)
        offsets = [half * [sx, sy, sz] for sx in (-1, 1) for sy in (-1, 1) for sz in (-1, 1)]
    else:
        axis = int(sh["axis"])
        e = np.zeros(3)
        e[axis] = float(sh["half_length"])
        cross = np.zeros(3)
        cross[(axis + 1) % 3] = float(sh["radius"])
        offsets = [-e, e, -cross, cross]
    if "rotate_deg" in sh:
        from .lie import so3_exp

        R = so3_exp(np.deg2rad(np.asarray(sh["rotate_deg"], dtype=float)))
        offsets = [R @ o for o in offsets]
    return [c] + [c + o for o in offsets]


def generate_phantom(spec: dict, seed: int = 0) -> Phantom:
    """Rasterize a shape list into a volume and collect its landmarks.

    Rasterization is antialiased: each voxel blends toward a shape's density
    by its partial-volume coverage, estimated from the signed distance over
    a one-voxel band (``aa_voxels`` in the spec overrides the band width,
    0 for hard binary edges). Later shapes paint over earlier ones.
    """
    shapes = spec.get("shapes", [])
    if not shapes:
        raise EmptySpec("phantom spec declares no shapes")
    dims = tuple(int(v) for v in spec["dims"])
    if min(dims) < 16:
        raise ValueError("phantom dims must be at least 16 per axis")
    spacing = np.broadcast_to(np.asarray(spec.get("spacing", 1.0), dtype=float), 3)
    origin = -0.5 * np.array(dims) * spacing
    data = np.full(dims, float(spec.get("background", 0.1)))
    cx, cy, cz = _voxel_centers(dims, spacing, origin)
    band = float(spec.get("aa_voxels", 1.0)) * float(np.mean(spacing))

    landmarks = []
    for sh in shapes:
        dist = _shape_distance(sh, cx, cy, cz)
        if band > 0:
            u = np.clip(0.5 - dist / band, 0.0, 1.0)
            coverage = u * u * (3.0 - 2.0 * u)  # C1 edge profile
        else:
            coverage = (dist <= 0.0).astype(float)
        rho = float(sh["density"])
        data = data * (1.0 - coverage) + rho * coverage
        if sh.get("landmarks", True):
            landmarks += _shape_landmarks(sh)

    vol = Volume(spacing, origin, data)
    return Phantom(vol, np.array(landmarks), str(spec.get("name", "phantom")), int(seed))


def reference_phantom() -> Phantom:
    """64^3, 1 mm vertebra-like phantom with exactly 14 landmarks.

    A bone-density (1.0) box body and tube sit inside a soft-tissue (0.1)
    envelope sphere, plus one bone marker sphere; only the box (center + 8
    corners) and the tube (center + ends + radial poles) contribute
    landmarks. Asymmetric in all three axes so a single view constrains all
    six pose parameters.
    """
    return generate_phantom(reference_phantom_spec(), seed=0)


def reference_phantom_spec() -> dict:
    return {
        "name": "reference-64",
        "dims": (64, 64, 64),
        "spacing": 1.0,
        "background": 0.0,
        "shapes": [
            {
                "kind": "sphere",
                "center": (0.0, 0.0, 0.0),
                "radius": 27.0,
                "density": 0.1,
                "landmarks": False,
            },
            {
                "kind": "box",
                "center": (-6.0, 0.0, -2.0),
                "half": (12.0, 9.0, 5.0),
                "density": 1.0,
                "rotate_deg": (8.0, -12.0, 15.0),
            },
            {
                "kind": "tube",
                "center": (10.0, 3.0, 8.0),
                "axis": 2,
                "radius": 3.5,
                "half_length": 10.0,
                "density": 1.0,
                "rotate_deg": (-10.0, 6.0, 0.0),
            },
            {
                "kind": "sphere",
                "center": (4.0, -14.0, 6.0),
                "radius": 4.0,
                "density": 1.0,
                "landmarks": False,
            },
        ],
    }


def mtre(landmarks: np.ndarray, theta_est: np.ndarray, theta_gt: np.ndarray) -> float:
    """Mean distance (mm) between landmarks under the two poses."""
    landmarks = np.asarray(landmarks, dtype=float)
    if landmarks.size == 0:
        raise NoLandmarks("mtre needs at least one landmark")
    pe = se3_exp(theta_est).apply(landmarks)
    pg = se3_exp(theta_gt).apply(landmarks)
    return float(np.mean(np.linalg.norm(pe - pg, axis=1)))


def nearest_rank_percentile(values: np.ndarray, p: float) -> float:
    """Nearest-rank percentile: the ceil(p/100 * n)-th smallest value."""
    v = np.sort(np.asarray(values, dtype=float))
    if v.size == 0:
        raise EmptyInput("percentile of an empty list")
    rank = int(np.ceil(p / 100.0 * v.size))
    return float(v[max(rank, 1) - 1])


def metrics_report(mtre_values) -> MetricsReport:
    """Aggregate per-case mTRE values: SMSR (< 1 mm) plus percentiles."""
    v = np.asarray(list(mtre_values), dtype=float)
    if v.size == 0:
        raise EmptyInput("metrics_report needs at least one mTRE value")
    return MetricsReport(
        mtre_values=v,
        smsr=float(np.count_nonzero(v < 1.0) / v.size),
        median=nearest_rank_percentile(v, 50),
        p75=nearest_rank_percentile(v, 75),
        p95=nearest_rank_percentile(v, 95),
    )
