"""Bit-exact file formats: RVOL volumes, RIMG images, encoder weights.

Every binary artifact is raw little-endian float32 with x varying fastest,
described by a JSON sidecar next to it (``<stem>.json``). PGM export is a
lossy 8-bit convenience view.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .render import Volume
from .similarity import EncoderParams


def _sidecar(path: Path) -> Path:
    return path.with_name(path.name + ".json")


def write_rvol(path, vol: Volume) -> Path:
    """Write ``<path>`` (raw f32le, x fastest) plus ``<path>.json``."""
    path = Path(path)
    meta = {
        "format": "RVOL",
        "dims": list(vol.data.shape),
        "spacing_mm": list(vol.spacing),
        "origin_mm": list(vol.origin),
        "dtype": "f32le",
        "layout": "row-major x-fastest",
    }
    data = np.asarray(vol.data, dtype="<f4").ravel(order="F")
    path.write_bytes(data.tobytes())
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_rvol(path) -> Volume:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"missing RVOL sidecar for {path}") from exc
    if meta.get("format") != "RVOL" or meta.get("dtype") != "f32le":
        raise ConfigError(f"not an RVOL sidecar: {_sidecar(path)}")
    dims = tuple(meta["dims"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != int(np.prod(dims)):
        raise ConfigError(f"RVOL payload size {raw.size} != dims {dims}")
    data = raw.reshape(dims, order="F").astype(float)
    return Volume(np.asarray(meta["spacing_mm"]), np.asarray(meta["origin_mm"]), data)


def write_rimg(path, img: np.ndarray) -> Path:
    """Write a 2-D raster as raw f32le (row-major, x fastest) plus sidecar."""
    path = Path(path)
    img = np.asarray(img, dtype=float)
    meta = {
        "format": "RIMG",
        "height": int(img.shape[0]),
        "width": int(img.shape[1]),
        "dtype": "f32le",
        "layout": "row-major x-fastest",
    }
    path.write_bytes(np.ascontiguousarray(img, dtype="<f4").tobytes())
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def read_rimg(path) -> np.ndarray:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"missing RIMG sidecar for {path}") from exc
    if meta.get("format") != "RIMG" or meta.get("dtype") != "f32le":
        raise ConfigError(f"not an RIMG sidecar: {_sidecar(path)}")
    h, w = int(meta["height"]), int(meta["width"])
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    if raw.size != h * w:
        raise ConfigError(f"RIMG payload size {raw.size} != {h}x{w}")
    return raw.reshape(h, w).astype(float)


def write_pgm(path, img: np.ndarray) -> Path:
    """8-bit binary PGM, min-max scaled; for quick viewing only."""
    path = Path(path)
    img = np.asarray(img, dtype=float)
    lo, hi = float(img.min()), float(img.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    data = np.round((img - lo) * scale).astype(np.uint8)
    header = f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode()
    path.write_bytes(header + data.tobytes())
    return path


def save_encoder_params(path, params: EncoderParams) -> Path:
    """Weights as one f32le blob plus a JSON sidecar with the shapes."""
    path = Path(path)
    from .similarity import params_arrays

    arrays = params_arrays(params)
    meta = {
        "format": "ENCPARAMS",
        "dtype": "f32le",
        "patch": params.patch,
        "activation": params.activation,
        "n_conv": len(params.conv_kernels),
        "shapes": [list(a.shape) for a in arrays],
    }
    blob = b"".join(np.ascontiguousarray(a, dtype="<f4").tobytes() for a in arrays)
    path.write_bytes(blob)
    _sidecar(path).write_text(json.dumps(meta, indent=2) + "\n")
    return path


def load_encoder_params(path) -> EncoderParams:
    path = Path(path)
    try:
        meta = json.loads(_sidecar(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"missing params sidecar for {path}") from exc
    if meta.get("format") != "ENCPARAMS":
        raise ConfigError(f"not an encoder-params sidecar: {_sidecar(path)}")
    raw = np.frombuffer(path.read_bytes(), dtype="<f4")
    arrays = []
    off = 0
    for shape in meta["shapes"]:
        n = int(np.prod(shape))
        arrays.append(raw[off : off + n].reshape(shape).astype(float))
        off += n
    if off != raw.size:
        raise ConfigError("params payload size mismatch")
    n_conv = int(meta["n_conv"])
    return EncoderParams(
        conv_kernels=arrays[:n_conv],
        conv_biases=arrays[n_conv : 2 * n_conv],
        proj=arrays[2 * n_conv],
        proj_bias=arrays[2 * n_conv + 1],
        patch=int(meta["patch"]),
        activation=meta["activation"],
    )


def save_landmarks(path, landmarks: np.ndarray) -> Path:
    path = Path(path)
    path.write_text(
        json.dumps({"landmarks_mm": [list(map(float, p)) for p in landmarks]}, indent=2) + "\n"
    )
    return path


def load_landmarks(path) -> np.ndarray:
    return np.asarray(json.loads(Path(path).read_text())["landmarks_mm"], dtype=float)


def write_trace_csv(path, trace) -> Path:
    """LM trace: iter, eps, lambda, dtheta_norm, theta[0..5]."""
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["iter", "eps", "lambda", "dtheta_norm", "accepted"]
            + [f"theta{k}" for k in range(6)]
        )
        for rec in trace:
            w.writerow(
                [rec.iteration, repr(rec.eps), repr(rec.lam), repr(rec.dtheta_norm), int(rec.accepted)]
                + [repr(float(v)) for v in rec.theta]
            )
    return path


def write_loss_csv(path, losses) -> Path:
    path = Path(path)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss"])
        for i, v in enumerate(losses):
            w.writerow([i, repr(float(v))])
    return path


def sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def write_json(path, payload: dict) -> Path:
    path = Path(path)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return path
