"""End-to-end registration: initialization, refinement, benchmark harness.

A run directory contains the resolved ``config.json``, ``result.json``, the
iteration ``trace.csv``, rendered images (RIMG + PGM) and a ``manifest.json``
with content hashes, so every seeded run is reproducible and auditable.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__
from .augment import RandomizationConfig, randomize
from .errors import ConfigError, Diverged, SolveFailed
from .io import (
    load_encoder_params,
    load_landmarks,
    read_rvol,
    sha256_file,
    write_json,
    write_pgm,
    write_rimg,
    write_trace_csv,
)
from .lie import compose_twists, sample_pose, se3_exp
from .lm import LMConfig, RegistrationResult, lm_refine
from .phantom import MetricsReport, generate_phantom, metrics_report, mtre, reference_phantom_spec
from .render import Camera, Volume, fd_steps, invert_intensity, render_drr, render_transforms
from .similarity import EncoderParams, grad_similarity_pose, similarity_loss


@dataclass
class PipelineConfig:
    """Resolved configuration for the registration pipeline."""

    camera: Camera = field(default_factory=Camera)
    phantom_spec: dict = field(default_factory=reference_phantom_spec)
    volume_path: str = None
    landmarks_path: str = None
    metric: str = "mncc"
    params_path: str = None
    patch_sizes: list = None
    intensity_i0: object = "auto"
    init_mode: str = "multi-start"  # given | multi-start | perturb-gt
    init_k: int = 32
    init_rot_deg: float = 5.0
    init_trans_mm: float = 10.0
    theta_init: list = None
    lm: LMConfig = field(default_factory=LMConfig)
    augmentation: RandomizationConfig = field(default_factory=RandomizationConfig)
    augment_target: bool = False
    gt_rot_deg: float = 3.0
    gt_trans_mm: float = 5.0
    geodesic: str = "se3"
    seed: int = 0

    def __post_init__(self):
        if self.metric not in ("learned", "mncc"):
            raise ConfigError(f"unknown metric {self.metric!r}")
        if self.geodesic not in ("se3", "so4"):
            raise ConfigError(f"unknown geodesic flavor {self.geodesic!r}")
        if self.init_mode not in ("given", "multi-start", "perturb-gt"):
            raise ConfigError(f"unknown init mode {self.init_mode!r}")
        if self.init_k < 1:
            raise ConfigError("init_k must be >= 1")
        if self.init_mode == "given" and self.theta_init is None:
            raise ConfigError("init_mode 'given' requires theta_init")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["camera"]["iso_offset"] = list(self.camera.iso_offset)
        d["lm"]["weights"] = None if self.lm.weights is None else list(self.lm.weights)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PipelineConfig":
        d = dict(d)
        try:
            if "camera" in d:
                d["camera"] = Camera(**d["camera"])
            if "lm" in d:
                d["lm"] = LMConfig(**d["lm"])
            if "augmentation" in d:
                d["augmentation"] = RandomizationConfig(
                    **{
                        k: tuple(v) if isinstance(v, list) else v
                        for k, v in d["augmentation"].items()
                    }
                )
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad pipeline config: {exc}") from exc

    @classmethod
    def from_json(cls, path) -> "PipelineConfig":
        try:
            payload = json.loads(Path(path).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"malformed config JSON: {exc}") from exc
        return cls.from_dict(payload)


def load_scene(cfg: PipelineConfig):
    """Volume plus landmarks, from RVOL paths or the phantom spec."""
    if cfg.volume_path:
        vol = read_rvol(cfg.volume_path)
        if not cfg.landmarks_path:
            raise ConfigError("volume_path requires landmarks_path")
        landmarks = load_landmarks(cfg.landmarks_path)
        return vol, landmarks
    ph = generate_phantom(cfg.phantom_spec, seed=cfg.seed)
    return ph.volume, ph.landmarks


def load_params(cfg: PipelineConfig) -> EncoderParams:
    if cfg.metric != "learned":
        return None
    if not cfg.params_path:
        raise ConfigError("metric 'learned' requires params_path")
    return load_encoder_params(cfg.params_path)


def resolve_i0(cfg: PipelineConfig, raw_target: np.ndarray):
    if cfg.intensity_i0 == "auto":
        return float(max(float(np.max(raw_target)), 1e-6))
    return cfg.intensity_i0


def initialize_pose(
    vol: Volume,
    cam: Camera,
    fixed: np.ndarray,
    k: int,
    rot_deg: float,
    trans_mm: float,
    metric: str = "mncc",
    params: EncoderParams = None,
    seed=0,
    patch_sizes=None,
    invert_i0=None,
) -> np.ndarray:
    """Best-of-K initializer: argmin similarity over poses near the isocenter."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    cands = [sample_pose(np.zeros(6), rot_deg, trans_mm, rng) for _ in range(k)]
    imgs = render_transforms(vol, cam, [se3_exp(t) for t in cands])
    best, best_loss = None, np.inf
    for theta, img in zip(cands, imgs):
        if invert_i0 is not None:
            img = invert_intensity(img, invert_i0)
        loss = similarity_loss(fixed, img, metric, params, patch_sizes)
        if loss < best_loss:
            best, best_loss = theta, loss
    return best


def _result_payload(cfg, theta_init, result: RegistrationResult, mtre_value=None) -> dict:
    payload = {
        "metric": cfg.metric,
        "geodesic": cfg.geodesic,
        "seed": cfg.seed,
        "theta_init": [float(v) for v in theta_init],
        "theta_est": [float(v) for v in result.theta_est],
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "eps_init": float(result.trace[0].eps) if result.trace else None,
        "eps_final": float(result.eps_final),
    }
    if mtre_value is not None:
        payload["mtre_mm"] = float(mtre_value)
    return payload


def _write_run_dir(out_dir, cfg, payload, result, fixed, vol, cam):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_json(out / "config.json", cfg.to_dict())
    write_json(out / "result.json", payload)
    write_trace_csv(out / "trace.csv", result.trace)
    img_dir = out / "images"
    img_dir.mkdir(exist_ok=True)
    write_rimg(img_dir / "fixed.rimg", fixed)
    write_pgm(img_dir / "fixed.pgm", fixed)
    final = render_drr(vol, cam, result.theta_est)
    write_rimg(img_dir / "moving_final.rimg", final)
    write_pgm(img_dir / "moving_final.pgm", final)
    files = ["config.json", "result.json", "trace.csv", "images/fixed.rimg", "images/moving_final.rimg"]
    manifest = {
        "tool": "diffreg",
        "version": __version__,
        "seed": cfg.seed,
        "hashes": {name: sha256_file(out / name) for name in files},
    }
    write_json(out / "manifest.json", manifest)


def register(
    cfg: PipelineConfig,
    target: np.ndarray,
    theta_gt: np.ndarray = None,
    out_dir=None,
    rng=None,
):
    """Initialize and refine against a raw (line-integral domain) target.

    Returns ``(RegistrationResult, payload_dict)``; the payload includes the
    mTRE entry when the ground-truth pose is known. Artifacts are written to
    ``out_dir`` when given; a Diverged refinement persists its partial trace
    before propagating.
    """
    vol, landmarks = load_scene(cfg)
    params = load_params(cfg)
    cam = cfg.camera
    i0 = resolve_i0(cfg, target)
    fixed = invert_intensity(target, i0) if i0 is not None else np.asarray(target, dtype=float)
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)

    if cfg.init_mode == "given":
        theta_init = np.asarray(cfg.theta_init, dtype=float)
    elif cfg.init_mode == "perturb-gt":
        if theta_gt is None:
            raise ConfigError("init_mode 'perturb-gt' requires a ground-truth pose")
        theta_init = sample_pose(theta_gt, cfg.init_rot_deg, cfg.init_trans_mm, rng)
    else:
        theta_init = initialize_pose(
            vol,
            cam,
            fixed,
            cfg.init_k,
            cfg.init_rot_deg,
            cfg.init_trans_mm,
            cfg.metric,
            params,
            rng,
            cfg.patch_sizes,
            i0,
        )

    try:
        result = lm_refine(
            vol, cam, fixed, theta_init, cfg.metric, params, cfg.lm, cfg.patch_sizes, i0
        )
    except Diverged:
        if out_dir:
            partial = RegistrationResult(theta_est=theta_init)
            _write_run_dir(out_dir, cfg, {"error": "diverged"}, partial, fixed, vol, cam)
        raise
    mtre_value = mtre(landmarks, result.theta_est, theta_gt) if theta_gt is not None else None
    payload = _result_payload(cfg, theta_init, result, mtre_value)
    if out_dir:
        _write_run_dir(out_dir, cfg, payload, result, fixed, vol, cam)
    return result, payload


def benchmark(
    cfg: PipelineConfig,
    n_cases: int,
    perturb_rot_deg: float = None,
    perturb_trans_mm: float = None,
    seed: int = None,
    out_dir=None,
    init_mode: str = "perturb-gt",
) -> MetricsReport:
    """Seeded Monte-Carlo protocol: draw truth, render, register, score mTRE.

    Ground-truth poses are drawn near the isocenter with the config ranges;
    by default the initial pose perturbs the truth by the given per-axis
    ranges (``init_mode='multi-start'`` scores K candidates instead). Case
    failures score mTRE = +inf and never abort the batch.
    """
    if n_cases < 1:
        raise ConfigError("n_cases must be >= 1")
    seed = cfg.seed if seed is None else seed
    rot = cfg.init_rot_deg if perturb_rot_deg is None else perturb_rot_deg
    trans = cfg.init_trans_mm if perturb_trans_mm is None else perturb_trans_mm
    vol, landmarks = load_scene(cfg)
    params = load_params(cfg)
    cam = cfg.camera

    rows = []
    values = []
    for case in range(n_cases):
        rng = np.random.default_rng([seed, case])
        theta_gt = sample_pose(np.zeros(6), cfg.gt_rot_deg, cfg.gt_trans_mm, rng)
        raw = render_drr(vol, cam, theta_gt)
        i0 = resolve_i0(cfg, raw)
        fixed = invert_intensity(raw, i0) if i0 is not None else raw
        if cfg.augment_target:
            fixed = randomize(fixed, cfg.augmentation, int(rng.integers(2 ** 63)))
        if init_mode == "multi-start":
            theta_init = initialize_pose(
                vol, cam, fixed, cfg.init_k, rot, trans, cfg.metric, params, rng,
                cfg.patch_sizes, i0,
            )
        else:
            theta_init = sample_pose(theta_gt, rot, trans, rng)
        row = {"case": case, "theta_gt": theta_gt, "theta_init": theta_init}
        try:
            result = lm_refine(
                vol, cam, fixed, theta_init, cfg.metric, params, cfg.lm, cfg.patch_sizes, i0
            )
            value = mtre(landmarks, result.theta_est, theta_gt)
            row.update(
                theta_est=result.theta_est,
                mtre=value,
                converged=result.converged,
                iterations=result.iterations,
                eps_final=result.eps_final,
            )
        except (Diverged, SolveFailed) as exc:
            row.update(
                theta_est=np.full(6, np.nan),
                mtre=np.inf,
                converged=False,
                iterations=0,
                eps_final=np.nan,
                error=type(exc).__name__,
            )
            value = np.inf
        values.append(value)
        rows.append(row)

    report = metrics_report(values)
    if out_dir:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_json(out / "config.json", cfg.to_dict())
        _write_cases_csv(out / "cases.csv", rows)
        write_json(out / "report.json", report_payload(report, seed, rot, trans))
        manifest = {
            "tool": "diffreg",
            "version": __version__,
            "seed": seed,
            "perturb_rot_deg": rot,
            "perturb_trans_mm": trans,
            "n_cases": n_cases,
            "metric": cfg.metric,
            "geodesic": cfg.geodesic,
            "smsr": report.smsr,
            "median_mm": report.median,
            "p75_mm": report.p75,
            "p95_mm": report.p95,
            "hashes": {
                "cases.csv": sha256_file(out / "cases.csv"),
                "config.json": sha256_file(out / "config.json"),
            },
        }
        write_json(out / "manifest.json", manifest)
    return report


def report_payload(report: MetricsReport, seed, rot, trans) -> dict:
    return {
        "seed": seed,
        "perturb_rot_deg": rot,
        "perturb_trans_mm": trans,
        "smsr": report.smsr,
        "median_mm": report.median,
        "p75_mm": report.p75,
        "p95_mm": report.p95,
        "mtre_mm": [float(v) for v in report.mtre_values],
    }


def _write_cases_csv(path, rows) -> None:
    import csv

    cols = ["case", "mtre", "converged", "iterations", "eps_final", "error"]
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        header = (
            cols[:1]
            + [f"theta_gt{k}" for k in range(6)]
            + [f"theta_init{k}" for k in range(6)]
            + [f"theta_est{k}" for k in range(6)]
            + cols[1:]
        )
        w.writerow(header)
        for row in rows:
            w.writerow(
                [row["case"]]
                + [repr(float(v)) for v in row["theta_gt"]]
                + [repr(float(v)) for v in row["theta_init"]]
                + [repr(float(v)) for v in row["theta_est"]]
                + [
                    repr(float(row["mtre"])),
                    int(row["converged"]),
                    row["iterations"],
                    repr(float(row["eps_final"])),
                    row.get("error", ""),
                ]
            )


def landscape(
    cfg: PipelineConfig,
    axes: tuple = (0, 1),
    extents: tuple = None,
    resolution: int = 11,
    theta_gt: np.ndarray = None,
    out_csv=None,
) -> dict:
    """Similarity on a 2-D grid of left-composed offsets around the truth.

    Returns the raw grid plus the display-normalized ``1 - eps_hat`` used by
    landscape figures; the two swept axes are twist indices.
    """
    a, b = axes
    if a == b:
        raise ConfigError("landscape axes must be distinct")
    theta_gt = np.zeros(6) if theta_gt is None else np.asarray(theta_gt, dtype=float)
    if extents is None:
        extents = (
            np.deg2rad(cfg.init_rot_deg) if a < 3 else cfg.init_trans_mm,
            np.deg2rad(cfg.init_rot_deg) if b < 3 else cfg.init_trans_mm,
        )
    vol, _ = load_scene(cfg)
    params = load_params(cfg)
    cam = cfg.camera
    raw = render_drr(vol, cam, theta_gt)
    i0 = resolve_i0(cfg, raw)
    fixed = invert_intensity(raw, i0) if i0 is not None else raw

    offs_a = np.linspace(-extents[0], extents[0], resolution)
    offs_b = np.linspace(-extents[1], extents[1], resolution)
    eps = np.zeros((resolution, resolution))
    for i, da in enumerate(offs_a):
        for j, db in enumerate(offs_b):
            delta = np.zeros(6)
            delta[a] = da
            delta[b] = db
            theta = compose_twists(delta, theta_gt) if np.any(delta) else theta_gt.copy()
            img = render_drr(vol, cam, theta)
            if i0 is not None:
                img = invert_intensity(img, i0)
            eps[i, j] = similarity_loss(fixed, img, cfg.metric, params, cfg.patch_sizes)
    span = eps.max() - eps.min()
    norm = (eps - eps.min()) / span if span > 0 else np.zeros_like(eps)
    inverted = 1.0 - norm
    if out_csv:
        import csv

        with Path(out_csv).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "j", f"offset_axis{a}", f"offset_axis{b}", "eps", "one_minus_eps_hat"])
            for i in range(resolution):
                for j in range(resolution):
                    w.writerow([i, j, repr(offs_a[i]), repr(offs_b[j]), repr(eps[i, j]), repr(inverted[i, j])])
    return {"offsets_a": offs_a, "offsets_b": offs_b, "eps": eps, "one_minus_eps_hat": inverted}


def optimizer_comparison(
    cfg: PipelineConfig,
    methods=("lm", "gd", "adam"),
    seeds=(0,),
    iterations: int = 30,
    gd_lr: float = None,
    adam_lr: float = None,
    out_csv=None,
) -> dict:
    """Loss-vs-iteration curves for LM against first-order pose descent.

    Every method starts each seeded problem from the same target and initial
    pose, so curves are directly comparable.
    """
    if not methods:
        raise ConfigError("need at least one method")
    vol, _ = load_scene(cfg)
    params = load_params(cfg)
    cam = cfg.camera
    steps = fd_steps(cfg.lm.fd_rot, cfg.lm.fd_trans)
    curves = {}
    for seed in seeds:
        rng = np.random.default_rng([cfg.seed, seed])
        theta_gt = sample_pose(np.zeros(6), cfg.gt_rot_deg, cfg.gt_trans_mm, rng)
        raw = render_drr(vol, cam, theta_gt)
        i0 = resolve_i0(cfg, raw)
        fixed = invert_intensity(raw, i0) if i0 is not None else raw
        theta0 = sample_pose(theta_gt, cfg.init_rot_deg, cfg.init_trans_mm, rng)

        def loss_at(theta):
            img = render_drr(vol, cam, theta)
            if i0 is not None:
                img = invert_intensity(img, i0)
            return similarity_loss(fixed, img, cfg.metric, params, cfg.patch_sizes)

        loss0 = loss_at(theta0)
        scale0 = max(loss0, 1e-12)
        for method in methods:
            if method == "lm":
                lm_cfg = dataclasses.replace(cfg.lm, max_iters=max(iterations, cfg.lm.term_window))
                res = lm_refine(
                    vol, cam, fixed, theta0, cfg.metric, params, lm_cfg, cfg.patch_sizes, i0
                )
                curve = [loss0] + [rec.eps for rec in res.trace]
                curve = curve[: iterations + 1]
                while len(curve) < iterations + 1:
                    curve.append(curve[-1])
            elif method in ("gd", "adam"):
                lr = (gd_lr if method == "gd" else adam_lr)
                if lr is None:
                    # step ~1% of the initial loss per unit gradient
                    lr = 0.05 * scale0
                theta = theta0.copy()
                m = np.zeros(6)
                v = np.zeros(6)
                curve = [loss0]
                for it in range(iterations):
                    g = grad_similarity_pose(
                        vol, cam, theta, fixed, cfg.metric, params, steps, cfg.patch_sizes, i0
                    )
                    g = g / scale0
                    if method == "adam":
                        m = 0.9 * m + 0.1 * g
                        v = 0.999 * v + 0.001 * g * g
                        mh = m / (1 - 0.9 ** (it + 1))
                        vh = v / (1 - 0.999 ** (it + 1))
                        step_vec = -lr * mh / (np.sqrt(vh) + 1e-8)
                    else:
                        step_vec = -lr * g
                    theta = compose_twists(step_vec, theta)
                    curve.append(loss_at(theta))
            else:
                raise ConfigError(f"unknown optimizer {method!r}")
            curves[(method, seed)] = np.asarray(curve)
    if out_csv:
        import csv

        with Path(out_csv).open("w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["method", "seed", "iteration", "loss"])
            for (method, seed), curve in curves.items():
                for it, val in enumerate(curve):
                    w.writerow([method, seed, it, repr(float(val))])
    return curves
