"""Damped least-squares pose refinement over se(3).

Each iteration assembles the metric's residual vector and its Jacobian with
respect to a left-multiplied pose increment, solves the damped normal
equations, and applies the increment by left composition:

    delta = (J^T W J + lambda I)^{-1} J^T W r,   J = -dr/dtheta
    theta <- LOG(EXP(delta) EXP(theta))

Steps are accepted only if the similarity decreases (classic multiplicative
damping schedule); termination follows the standard deviation of the
increment norms over a trailing window.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
import scipy.linalg

from .errors import Diverged, SolveFailed
from .lie import compose_twists, se3_exp
from .render import Camera, Volume, fd_steps, render_transforms, invert_intensity
from .similarity import (
    EncoderParams,
    learned_residual_jvp,
    learned_residuals,
    mncc_residual_jvp,
    mncc_residuals,
    render_with_gradient,
)


@dataclass
class LMConfig:
    lambda0: float = 1e-2
    lambda_up: float = 10.0
    lambda_down: float = 3.0
    max_iters: int = 50
    term_window: int = 10
    term_std: float = 1e-2
    fd_rot: float = 1e-3
    fd_trans: float = 1e-1
    # Start with wide FD spans so the Jacobian reflects the mm-scale slope
    # of the similarity instead of voxelization ripple, then switch to the
    # fine steps above once increments drop below fd_switch_norm. Setting
    # fd_coarse_rot/trans to the fine values disables the schedule.
    fd_coarse_rot: float = 4e-2
    fd_coarse_trans: float = 2.0
    fd_switch_norm: float = 2.0
    weight_mode: str = "identity"
    weights: np.ndarray = None
    term_per_component: bool = False
    # "identity": damp with lambda * I (the literal update); "diag": Fletcher
    # scaling lambda * diag(J^T W J), which keeps weakly observed axes (depth)
    # moving when column norms span orders of magnitude.
    damping_mode: str = "identity"

    def __post_init__(self):
        if self.lambda0 <= 0:
            raise ValueError("lambda0 must be positive")
        if self.lambda_up <= 1 or self.lambda_down <= 1:
            raise ValueError("damping factors must exceed 1")
        if self.max_iters < self.term_window:
            raise ValueError("max_iters must be at least term_window")
        if self.weight_mode not in ("identity", "custom"):
            raise ValueError("weight_mode must be 'identity' or 'custom'")
        if self.damping_mode not in ("identity", "diag"):
            raise ValueError("damping_mode must be 'identity' or 'diag'")


@dataclass
class IterationRecord:
    iteration: int
    theta: np.ndarray
    eps: float
    lam: float
    dtheta_norm: float
    accepted: bool


@dataclass
class RegistrationResult:
    theta_est: np.ndarray
    trace: List[IterationRecord] = field(default_factory=list)
    converged: bool = False
    iterations: int = 0

    @property
    def eps_final(self) -> float:
        return self.trace[-1].eps if self.trace else float("nan")


def lm_step(r: np.ndarray, J: np.ndarray, W, lam: float, damping_mode: str = "identity") -> np.ndarray:
    """Solve ``(J^T W J + lambda I) delta = J^T W r`` by Cholesky.

    ``W`` is ``None`` (identity), a diagonal vector, or a scalar. ``J`` is
    supplied as ``-dr/dtheta``, so the returned increment descends the
    squared-residual objective. ``damping_mode='diag'`` replaces ``I`` with
    ``diag(J^T W J)`` (floored at its largest entry times 1e-12).
    """
    r = np.asarray(r, dtype=float)
    J = np.asarray(J, dtype=float)
    if lam < 0:
        raise ValueError("damping must be non-negative")
    if W is None:
        Jw = J
        rhs = J.T @ r
    else:
        w = np.broadcast_to(np.asarray(W, dtype=float), r.shape)
        Jw = J * w[:, None]
        rhs = Jw.T @ r
    A = Jw.T @ J if W is not None else J.T @ J
    if damping_mode == "diag":
        d = np.diag(A).copy()
        d = np.maximum(d, d.max() * 1e-12 if d.max() > 0 else 1.0)
        A = A + lam * np.diag(d)
    else:
        A = A + lam * np.eye(J.shape[1])
    if not np.all(np.isfinite(A)) or not np.all(np.isfinite(rhs)):
        raise SolveFailed("non-finite normal equations")
    try:
        c, low = scipy.linalg.cho_factor(A)
        return scipy.linalg.cho_solve((c, low), rhs)
    except np.linalg.LinAlgError as exc:  # pragma: no cover - scipy raises its own
        raise SolveFailed(str(exc)) from exc
    except scipy.linalg.LinAlgError as exc:
        raise SolveFailed(str(exc)) from exc


class _Objective:
    """Residuals, Jacobian and the scalar similarity for one metric."""

    def __init__(self, vol, cam, fixed, metric, params, patch_sizes, invert_i0):
        self.vol = vol
        self.cam = cam
        self.fixed = np.asarray(fixed, dtype=float)
        self.metric = metric
        self.params = params
        self.patch_sizes = patch_sizes
        self.invert_i0 = invert_i0

    def _process(self, img):
        return invert_intensity(img, self.invert_i0) if self.invert_i0 is not None else img

    def eps_at(self, theta) -> float:
        img = self._process(render_transforms(self.vol, self.cam, [se3_exp(theta)])[0])
        return self.eps_of_image(img)

    def eps_of_image(self, img) -> float:
        if self.metric == "learned":
            r, _ = learned_residuals(self.fixed, img, self.params)
        else:
            r = mncc_residuals(self.fixed, img, self.patch_sizes)
        return float(r.sum())

    def residuals_jacobian(self, theta, steps):
        moving, grad_imgs = render_with_gradient(
            self.vol, self.cam, theta, steps, self.invert_i0
        )
        if self.metric == "learned":
            r, state = learned_residuals(self.fixed, moving, self.params)
            cols = [
                learned_residual_jvp(moving, self.params, grad_imgs[k], state) for k in range(6)
            ]
            eps = float(r.sum())
        else:
            r = mncc_residuals(self.fixed, moving, self.patch_sizes)
            cols = [
                mncc_residual_jvp(self.fixed, moving, grad_imgs[k], self.patch_sizes)
                for k in range(6)
            ]
            eps = float(r.sum())
        J = -np.stack(cols, axis=1)  # J = -dr/dtheta
        return r, J, eps


def lm_refine(
    vol: Volume,
    cam: Camera,
    fixed: np.ndarray,
    theta_init: np.ndarray,
    metric: str = "mncc",
    params: EncoderParams = None,
    cfg: LMConfig = None,
    patch_sizes=None,
    invert_i0=None,
) -> RegistrationResult:
    """Refine a pose against a fixed image; see the module docstring.

    The scalar ``eps`` driving acceptance is the sum of the residual vector
    for both metrics (per-pixel spherical mismatches, or stacked per-patch
    ``1 - NCC``), so accept/reject agrees with the least-squares model. The
    trace has one record per iteration (accepted or rejected); ``eps``
    restricted to accepted iterations is non-increasing by construction.
    Raises Diverged when the similarity turns non-finite.
    """
    cfg = cfg or LMConfig()
    fine = fd_steps(cfg.fd_rot, cfg.fd_trans)
    coarse = fd_steps(cfg.fd_coarse_rot, cfg.fd_coarse_trans)
    on_coarse = bool(np.any(coarse > fine))
    steps = coarse if on_coarse else fine
    obj = _Objective(vol, cam, fixed, metric, params, patch_sizes, invert_i0)
    weights = cfg.weights if cfg.weight_mode == "custom" else None

    theta = np.asarray(theta_init, dtype=float).copy()
    lam = cfg.lambda0
    r, J, eps = obj.residuals_jacobian(theta, steps)
    if not np.isfinite(eps):
        raise Diverged("similarity non-finite at the initial pose")

    result = RegistrationResult(theta_est=theta)
    increments = []
    rejects_in_row = 0
    for it in range(cfg.max_iters):
        try:
            delta = lm_step(r, J, weights, lam, cfg.damping_mode)
        except SolveFailed:
            lam *= cfg.lambda_up
            result.trace.append(IterationRecord(it, theta.copy(), eps, lam, 0.0, False))
            increments.append(np.zeros(6))
            continue
        candidate = compose_twists(delta, theta)
        eps_new = obj.eps_at(candidate)
        if not np.isfinite(eps_new):
            raise Diverged(f"similarity non-finite at iteration {it}")
        accepted = eps_new < eps
        dnorm = float(np.linalg.norm(delta))
        refresh = False
        if accepted:
            theta = candidate
            eps = eps_new
            lam = lam / cfg.lambda_down
            rejects_in_row = 0
            if on_coarse and dnorm < cfg.fd_switch_norm:
                on_coarse = False
                steps = fine
                lam = cfg.lambda0
            refresh = True
        else:
            lam = lam * cfg.lambda_up
            rejects_in_row += 1
            if on_coarse and rejects_in_row >= 2:
                # coarse model stopped helping; drop to fine derivatives
                on_coarse = False
                steps = fine
                lam = cfg.lambda0
                rejects_in_row = 0
                refresh = True
        if refresh:
            r, J, eps = obj.residuals_jacobian(theta, steps)
        increments.append(delta.copy())
        result.trace.append(IterationRecord(it, theta.copy(), eps, lam, dnorm, accepted))
        if len(increments) >= cfg.term_window:
            window = np.array(increments[-cfg.term_window :])
            if cfg.term_per_component:
                spread = float(np.max(np.std(window, axis=0)))
            else:
                spread = float(np.std(np.linalg.norm(window, axis=1)))
            if spread < cfg.term_std:
                result.converged = True
                break

    result.theta_est = theta
    result.iterations = len(result.trace)
    return result
