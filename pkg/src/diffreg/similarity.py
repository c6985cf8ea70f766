"""Similarity metrics between a fixed radiograph and rendered DRRs.

Two metrics are provided:

* a learned similarity: a small dual-branch encoder (local 3x3 convolutions
  plus a global patch-pooling projection) whose concatenated features are
  embedded on the unit sphere and compared with the spherical similarity;
* a multiscale normalized cross-correlation (mNCC) baseline.

The encoder ships with exact reverse-mode (parameter and input gradients)
and forward-mode (JVP) passes, written directly in numpy so every gradient
is checkable against finite differences.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import Diverged, ShapeMismatch
from .lie import compose_twists, geodesic_se3, geodesic_so4, sample_pose, se3_exp
from .render import (
    Camera,
    Volume,
    fd_steps,
    invert_intensity,
    invert_intensity_grad,
    perturbed_transforms,
    render_drr,
    render_transforms,
)
from .sphere import embed_feature_map, embed_jvp, embed_vjp, residual_field, spherical_similarity

_ACTIVATIONS = ("tanh", "identity")


@dataclass
class EncoderParams:
    """Weights of the toy dual-branch encoder.

    ``conv_kernels[i]`` is ``(c_out, c_in, 3, 3)`` with matching biases; the
    activation sits between convolutions. ``proj`` maps the flattened patch
    means (length ``n_patch``) to ``n_patch * global_channels`` outputs, so
    every global feature sees the whole image.
    """

    conv_kernels: list
    conv_biases: list
    proj: np.ndarray
    proj_bias: np.ndarray
    patch: int = 4
    activation: str = "tanh"

    def __post_init__(self):
        self.conv_kernels = [np.asarray(k, dtype=float) for k in self.conv_kernels]
        self.conv_biases = [np.asarray(b, dtype=float) for b in self.conv_biases]
        self.proj = np.asarray(self.proj, dtype=float)
        self.proj_bias = np.asarray(self.proj_bias, dtype=float)
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if len(self.conv_kernels) != len(self.conv_biases) or not self.conv_kernels:
            raise ShapeMismatch("conv kernel/bias lists must align and be non-empty")
        c_in = 1
        for k, b in zip(self.conv_kernels, self.conv_biases):
            if k.ndim != 4 or k.shape[1] != c_in or k.shape[2:] != (3, 3):
                raise ShapeMismatch(f"bad conv kernel shape {k.shape}, expected (*, {c_in}, 3, 3)")
            if b.shape != (k.shape[0],):
                raise ShapeMismatch("conv bias shape does not match kernel output channels")
            c_in = k.shape[0]
        if self.proj.ndim != 2 or self.proj.shape[0] % self.proj.shape[1]:
            raise ShapeMismatch("proj must be (n_patch * c_global, n_patch)")
        if self.proj_bias.shape != (self.proj.shape[0],):
            raise ShapeMismatch("proj bias does not match proj rows")

    @property
    def n_patch(self) -> int:
        return self.proj.shape[1]

    @property
    def local_channels(self) -> int:
        return self.conv_kernels[-1].shape[0]

    @property
    def global_channels(self) -> int:
        return self.proj.shape[0] // self.proj.shape[1]

    @property
    def out_dim(self) -> int:
        return self.local_channels + self.global_channels


def params_arrays(params: EncoderParams) -> list:
    return list(params.conv_kernels) + list(params.conv_biases) + [params.proj, params.proj_bias]


def params_like(template: EncoderParams, arrays: list) -> EncoderParams:
    n = len(template.conv_kernels)
    return replace(
        template,
        conv_kernels=[a.copy() for a in arrays[:n]],
        conv_biases=[a.copy() for a in arrays[n : 2 * n]],
        proj=arrays[2 * n].copy(),
        proj_bias=arrays[2 * n + 1].copy(),
    )


def params_zeros_like(params: EncoderParams) -> EncoderParams:
    return params_like(params, [np.zeros_like(a) for a in params_arrays(params)])


def params_add_scaled(p: EncoderParams, g: EncoderParams, scale: float) -> EncoderParams:
    return params_like(
        p, [a + scale * b for a, b in zip(params_arrays(p), params_arrays(g))]
    )


def init_encoder_params(
    rng,
    patch: int = 4,
    grid_shape: tuple = (10, 10),
    hidden_channels: int = 4,
    local_channels: int = 2,
    global_channels: int = 2,
    activation: str = "tanh",
    input_scale: float = 1.0,
) -> EncoderParams:
    """Random small-weight initialization for a given pooled grid shape.

    ``input_scale`` scales the layers that see raw intensities so arbitrary
    image magnitudes stay inside the activation's linear range.
    """
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    gh, gw = grid_shape
    n_patch = gh * gw
    k1 = rng.normal(0.0, input_scale / 3.0, (hidden_channels, 1, 3, 3))
    k2 = rng.normal(0.0, 1.0 / np.sqrt(9 * hidden_channels), (local_channels, hidden_channels, 3, 3))
    proj = rng.normal(0.0, input_scale / np.sqrt(n_patch), (n_patch * global_channels, n_patch))
    return EncoderParams(
        conv_kernels=[k1, k2],
        conv_biases=[np.zeros(hidden_channels), np.zeros(local_channels)],
        proj=proj,
        proj_bias=np.zeros(n_patch * global_channels),
        patch=patch,
        activation=activation,
    )


# ---------------------------------------------------------------------------
# encoder forward / backward / jvp
# ---------------------------------------------------------------------------


def _act(y: np.ndarray, kind: str) -> np.ndarray:
    return np.tanh(y) if kind == "tanh" else y


def _act_deriv(y: np.ndarray, kind: str) -> np.ndarray:
    if kind == "tanh":
        t = np.tanh(y)
        return 1.0 - t * t
    return np.ones_like(y)


def _conv3x3(x: np.ndarray, kernel: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """'same' 3x3 convolution with zero padding; x is (c_in, H, W)."""
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))  # (c_in, H, W, 3, 3)
    return np.einsum("cijyx,ocyx->oij", win, kernel, optimize=True) + bias[:, None, None]


def _conv3x3_weight_grad(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = sliding_window_view(xp, (3, 3), axis=(1, 2))
    return np.einsum("oij,cijyx->ocyx", upstream, win, optimize=True)


def _conv3x3_input_grad(upstream: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    c_in = kernel.shape[1]
    h, w = upstream.shape[1:]
    dxp = np.zeros((c_in, h + 2, w + 2))
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy : dy + h, dx : dx + w] += np.einsum(
                "oc,oij->cij", kernel[:, :, dy, dx], upstream
            )
    return dxp[:, 1 : 1 + h, 1 : 1 + w]


def _avgpool(x: np.ndarray, p: int) -> np.ndarray:
    c, h, w = x.shape
    return x.reshape(c, h // p, p, w // p, p).mean(axis=(2, 4))


def _unpool(g: np.ndarray, p: int) -> np.ndarray:
    """Adjoint of average pooling: spread each cell over its patch / p^2."""
    return np.repeat(np.repeat(g, p, axis=-2), p, axis=-1) / (p * p)


def _check_dims(img: np.ndarray, params: EncoderParams) -> tuple:
    img = np.asarray(img, dtype=float)
    if img.ndim != 2:
        raise ShapeMismatch(f"expected a 2-D image, got shape {img.shape}")
    h, w = img.shape
    p = params.patch
    if h % p or w % p:
        raise ShapeMismatch(f"image {img.shape} not divisible by patch {p}")
    if (h // p) * (w // p) != params.n_patch:
        raise ShapeMismatch(
            f"params expect {params.n_patch} patches, image gives {(h // p) * (w // p)}"
        )
    return img, h // p, w // p


def _forward_cache(img: np.ndarray, params: EncoderParams):
    img, gh, gw = _check_dims(img, params)
    x = img[None]
    ys, zs = [], [x]
    n = len(params.conv_kernels)
    for i, (k, b) in enumerate(zip(params.conv_kernels, params.conv_biases)):
        y = _conv3x3(zs[-1], k, b)
        ys.append(y)
        zs.append(_act(y, params.activation) if i < n - 1 else y)
    local = _avgpool(zs[-1], params.patch)  # (c_local, gh, gw)
    pooled = _avgpool(x, params.patch)[0]  # (gh, gw)
    g_flat = params.proj @ pooled.ravel() + params.proj_bias
    glob = g_flat.reshape(params.global_channels, gh, gw)
    feat = np.moveaxis(np.concatenate([local, glob], axis=0), 0, -1)
    return feat, {"x": x, "ys": ys, "zs": zs, "pooled": pooled, "gh": gh, "gw": gw}


def encoder_forward(img: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Feature map ``(H/p, W/p, D)``: local conv channels then global ones."""
    return _forward_cache(img, params)[0]


def encoder_backward(img: np.ndarray, params: EncoderParams, upstream: np.ndarray):
    """Exact reverse pass; returns (parameter gradient, input gradient)."""
    feat, cache = _forward_cache(img, params)
    if np.asarray(upstream).shape != feat.shape:
        raise ShapeMismatch(f"upstream shape {np.asarray(upstream).shape} != {feat.shape}")
    up = np.moveaxis(np.asarray(upstream, dtype=float), -1, 0)
    c_local = params.local_channels
    up_local, up_glob = up[:c_local], up[c_local:]

    # global branch
    up_flat = up_glob.ravel()
    d_proj = np.outer(up_flat, cache["pooled"].ravel())
    d_proj_bias = up_flat.copy()
    d_pooled = (params.proj.T @ up_flat).reshape(cache["gh"], cache["gw"])
    d_input = _unpool(d_pooled[None], params.patch)

    # local branch
    dy = _unpool(up_local, params.patch)
    n = len(params.conv_kernels)
    d_kernels = [None] * n
    d_biases = [None] * n
    for i in range(n - 1, -1, -1):
        if i < n - 1:
            dy = dy * _act_deriv(cache["ys"][i], params.activation)
        d_kernels[i] = _conv3x3_weight_grad(cache["zs"][i], dy)
        d_biases[i] = dy.sum(axis=(1, 2))
        dy = _conv3x3_input_grad(dy, params.conv_kernels[i])
    d_input = d_input + dy

    grad = replace(
        params,
        conv_kernels=d_kernels,
        conv_biases=d_biases,
        proj=d_proj,
        proj_bias=d_proj_bias,
    )
    return grad, d_input[0]


def encoder_param_gradient(img: np.ndarray, params: EncoderParams, upstream: np.ndarray) -> EncoderParams:
    return encoder_backward(img, params, upstream)[0]


def encoder_input_gradient(img: np.ndarray, params: EncoderParams, upstream: np.ndarray) -> np.ndarray:
    return encoder_backward(img, params, upstream)[1]


def encoder_jvp(img: np.ndarray, params: EncoderParams, tangent: np.ndarray) -> np.ndarray:
    """Forward-mode derivative of the feature map along an image tangent."""
    _, cache = _forward_cache(img, params)
    tangent = np.asarray(tangent, dtype=float)
    if tangent.shape != img.shape:
        raise ShapeMismatch("tangent must match the image shape")
    dx = tangent[None]
    n = len(params.conv_kernels)
    dz = dx
    for i, k in enumerate(params.conv_kernels):
        dy = _conv3x3(dz, k, np.zeros(k.shape[0]))
        dz = dy * _act_deriv(cache["ys"][i], params.activation) if i < n - 1 else dy
    d_local = _avgpool(dz, params.patch)
    d_pooled = _avgpool(dx, params.patch)[0]
    d_glob = (params.proj @ d_pooled.ravel()).reshape(
        params.global_channels, cache["gh"], cache["gw"]
    )
    return np.moveaxis(np.concatenate([d_local, d_glob], axis=0), 0, -1)


# ---------------------------------------------------------------------------
# learned spherical similarity
# ---------------------------------------------------------------------------


def learned_similarity(
    fixed: np.ndarray, moving: np.ndarray, params: EncoderParams, mode: str = "orthogonal-tangent"
) -> float:
    """Spherical similarity of the embedded encoder features of both images."""
    if np.asarray(fixed).shape != np.asarray(moving).shape:
        raise ShapeMismatch("fixed and moving images must share dimensions")
    phi_m = embed_feature_map(encoder_forward(moving, params), mode)
    phi_f = embed_feature_map(encoder_forward(fixed, params), mode)
    return spherical_similarity(phi_m, phi_f)


def learned_residuals(fixed: np.ndarray, moving: np.ndarray, params: EncoderParams):
    """Residual vector of Eq.-style per-pixel mismatches plus reusable state."""
    feat_m = encoder_forward(moving, params)
    feat_f = encoder_forward(fixed, params)
    phi_m = embed_feature_map(feat_m)
    phi_f = embed_feature_map(feat_f)
    r = residual_field(phi_m, phi_f)
    return r, {"feat_m": feat_m, "phi_m": phi_m, "phi_f": phi_f}


def learned_residual_jvp(
    moving: np.ndarray, params: EncoderParams, tangent: np.ndarray, state: dict
) -> np.ndarray:
    """Directional derivative of the residual vector along an image tangent."""
    d_feat = encoder_jvp(moving, params, tangent)
    d_phi = embed_jvp(state["feat_m"], d_feat)
    return -np.einsum("ijk,ijk->ij", d_phi, state["phi_f"]).ravel()


def learned_image_gradient(fixed: np.ndarray, moving: np.ndarray, params: EncoderParams) -> np.ndarray:
    """Gradient of the learned similarity with respect to the moving image."""
    feat_m = encoder_forward(moving, params)
    phi_f = embed_feature_map(encoder_forward(fixed, params))
    up_feat = embed_vjp(feat_m, -phi_f)
    return encoder_input_gradient(moving, params, up_feat)


def similarity_param_gradient(
    fixed: np.ndarray, moving: np.ndarray, params: EncoderParams
) -> EncoderParams:
    """Exact gradient of the learned similarity w.r.t. the shared weights.

    Both encoder applications contribute since the branches share them.
    """
    feat_m = encoder_forward(moving, params)
    feat_f = encoder_forward(fixed, params)
    phi_m = embed_feature_map(feat_m)
    phi_f = embed_feature_map(feat_f)
    g_m = encoder_param_gradient(moving, params, embed_vjp(feat_m, -phi_f))
    g_f = encoder_param_gradient(fixed, params, embed_vjp(feat_f, -phi_m))
    return params_add_scaled(g_m, g_f, 1.0)


# ---------------------------------------------------------------------------
# multiscale NCC
# ---------------------------------------------------------------------------


def default_patch_sizes(shape: tuple) -> list:
    m = min(shape)
    return [m, max(2, m // 4)]


def _patch_matrix(img: np.ndarray, s: int) -> np.ndarray:
    """(n_patches, s*s) matrix of non-overlapping patches (full tiles only)."""
    h, w = img.shape
    gh, gw = h // s, w // s
    tiles = img[: gh * s, : gw * s].reshape(gh, s, gw, s).transpose(0, 2, 1, 3)
    return tiles.reshape(gh * gw, s * s)


# Patches whose per-pixel deviation is below this fraction of the image
# dynamic range count as constant for the scoring op (their NCC would be
# numerical dust); the residual mode instead fades them out smoothly.
_FLAT_PATCH_TOL = 1e-3

# Confidence scale of the residual mode: patch deviations at this fraction
# of the dynamic range are half-weighted, so empty or near-empty detector
# regions neither inject noise nor create thresholds in the pose landscape.
_RESIDUAL_CONF_TOL = 5e-3


def _zncc(a_p: np.ndarray, b_p: np.ndarray):
    da = a_p - a_p.mean(axis=1, keepdims=True)
    db = b_p - b_p.mean(axis=1, keepdims=True)
    sa = np.einsum("ij,ij->i", da, da)
    sb = np.einsum("ij,ij->i", db, db)
    n = a_p.shape[1]
    floor_a = (_FLAT_PATCH_TOL * (a_p.max() - a_p.min())) ** 2 * n
    floor_b = (_FLAT_PATCH_TOL * (b_p.max() - b_p.min())) ** 2 * n
    ok = (sa > floor_a) & (sb > floor_b)
    denom = np.sqrt(np.where(ok, sa * sb, 1.0))
    ncc = np.where(ok, np.einsum("ij,ij->i", da, db) / denom, 0.0)
    state = {"da": da, "db": db, "sa": sa, "sb": sb, "ok": ok, "denom": denom}
    return ncc, state


def _zncc_residuals(a_p: np.ndarray, b_p: np.ndarray):
    """Smooth content-aware residuals ``ca*cb*(1 - NCC) + (ca - cb)^2``.

    ``c = s/(s + e0)`` is a rational confidence in a patch's content (its
    mean-removed power against the fixed image's intensity scale). The
    correlation term is confidence-weighted so near-empty patches cannot
    inject noise, and the mismatch term penalizes registering structure
    against emptiness. Identical images give exactly zero residuals.
    """
    da = a_p - a_p.mean(axis=1, keepdims=True)
    db = b_p - b_p.mean(axis=1, keepdims=True)
    sa = np.einsum("ij,ij->i", da, da)
    sb = np.einsum("ij,ij->i", db, db)
    n = a_p.shape[1]
    # the fixed image sets the intensity scale for BOTH sides, keeping the
    # weights differentiable in b (and constant while b moves)
    e0 = max((_RESIDUAL_CONF_TOL * (a_p.max() - a_p.min())) ** 2 * n, 1e-300)
    pos = (sa > 0) & (sb > 0)
    denom = np.sqrt(np.where(pos, sa * sb, 1.0))
    raw = np.where(pos, np.einsum("ij,ij->i", da, db) / denom, 0.0)
    ca = sa / (sa + e0)
    cb = sb / (sb + e0)
    r = ca * cb * (1.0 - raw) + (ca - cb) ** 2
    state = {
        "da": da, "db": db, "sa": sa, "sb": sb, "pos": pos, "denom": denom,
        "raw": raw, "ca": ca, "cb": cb, "e0": e0,
    }
    return r, state


def _zncc_residual_grad_b(state) -> np.ndarray:
    """Gradient of the content-aware residuals w.r.t. ``b`` patch entries."""
    pos = state["pos"]
    sb = np.where(pos, state["sb"], 1.0)
    raw_grad = state["da"] / state["denom"][:, None] - (state["raw"] / sb)[:, None] * state["db"]
    raw_grad = np.where(pos[:, None], raw_grad, 0.0)
    dcb = (state["e0"] / (state["sb"] + state["e0"]) ** 2)[:, None] * (2.0 * state["db"])
    corr = (state["ca"] * (1.0 - state["raw"]))[:, None] * dcb
    corr = corr - (state["ca"] * state["cb"])[:, None] * raw_grad
    mismatch = -2.0 * (state["ca"] - state["cb"])[:, None] * dcb
    return corr + mismatch


def _check_patch_sizes(shape: tuple, patch_sizes) -> list:
    sizes = [int(s) for s in (patch_sizes if patch_sizes is not None else default_patch_sizes(shape))]
    if not sizes:
        raise ShapeMismatch("patch_sizes must be non-empty")
    for s in sizes:
        if s < 1 or s > min(shape):
            raise ShapeMismatch(f"patch size {s} exceeds image dims {shape}")
    return sizes


def mncc_similarity(a: np.ndarray, b: np.ndarray, patch_sizes=None) -> float:
    """Mean over scales of the mean patchwise zero-normalized correlation.

    Constant patches contribute NCC = 0; a patch counts as constant when its
    per-pixel deviation falls below 0.1% of the image dynamic range, which
    keeps empty detector regions from injecting noise-driven correlations.
    Result lies in [-1, 1] and is 1.0 for identical images with no constant
    patch.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ShapeMismatch("images must share dimensions")
    sizes = _check_patch_sizes(a.shape, patch_sizes)
    per_scale = []
    for s in sizes:
        ncc = _zncc(_patch_matrix(a, s), _patch_matrix(b, s))[0]
        per_scale.append(float(ncc.mean()))
    return float(np.mean(per_scale))


def mncc_residuals(a: np.ndarray, b: np.ndarray, patch_sizes=None) -> np.ndarray:
    """Stacked per-patch ``1 - NCC`` residuals over all scales.

    Each residual carries a smooth content-confidence weight so empty or
    near-empty patches fade out instead of flipping the pose landscape;
    identical images give exactly zero residuals.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sizes = _check_patch_sizes(a.shape, patch_sizes)
    parts = [_zncc_residuals(_patch_matrix(a, s), _patch_matrix(b, s))[0] for s in sizes]
    return np.concatenate(parts)


def mncc_loss(a: np.ndarray, b: np.ndarray, patch_sizes=None) -> float:
    """``1 - mncc_similarity``: non-negative, zero at perfect correlation."""
    return 1.0 - mncc_similarity(a, b, patch_sizes)


def _zncc_grad_b(a_p: np.ndarray, b_p: np.ndarray) -> np.ndarray:
    """Per-patch gradient of NCC with respect to the ``b`` patch entries."""
    ncc, st = _zncc(a_p, b_p)
    ok = st["ok"]
    sb = np.where(ok, st["sb"], 1.0)
    g = st["da"] / st["denom"][:, None] - (ncc / sb)[:, None] * st["db"]
    return np.where(ok[:, None], g, 0.0)


def _scatter_patches(grad_p: np.ndarray, shape: tuple, s: int) -> np.ndarray:
    h, w = shape
    gh, gw = h // s, w // s
    out = np.zeros(shape)
    tiles = grad_p.reshape(gh, gw, s, s).transpose(0, 2, 1, 3).reshape(gh * s, gw * s)
    out[: gh * s, : gw * s] = tiles
    return out


def mncc_image_gradient(a: np.ndarray, b: np.ndarray, patch_sizes=None) -> np.ndarray:
    """Gradient of ``mncc_loss(a, b)`` with respect to ``b``."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sizes = _check_patch_sizes(a.shape, patch_sizes)
    out = np.zeros_like(b)
    for s in sizes:
        a_p = _patch_matrix(a, s)
        b_p = _patch_matrix(b, s)
        g = -_zncc_grad_b(a_p, b_p) / (len(sizes) * a_p.shape[0])
        out += _scatter_patches(g, b.shape, s)
    return out


def mncc_residual_jvp(a: np.ndarray, b: np.ndarray, tangent: np.ndarray, patch_sizes=None) -> np.ndarray:
    """Directional derivative of the residual stack along a ``b`` tangent."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    sizes = _check_patch_sizes(a.shape, patch_sizes)
    parts = []
    for s in sizes:
        _, st = _zncc_residuals(_patch_matrix(a, s), _patch_matrix(b, s))
        g = _zncc_residual_grad_b(st)
        t_p = _patch_matrix(np.asarray(tangent, dtype=float), s)
        parts.append(np.einsum("ij,ij->i", g, t_p))
    return np.concatenate(parts)


# ---------------------------------------------------------------------------
# pose gradients and the double-backward objective
# ---------------------------------------------------------------------------


def similarity_loss(
    fixed: np.ndarray, moving: np.ndarray, metric: str, params: EncoderParams = None, patch_sizes=None
) -> float:
    """Scalar loss: spherical similarity (learned) or ``1 - mNCC``."""
    if metric == "learned":
        return learned_similarity(fixed, moving, params)
    if metric == "mncc":
        return mncc_loss(fixed, moving, patch_sizes)
    raise ValueError(f"unknown metric {metric!r}")


def render_with_gradient(vol, cam, theta, steps=None, invert_i0=None):
    """Moving image and its six pose-derivative images, in one traversal.

    When ``invert_i0`` is given the log inversion is applied to the image
    and chained into the derivative images.
    """
    steps = fd_steps() if steps is None else np.asarray(steps, dtype=float)
    transforms = [se3_exp(theta)] + perturbed_transforms(theta, steps)
    imgs = render_transforms(vol, cam, transforms)
    moving = imgs[0]
    grad = (imgs[1::2] - imgs[2::2]) / (2.0 * steps[:, None, None])
    if invert_i0 is not None:
        grad = grad * invert_intensity_grad(moving, invert_i0)[None]
        moving = invert_intensity(moving, invert_i0)
    return moving, grad


def grad_similarity_pose(
    vol: Volume,
    cam: Camera,
    theta: np.ndarray,
    fixed: np.ndarray,
    metric: str = "learned",
    params: EncoderParams = None,
    steps=None,
    patch_sizes=None,
    invert_i0=None,
) -> np.ndarray:
    """Pose gradient of the metric loss via the renderer's FD images."""
    moving, grad_imgs = render_with_gradient(vol, cam, theta, steps, invert_i0)
    if metric == "learned":
        g_img = learned_image_gradient(fixed, moving, params)
    elif metric == "mncc":
        g_img = mncc_image_gradient(fixed, moving, patch_sizes)
    else:
        raise ValueError(f"unknown metric {metric!r}")
    return np.einsum("ij,kij->k", g_img, grad_imgs)


def geodesic_loss(theta_a, theta_b, flavor: str = "se3", f: float = 600.0) -> float:
    if flavor == "se3":
        return geodesic_se3(theta_a, theta_b)
    if flavor == "so4":
        return geodesic_so4(theta_a, theta_b, f)
    raise ValueError(f"unknown geodesic flavor {flavor!r}")


def geo_gradient(
    theta: np.ndarray, theta_gt: np.ndarray, flavor: str = "se3", f: float = 600.0, steps=None
) -> np.ndarray:
    """Central-difference pose gradient of the geodesic distance to ``theta_gt``.

    Uses the same left-multiplied perturbations as the renderer so both
    gradient flavors live in the same tangent convention.
    """
    steps = fd_steps() if steps is None else np.asarray(steps, dtype=float)
    g = np.zeros(6)
    for k in range(6):
        delta = np.zeros(6)
        delta[k] = steps[k]
        hi = geodesic_loss(compose_twists(delta, theta), theta_gt, flavor, f)
        lo = geodesic_loss(compose_twists(-delta, theta), theta_gt, flavor, f)
        g[k] = (hi - lo) / (2.0 * steps[k])
    return g


def gradient_mismatch(grad_net: np.ndarray, grad_geo: np.ndarray, compare: str = "geodesic") -> float:
    """Distance between two pose gradients, read as twists by default."""
    if compare == "geodesic":
        return geodesic_se3(grad_net, grad_geo)
    if compare == "euclidean":
        return float(np.linalg.norm(np.asarray(grad_net) - np.asarray(grad_geo)))
    raise ValueError(f"unknown compare mode {compare!r}")


def double_backward_loss(
    theta: np.ndarray,
    theta_gt: np.ndarray,
    grad_net: np.ndarray,
    flavor: str = "se3",
    f: float = 600.0,
    compare: str = "geodesic",
    steps=None,
) -> float:
    """Mismatch between the network pose gradient and the geodesic one."""
    return gradient_mismatch(grad_net, geo_gradient(theta, theta_gt, flavor, f, steps), compare)


# ---------------------------------------------------------------------------
# self-supervised training
# ---------------------------------------------------------------------------


@dataclass
class TrainConfig:
    iterations: int = 500
    learning_rate: float = 0.1
    rng_seed: int = 0
    gt_rot_deg: float = 3.0
    gt_trans_mm: float = 5.0
    perturb_rot_deg: float = 3.0
    perturb_trans_mm: float = 6.0
    geodesic_flavor: str = "se3"
    f: float = 600.0
    compare: str = "geodesic"
    augmentation: bool = False
    aug_config: object = None
    intensity_i0: object = "auto"
    patch: int = 4
    hidden_channels: int = 4
    local_channels: int = 2
    global_channels: int = 2
    activation: str = "tanh"
    fd_rot: float = 1e-3
    fd_trans: float = 1e-1

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


def _grad_mismatch_vjp(grad_net, grad_geo, compare) -> np.ndarray:
    """d(mismatch)/d(grad_net) by central differences (6 cheap evals)."""
    scale = max(1.0, float(np.linalg.norm(grad_net)), float(np.linalg.norm(grad_geo)))
    h = 1e-6 * scale
    out = np.zeros(6)
    for k in range(6):
        e = np.zeros(6)
        e[k] = h
        out[k] = (
            gradient_mismatch(grad_net + e, grad_geo, compare)
            - gradient_mismatch(grad_net - e, grad_geo, compare)
        ) / (2.0 * h)
    return out


def train_similarity(vol: Volume, cam: Camera, cfg: TrainConfig, params0: EncoderParams = None):
    """Self-supervised loop driving the network gradient toward the geodesic one.

    Per iteration: draw a ground-truth pose, synthesize the fixed image
    (optionally domain-randomized), draw a nearby pose, evaluate the
    gradient-mismatch loss and descend on the encoder weights. The parameter
    gradient uses the exact reverse-mode similarity gradient at two images
    shifted along the loss's image-space direction (one central difference
    for the outer derivative). Deterministic given the seed.

    Returns (trained params, per-iteration loss array).
    """
    from .augment import RandomizationConfig, randomize

    rng = np.random.default_rng(cfg.rng_seed)
    steps = fd_steps(cfg.fd_rot, cfg.fd_trans)

    ref = render_drr(vol, cam, np.zeros(6))
    i0 = cfg.intensity_i0
    if i0 == "auto":
        i0 = float(max(ref.max(), 1e-6))
    if params0 is None:
        gh = cam.det_h // cfg.patch
        gw = cam.det_w // cfg.patch
        # inverted images live in [0, 1]; raw DRRs are rescaled at init time
        input_scale = 1.0 if i0 is not None else 1.0 / max(float(ref.max()), 1e-6)
        params = init_encoder_params(
            rng,
            patch=cfg.patch,
            grid_shape=(gh, gw),
            hidden_channels=cfg.hidden_channels,
            local_channels=cfg.local_channels,
            global_channels=cfg.global_channels,
            activation=cfg.activation,
            input_scale=input_scale,
        )
    else:
        params = params0
    aug_cfg = cfg.aug_config if cfg.aug_config is not None else RandomizationConfig()

    losses = np.zeros(cfg.iterations)
    for it in range(cfg.iterations):
        theta_gt = sample_pose(np.zeros(6), cfg.gt_rot_deg, cfg.gt_trans_mm, rng)
        fixed_raw = render_drr(vol, cam, theta_gt)
        fixed = invert_intensity(fixed_raw, i0) if i0 is not None else fixed_raw
        if cfg.augmentation:
            fixed = randomize(fixed, aug_cfg, int(rng.integers(2 ** 63)))
        theta = sample_pose(theta_gt, cfg.perturb_rot_deg, cfg.perturb_trans_mm, rng)

        moving, grad_imgs = render_with_gradient(vol, cam, theta, steps, i0)
        g_img = learned_image_gradient(fixed, moving, params)
        grad_net = np.einsum("ij,kij->k", g_img, grad_imgs)
        grad_geo = geo_gradient(theta, theta_gt, cfg.geodesic_flavor, cfg.f, steps)
        loss = gradient_mismatch(grad_net, grad_geo, cfg.compare)
        if not np.isfinite(loss):
            raise Diverged(f"training loss became non-finite at iteration {it}")
        losses[it] = loss

        if cfg.learning_rate > 0:
            c = _grad_mismatch_vjp(grad_net, grad_geo, cfg.compare)
            g_dir = np.einsum("k,kij->ij", c, grad_imgs)
            g_scale = float(np.abs(g_dir).max())
            if g_scale > 0:
                t = 1e-3 * max(float(np.abs(moving).max()), 1e-6) / g_scale
                gp_hi = similarity_param_gradient(fixed, moving + t * g_dir, params)
                gp_lo = similarity_param_gradient(fixed, moving - t * g_dir, params)
                grad_p = params_like(
                    params,
                    [
                        (a - b) / (2.0 * t)
                        for a, b in zip(params_arrays(gp_hi), params_arrays(gp_lo))
                    ],
                )
                params = params_add_scaled(params, grad_p, -cfg.learning_rate)
    return params, losses
