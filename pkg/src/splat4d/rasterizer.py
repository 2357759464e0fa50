"""Rendering a Scene4D at a (camera, time) query, and its adjoint.

Pipeline: slice every Gaussian at ``t`` (conditional 3D Gaussian plus the
temporal marginal ``p(t)``), optionally filter (inference mode only), project
with the linearised pinhole model, depth-sort, then alpha-composite front to
back with effective opacity ``p(t) * opacity``.

Two forward paths exist: :func:`render_dense` evaluates every splat at every
pixel (the oracle) and :func:`render_tiled` bins splats into tiles and
composites with numba kernels.  :func:`render_backward` differentiates the
tiled path with respect to all 20 Gaussian parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _raster_kernels as kernels
from .camera import CameraView
from .exceptions import ContractViolationError, InvalidInputError
from .gaussians import ConditionalGaussian3, Scene4D, left_quaternion_matrix, right_quaternion_matrix

MODES = ("training", "inference")
_MIN_DEPTH = 1e-6
_MIN_DET = 1e-12
_VAR_FLOOR = 1e-12
_QUAT_EPS = 1e-8

_EYE4 = np.eye(4)
_LEFT_BASIS = left_quaternion_matrix(_EYE4)
_RIGHT_BASIS = right_quaternion_matrix(_EYE4)


@dataclass(frozen=True)
class RenderOptions:
    mode: str = "training"
    background: tuple = (1.0, 1.0, 1.0)
    tile_size: int = 16
    marginal_threshold: float = 0.05
    opacity_threshold: float = 0.05
    sigma_cutoff: float = 3.0
    # compositing stops once T drops below this; the skipped tail is bounded by it
    min_transmittance: float = 1e-6

    def __post_init__(self):
        if self.mode not in MODES:
            raise InvalidInputError(f"mode must be one of {MODES}, got {self.mode!r}")
        bg = tuple(float(c) for c in self.background)
        if len(bg) != 3 or not all(0.0 <= c <= 1.0 for c in bg):
            raise InvalidInputError("background must be an rgb triple in [0, 1]")
        object.__setattr__(self, "background", bg)
        if int(self.tile_size) != self.tile_size or self.tile_size < 8:
            raise InvalidInputError("tile_size must be an integer >= 8")
        for name in ("marginal_threshold", "opacity_threshold"):
            if not 0.0 <= getattr(self, name) < 1.0:
                raise InvalidInputError(f"{name} must lie in [0, 1)")
        if not self.sigma_cutoff > 0:
            raise InvalidInputError("sigma_cutoff must be positive")
        if not 0.0 <= self.min_transmittance < 1.0:
            raise InvalidInputError("min_transmittance must lie in [0, 1)")

    def replace(self, **changes):
        values = {k: getattr(self, k) for k in self.__dataclass_fields__}
        values.update(changes)
        return RenderOptions(**values)


DEFAULT_OPTIONS = RenderOptions()
INFERENCE_OPTIONS = RenderOptions(mode="inference")
#: Smooth rendering for finite-difference checks: no extent cutoff, no early stop.
GRADCHECK_OPTIONS = RenderOptions(sigma_cutoff=math.inf, min_transmittance=0.0)


@dataclass
class Prepared:
    """Projected splats in front-to-back order plus what the adjoint needs."""

    index: np.ndarray
    mean_uv: np.ndarray
    cov_uv: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    color: np.ndarray
    alpha: np.ndarray
    rect: np.ndarray
    n_gaussians: int
    n_culled: int
    n_filtered: int
    n_degenerate: int
    cache: dict = field(default_factory=dict, repr=False)

    def __len__(self):
        return self.index.shape[0]


@dataclass
class RenderInfo:
    n_gaussians: int
    n_active: int
    n_culled: int
    n_filtered: int
    n_degenerate: int
    transmittance: np.ndarray
    weight: np.ndarray
    raw_image: np.ndarray


def _normalize(q):
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    small = norm < _QUAT_EPS
    return np.where(small, [1.0, 0.0, 0.0, 0.0], q / np.where(small, 1.0, norm)), norm, small


def _slice(scene: Scene4D, t):
    """Covariances and conditional Gaussians of every primitive at time ``t``."""
    qhat_l, norm_l, small_l = _normalize(scene.q_left)
    qhat_r, norm_r, small_r = _normalize(scene.q_right)
    lmat = np.einsum("k...,nk->n...", _LEFT_BASIS, qhat_l)
    rmat = np.einsum("k...,nk->n...", _RIGHT_BASIS, qhat_r)
    rot = lmat @ rmat
    msc = rot * scene.scale[:, None, :]
    sigma = msc @ np.swapaxes(msc, -1, -2)
    var_t = sigma[:, 3, 3]
    ok = var_t > _VAR_FLOOR
    safe_var = np.where(ok, var_t, 1.0)
    dt = t - scene.mean[:, 3]
    cross = sigma[:, :3, 3]
    mu3 = scene.mean[:, :3] + cross * (dt / safe_var)[:, None]
    cov3 = sigma[:, :3, :3] - cross[:, :, None] * cross[:, None, :] / safe_var[:, None, None]
    weight = np.exp(-0.5 * dt * dt / safe_var)
    cache = dict(
        qhat_l=qhat_l, norm_l=norm_l, small_l=small_l, qhat_r=qhat_r, norm_r=norm_r, small_r=small_r,
        lmat=lmat, rmat=rmat, rot=rot, msc=msc, var_t=safe_var, dt=dt, cross=cross, cov3=cov3, weight=weight,
    )
    return mu3, cov3, weight, ok, cache


def _project(mu3, cov3, view: CameraView):
    rot, trans = view.pose.world_to_camera()
    intr = view.intrinsics
    pc = mu3 @ rot.T + trans
    z = pc[:, 2]
    front = z > _MIN_DEPTH
    zs = np.where(front, z, 1.0)
    x, y = pc[:, 0], pc[:, 1]
    jac = np.zeros((mu3.shape[0], 2, 3))
    jac[:, 0, 0] = intr.fx / zs
    jac[:, 0, 2] = -intr.fx * x / (zs * zs)
    jac[:, 1, 1] = intr.fy / zs
    jac[:, 1, 2] = -intr.fy * y / (zs * zs)
    pmat = jac @ rot
    cov_uv = pmat @ cov3 @ np.swapaxes(pmat, -1, -2)
    cov_uv = 0.5 * (cov_uv + np.swapaxes(cov_uv, -1, -2))
    mean_uv = np.stack([intr.fx * x / zs + intr.cx, intr.fy * y / zs + intr.cy], axis=-1)
    return mean_uv, cov_uv, z, front, dict(pc=pc, zs=zs, pmat=pmat, jac=jac, w2c=rot)


def _pixel_rects(mean_uv, cov_uv, cutoff, width, height):
    """Inclusive pixel ranges whose centres lie in the splat's cutoff ellipse AABB."""
    with np.errstate(invalid="ignore"):
        rx = cutoff * np.sqrt(np.maximum(cov_uv[:, 0, 0], 0.0))
        ry = cutoff * np.sqrt(np.maximum(cov_uv[:, 1, 1], 0.0))
    x0 = np.clip(np.ceil(mean_uv[:, 0] - rx - 0.5), 0, width)
    x1 = np.clip(np.floor(mean_uv[:, 0] + rx - 0.5), -1, width - 1)
    y0 = np.clip(np.ceil(mean_uv[:, 1] - ry - 0.5), 0, height)
    y1 = np.clip(np.floor(mean_uv[:, 1] + ry - 0.5), -1, height - 1)
    return np.stack([x0, x1, y0, y1], axis=-1).astype(np.int64)


def _prepare_from(mu3, cov3, weight, rgb, opacity, index, view, opts, extra_cache, n_total, n_culled0=0):
    mean_uv, cov_uv, z, front, pcache = _project(mu3, cov3, view)
    keep = front.copy()
    n_culled = int(np.count_nonzero(~front)) + n_culled0
    n_filtered = 0
    if opts.mode == "inference":
        passes = (weight >= opts.marginal_threshold) & (weight * opacity >= opts.opacity_threshold)
        n_filtered = int(np.count_nonzero(front & ~passes))
        keep &= passes
    det = cov_uv[:, 0, 0] * cov_uv[:, 1, 1] - cov_uv[:, 0, 1] ** 2
    degenerate = keep & ~(det >= _MIN_DET)
    keep &= ~degenerate
    sel = np.flatnonzero(keep)
    order = sel[np.lexsort((index[sel], z[sel]))]
    det_s = det[order]
    conic = np.stack([cov_uv[order, 1, 1], -cov_uv[order, 0, 1], cov_uv[order, 0, 0]], axis=-1) / det_s[:, None]
    rect = _pixel_rects(mean_uv[order], cov_uv[order], opts.sigma_cutoff, view.width, view.height)
    cache = dict(extra_cache)
    cache.update(pcache)
    cache["order"] = order
    return Prepared(
        index=index[order],
        mean_uv=np.ascontiguousarray(mean_uv[order]),
        cov_uv=cov_uv[order],
        conic=np.ascontiguousarray(conic),
        depth=z[order],
        color=np.ascontiguousarray(rgb[order]),
        alpha=np.ascontiguousarray(weight[order] * opacity[order]),
        rect=np.ascontiguousarray(rect),
        n_gaussians=n_total,
        n_culled=n_culled,
        n_filtered=n_filtered,
        n_degenerate=int(np.count_nonzero(degenerate)),
        cache=cache,
    )


def prepare(scene: Scene4D, view: CameraView, t=None, opts: RenderOptions = DEFAULT_OPTIONS) -> Prepared:
    """Slice, cull, filter, project and depth-sort a scene for one query."""
    t = view.time if t is None else float(t)
    mu3, cov3, weight, ok, scache = _slice(scene, t)
    index = np.arange(len(scene))
    n_bad = int(np.count_nonzero(~ok))
    prep = _prepare_from(
        mu3[ok], cov3[ok], weight[ok], scene.rgb[ok], scene.opacity[ok], index[ok], view, opts,
        {}, len(scene), n_bad,
    )
    prep.cache.update(slice=scache, ok=ok, mu3=mu3, t=t)
    return prep


def prepare_conditional(cg: ConditionalGaussian3, view: CameraView, opts: RenderOptions = DEFAULT_OPTIONS):
    """Prepare already-sliced 3D Gaussians (a static 3DGS scene when weights are 1)."""
    mean = np.atleast_2d(cg.mean)
    n = mean.shape[0]
    weight = np.broadcast_to(np.asarray(cg.temporal_weight, dtype=np.float64), (n,))
    opacity = np.broadcast_to(np.asarray(cg.opacity, dtype=np.float64), (n,))
    rgb = np.broadcast_to(np.asarray(cg.rgb, dtype=np.float64), (n, 3))
    cov = np.asarray(cg.cov).reshape(n, 3, 3)
    return _prepare_from(mean, cov, weight, rgb, opacity, np.arange(n), view, opts, {}, n)


def cull_and_filter(scene: Scene4D, t, view: CameraView, opts: RenderOptions = DEFAULT_OPTIONS):
    """Survivors as ``(index, ConditionalGaussian3, Splat)`` in scene order."""
    from .camera import Splat

    prep = prepare(scene, view, t, opts)
    mu3 = prep.cache["mu3"]
    scache = prep.cache["slice"]
    out = []
    for k in np.argsort(prep.index, kind="stable"):
        i = int(prep.index[k])
        cg = ConditionalGaussian3(
            mu3[i], scache["cov3"][i], float(scache["weight"][i]), scene.rgb[i], float(scene.opacity[i])
        )
        out.append((i, cg, Splat(prep.mean_uv[k], prep.cov_uv[k], float(prep.depth[k]))))
    return out


def active_set(scene: Scene4D, view: CameraView, t=None, opts: RenderOptions = DEFAULT_OPTIONS):
    """Sorted indices of Gaussians that reach compositing (degenerate splats included)."""
    t = view.time if t is None else float(t)
    mu3, cov3, weight, ok, _ = _slice(scene, t)
    _, _, z, front, _ = _project(mu3, cov3, view)
    keep = ok & front
    if opts.mode == "inference":
        keep &= (weight >= opts.marginal_threshold) & (weight * scene.opacity >= opts.opacity_threshold)
    return np.flatnonzero(keep)


def depth_sort(depths, index=None):
    """Permutation ordering splats front to back; ties keep ascending index."""
    depths = np.asarray(depths, dtype=np.float64)
    index = np.arange(depths.shape[0]) if index is None else np.asarray(index)
    return np.lexsort((index, depths))


def _background(opts):
    return np.asarray(opts.background, dtype=np.float64)


def _composite_dense(prep: Prepared, height, width, background):
    uu, vv = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    if len(prep) == 0:
        trans = np.ones(pix.shape[0])
        weight = np.zeros(pix.shape[0])
        image = np.broadcast_to(background, (pix.shape[0], 3)).copy()
    else:
        dx = pix[None, :, 0] - prep.mean_uv[:, None, 0]
        dy = pix[None, :, 1] - prep.mean_uv[:, None, 1]
        c = prep.conic
        power = -0.5 * (c[:, 0, None] * dx * dx + c[:, 2, None] * dy * dy) - c[:, 1, None] * dx * dy
        a = prep.alpha[:, None] * np.exp(power)
        t_after = np.cumprod(1.0 - a, axis=0)
        t_before = np.vstack([np.ones((1, pix.shape[0])), t_after[:-1]])
        w = a * t_before
        trans = t_after[-1]
        weight = w.sum(axis=0)
        image = w.T @ prep.color + trans[:, None] * background
    shape = (height, width)
    return image.reshape(height, width, 3), trans.reshape(shape), weight.reshape(shape)


def _finish(raw, trans, weight, prep, return_info):
    image = np.clip(raw, 0.0, 1.0)
    if not return_info:
        return image
    info = RenderInfo(
        n_gaussians=prep.n_gaussians, n_active=len(prep), n_culled=prep.n_culled, n_filtered=prep.n_filtered,
        n_degenerate=prep.n_degenerate, transmittance=trans, weight=weight, raw_image=raw,
    )
    return image, info


def render_dense(scene: Scene4D, view: CameraView, t=None, opts: RenderOptions = DEFAULT_OPTIONS, return_info=False):
    """Oracle renderer: every sorted splat at every pixel, no tiling, no cutoff, no early stop."""
    prep = prepare(scene, view, t, opts)
    raw, trans, weight = _composite_dense(prep, view.height, view.width, _background(opts))
    return _finish(raw, trans, weight, prep, return_info)


@dataclass
class _Binning:
    tile_offsets: np.ndarray
    entries: np.ndarray
    tiles_x: int


def _bin(prep: Prepared, height, width, tile_size) -> _Binning:
    tiles_x = -(-width // tile_size)
    tiles_y = -(-height // tile_size)
    rect = prep.rect
    nonempty = (rect[:, 0] <= rect[:, 1]) & (rect[:, 2] <= rect[:, 3])
    ranks = np.flatnonzero(nonempty)
    tx0, tx1 = rect[ranks, 0] // tile_size, rect[ranks, 1] // tile_size
    ty0, ty1 = rect[ranks, 2] // tile_size, rect[ranks, 3] // tile_size
    nx, ny = tx1 - tx0 + 1, ty1 - ty0 + 1
    counts = nx * ny
    total = int(counts.sum())
    owner = np.repeat(np.arange(ranks.size), counts)
    local = np.arange(total) - np.repeat(np.cumsum(counts) - counts, counts)
    tile_x = tx0[owner] + local % nx[owner]
    tile_y = ty0[owner] + local // nx[owner]
    tile_id = tile_y * tiles_x + tile_x
    # entries are generated in depth order, so a stable sort keeps it per tile
    perm = np.argsort(tile_id, kind="stable")
    entries = ranks[owner[perm]].astype(np.int64)
    offsets = np.zeros(tiles_x * tiles_y + 1, dtype=np.int64)
    np.cumsum(np.bincount(tile_id, minlength=tiles_x * tiles_y), out=offsets[1:])
    return _Binning(offsets, entries, tiles_x)


def _composite_tiled(prep: Prepared, height, width, opts, background):
    binning = _bin(prep, height, width, opts.tile_size)
    raw = np.empty((height, width, 3))
    trans = np.empty((height, width))
    weight = np.empty((height, width))
    stop = np.empty((height, width), dtype=np.int64)
    kernels.composite_forward(
        binning.tile_offsets, binning.entries, prep.mean_uv, prep.conic, prep.alpha, prep.color, prep.rect,
        background, height, width, opts.tile_size, binning.tiles_x, opts.min_transmittance,
        raw, trans, weight, stop,
    )
    return raw, trans, weight, stop, binning


def render_tiled(scene: Scene4D, view: CameraView, t=None, opts: RenderOptions = DEFAULT_OPTIONS, return_info=False):
    """Tile-binned renderer with sigma cutoff and early termination."""
    prep = prepare(scene, view, t, opts)
    raw, trans, weight, _, _ = _composite_tiled(prep, view.height, view.width, opts, _background(opts))
    return _finish(raw, trans, weight, prep, return_info)


def render_conditional(cg: ConditionalGaussian3, view: CameraView, opts: RenderOptions = DEFAULT_OPTIONS):
    """Render already-sliced 3D Gaussians with the tiled path."""
    prep = prepare_conditional(cg, view, opts)
    raw, trans, weight, _, _ = _composite_tiled(prep, view.height, view.width, opts, _background(opts))
    return np.clip(raw, 0.0, 1.0)


render = render_tiled


@dataclass
class SceneGradients:
    """Gradients with respect to each Gaussian's parameters (zero for inactive ones)."""

    mean: np.ndarray
    scale: np.ndarray
    q_left: np.ndarray
    q_right: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray

    @property
    def params(self):
        return np.concatenate(
            [self.mean, self.scale, self.q_left, self.q_right, self.rgb, self.opacity[:, None]], axis=1
        )

    @classmethod
    def zeros(cls, n):
        return cls(np.zeros((n, 4)), np.zeros((n, 4)), np.zeros((n, 4)), np.zeros((n, 4)), np.zeros((n, 3)), np.zeros(n))


def render_with_grad(scene: Scene4D, view: CameraView, t, opts: RenderOptions, grad_fn):
    """Render, ask ``grad_fn(image)`` for ``dL/dImage``, return ``(image, value, SceneGradients)``.

    ``grad_fn`` returns ``(value, dL_dImage)``.  Shares one forward pass
    between the loss and the adjoint.
    """
    if opts.mode != "training":
        raise ContractViolationError("gradients are only defined in training mode")
    prep = prepare(scene, view, t, opts)
    bg = _background(opts)
    raw, trans, weight, stop, binning = _composite_tiled(prep, view.height, view.width, opts, bg)
    image = np.clip(raw, 0.0, 1.0)
    value, d_image = grad_fn(image)
    grads = _backward(scene, view, prep, raw, stop, binning, opts, bg, d_image)
    return image, value, grads


def render_backward(scene: Scene4D, view: CameraView, t, opts: RenderOptions, dL_dImage) -> SceneGradients:
    """Gradients of ``sum(dL_dImage * render_tiled(...))`` with respect to every Gaussian parameter."""
    if opts.mode != "training":
        raise ContractViolationError("render_backward requires training mode (filters are not differentiable)")
    dL_dImage = np.asarray(dL_dImage, dtype=np.float64)
    if dL_dImage.shape != (view.height, view.width, 3):
        raise InvalidInputError(f"dL_dImage must have shape {(view.height, view.width, 3)}")
    return render_with_grad(scene, view, t, opts, lambda img: (None, dL_dImage))[2]


def _backward(scene, view, prep, raw, stop, binning, opts, bg, d_image):
    n = len(scene)
    grads = SceneGradients.zeros(n)
    m = len(prep)
    if m == 0 or not np.any(d_image):
        return grads
    inside = (raw >= 0.0) & (raw <= 1.0)
    d_image = np.ascontiguousarray(np.where(inside, d_image, 0.0))

    n_entries = binning.entries.shape[0]
    g_mean_e = np.zeros((n_entries, 2))
    g_conic_e = np.zeros((n_entries, 3))
    g_alpha_e = np.zeros((n_entries, 1))
    g_color_e = np.zeros((n_entries, 3))
    kernels.composite_backward(
        binning.tile_offsets, binning.entries, prep.mean_uv, prep.conic, prep.alpha, prep.color, prep.rect,
        bg, view.height, view.width, opts.tile_size, binning.tiles_x, stop, d_image,
        g_mean_e, g_conic_e, g_alpha_e[:, 0], g_color_e,
    )
    g_mean_uv = np.zeros((m, 2))
    g_conic = np.zeros((m, 3))
    g_alpha = np.zeros((m, 1))
    g_color = np.zeros((m, 3))
    for vals, out in ((g_mean_e, g_mean_uv), (g_conic_e, g_conic), (g_alpha_e, g_alpha), (g_color_e, g_color)):
        kernels.reduce_entries(binning.entries, vals, out)
    g_alpha = g_alpha[:, 0]

    # sorted splats -> rows of the `ok` subset used during projection
    order = prep.cache["order"]
    ok = prep.cache["ok"]
    idx = prep.index
    sc = prep.cache["slice"]
    weight = sc["weight"][idx]
    opacity = scene.opacity[idx]

    grads.rgb[idx] = g_color
    grads.opacity[idx] = g_alpha * weight
    g_weight = g_alpha * opacity

    # conic = inverse(cov_uv); power uses the off-diagonal once with factor 2
    q = np.empty((m, 2, 2))
    q[:, 0, 0], q[:, 0, 1], q[:, 1, 0], q[:, 1, 1] = prep.conic[:, 0], prep.conic[:, 1], prep.conic[:, 1], prep.conic[:, 2]
    g_q = np.empty((m, 2, 2))
    g_q[:, 0, 0] = g_conic[:, 0]
    g_q[:, 0, 1] = g_q[:, 1, 0] = 0.5 * g_conic[:, 1]
    g_q[:, 1, 1] = g_conic[:, 2]
    g_cov_uv = -q @ g_q @ q

    pc = prep.cache["pc"][order]
    zs = prep.cache["zs"][order]
    pmat = prep.cache["pmat"][order]
    w2c = prep.cache["w2c"]
    cov3 = sc["cov3"][idx]
    intr = view.intrinsics

    g_cov3 = np.swapaxes(pmat, -1, -2) @ g_cov_uv @ pmat
    g_sym = g_cov_uv + np.swapaxes(g_cov_uv, -1, -2)
    g_pmat = g_sym @ pmat @ cov3
    g_jac = g_pmat @ w2c.T

    x, y, z = pc[:, 0], pc[:, 1], zs
    fx, fy = intr.fx, intr.fy
    g_pc = np.zeros((m, 3))
    g_pc[:, 0] = g_mean_uv[:, 0] * fx / z - g_jac[:, 0, 2] * fx / (z * z)
    g_pc[:, 1] = g_mean_uv[:, 1] * fy / z - g_jac[:, 1, 2] * fy / (z * z)
    g_pc[:, 2] = (
        -g_mean_uv[:, 0] * fx * x / (z * z)
        - g_mean_uv[:, 1] * fy * y / (z * z)
        - g_jac[:, 0, 0] * fx / (z * z)
        - g_jac[:, 1, 1] * fy / (z * z)
        + g_jac[:, 0, 2] * 2 * fx * x / (z ** 3)
        + g_jac[:, 1, 2] * 2 * fy * y / (z ** 3)
    )
    g_mu3 = g_pc @ w2c

    # conditioning on time
    var_t = sc["var_t"][idx]
    dt = sc["dt"][idx]
    cross = sc["cross"][idx]
    g_cross_mu = g_mu3 * (dt / var_t)[:, None]
    mu_dot = np.sum(g_mu3 * cross, axis=-1)
    g_dt = mu_dot / var_t - g_weight * weight * dt / var_t
    g_var = (
        -mu_dot * dt / var_t ** 2
        + np.einsum("ni,nij,nj->n", cross, g_cov3, cross) / var_t ** 2
        + g_weight * weight * 0.5 * dt * dt / var_t ** 2
    )
    g_cross = g_cross_mu - ((g_cov3 + np.swapaxes(g_cov3, -1, -2)) @ cross[:, :, None])[:, :, 0] / var_t[:, None]

    grads.mean[idx, :3] = g_mu3
    grads.mean[idx, 3] = -g_dt

    g_sigma = np.zeros((m, 4, 4))
    g_sigma[:, :3, :3] = g_cov3
    g_sigma[:, :3, 3] = g_cross
    g_sigma[:, 3, 3] = g_var

    msc = sc["msc"][idx]
    rot = sc["rot"][idx]
    g_msc = (g_sigma + np.swapaxes(g_sigma, -1, -2)) @ msc
    grads.scale[idx] = np.sum(rot * g_msc, axis=-2)
    g_rot = g_msc * scene.scale[idx][:, None, :]
    g_lmat = g_rot @ np.swapaxes(sc["rmat"][idx], -1, -2)
    g_rmat = np.swapaxes(sc["lmat"][idx], -1, -2) @ g_rot
    g_ql = np.einsum("kij,nij->nk", _LEFT_BASIS, g_lmat)
    g_qr = np.einsum("kij,nij->nk", _RIGHT_BASIS, g_rmat)
    for name, g_hat, out in (("l", g_ql, grads.q_left), ("r", g_qr, grads.q_right)):
        qhat = sc[f"qhat_{name}"][idx]
        norm = sc[f"norm_{name}"][idx]
        small = sc[f"small_{name}"][idx]
        proj = g_hat - qhat * np.sum(g_hat * qhat, axis=-1, keepdims=True)
        out[idx] = np.where(small, 0.0, proj / np.where(small, 1.0, norm))
    return grads


def to_uint8(image):
    """Quantise ``[0, 1]`` floats to bytes, rounding half up."""
    image = np.asarray(image, dtype=np.float64)
    return np.floor(np.clip(image, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, image):
    from PIL import Image

    Image.fromarray(to_uint8(image)).save(path, format="PNG", optimize=False)


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_raw(path, image):
    """Little-endian float32 dump, ``H * W * 3`` values, row-major, no header."""
    np.asarray(image, dtype="<f4").tofile(path)


def read_raw(path, height, width):
    data = np.fromfile(path, dtype="<f4")
    if data.size != height * width * 3:
        raise InvalidInputError(f"{path}: expected {height * width * 3} floats, found {data.size}")
    return data.reshape(height, width, 3).astype(np.float64)
