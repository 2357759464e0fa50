"""Finite-difference checks of the analytic gradients, shared by tests and the CLI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import CameraIntrinsics, CameraView, look_at
from .gaussians import PARAM_DIM, Scene4D
from .head import RAW_DIM, head_jacobian_check
from .losses import ssim, ssim_grad
from .rasterizer import GRADCHECK_OPTIONS, render_backward, render_tiled

#: Absolute floor in the relative-error denominator; gradients smaller than
#: this are compared in absolute terms.
GRAD_FLOOR = 1e-6
PARAM_NAMES = [f"{name}[{i}]" for name, dim in (
    ("mean", 4), ("scale", 4), ("q_left", 4), ("q_right", 4), ("rgb", 3), ("opacity", 1)
) for i in range(dim)]


@dataclass
class GradCheckResult:
    max_rel_err: float
    per_channel: dict
    n_checked: int

    def passed(self, tol):
        return self.max_rel_err < tol


def rel_err(analytic, numeric, floor=GRAD_FLOOR):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def _random_unit(rng, n):
    q = rng.standard_normal((n, 4))
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def random_scene(rng, n, spread=0.5):
    """Well-conditioned random scene for checks: all Gaussians in front of an orbit camera."""
    params = np.concatenate(
        [
            rng.uniform(-spread, spread, (n, 3)),
            rng.uniform(-0.4, 0.4, (n, 1)),
            rng.uniform(0.06, 0.25, (n, 3)),
            rng.uniform(0.4, 1.2, (n, 1)),
            _random_unit(rng, n),
            _random_unit(rng, n),
            rng.uniform(0.05, 0.95, (n, 3)),
            rng.uniform(0.2, 0.9, (n, 1)),
        ],
        axis=1,
    )
    return Scene4D.from_params(params)


def random_view(rng, size, time=0.0, radius=2.7):
    az = rng.uniform(0, 2 * np.pi)
    el = rng.uniform(-0.6, 0.6)
    eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
    return CameraView(CameraIntrinsics.from_fov(size, size), look_at(eye), time)


def rasterizer_gradcheck(seed, n_gaussians=16, size=32, step=1e-5) -> GradCheckResult:
    """Central differences of ``sum(G * render)`` for every parameter of every Gaussian."""
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n_gaussians)
    view = random_view(rng, size, time=float(rng.uniform(-0.3, 0.3)))
    weights = rng.standard_normal((size, size, 3))
    opts = GRADCHECK_OPTIONS
    analytic = render_backward(scene, view, None, opts, weights).params
    base = scene.params
    numeric = np.empty_like(base)
    for i in range(n_gaussians):
        for j in range(PARAM_DIM):
            hi, lo = base.copy(), base.copy()
            hi[i, j] += step
            lo[i, j] -= step
            f_hi = np.sum(weights * render_tiled(Scene4D.from_params(hi), view, opts=opts))
            f_lo = np.sum(weights * render_tiled(Scene4D.from_params(lo), view, opts=opts))
            numeric[i, j] = (f_hi - f_lo) / (2 * step)
    err = rel_err(analytic, numeric)
    per_channel = {name: float(err[:, j].max()) for j, name in enumerate(PARAM_NAMES)}
    return GradCheckResult(float(err.max()), per_channel, err.size)


def head_gradcheck(seed, n_vectors=32) -> GradCheckResult:
    """Head Jacobian vs finite differences on random raw vectors (pixel-aligned and free)."""
    rng = np.random.default_rng(seed)
    worst, checked = 0.0, 0
    per = {"pixel_aligned": 0.0, "free": 0.0}
    for _ in range(n_vectors):
        g = rng.normal(0.0, 0.7, RAW_DIM)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        o = rng.uniform(-0.3, 0.3, 3) - 1.5 * d
        for kind, rays in (("pixel_aligned", (o, d)), ("free", (None, None))):
            res = head_jacobian_check(g, ray_o=rays[0], ray_d=rays[1])
            if res.skipped:
                continue
            checked += 1
            per[kind] = max(per[kind], res.max_rel_err)
            worst = max(worst, res.max_rel_err)
    return GradCheckResult(worst, per, checked)


def ssim_gradcheck(seed, size=16, step=1e-4) -> GradCheckResult:
    """SSIM gradient vs central differences; the floor scales with the largest entry."""
    rng = np.random.default_rng(seed)
    a = rng.random((size, size, 3))
    b = np.clip(a + 0.2 * rng.standard_normal(a.shape), 0, 1)
    _, analytic = ssim_grad(a, b)
    numeric = np.empty_like(a)
    for idx in np.ndindex(a.shape):
        hi, lo = a.copy(), a.copy()
        hi[idx] += step
        lo[idx] -= step
        numeric[idx] = (ssim(hi, b) - ssim(lo, b)) / (2 * step)
    err = rel_err(analytic, numeric, floor=1e-4 * np.abs(analytic).max())
    return GradCheckResult(float(err.max()), {"ssim": float(err.max())}, err.size)


def transformer_gradcheck(seed, samples_per_tensor=3, step=1e-5, lam=0.0, size=8) -> GradCheckResult:
    """Full-pipeline check on a micro-model (D=16, L=2): weights -> scene -> renders -> loss."""
    from .transformer import ModelConfig, forward_backward, init_weights

    rng = np.random.default_rng(seed)
    cfg = ModelConfig(hidden_dim=16, layers=2, heads=2, mlp_ratio=2, patch_size=4, free_tokens=2, seed=seed)
    weights = init_weights(cfg).astype(np.float64)
    for name in weights:
        weights[name] = weights[name] + 0.05 * rng.standard_normal(weights[name].shape)
    inputs = [(rng.random((size, size, 3)), random_view(rng, size, t)) for t in (-0.5, 0.5)]
    targets = [(rng.random((size, size, 3)), random_view(rng, size, t)) for t in (-0.2, 0.3)]

    def loss(w):
        return forward_backward(inputs, targets, cfg, w, lam=lam, opts=GRADCHECK_OPTIONS, dtype=np.float64)

    _, grads = loss(weights)
    per, worst, checked = {}, 0.0, 0
    for name, arr in weights.items():
        if arr.size == 0:
            continue
        errs = []
        for flat in rng.choice(arr.size, size=min(samples_per_tensor, arr.size), replace=False):
            idx = np.unravel_index(flat, arr.shape)
            hi, lo = weights.copy(), weights.copy()
            hi[name][idx] += step
            lo[name][idx] -= step
            numeric = (loss(hi)[0].total - loss(lo)[0].total) / (2 * step)
            errs.append(float(rel_err(grads[name][idx], numeric)))
        per[name] = max(errs)
        worst = max(worst, per[name])
        checked += len(errs)
    return GradCheckResult(worst, per, checked)


MODULES = {
    "rasterizer": (rasterizer_gradcheck, 1e-4),
    "head": (head_gradcheck, 1e-6),
    "transformer": (transformer_gradcheck, 1e-3),
    "ssim": (ssim_gradcheck, 1e-4),
}
