"""Image metrics and the photometric training loss with manual gradients."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidInputError

PSNR_CAP = 99.0
SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
C1 = (SSIM_K1 * 1.0) ** 2
C2 = (SSIM_K2 * 1.0) ** 2
DEFAULT_LAMBDA = 0.5


def _window():
    x = np.arange(SSIM_WINDOW) - (SSIM_WINDOW - 1) / 2
    w = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return w / w.sum()


_W = _window()


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b):
    """Peak signal-to-noise ratio for unit dynamic range, capped at 99 dB."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse < 1e-10:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


def _filter(x):
    """Valid-mode separable Gaussian filtering over the first two axes."""
    k = SSIM_WINDOW
    h, w = x.shape[0] - k + 1, x.shape[1] - k + 1
    rows = sum(_W[i] * x[i : i + h] for i in range(k))
    return sum(_W[j] * rows[:, j : j + w] for j in range(k))


def _filter_t(g, shape):
    """Adjoint of :func:`_filter`."""
    k = SSIM_WINDOW
    h, w = g.shape[0], g.shape[1]
    rows = np.zeros((h, shape[1]) + g.shape[2:])
    for j in range(k):
        rows[:, j : j + w] += _W[j] * g
    out = np.zeros(shape)
    for i in range(k):
        out[i : i + h] += _W[i] * rows
    return out


def _ssim_parts(a, b):
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise InvalidInputError(f"SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}")
    mu_a, mu_b = _filter(a), _filter(b)
    e_aa, e_bb, e_ab = _filter(a * a), _filter(b * b), _filter(a * b)
    n1 = 2 * mu_a * mu_b + C1
    n2 = 2 * (e_ab - mu_a * mu_b) + C2
    d1 = mu_a ** 2 + mu_b ** 2 + C1
    d2 = (e_aa - mu_a ** 2) + (e_bb - mu_b ** 2) + C2
    smap = n1 * n2 / (d1 * d2)
    return a, b, mu_a, mu_b, n1, n2, d1, d2, smap


def ssim(a, b):
    """Mean SSIM over 11x11 Gaussian windows (sigma 1.5), averaged over channels."""
    a, b = _pair(a, b)
    return float(np.mean(_ssim_parts(a, b)[-1]))


def ssim_grad(a, b):
    """``(ssim(a, b), d ssim / d a)``."""
    a, b = _pair(a, b)
    squeeze = a.ndim == 2
    a3, b3, mu_a, mu_b, n1, n2, d1, d2, smap = _ssim_parts(a, b)
    g = np.full(smap.shape, 1.0 / smap.size)
    gm = g * smap
    d_mu_a = gm * (2 * mu_b / n1 - 2 * mu_a / d1 - 2 * mu_b / n2 + 2 * mu_a / d2)
    d_eaa = -gm / d2
    d_eab = 2 * gm / n2
    shape = a3.shape
    grad = _filter_t(d_mu_a, shape) + 2 * a3 * _filter_t(d_eaa, shape) + b3 * _filter_t(d_eab, shape)
    return float(np.mean(smap)), (grad[..., 0] if squeeze else grad)


@dataclass
class LossReport:
    total: float
    mse_term: float
    structural_term: float
    lam: float
    per_view: list = field(default_factory=list)


def view_loss(rendered, target, lam=DEFAULT_LAMBDA, with_grad=True):
    """``MSE + lam * (1 - SSIM)`` for one image, plus its gradient w.r.t. ``rendered``."""
    rendered, target = _pair(rendered, target)
    diff = rendered - target
    mse = float(np.mean(diff * diff))
    grad = 2.0 * diff / diff.size if with_grad else None
    structural = 0.0
    if lam != 0.0:
        s, ds = ssim_grad(rendered, target) if with_grad else (ssim(rendered, target), None)
        structural = 1.0 - s
        if with_grad:
            grad = grad - lam * ds
    return mse, structural, grad


def training_loss(rendered, targets, lam=DEFAULT_LAMBDA) -> LossReport:
    """Mean over views of ``MSE + lam * (1 - SSIM)``."""
    if len(rendered) != len(targets):
        raise InvalidInputError(f"{len(rendered)} renders but {len(targets)} targets")
    if len(rendered) == 0:
        raise InvalidInputError("training_loss needs at least one view")
    per_view = [view_loss(r, t, lam, with_grad=False)[:2] for r, t in zip(rendered, targets)]
    mse = float(np.mean([p[0] for p in per_view]))
    structural = float(np.mean([p[1] for p in per_view]))
    return LossReport(mse + lam * structural, mse, structural, lam, per_view)
