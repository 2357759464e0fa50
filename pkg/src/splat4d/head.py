"""Activation head: raw 20-channel vectors to valid 4D Gaussians.

Raw layout ``[xyz:3, t:1, rgb:3, scale_xyz:3, scale_t:1, rot_left:4,
rot_right:4, opacity:1]``.  Decoded layout matches
:data:`splat4d.gaussians.PARAM_LAYOUT`.  Clamps and caps use the subgradient
convention 1 strictly inside, 0 on or beyond the boundary.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import PARAM_DIM, Gaussian4D, Scene4D
from .exceptions import InvalidInputError

RAW_SPLIT = (3, 1, 3, 3, 1, 4, 4, 1)
RAW_DIM = sum(RAW_SPLIT)

# raw channel slices
XYZ, T, RGB, SXYZ, ST, QL, QR, OP = (
    slice(0, 3), 3, slice(4, 7), slice(7, 10), 10, slice(11, 15), slice(15, 19), 19,
)

SCALE_FLOOR = 1e-5
OPACITY_EPS = 1e-6
_QUAT_EPS = 1e-8


@dataclass(frozen=True)
class HeadConfig:
    delta_near: float = 0.1
    delta_far: float = 4.5
    scale_bias: float = 2.3
    scale_cap_xyz: float = 0.3
    scale_cap_t: float = 1.0
    opacity_bias: float = 2.0
    spatial_clip: float = 1.0

    def __post_init__(self):
        if not 0 < self.delta_near < self.delta_far:
            raise InvalidInputError("need 0 < delta_near < delta_far")
        if not (self.scale_cap_xyz > 0 and self.scale_cap_t > 0 and self.spatial_clip > 0):
            raise InvalidInputError("scale caps and spatial_clip must be positive")


DEFAULT_HEAD = HeadConfig()


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _check_raw(raw):
    raw = np.asarray(raw, dtype=np.float64)
    if raw.shape[-1] != RAW_DIM:
        raise InvalidInputError(f"raw head vectors need {RAW_DIM} channels, got {raw.shape[-1]}")
    return raw


def _forward(raw, cfg, ray_o, ray_d):
    """Decode and keep the intermediates needed by the VJP."""
    raw = _check_raw(raw)
    out = np.empty(raw.shape[:-1] + (PARAM_DIM,))
    cache = {}
    clip = cfg.spatial_clip
    if ray_d is None:
        th = np.tanh(raw[..., XYZ])
        out[..., 0:3] = clip * th
        tt = np.tanh(raw[..., T])
        out[..., 3] = tt
        cache["tanh_xyz"], cache["tanh_t"] = th, tt
    else:
        ray_o = np.asarray(ray_o, dtype=np.float64)
        ray_d = np.asarray(ray_d, dtype=np.float64)
        w = _sigmoid(raw[..., XYZ].sum(axis=-1) / 3.0)
        delta = (1.0 - w) * cfg.delta_near + w * cfg.delta_far
        point = ray_o + delta[..., None] * ray_d
        out[..., 0:3] = np.clip(point, -clip, clip)
        out[..., 3] = raw[..., T]
        cache.update(w=w, point=point, ray_d=ray_d, delta=delta)

    s_raw = np.exp(np.concatenate([raw[..., SXYZ], raw[..., ST : ST + 1]], axis=-1) - cfg.scale_bias)
    caps = np.array([cfg.scale_cap_xyz] * 3 + [cfg.scale_cap_t])
    out[..., 4:8] = np.clip(s_raw, SCALE_FLOOR, caps)
    cache["s_raw"], cache["caps"] = s_raw, caps

    for name, sl, dst in (("ql", QL, slice(8, 12)), ("qr", QR, slice(12, 16))):
        q = raw[..., sl]
        norm = np.linalg.norm(q, axis=-1, keepdims=True)
        small = norm < _QUAT_EPS
        out[..., dst] = np.where(small, [1.0, 0.0, 0.0, 0.0], q / np.where(small, 1.0, norm))
        cache[name] = (norm, small)

    rgb = 0.5 * (raw[..., RGB] + 1.0)
    out[..., 16:19] = np.clip(rgb, 0.0, 1.0)
    cache["rgb"] = rgb

    op = _sigmoid(raw[..., OP] - cfg.opacity_bias)
    out[..., 19] = np.clip(op, OPACITY_EPS, 1.0 - OPACITY_EPS)
    cache["op"] = op
    return out, cache


def decode_raw(raw, cfg: HeadConfig = DEFAULT_HEAD, ray_o=None, ray_d=None):
    """Packed ``(..., 20)`` Gaussian parameters; pixel-aligned when rays are given."""
    return _forward(raw, cfg, ray_o, ray_d)[0]


def decode_raw_vjp(raw, d_params, cfg: HeadConfig = DEFAULT_HEAD, ray_o=None, ray_d=None):
    """Pull a gradient on decoded parameters back to the raw channels."""
    raw = _check_raw(raw)
    out, cache = _forward(raw, cfg, ray_o, ray_d)
    d_params = np.asarray(d_params, dtype=np.float64)
    d_raw = np.zeros_like(raw)
    clip = cfg.spatial_clip

    if ray_d is None:
        d_raw[..., XYZ] = d_params[..., 0:3] * clip * (1.0 - cache["tanh_xyz"] ** 2)
        d_raw[..., T] = d_params[..., 3] * (1.0 - cache["tanh_t"] ** 2)
    else:
        point = cache["point"]
        inside = (point > -clip) & (point < clip)
        d_point = np.where(inside, d_params[..., 0:3], 0.0)
        w = cache["w"]
        d_delta = np.sum(d_point * cache["ray_d"], axis=-1)
        d_sum = d_delta * (cfg.delta_far - cfg.delta_near) * w * (1.0 - w) / 3.0
        d_raw[..., XYZ] = d_sum[..., None]
        d_raw[..., T] = d_params[..., 3]

    s_raw, caps = cache["s_raw"], cache["caps"]
    live = (s_raw > SCALE_FLOOR) & (s_raw < caps)
    d_s = np.where(live, d_params[..., 4:8] * s_raw, 0.0)
    d_raw[..., SXYZ] = d_s[..., :3]
    d_raw[..., ST] = d_s[..., 3]

    for name, sl, src in (("ql", QL, slice(8, 12)), ("qr", QR, slice(12, 16))):
        norm, small = cache[name]
        qhat = out[..., src]
        g = d_params[..., src]
        proj = g - qhat * np.sum(g * qhat, axis=-1, keepdims=True)
        d_raw[..., sl] = np.where(small, 0.0, proj / np.where(small, 1.0, norm))

    rgb = cache["rgb"]
    d_raw[..., RGB] = np.where((rgb > 0) & (rgb < 1), 0.5 * d_params[..., 16:19], 0.0)

    op = cache["op"]
    live_op = (op > OPACITY_EPS) & (op < 1.0 - OPACITY_EPS)
    d_raw[..., OP] = np.where(live_op, d_params[..., 19] * op * (1.0 - op), 0.0)
    return d_raw


def _to_gaussians(params, time_domain=(-1.0, 1.0)):
    if params.ndim == 1:
        return Gaussian4D.from_params(params)
    return Scene4D.from_params(params.reshape(-1, PARAM_DIM), time_domain)


def decode_pixel_aligned(g, ray_o, ray_d, cfg: HeadConfig = DEFAULT_HEAD):
    """Ray-anchored decode: the centre sits at ``ray_o + delta * ray_d``, then clipped.

    Returns a Gaussian4D for one vector, a Scene4D for a batch.
    """
    return _to_gaussians(decode_raw(g, cfg, ray_o, ray_d))


def decode_free(g, cfg: HeadConfig = DEFAULT_HEAD):
    """Free decode: centre ``spatial_clip * tanh(g_xyz)`` and time ``tanh(g_t)``."""
    return _to_gaussians(decode_raw(g, cfg))


def head_jacobian(g, cfg: HeadConfig = DEFAULT_HEAD, ray_o=None, ray_d=None):
    """Analytic 20x20 Jacobian ``d(decoded) / d(raw)`` for a single raw vector."""
    g = _check_raw(g).reshape(RAW_DIM)
    eye = np.eye(PARAM_DIM)
    batch = np.broadcast_to(g, (PARAM_DIM, RAW_DIM))
    o = None if ray_o is None else np.broadcast_to(ray_o, (PARAM_DIM, 3))
    d = None if ray_d is None else np.broadcast_to(ray_d, (PARAM_DIM, 3))
    return decode_raw_vjp(batch, eye, cfg, o, d)


@dataclass(frozen=True)
class JacobianCheck:
    max_rel_err: float
    skipped: bool = False
    reason: str = ""


def _near_boundary(g, cfg, ray_o, ray_d, margin):
    _, cache = _forward(g, cfg, ray_o, ray_d)
    s_raw, caps = cache["s_raw"], cache["caps"]
    if np.any(np.abs(np.log(s_raw / caps)) < margin) or np.any(np.abs(np.log(s_raw / SCALE_FLOOR)) < margin):
        return "scale cap"
    if ray_d is not None and np.any(np.abs(np.abs(cache["point"]) - cfg.spatial_clip) < margin):
        return "spatial clip"
    rgb = cache["rgb"]
    if np.any(np.minimum(np.abs(rgb), np.abs(rgb - 1)) < margin):
        return "rgb clamp"
    op = cache["op"]
    if op < OPACITY_EPS * 10 or op > 1 - OPACITY_EPS * 10:
        return "opacity clamp"
    for name in ("ql", "qr"):
        if cache[name][0] < 1e-3:
            return "quaternion near zero"
    return ""


def head_jacobian_check(g, cfg: HeadConfig = DEFAULT_HEAD, ray_o=None, ray_d=None, step=1e-5, floor=1e-4):
    """Compare the analytic head Jacobian against central finite differences.

    The relative error of each entry is ``|a - f| / max(|a|, |f|, floor)``.
    Inputs within ``10 * step`` of a clamp or cap are reported as skipped.
    """
    g = _check_raw(g).reshape(RAW_DIM)
    reason = _near_boundary(g, cfg, ray_o, ray_d, 10 * step)
    if reason:
        return JacobianCheck(float("nan"), True, reason)
    analytic = head_jacobian(g, cfg, ray_o, ray_d)
    numeric = np.empty_like(analytic)
    for j in range(RAW_DIM):
        e = np.zeros(RAW_DIM)
        e[j] = step
        hi = decode_raw(g + e, cfg, ray_o, ray_d)
        lo = decode_raw(g - e, cfg, ray_o, ray_d)
        numeric[:, j] = (hi - lo) / (2 * step)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return JacobianCheck(float(np.max(np.abs(analytic - numeric) / denom)))
