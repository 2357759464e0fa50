"""Toy image-to-4DGS regressor.

Each input view becomes a 10-channel feature map (rgb in [-1, 1], time,
Plücker ray).  Maps are cut into P x P patches, linearly embedded and
layer-normalised, optionally joined by learnable free tokens, and passed
through pre-LN transformer blocks.  After a final LayerNorm a linear layer
unpatchifies every token back to one raw 20-channel head vector per pixel;
free tokens use their own D -> 20 linear.  There are no positional
embeddings, so the stack is exactly equivariant to token permutations.

Forward and backward are plain numpy.  Reductions over the token axis in
attention run in a canonical (sorted) order so that equivariance holds bit
for bit, not just up to rounding.
"""

from __future__ import annotations

import math
import struct
from collections import OrderedDict
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np
from scipy.special import erf

from .camera import CameraView, compute_ray_map, plucker_encode
from .exceptions import DivergenceError, FormatError, InvalidInputError
from .gaussians import PARAM_DIM, Scene4D
from .head import DEFAULT_HEAD, RAW_DIM, HeadConfig, decode_raw, decode_raw_vjp
from .losses import DEFAULT_LAMBDA, LossReport, view_loss
from .rasterizer import DEFAULT_OPTIONS, RenderOptions, render_tiled, render_with_grad

FEATURE_DIM = 10
LN_EPS = 1e-5
INIT_STD = 0.02
CHECKPOINT_MAGIC = b"4DLW"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    hidden_dim: int = 64
    layers: int = 4
    heads: int = 4
    mlp_ratio: int = 4
    patch_size: int = 8
    free_tokens: int = 0
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if int(value) != value or value < 0:
                raise InvalidInputError(f"{f.name} must be a non-negative integer")
        if self.hidden_dim < 1 or self.heads < 1 or self.hidden_dim % self.heads:
            raise InvalidInputError("hidden_dim must be a positive multiple of heads")
        if self.patch_size < 1 or self.mlp_ratio < 1:
            raise InvalidInputError("patch_size and mlp_ratio must be >= 1")

    @property
    def head_dim(self):
        return self.hidden_dim // self.heads


def weight_shapes(cfg: ModelConfig):
    """Tensor names and shapes in declaration (checkpoint) order."""
    d, p2, hid = cfg.hidden_dim, cfg.patch_size ** 2, cfg.hidden_dim * cfg.mlp_ratio
    shapes = [
        ("patch_w", (FEATURE_DIM * p2, d)),
        ("patch_b", (d,)),
        ("ln_in_g", (d,)),
        ("ln_in_b", (d,)),
    ]
    for i in range(cfg.layers):
        shapes += [
            (f"b{i}.ln1_g", (d,)),
            (f"b{i}.ln1_b", (d,)),
            (f"b{i}.qkv_w", (d, 3 * d)),
            (f"b{i}.qkv_b", (3 * d,)),
            (f"b{i}.proj_w", (d, d)),
            (f"b{i}.proj_b", (d,)),
            (f"b{i}.ln2_g", (d,)),
            (f"b{i}.ln2_b", (d,)),
            (f"b{i}.fc1_w", (d, hid)),
            (f"b{i}.fc1_b", (hid,)),
            (f"b{i}.fc2_w", (hid, d)),
            (f"b{i}.fc2_b", (d,)),
        ]
    shapes += [
        ("ln_out_g", (d,)),
        ("ln_out_b", (d,)),
        ("unpatch_w", (d, RAW_DIM * p2)),
        ("unpatch_b", (RAW_DIM * p2,)),
        ("free_tokens", (cfg.free_tokens, d)),
        ("free_w", (d, RAW_DIM)),
        ("free_b", (RAW_DIM,)),
    ]
    return shapes


class ModelWeights(OrderedDict):
    """Name -> float32 array, in declaration order."""

    def __init__(self, cfg: ModelConfig, tensors=None):
        super().__init__()
        self.cfg = cfg
        for name, shape in weight_shapes(cfg):
            if tensors is None:
                self[name] = np.zeros(shape, dtype=np.float32)
                continue
            if name not in tensors:
                raise InvalidInputError(f"missing weight tensor {name!r}")
            arr = np.asarray(tensors[name])
            if arr.shape != shape:
                raise InvalidInputError(f"{name}: expected shape {shape}, got {arr.shape}")
            self[name] = arr

    def copy(self):
        return ModelWeights(self.cfg, {k: v.copy() for k, v in self.items()})

    def astype(self, dtype):
        return ModelWeights(self.cfg, {k: v.astype(dtype) for k, v in self.items()})

    def validate(self):
        for name, arr in self.items():
            if not np.all(np.isfinite(arr)):
                raise InvalidInputError(f"weight tensor {name} contains non-finite values")
        return self


def _truncated_normal(rng, shape, std):
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while np.any(bad):
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


def init_weights(cfg: ModelConfig, seed=None) -> ModelWeights:
    """Truncated-normal (std 0.02, cut at 2 std) linears, zero biases, unit norm scales."""
    rng = np.random.default_rng(cfg.seed if seed is None else seed)
    weights = ModelWeights(cfg)
    for name, shape in weight_shapes(cfg):
        leaf = name.split(".")[-1]
        if leaf.endswith("_g"):
            weights[name] = np.ones(shape, dtype=np.float32)
        elif leaf.endswith("_w") or leaf == "free_tokens":
            weights[name] = _truncated_normal(rng, shape, INIT_STD).astype(np.float32)
    return weights


# ---------------------------------------------------------------- features


def build_feature_map(image, rays, time):
    """``(H, W, 10)``: rgb scaled to [-1, 1], time, ray direction, closest point."""
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 3 or image.shape[-1] != 3:
        raise InvalidInputError("image must be H x W x 3")
    if rays.directions.shape != image.shape:
        raise InvalidInputError(f"ray map {rays.directions.shape[:2]} does not match image {image.shape[:2]}")
    t = np.full(image.shape[:2] + (1,), float(time))
    return np.concatenate([image * 2.0 - 1.0, t, plucker_encode(rays.origins, rays.directions)], axis=-1)


def patchify(fm, patch_size):
    """``(H, W, C)`` -> ``(H/P * W/P, P*P*C)``; patches row-major, pixels row-major, channels minor."""
    fm = np.asarray(fm)
    h, w, c = fm.shape
    p = int(patch_size)
    if h % p or w % p:
        raise InvalidInputError(f"patch size {p} must divide image size {h}x{w}")
    return fm.reshape(h // p, p, w // p, p, c).transpose(0, 2, 1, 3, 4).reshape((h // p) * (w // p), p * p * c)


def unpatchify(tokens, patch_size, height, width):
    """Inverse of :func:`patchify`."""
    tokens = np.asarray(tokens)
    p = int(patch_size)
    if height % p or width % p:
        raise InvalidInputError(f"patch size {p} must divide image size {height}x{width}")
    hp, wp = height // p, width // p
    c = tokens.shape[-1] // (p * p)
    if tokens.shape != (hp * wp, p * p * c):
        raise InvalidInputError("token array does not match the requested image size")
    return tokens.reshape(hp, wp, p, p, c).transpose(0, 2, 1, 3, 4).reshape(height, width, c)


# ---------------------------------------------------------------- layers


def _ln(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * rstd
    return xhat * g + b, (xhat, rstd, g)


def _ln_back(dy, cache):
    xhat, rstd, g = cache
    dg = np.sum(dy * xhat, axis=0)
    db = np.sum(dy, axis=0)
    dxh = dy * g
    dx = rstd * (dxh - dxh.mean(axis=-1, keepdims=True) - xhat * np.mean(dxh * xhat, axis=-1, keepdims=True))
    return dx, dg, db


_SQRT_HALF = 1.0 / math.sqrt(2.0)


def _gelu(x):
    cdf = 0.5 * (1.0 + erf(x * _SQRT_HALF))
    return (x * cdf).astype(x.dtype), cdf


def _gelu_back(dy, x, cdf):
    pdf = np.exp(-0.5 * x * x) / math.sqrt(2.0 * math.pi)
    return (dy * (cdf + x * pdf)).astype(x.dtype)


def _sorted_sum(x, axis):
    """Sum along ``axis`` in ascending value order (independent of the input order)."""
    return np.sort(x, axis=axis).sum(axis=axis)


def _attention(x, w, prefix, cfg):
    n, d = x.shape
    h, dh = cfg.heads, cfg.head_dim
    qkv = x @ w[prefix + "qkv_w"] + w[prefix + "qkv_b"]
    q, k, v = (qkv[:, i * d : (i + 1) * d].reshape(n, h, dh).transpose(1, 0, 2) for i in range(3))
    scale = np.asarray(1.0 / math.sqrt(dh), dtype=x.dtype)
    # scores via elementwise products so each entry is independent of token position
    s = _sorted_sum(q[:, :, None, :] * k[:, None, :, :], axis=-1) * scale
    e = np.exp(s - s.max(axis=-1, keepdims=True))
    p = e / _sorted_sum(e, axis=-1)[..., None]
    o = _sorted_sum(p[..., None] * v[:, None, :, :], axis=2)
    o_cat = o.transpose(1, 0, 2).reshape(n, d)
    out = o_cat @ w[prefix + "proj_w"] + w[prefix + "proj_b"]
    return out, (x, q, k, v, p, o_cat, scale)


def _attention_back(dout, cache, w, prefix, cfg, grads):
    x, q, k, v, p, o_cat, scale = cache
    n, d = x.shape
    h, dh = cfg.heads, cfg.head_dim
    grads[prefix + "proj_w"] += o_cat.T @ dout
    grads[prefix + "proj_b"] += dout.sum(axis=0)
    do = (dout @ w[prefix + "proj_w"].T).reshape(n, h, dh).transpose(1, 0, 2)
    dp = do @ v.transpose(0, 2, 1)
    dv = p.transpose(0, 2, 1) @ do
    ds = p * (dp - np.sum(dp * p, axis=-1, keepdims=True)) * scale
    dq = ds @ k
    dk = ds.transpose(0, 2, 1) @ q
    dqkv = np.concatenate([t.transpose(1, 0, 2).reshape(n, d) for t in (dq, dk, dv)], axis=-1)
    grads[prefix + "qkv_w"] += x.T @ dqkv
    grads[prefix + "qkv_b"] += dqkv.sum(axis=0)
    return dqkv @ w[prefix + "qkv_w"].T


def _mlp(x, w, prefix):
    pre = x @ w[prefix + "fc1_w"] + w[prefix + "fc1_b"]
    act, cdf = _gelu(pre)
    return act @ w[prefix + "fc2_w"] + w[prefix + "fc2_b"], (x, pre, cdf, act)


def _mlp_back(dout, cache, w, prefix, grads):
    x, pre, cdf, act = cache
    grads[prefix + "fc2_w"] += act.T @ dout
    grads[prefix + "fc2_b"] += dout.sum(axis=0)
    dpre = _gelu_back(dout @ w[prefix + "fc2_w"].T, pre, cdf)
    grads[prefix + "fc1_w"] += x.T @ dpre
    grads[prefix + "fc1_b"] += dpre.sum(axis=0)
    return dpre @ w[prefix + "fc1_w"].T


# ---------------------------------------------------------------- model


def _check_inputs(inputs, cfg):
    if len(inputs) == 0:
        raise InvalidInputError("forward needs at least one input view")
    h, w = np.asarray(inputs[0][0]).shape[:2]
    for i, (img, view) in enumerate(inputs):
        img = np.asarray(img)
        if img.shape != (h, w, 3):
            raise InvalidInputError(f"input view {i}: image shape {img.shape} differs from {(h, w, 3)}")
        if (view.height, view.width) != (h, w):
            raise InvalidInputError(f"input view {i}: camera resolution does not match its image")
    if h % cfg.patch_size or w % cfg.patch_size:
        raise InvalidInputError(f"patch size {cfg.patch_size} must divide image size {h}x{w}")
    return h, w


def _network(inputs, cfg, weights, dtype):
    """Raw head vectors for every pixel ``(V, H, W, 20)`` and free token ``(N, 20)``."""
    h, w = _check_inputs(inputs, cfg)
    p = cfg.patch_size
    wts = weights if all(a.dtype == dtype for a in weights.values()) else weights.astype(dtype)
    rays = [compute_ray_map(view) for _, view in inputs]
    tokens = np.concatenate(
        [patchify(build_feature_map(img, r, view.time), p) for (img, view), r in zip(inputs, rays)]
    ).astype(dtype)
    n_pix = tokens.shape[0]
    cache = {"tokens": tokens, "blocks": []}
    x = tokens @ wts["patch_w"] + wts["patch_b"]
    x, cache["ln_in"] = _ln(x, wts["ln_in_g"], wts["ln_in_b"])
    x = np.concatenate([x, wts["free_tokens"]])
    for i in range(cfg.layers):
        pre = f"b{i}."
        y, c_ln1 = _ln(x, wts[pre + "ln1_g"], wts[pre + "ln1_b"])
        a, c_att = _attention(y, wts, pre, cfg)
        x = x + a
        y, c_ln2 = _ln(x, wts[pre + "ln2_g"], wts[pre + "ln2_b"])
        m, c_mlp = _mlp(y, wts, pre)
        x = x + m
        cache["blocks"].append((c_ln1, c_att, c_ln2, c_mlp))
    y, cache["ln_out"] = _ln(x, wts["ln_out_g"], wts["ln_out_b"])
    cache["y"] = y
    pix = y[:n_pix] @ wts["unpatch_w"] + wts["unpatch_b"]
    per_view = pix.shape[0] // len(inputs)
    raw_pix = np.stack(
        [unpatchify(pix[v * per_view : (v + 1) * per_view], p, h, w) for v in range(len(inputs))]
    )
    raw_free = y[n_pix:] @ wts["free_w"] + wts["free_b"]
    cache.update(n_pix=n_pix, per_view=per_view, h=h, w=w, wts=wts)
    return raw_pix, raw_free, rays, cache


def _decode(raw_pix, raw_free, rays, head_cfg, time_domain=(-1.0, 1.0)):
    origins = np.stack([r.origins for r in rays])
    dirs = np.stack([r.directions for r in rays])
    params_pix = decode_raw(raw_pix.astype(np.float64), head_cfg, origins, dirs).reshape(-1, PARAM_DIM)
    params_free = decode_raw(raw_free.astype(np.float64), head_cfg).reshape(-1, PARAM_DIM)
    return Scene4D.from_params(np.concatenate([params_pix, params_free]), time_domain), origins, dirs


def forward(inputs, cfg: ModelConfig, weights: ModelWeights, head_cfg: HeadConfig = DEFAULT_HEAD, dtype=np.float32):
    """Regress a Scene4D from posed input images ``[(image, CameraView), ...]``.

    Pixel-aligned Gaussians come first, view-major then row-major, followed by
    the free Gaussians.  ``dtype=np.float64`` runs the network in 64-bit.
    """
    raw_pix, raw_free, rays, _ = _network(inputs, cfg, weights, dtype)
    return _decode(raw_pix, raw_free, rays, head_cfg)[0]


def _network_back(d_raw_pix, d_raw_free, cfg, cache):
    wts = cache["wts"]
    p = cfg.patch_size
    grads = OrderedDict((k, np.zeros_like(v)) for k, v in wts.items())
    d_pix = np.concatenate([patchify(d, p) for d in d_raw_pix]).astype(wts["unpatch_w"].dtype)
    y = cache["y"]
    n_pix = cache["n_pix"]
    grads["unpatch_w"] += y[:n_pix].T @ d_pix
    grads["unpatch_b"] += d_pix.sum(axis=0)
    d_free = d_raw_free.astype(d_pix.dtype)
    grads["free_w"] += y[n_pix:].T @ d_free
    grads["free_b"] += d_free.sum(axis=0)
    dy = np.concatenate([d_pix @ wts["unpatch_w"].T, d_free @ wts["free_w"].T])
    dx, dg, db = _ln_back(dy, cache["ln_out"])
    grads["ln_out_g"] += dg
    grads["ln_out_b"] += db
    for i in reversed(range(cfg.layers)):
        pre = f"b{i}."
        c_ln1, c_att, c_ln2, c_mlp = cache["blocks"][i]
        dy = _mlp_back(dx, c_mlp, wts, pre, grads)
        d_ln, dg, db = _ln_back(dy, c_ln2)
        grads[pre + "ln2_g"] += dg
        grads[pre + "ln2_b"] += db
        dx = dx + d_ln
        dy = _attention_back(dx, c_att, wts, pre, cfg, grads)
        d_ln, dg, db = _ln_back(dy, c_ln1)
        grads[pre + "ln1_g"] += dg
        grads[pre + "ln1_b"] += db
        dx = dx + d_ln
    grads["free_tokens"] += dx[n_pix:]
    d_emb, dg, db = _ln_back(dx[:n_pix], cache["ln_in"])
    grads["ln_in_g"] += dg
    grads["ln_in_b"] += db
    grads["patch_w"] += cache["tokens"].T @ d_emb
    grads["patch_b"] += d_emb.sum(axis=0)
    return ModelWeights(cfg, grads)


def forward_backward(
    inputs,
    targets,
    cfg: ModelConfig,
    weights: ModelWeights,
    lam=DEFAULT_LAMBDA,
    head_cfg: HeadConfig = DEFAULT_HEAD,
    opts: RenderOptions = DEFAULT_OPTIONS,
    dtype=np.float32,
    loss_scale=1.0,
):
    """Loss over supervision views ``[(image, CameraView), ...]`` and its weight gradients.

    Returns ``(LossReport, ModelWeights of gradients)``.  The loss is the
    mean over supervision views of ``MSE + lam * (1 - SSIM)``; gradients are
    of ``loss_scale * total``.
    """
    if len(targets) == 0:
        raise InvalidInputError("forward_backward needs at least one supervision view")
    raw_pix, raw_free, rays, cache = _network(inputs, cfg, weights, dtype)
    scene, origins, dirs = _decode(raw_pix, raw_free, rays, head_cfg)
    d_params = np.zeros((len(scene), PARAM_DIM))
    per_view = []
    n_views = len(targets)
    for i, (target, view) in enumerate(targets):
        def grad_fn(image, target=target):
            mse, structural, grad = view_loss(image, target, lam)
            return (mse, structural), grad * (loss_scale / n_views)

        _, (mse, structural), g = render_with_grad(scene, view, None, opts, grad_fn)
        if not (np.isfinite(mse) and np.isfinite(structural)):
            raise DivergenceError(f"non-finite loss at supervision view {i}", block=f"view {i}")
        per_view.append((mse, structural))
        d_params += g.params
    mse = float(np.mean([p[0] for p in per_view]))
    structural = float(np.mean([p[1] for p in per_view]))
    report = LossReport(mse + lam * structural, mse, structural, lam, per_view)

    n_pix = raw_pix.shape[0] * raw_pix.shape[1] * raw_pix.shape[2]
    d_raw_pix = decode_raw_vjp(
        raw_pix.astype(np.float64), d_params[:n_pix].reshape(raw_pix.shape[:-1] + (PARAM_DIM,)), head_cfg, origins, dirs
    )
    d_raw_free = decode_raw_vjp(raw_free.astype(np.float64), d_params[n_pix:], head_cfg)
    return report, _network_back(d_raw_pix, d_raw_free, cfg, cache)


def predict_views(inputs, views, cfg, weights, head_cfg=DEFAULT_HEAD, opts=DEFAULT_OPTIONS, dtype=np.float32):
    """Render the regressed scene at each query view."""
    scene = forward(inputs, cfg, weights, head_cfg, dtype)
    return [render_tiled(scene, v, opts=opts) for v in views]


# ---------------------------------------------------------------- checkpoints


def write_checkpoint(path, cfg: ModelConfig, weights: ModelWeights):
    """``4DLW`` | u32 version | 7 x u32 config | per tensor: u64 count + float32 LE data."""
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(struct.pack("<7I", *(getattr(cfg, f.name) for f in fields(ModelConfig))))
        for name, _ in weight_shapes(cfg):
            arr = np.ascontiguousarray(weights[name], dtype="<f4")
            fh.write(struct.pack("<Q", arr.size))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    data = Path(path).read_bytes()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad magic {data[:4]!r}")
    if len(data) < 36:
        raise FormatError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    try:
        cfg = ModelConfig(*struct.unpack_from("<7I", data, 8))
    except InvalidInputError as exc:
        raise FormatError(f"{path}: invalid config block ({exc})") from exc
    offset = 36
    tensors = {}
    for name, shape in weight_shapes(cfg):
        if offset + 8 > len(data):
            raise FormatError(f"{path}: truncated before tensor {name}")
        (count,) = struct.unpack_from("<Q", data, offset)
        offset += 8
        if count != int(np.prod(shape)) or offset + 4 * count > len(data):
            raise FormatError(f"{path}: tensor {name} has bad length {count}")
        tensors[name] = np.frombuffer(data, dtype="<f4", count=count, offset=offset).reshape(shape).astype(np.float32)
        offset += 4 * count
    if offset != len(data):
        raise FormatError(f"{path}: {len(data) - offset} trailing bytes")
    return cfg, ModelWeights(cfg, tensors)
