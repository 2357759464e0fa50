"""Adam and the two training loops: direct scene fitting and toy transformer training."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np

from .camera import CameraView
from .exceptions import DivergenceError, InvalidInputError
from .gaussians import PARAM_DIM, Scene4D
from .head import QL, QR, RAW_DIM, RGB, SXYZ, HeadConfig, decode_raw, decode_raw_vjp
from .head import OP, ST, T, XYZ
from .losses import DEFAULT_LAMBDA, psnr, ssim, training_loss, view_loss
from .rasterizer import DEFAULT_OPTIONS, INFERENCE_OPTIONS, RenderOptions, render_tiled, render_with_grad
from .transformer import ModelConfig, ModelWeights, forward, forward_backward, init_weights

TRACE_COLUMNS = ("iter", "loss", "mse", "structural", "psnr_train", "psnr_holdout")

#: Head used for direct fitting.  The temporal scale cap is raised so a
#: Gaussian can stay visible over the whole time domain (static content).
FIT_HEAD_CONFIG = HeadConfig(scale_cap_t=100.0)
#: Starting temporal scale of fitted Gaussians.  At the head default (~0.1)
#: a Gaussian barely spans the gap between training frames and many never
#: receive gradient.
INIT_TIME_SCALE = 0.5

_RAW_BLOCKS = (
    ("xyz", XYZ),
    ("t", slice(T, T + 1)),
    ("rgb", RGB),
    ("scale_xyz", SXYZ),
    ("scale_t", slice(ST, ST + 1)),
    ("q_left", QL),
    ("q_right", QR),
    ("opacity", slice(OP, OP + 1)),
)


@dataclass
class AdamState:
    lr: float = 1e-2
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def __post_init__(self):
        if not (self.lr > 0 and 0 <= self.beta1 < 1 and 0 <= self.beta2 < 1 and self.eps >= 0):
            raise InvalidInputError("invalid Adam hyperparameters")


def adam_step(state: AdamState, params: dict, grads: dict, iteration=None) -> dict:
    """One bias-corrected Adam update; returns new parameter arrays and advances ``state``.

    Raises DivergenceError naming the first block whose gradient is not finite.
    """
    for name in params:
        if name not in grads:
            raise InvalidInputError(f"no gradient for parameter block {name!r}")
        g = np.asarray(grads[name])
        if g.shape != np.shape(params[name]):
            raise InvalidInputError(f"gradient shape {g.shape} does not match block {name!r}")
        if not np.all(np.isfinite(g)):
            raise DivergenceError(f"non-finite gradient in block {name!r}", iteration=iteration, block=name)
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    out = {}
    for name, p in params.items():
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        v = state.v.get(name)
        m = (1 - b1) * g if m is None else b1 * m + (1 - b1) * g
        v = (1 - b2) * g * g if v is None else b2 * v + (1 - b2) * g * g
        state.m[name], state.v[name] = m, v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        out[name] = (p - update).astype(p.dtype)
    return out


@dataclass
class Trace:
    """Per-iteration rows ``(iter, loss, mse, structural, psnr_train, psnr_holdout)``.

    ``psnr_holdout`` is NaN on iterations where the holdout set was not evaluated.
    """

    rows: list = field(default_factory=list)

    def append(self, *row):
        self.rows.append(tuple(float(x) if i else int(x) for i, x in enumerate(row)))

    def column(self, name):
        i = TRACE_COLUMNS.index(name)
        return np.array([r[i] for r in self.rows])

    @property
    def final_holdout_psnr(self):
        col = self.column("psnr_holdout")
        valid = col[~np.isnan(col)]
        return float(valid[-1]) if valid.size else math.nan

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(TRACE_COLUMNS)
            for row in self.rows:
                writer.writerow([row[0]] + [repr(x) for x in row[1:]])

    @classmethod
    def read_csv(cls, path):
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if tuple(header) != TRACE_COLUMNS:
                raise InvalidInputError(f"{path}: unexpected trace header {header}")
            trace = cls()
            for row in reader:
                trace.append(int(row[0]), *map(float, row[1:]))
            return trace


# ---------------------------------------------------------------- scene fitting


def _split_raw(raw):
    return {name: raw[:, sl].copy() for name, sl in _RAW_BLOCKS}


def _join_raw(blocks):
    raw = np.empty((blocks["xyz"].shape[0], RAW_DIM))
    for name, sl in _RAW_BLOCKS:
        raw[:, sl] = blocks[name]
    return raw


def init_raw(n_gaussians, seed, head_cfg: HeadConfig = FIT_HEAD_CONFIG, time_domain=(-1.0, 1.0)):
    """Pre-activation vectors for a fresh fit.

    Centres are uniform in 90% of the clip box, temporal centres are
    stratified over the time domain (one per stratum, shuffled), temporal
    scales start at ``INIT_TIME_SCALE`` and every other channel sits at the
    head's defaults (raw zero, identity rotations).
    """
    if n_gaussians < 1:
        raise InvalidInputError("n_gaussians must be >= 1")
    rng = np.random.default_rng(seed)
    raw = np.zeros((n_gaussians, RAW_DIM))
    raw[:, XYZ] = np.arctanh(rng.uniform(-0.9, 0.9, (n_gaussians, 3)))
    t0, t1 = time_domain
    strata = t0 + (np.arange(n_gaussians) + rng.uniform(0, 1, n_gaussians)) * (t1 - t0) / n_gaussians
    raw[:, T] = np.arctanh(np.clip(rng.permutation(strata), -0.999, 0.999))
    raw[:, ST] = math.log(INIT_TIME_SCALE) + head_cfg.scale_bias
    raw[:, QL.start] = 1.0
    raw[:, QR.start] = 1.0
    return raw


def raw_to_scene(raw, head_cfg: HeadConfig = FIT_HEAD_CONFIG, time_domain=(-1.0, 1.0)) -> Scene4D:
    return Scene4D.from_params(decode_raw(raw, head_cfg), time_domain)


def scene_to_raw(scene: Scene4D, head_cfg: HeadConfig = FIT_HEAD_CONFIG):
    """Invert the free decode for a scene strictly inside every clamp."""
    clip = head_cfg.spatial_clip
    raw = np.zeros((len(scene), RAW_DIM))
    raw[:, XYZ] = np.arctanh(scene.mean[:, :3] / clip)
    raw[:, T] = np.arctanh(scene.mean[:, 3])
    raw[:, RGB] = scene.rgb * 2.0 - 1.0
    raw[:, SXYZ] = np.log(scene.scale[:, :3]) + head_cfg.scale_bias
    raw[:, ST] = np.log(scene.scale[:, 3]) + head_cfg.scale_bias
    raw[:, QL] = scene.q_left
    raw[:, QR] = scene.q_right
    op = scene.opacity
    raw[:, OP] = np.log(op / (1.0 - op)) + head_cfg.opacity_bias
    if not np.all(np.isfinite(raw)):
        raise InvalidInputError("scene lies outside the range of the fitting head")
    return raw


def _check_targets(targets, minimum):
    if len(targets) < minimum:
        raise InvalidInputError(f"need at least {minimum} view-time targets, got {len(targets)}")
    for i, (img, view) in enumerate(targets):
        if not isinstance(view, CameraView):
            raise InvalidInputError(f"target {i}: expected a CameraView")
        if np.shape(img) != (view.height, view.width, 3):
            raise InvalidInputError(f"target {i}: image shape {np.shape(img)} does not match its camera")


def holdout_psnr(scene, holdout, opts: RenderOptions = INFERENCE_OPTIONS):
    """Mean PSNR of inference-mode renders against ``[(image, view), ...]``."""
    return float(np.mean([psnr(render_tiled(scene, v, opts=opts), img) for img, v in holdout]))


@dataclass
class FitResult:
    scene: Scene4D
    trace: Trace
    raw: np.ndarray


def fit_scene(
    targets,
    n_gaussians,
    iters,
    seed,
    *,
    lr=1e-2,
    lam=DEFAULT_LAMBDA,
    batch_size=16,
    holdout=None,
    holdout_every=100,
    head_cfg: HeadConfig = FIT_HEAD_CONFIG,
    opts: RenderOptions = DEFAULT_OPTIONS,
    init_raw_params=None,
    time_domain=(-1.0, 1.0),
    callback=None,
) -> FitResult:
    """Fit ``n_gaussians`` free Gaussians to posed view-time images.

    Parameters are pre-activation head vectors, so every iterate decodes to a
    valid scene.  Each iteration renders a minibatch of targets (cycling
    through a seeded permutation) in training mode and takes one Adam step.
    Row ``i`` of the trace is measured before update ``i``; a final row with
    index ``iters`` scores the returned scene on all targets.
    """
    _check_targets(targets, 2)
    if iters < 0:
        raise InvalidInputError("iters must be >= 0")
    rng = np.random.default_rng(seed)
    raw = init_raw(n_gaussians, rng.integers(2 ** 63), head_cfg, time_domain) if init_raw_params is None else (
        np.array(init_raw_params, dtype=np.float64)
    )
    if raw.shape != (n_gaussians, RAW_DIM):
        raise InvalidInputError(f"initial parameters must have shape {(n_gaussians, RAW_DIM)}")
    blocks = _split_raw(raw)
    state = AdamState(lr=lr, eps=1e-15)
    trace = Trace()
    batch_size = min(batch_size, len(targets))
    order = np.array([], dtype=np.int64)

    for it in range(iters):
        if order.size < batch_size:
            order = np.concatenate([order, rng.permutation(len(targets))])
        batch, order = order[:batch_size], order[batch_size:]
        raw = _join_raw(blocks)
        scene = raw_to_scene(raw, head_cfg, time_domain)
        d_params = np.zeros((n_gaussians, PARAM_DIM))
        stats = []
        for k in batch:
            target, view = targets[k]

            def grad_fn(image, target=target):
                mse, structural, grad = view_loss(image, target, lam)
                return (mse, structural, psnr(image, target)), grad / batch_size

            _, value, g = render_with_grad(scene, view, None, opts, grad_fn)
            stats.append(value)
            d_params += g.params
        mse = float(np.mean([s[0] for s in stats]))
        structural = float(np.mean([s[1] for s in stats]))
        loss = mse + lam * structural
        if not math.isfinite(loss):
            raise DivergenceError(f"non-finite loss at iteration {it}", iteration=it)
        hold = math.nan
        if holdout and holdout_every and it % holdout_every == 0:
            hold = holdout_psnr(scene, holdout)
        trace.append(it, loss, mse, structural, float(np.mean([s[2] for s in stats])), hold)
        d_raw = decode_raw_vjp(raw, d_params, head_cfg)
        blocks = adam_step(state, blocks, _split_raw(d_raw), iteration=it)
        if callback is not None:
            callback(it, trace)

    raw = _join_raw(blocks)
    scene = raw_to_scene(raw, head_cfg, time_domain)
    renders = [render_tiled(scene, v, opts=opts) for _, v in targets]
    report = training_loss(renders, [img for img, _ in targets], lam)
    train_psnr = float(np.mean([psnr(r, img) for r, (img, _) in zip(renders, targets)]))
    hold = holdout_psnr(scene, holdout) if holdout else math.nan
    trace.append(iters, report.total, report.mse_term, report.structural_term, train_psnr, hold)
    return FitResult(scene, trace, raw)


# ---------------------------------------------------------------- toy transformer


@dataclass
class Episode:
    """Posed input views and posed supervision views of one dynamic object."""

    inputs: list
    supervision: list


@dataclass
class ToyResult:
    weights: ModelWeights
    trace: Trace


def episode_psnr(episode: Episode, cfg, weights, opts: RenderOptions = DEFAULT_OPTIONS):
    scene = forward(episode.inputs, cfg, weights)
    return float(np.mean([psnr(render_tiled(scene, v, opts=opts), img) for img, v in episode.supervision]))


def train_toy(
    dataset,
    cfg: ModelConfig,
    iters,
    seed,
    *,
    lr=4e-4,
    lam=DEFAULT_LAMBDA,
    weights: ModelWeights | None = None,
    opts: RenderOptions = DEFAULT_OPTIONS,
    eval_every=100,
    target_psnr=None,
    callback=None,
) -> ToyResult:
    """Train the toy regressor with Adam on a list of :class:`Episode`.

    Each step draws one episode with a seeded generator.  Trace rows hold the
    step's loss terms, its supervision PSNR in training mode, and (every
    ``eval_every`` steps) the inference-mode PSNR on the first episode in the
    ``psnr_holdout`` column.  Training stops early once that PSNR reaches
    ``target_psnr`` when one is given.
    """
    if len(dataset) == 0:
        raise InvalidInputError("dataset must hold at least one episode")
    rng = np.random.default_rng(seed)
    weights = init_weights(cfg, seed) if weights is None else weights.copy()
    state = AdamState(lr=lr, eps=1e-8)
    trace = Trace()
    for it in range(iters):
        ep = dataset[int(rng.integers(len(dataset)))]
        report, grads = forward_backward(ep.inputs, ep.supervision, cfg, weights, lam=lam, opts=opts)
        if not math.isfinite(report.total):
            raise DivergenceError(f"non-finite loss at step {it}", iteration=it)
        train_psnr = float(np.mean([10 * np.log10(1 / max(p[0], 1e-10)) for p in report.per_view]))
        hold = math.nan
        last = it == iters - 1
        if eval_every and (it % eval_every == 0 or last):
            hold = episode_psnr(dataset[0], cfg, weights, INFERENCE_OPTIONS)
        trace.append(it, report.total, report.mse_term, report.structural_term, min(train_psnr, 99.0), hold)
        if callback is not None:
            callback(it, trace)
        if target_psnr is not None and hold >= target_psnr:
            break
        new = adam_step(state, dict(weights), dict(grads), iteration=it)
        weights = ModelWeights(cfg, new)
    return ToyResult(weights, trace)
