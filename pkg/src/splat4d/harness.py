"""Camera-setup generators, synthetic ground truth, scene files and evaluation."""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .camera import CameraIntrinsics, CameraView, look_at
from .exceptions import FormatError, InvalidInputError, ValidationError
from .gaussians import PARAM_DIM, Scene4D, _invariant_problem, rotation4_to_quaternions
from .losses import psnr, ssim
from .rasterizer import INFERENCE_OPTIONS, RenderOptions, prepare, read_png, render_tiled

SETUP_KINDS = (
    "alternating_canonical",
    "frame_interpolation",
    "two_rotating",
    "random_input",
    "single_view_video",
    "orbit",
)
#: Front, left, back, right.
CANONICAL_AZIMUTHS = (0.0, 90.0, 180.0, 270.0)
DEFAULT_RADIUS = 2.7
DEFAULT_FOV = 50.0

SCENE_MAGIC = b"4DGS"
SCENE_VERSION = 1
_HEADER = struct.Struct("<4sII2f")

PALETTE = np.array(
    [
        [0.90, 0.20, 0.20],
        [0.20, 0.70, 0.30],
        [0.20, 0.35, 0.90],
        [0.95, 0.80, 0.15],
        [0.60, 0.25, 0.80],
        [0.10, 0.75, 0.80],
        [0.95, 0.50, 0.10],
        [0.25, 0.25, 0.25],
    ]
)


@dataclass(frozen=True)
class CameraSetupSpec:
    kind: str
    n_frames: int
    radius: float = DEFAULT_RADIUS
    elevation: float = 0.0
    seed: int = 0
    resolution: int = 32
    fov_y: float = DEFAULT_FOV

    def __post_init__(self):
        if self.kind not in SETUP_KINDS:
            raise InvalidInputError(f"unknown setup kind {self.kind!r}; expected one of {SETUP_KINDS}")
        if int(self.n_frames) != self.n_frames or self.n_frames < 1:
            raise InvalidInputError("n_frames must be a positive integer")
        if not self.radius > 0:
            raise InvalidInputError("radius must be positive")
        if int(self.resolution) != self.resolution or self.resolution < 1:
            raise InvalidInputError("resolution must be a positive integer")


def frame_time(k, n_frames):
    """Frame ``k`` of ``n`` on the normalised time axis ``[-1, 1]``."""
    if n_frames == 1:
        return 0.0
    return -1.0 + 2.0 * k / (n_frames - 1)


def orbit_view(azimuth, elevation, radius, time, resolution, fov_y=DEFAULT_FOV) -> CameraView:
    """Camera on a sphere around the origin, looking at it, world z up."""
    az, el = math.radians(azimuth), math.radians(elevation)
    eye = radius * np.array([math.cos(el) * math.cos(az), math.cos(el) * math.sin(az), math.sin(el)])
    return CameraView(CameraIntrinsics.from_fov(resolution, resolution, fov_y), look_at(eye), time)


def make_camera_setup(spec: CameraSetupSpec):
    """Input-view layout for one of the evaluation protocols; a pure function of ``spec``."""
    n = spec.n_frames

    def cam(az, k, el=None):
        return orbit_view(az, spec.elevation if el is None else el, spec.radius, frame_time(k, n), spec.resolution, spec.fov_y)

    if spec.kind == "alternating_canonical":
        return [cam(CANONICAL_AZIMUTHS[k % 4], k) for k in range(n)]
    if spec.kind == "frame_interpolation":
        views = []
        for j, k in enumerate(range(0, n, 2)):
            # (front, back) and (left, right) alternate between kept frames
            pair = (0, 2) if j % 2 == 0 else (1, 3)
            views += [cam(CANONICAL_AZIMUTHS[pair[0]], k), cam(CANONICAL_AZIMUTHS[pair[1]], k)]
        return views
    if spec.kind == "two_rotating":
        views = []
        for k in range(n):
            sweep = 180.0 * (k / (n - 1) if n > 1 else 0.0)
            views.append(cam(sweep if k % 2 else -sweep, k))
        return views
    if spec.kind == "random_input":
        rng = np.random.default_rng(spec.seed)
        pool = [(az, el) for el in (-15.0, 0.0, 15.0) for az in np.arange(0.0, 360.0, 22.5)]
        picks = rng.integers(len(pool), size=n)
        return [cam(pool[p][0], k, spec.elevation + pool[p][1]) for k, p in enumerate(picks)]
    if spec.kind == "single_view_video":
        return [cam(az, 0) for az in CANONICAL_AZIMUTHS] + [cam(CANONICAL_AZIMUTHS[0], k) for k in range(1, n)]
    return [cam(360.0 * k / n, k) for k in range(n)]


# ---------------------------------------------------------------- synthetic scenes


def _random_rotation3(rng):
    q = rng.standard_normal(4)
    w, x, y, z = q / np.linalg.norm(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ]
    )


def _factor_covariance(sigma):
    """``(scale, q_left, q_right)`` with ``R diag(scale)^2 R^T = sigma``."""
    evals, evecs = np.linalg.eigh(sigma)
    if np.linalg.det(evecs) < 0:
        evecs[:, 0] = -evecs[:, 0]
    ql, qr = rotation4_to_quaternions(evecs)
    return np.sqrt(evals), ql, qr


def moving_covariance(cov3, velocity, sigma_t):
    """4D covariance whose slices keep ``cov3`` and whose mean moves with ``velocity`` per unit time."""
    v = np.asarray(velocity, dtype=np.float64)
    var_t = sigma_t ** 2
    sigma = np.zeros((4, 4))
    sigma[:3, :3] = cov3 + var_t * np.outer(v, v)
    sigma[:3, 3] = sigma[3, :3] = var_t * v
    sigma[3, 3] = var_t
    return sigma


STATIC_TIME_SCALE = 1e4


def make_synthetic_scene(seed, n_moving, n_static) -> Scene4D:
    """Ground-truth dynamic scene of moving and static anisotropic blobs.

    Moving Gaussians follow linear trajectories ``mu(t) = mu + v (t - mu_t)``
    through their space-time cross-covariance; static ones have no such
    coupling and a temporal scale so large they are visible at every time.
    Every Gaussian stays inside ``[-0.9, 0.9]^3`` for ``t`` in ``[-1, 1]`` and
    keeps ``p(t) >= 0.05`` and ``p(t) * opacity >= 0.05`` there, so
    inference-mode filtering never removes any of them.
    """
    if n_moving < 0 or n_static < 0 or n_moving + n_static < 1:
        raise InvalidInputError("need n_moving + n_static >= 1")
    rng = np.random.default_rng(seed)
    params = np.empty((n_moving + n_static, PARAM_DIM))
    for i in range(n_moving + n_static):
        moving = i < n_moving
        rot3 = _random_rotation3(rng)
        s3 = rng.uniform(0.05, 0.14, 3)
        cov3 = rot3 @ np.diag(s3 ** 2) @ rot3.T
        mu = np.empty(4)
        mu[:3] = rng.uniform(-0.45, 0.45, 3)
        if moving:
            direction = rng.standard_normal(3)
            velocity = direction / np.linalg.norm(direction) * rng.uniform(0.1, 0.3)
            mu[3] = rng.uniform(-0.3, 0.3)
            sigma = moving_covariance(cov3, velocity, rng.uniform(0.6, 0.9))
            scale, ql, qr = _factor_covariance(sigma)
        else:
            mu[3] = 0.0
            sigma = np.zeros((4, 4))
            sigma[:3, :3] = cov3
            sigma[3, 3] = 1.0
            # eigh sorts ascending, so the unit temporal variance lands in the last slot
            scale, ql, qr = _factor_covariance(sigma)
            scale[3] = STATIC_TIME_SCALE
        params[i, 0:4] = mu
        params[i, 4:8] = scale
        params[i, 8:12] = ql
        params[i, 12:16] = qr
        params[i, 16:19] = PALETTE[rng.integers(len(PALETTE))]
        params[i, 19] = rng.uniform(0.6, 0.95)
    return Scene4D.from_params(params).validate()


def acceptance_scene() -> Scene4D:
    """Seed 42, 24 moving + 8 static Gaussians."""
    return make_synthetic_scene(42, 24, 8)


def acceptance_views(resolution=32):
    """Training and held-out views for the acceptance fit.

    Training: 16 orbit azimuths (22.5 deg apart, elevation alternating 10 and
    30 deg) at 8 times evenly spaced over [-1, 1].  Held-out: 8 azimuths
    offset half a step (elevation 20 deg), each at one time; two of those
    times fall midway between training times.
    """
    times = np.linspace(-1.0, 1.0, 8)
    train = [
        orbit_view(22.5 * k, 10.0 if k % 2 == 0 else 30.0, DEFAULT_RADIUS, t, resolution)
        for k in range(16)
        for t in times
    ]
    mid_a, mid_b = (times[2] + times[3]) / 2, (times[5] + times[6]) / 2
    hold_times = [times[1], mid_a, times[4], times[6], mid_b, times[0], times[3], times[7]]
    holdout = [orbit_view(11.25 + 45.0 * k, 20.0, DEFAULT_RADIUS, t, resolution) for k, t in enumerate(hold_times)]
    return train, holdout


def check_render_coverage(scene: Scene4D, views, opts: RenderOptions = INFERENCE_OPTIONS):
    """Raise ValidationError if any Gaussian is culled, filtered or degenerate at any view."""
    for i, view in enumerate(views):
        prep = prepare(scene, view, None, opts)
        lost = prep.n_culled + prep.n_filtered + prep.n_degenerate
        if lost:
            raise ValidationError(
                f"view {i} (t={view.time:g}): {prep.n_culled} culled, {prep.n_filtered} filtered, "
                f"{prep.n_degenerate} degenerate",
                index=i,
            )
    return True


# ---------------------------------------------------------------- scene files


def write_scene(path, scene: Scene4D):
    """``4DGS`` | u32 version | u32 count | 2 x f32 time domain (20 bytes), then count x 20 f32 (little-endian)."""
    scene.validate()
    header = _HEADER.pack(SCENE_MAGIC, SCENE_VERSION, len(scene), *scene.time_domain)
    body = np.ascontiguousarray(scene.params, dtype="<f4").tobytes()
    Path(path).write_bytes(header + body)


def read_scene(path) -> Scene4D:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the {_HEADER.size}-byte header")
    magic, version, count, t0, t1 = _HEADER.unpack_from(data)
    if magic != SCENE_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version != SCENE_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    expected = _HEADER.size + 4 * PARAM_DIM * count
    if len(data) != expected:
        raise FormatError(f"{path}: expected {expected} bytes for {count} records, found {len(data)}")
    params = np.frombuffer(data, dtype="<f4", offset=_HEADER.size).reshape(count, PARAM_DIM).astype(np.float64)
    problem = _invariant_problem(params)
    if problem is not None:
        raise ValidationError(f"{path}: record {problem[0]}: {problem[1]}", index=problem[0])
    return Scene4D.from_params(params, (float(t0), float(t1)))


# ---------------------------------------------------------------- evaluation


@dataclass
class EvalEntry:
    view: int
    time: float
    psnr: float
    ssim: float


@dataclass
class EvalReport:
    entries: list = field(default_factory=list)

    @property
    def mean_psnr(self):
        return float(np.mean([e.psnr for e in self.entries]))

    @property
    def mean_ssim(self):
        return float(np.mean([e.ssim for e in self.entries]))

    def to_dict(self):
        return {
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "entries": [asdict(e) for e in self.entries],
        }

    def write_json(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=1, sort_keys=True))


def reference_name(view_index, time_index):
    return f"view{view_index}_t{time_index}.png"


def time_indices(views):
    """Index of each view's time among the sorted distinct times of ``views``."""
    times = sorted({v.time for v in views})
    return [times.index(v.time) for v in views]


def evaluate(scene: Scene4D, eval_views, reference, opts: RenderOptions = INFERENCE_OPTIONS) -> EvalReport:
    """PSNR/SSIM of inference renders against a reference scene or a PNG directory.

    Directory references must hold ``view{i}_t{k}.png`` for view ``i`` whose
    time is the ``k``-th distinct time (ascending) among ``eval_views``.
    """
    if len(eval_views) == 0:
        raise InvalidInputError("no evaluation views")
    if isinstance(reference, Scene4D):
        refs = [render_tiled(reference, v, opts=opts) for v in eval_views]
    else:
        root = Path(reference)
        paths = [root / reference_name(i, k) for i, k in enumerate(time_indices(eval_views))]
        missing = [str(p.name) for p in paths if not p.is_file()]
        if missing:
            raise InvalidInputError(f"missing reference images: {', '.join(missing)}")
        refs = [read_png(p) for p in paths]
    report = EvalReport()
    for i, (view, ref) in enumerate(zip(eval_views, refs)):
        if ref.shape != (view.height, view.width, 3):
            raise InvalidInputError(f"reference for view {i} has shape {ref.shape}")
        img = render_tiled(scene, view, opts=opts)
        report.entries.append(EvalEntry(i, view.time, psnr(img, ref), ssim(img, ref)))
    return report
