"""Space-time (4D) Gaussian splatting: rendering, fitting and a toy feed-forward regressor."""

from .camera import (
    CameraIntrinsics,
    CameraPose,
    CameraView,
    RayMap,
    compute_ray_map,
    look_at,
    plucker_encode,
    project_gaussian,
    projection_jacobian,
    read_cameras,
    write_cameras,
)
from .exceptions import (
    BehindCameraError,
    ContractViolationError,
    DegenerateCovarianceError,
    DivergenceError,
    FormatError,
    InvalidInputError,
    Splat4DError,
    ValidationError,
)
from .gaussians import (
    ConditionalGaussian3,
    Gaussian4D,
    Scene4D,
    build_covariance4,
    build_rotation4,
    condition_on_time,
    density_4d,
    temporal_marginal,
)
from .head import DEFAULT_HEAD, HeadConfig, decode_free, decode_pixel_aligned, head_jacobian_check
from .harness import CameraSetupSpec, EvalReport, evaluate, make_camera_setup, make_synthetic_scene, read_scene, write_scene
from .losses import psnr, ssim, training_loss
from .optimizer import AdamState, Episode, adam_step, fit_scene, train_toy
from .rasterizer import RenderOptions, cull_and_filter, depth_sort, render_backward, render_dense, render_tiled
from .transformer import ModelConfig, ModelWeights, forward, forward_backward, init_weights

__version__ = "0.1.0"
