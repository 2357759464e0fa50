"""Input checks shared by the estimators and the CLI."""

from __future__ import annotations

import numpy as np

from .camera import CameraView
from .exceptions import InvalidInputError


def check_image(image, name="image"):
    """Float64 ``H x W x 3`` array with finite values in ``[0, 1]``."""
    arr = np.asarray(image, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[-1] != 3:
        raise InvalidInputError(f"{name} must have shape (H, W, 3), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite values")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InvalidInputError(f"{name} values must lie in [0, 1]")
    return arr


def check_views(views, name="views"):
    views = list(views)
    if not views:
        raise InvalidInputError(f"{name} is empty")
    for i, v in enumerate(views):
        if not isinstance(v, CameraView):
            raise InvalidInputError(f"{name}[{i}] is not a CameraView")
    return views


def check_posed_images(pairs, min_count=1, name="targets"):
    """List of ``(image, CameraView)`` whose image sizes match their cameras."""
    pairs = list(pairs)
    if len(pairs) < min_count:
        raise InvalidInputError(f"{name} needs at least {min_count} entries, got {len(pairs)}")
    out = []
    for i, pair in enumerate(pairs):
        try:
            image, view = pair
        except (TypeError, ValueError):
            raise InvalidInputError(f"{name}[{i}] must be an (image, CameraView) pair") from None
        if not isinstance(view, CameraView):
            raise InvalidInputError(f"{name}[{i}] has no CameraView")
        image = check_image(image, f"{name}[{i}]")
        if image.shape[:2] != (view.height, view.width):
            raise InvalidInputError(f"{name}[{i}]: image is {image.shape[:2]}, camera is {(view.height, view.width)}")
        out.append((image, view))
    return out
