"""On-disk layouts for posed image sets and toy training episodes.

A *target set* is a camera JSON file plus a directory of PNGs named
``view{i}_t{k}.png``: ``i`` is the camera entry's index and ``k`` the rank of
its time among the distinct times in the file.  An *episode* directory holds
two target sets, ``inputs.json`` + ``inputs/`` and ``supervision.json`` +
``supervision/``.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .camera import read_cameras, write_cameras
from .exceptions import InvalidInputError
from .harness import CANONICAL_AZIMUTHS, make_synthetic_scene, orbit_view, reference_name, time_indices
from .optimizer import Episode
from .rasterizer import INFERENCE_OPTIONS, read_png, render_tiled, write_png


def save_target_set(directory, cameras_path, pairs):
    """Write ``[(image, view), ...]`` as PNGs plus a camera file."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    views = [v for _, v in pairs]
    write_cameras(cameras_path, views)
    for i, ((img, _), k) in enumerate(zip(pairs, time_indices(views))):
        write_png(directory / reference_name(i, k), img)


def load_target_set(directory, cameras_path):
    """Inverse of :func:`save_target_set`; images are 8-bit quantised."""
    views = read_cameras(cameras_path)
    directory = Path(directory)
    pairs = []
    for i, (view, k) in enumerate(zip(views, time_indices(views))):
        path = directory / reference_name(i, k)
        if not path.is_file():
            raise InvalidInputError(f"missing target image {path}")
        img = read_png(path)
        if img.shape != (view.height, view.width, 3):
            raise InvalidInputError(f"{path}: image is {img.shape[1]}x{img.shape[0]}, camera expects {view.width}x{view.height}")
        pairs.append((img, view))
    return pairs


def save_episode(directory, episode: Episode):
    directory = Path(directory)
    save_target_set(directory / "inputs", directory / "inputs.json", episode.inputs)
    save_target_set(directory / "supervision", directory / "supervision.json", episode.supervision)


def load_episode(directory) -> Episode:
    directory = Path(directory)
    return Episode(
        load_target_set(directory / "inputs", directory / "inputs.json"),
        load_target_set(directory / "supervision", directory / "supervision.json"),
    )


def load_dataset(path):
    """One episode directory, or a directory whose sorted subdirectories are episodes."""
    path = Path(path)
    if (path / "inputs.json").is_file():
        return [load_episode(path)]
    subdirs = sorted(p for p in path.iterdir() if (p / "inputs.json").is_file()) if path.is_dir() else []
    if not subdirs:
        raise InvalidInputError(f"{path}: no episodes found")
    return [load_episode(p) for p in subdirs]


def make_episode(seed, resolution=32, n_moving=6, n_static=2, quantize=True) -> Episode:
    """Synthetic episode: front and back inputs at two times, four canonical supervision views.

    Supervision overlaps the inputs (front and back) and adds left and right.
    With ``quantize`` images are rounded to 8 bits, as if read back from PNG.
    """
    scene = make_synthetic_scene(seed, n_moving, n_static)
    t_a, t_b = -0.5, 0.5

    def shot(az, t):
        view = orbit_view(az, 0.0, 2.7, t, resolution)
        img = render_tiled(scene, view, opts=INFERENCE_OPTIONS)
        if quantize:
            img = np.floor(img * 255.0 + 0.5) / 255.0
        return img, view

    front, left, back, right = CANONICAL_AZIMUTHS
    inputs = [shot(front, t_a), shot(back, t_b)]
    supervision = [shot(front, t_a), shot(left, t_a), shot(back, t_b), shot(right, t_b)]
    return Episode(inputs, supervision)
