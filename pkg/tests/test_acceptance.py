"""Acceptance criteria, one recorded PASS/FAIL line each.

Run ``pytest tests/test_acceptance.py -v`` (add ``-s`` to see lines as they
happen); the lines are also collected in the terminal summary.
"""

import subprocess
import sys
import time
from functools import lru_cache

import numpy as np
import pytest

from splat4d.camera import write_cameras
from splat4d.datasets import make_episode, save_episode
from splat4d.gaussians import build_rotation4, condition_on_time, conditional_density, density_4d
from splat4d.gradcheck import random_scene, random_view, rasterizer_gradcheck, transformer_gradcheck
from splat4d.harness import (
    CameraSetupSpec,
    acceptance_scene,
    acceptance_views,
    evaluate,
    make_camera_setup,
    orbit_view,
)
from splat4d.head import OP, ST, SXYZ, decode_free, decode_pixel_aligned, head_jacobian_check
from splat4d.optimizer import episode_psnr, fit_scene, train_toy
from splat4d.rasterizer import DEFAULT_OPTIONS, INFERENCE_OPTIONS, active_set, render_dense, render_tiled
from splat4d.transformer import ModelConfig, forward, init_weights

from conftest import unit_quats


def test_criterion_01_slicing_identity(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(101)
    scene = random_scene(rng, 10_000)
    x = scene.mean[:, :3] + rng.normal(0, 0.2, (10_000, 3))
    t = rng.uniform(-1, 1, 10_000)
    cg = condition_on_time(scene, t)
    err = float(np.abs(density_4d(scene, x, t) - cg.temporal_weight * conditional_density(cg, x)).max())
    elapsed = time.perf_counter() - start
    criterion(1, "p(x,t) = p(t) p(x|t)", err < 1e-10 and elapsed < 5,
              f"max |diff| {err:.2e} over 1e4 Gaussians (tol 1e-10), {elapsed:.2f}s (limit 5s)")


def test_criterion_02_rotation_validity(criterion):
    start = time.perf_counter()
    rng = np.random.default_rng(102)
    rots = build_rotation4(unit_quats(rng, 1000), unit_quats(rng, 1000))
    orth = float(np.abs(np.swapaxes(rots, -1, -2) @ rots - np.eye(4)).max())
    det = float(np.abs(np.linalg.det(rots) - 1).max())
    elapsed = time.perf_counter() - start
    criterion(2, "L(q_l) R(q_r) is a rotation", orth < 1e-9 and det < 1e-9 and elapsed < 1,
              f"orthogonality {orth:.2e}, |det - 1| {det:.2e} over 1e3 pairs (tol 1e-9), {elapsed:.3f}s (limit 1s)")


@lru_cache(maxsize=1)
def oracle_runs():
    """50 random scenes x 8 times at 64x64, cutoff 6: (max tiled-dense diff, max conservation error, seconds)."""
    opts = DEFAULT_OPTIONS.replace(sigma_cutoff=6.0)
    rng = np.random.default_rng(103)
    worst_diff = worst_cons = 0.0
    start = time.perf_counter()
    for _ in range(50):
        scene = random_scene(rng, int(rng.integers(1, 65)))
        view = random_view(rng, 64)
        for t in np.linspace(-1, 1, 8):
            dense, info = render_dense(scene, view, t, opts, return_info=True)
            tiled, tinfo = render_tiled(scene, view, t, opts, return_info=True)
            worst_diff = max(worst_diff, float(np.abs(dense - tiled).max()))
            worst_cons = max(worst_cons, float(np.abs(info.weight + info.transmittance - 1).max()),
                             float(np.abs(tinfo.weight + tinfo.transmittance - 1).max()))
    return worst_diff, worst_cons, time.perf_counter() - start


def test_criterion_03_oracle_equivalence(criterion):
    diff, _, elapsed = oracle_runs()
    criterion(3, "tiled vs dense renderer", diff <= 1e-5 and elapsed < 60,
              f"max per-channel |diff| {diff:.2e} (tol 1e-5) over 50 scenes x 8 times, {elapsed:.1f}s (limit 60s)")


def test_criterion_04_gradient_fidelity(criterion):
    start = time.perf_counter()
    raster = [rasterizer_gradcheck(seed).max_rel_err for seed in range(3)]
    rng = np.random.default_rng(104)
    head, checked = 0.0, 0
    while checked < 64:
        g = rng.normal(0, 0.7, 20)
        d = rng.standard_normal(3)
        d /= np.linalg.norm(d)
        for rays in ((None, None), (rng.uniform(-0.3, 0.3, 3) - 1.5 * d, d)):
            res = head_jacobian_check(g, ray_o=rays[0], ray_d=rays[1])
            if not res.skipped:
                head = max(head, res.max_rel_err)
                checked += 1
    elapsed = time.perf_counter() - start
    ok = max(raster) < 1e-4 and head < 1e-6 and elapsed < 300
    criterion(4, "analytic vs finite-difference gradients", ok,
              f"rasterizer max rel err {max(raster):.2e} (tol 1e-4, 3 scenes x 16 Gaussians x 20 channels), "
              f"head {head:.2e} (tol 1e-6, {checked} Jacobians), {elapsed:.1f}s (limit 300s)")


def test_criterion_05_conservation(criterion):
    _, cons, _ = oracle_runs()
    criterion(5, "weight + transmittance = 1", cons < 1e-6,
              f"max per-pixel error {cons:.2e} (tol 1e-6) on all oracle scenes, dense and tiled")


def test_criterion_06_head_constants(criterion):
    g = decode_pixel_aligned(np.zeros(20), np.zeros(3), np.array([0.0, 0.0, 1.0]), )
    from splat4d.head import HeadConfig

    unclipped = decode_pixel_aligned(np.zeros(20), np.zeros(3), np.array([0.0, 0.0, 1.0]), HeadConfig(spatial_clip=10))
    raw = np.zeros(20)
    raw[SXYZ] = 2.3
    raw[ST] = 2.3
    raw[OP] = 2.0
    capped = decode_free(raw)
    errs = {
        "delta": abs(unclipped.mean[2] - 2.3),
        "clip": abs(g.mean[2] - 1.0),
        "cap_xyz": float(np.abs(capped.scale[:3] - 0.3).max()),
        "cap_t": abs(capped.scale[3] - 1.0),
        "opacity": abs(capped.opacity - 0.5),
    }
    worst = max(errs.values())
    criterion(6, "head closed-form fixtures", worst <= 1e-12,
              "max error " + f"{worst:.1e} (tol 1e-12); " + ", ".join(f"{k} {v:.1e}" for k, v in errs.items()))


@pytest.mark.slow
def test_criterion_07_scene_fitting(criterion):
    start = time.perf_counter()
    gt = acceptance_scene()
    train_views, hold_views = acceptance_views()
    targets = [(render_tiled(gt, v, opts=INFERENCE_OPTIONS), v) for v in train_views]
    holdout = [(render_tiled(gt, v, opts=INFERENCE_OPTIONS), v) for v in hold_views]
    result = fit_scene(targets, 64, 2000, 0, holdout=holdout, holdout_every=100)
    elapsed = time.perf_counter() - start
    final = result.trace.final_holdout_psnr
    report = evaluate(result.scene, hold_views, gt)
    consistent = abs(report.mean_psnr - final) < 1e-6
    loss = result.trace.column("loss")[:2000]
    medians = [float(np.median(loss[i:i + 200])) for i in range(200, 2000, 200)]
    monotone = all(b <= a for a, b in zip(medians, medians[1:]))
    unseen = sorted({v.time for v in hold_views} - {v.time for v in train_views})
    result.scene.validate()
    criterion(7, "fit 64 Gaussians to the acceptance scene", final >= 35 and consistent and monotone,
              f"held-out PSNR {final:.2f} dB (need >= 35) on 8 view-times incl. unseen times "
              f"{[round(t, 4) for t in unseen]}; evaluate() agrees to {abs(report.mean_psnr - final):.1e}; "
              f"200-iter loss medians non-increasing: {monotone}; {elapsed:.0f}s")


@pytest.mark.slow
def test_criterion_08_toy_transformer(criterion):
    start = time.perf_counter()
    episode = make_episode(0)
    cfg = ModelConfig(hidden_dim=64, layers=4, heads=4, patch_size=8)
    result = train_toy([episode], cfg, 5000, 0, eval_every=50, target_psnr=28.0)
    steps = len(result.trace.rows)
    achieved = episode_psnr(episode, cfg, result.weights, INFERENCE_OPTIONS)

    eq_cfg = ModelConfig(hidden_dim=64, layers=4, heads=4, patch_size=8, free_tokens=4)
    weights = init_weights(eq_cfg, 5)
    rng = np.random.default_rng(108)
    inputs = [(rng.random((32, 32, 3)), random_view(rng, 32, t)) for t in (-0.5, 0.0, 0.5)]
    a = forward(inputs, eq_cfg, weights).params
    b = forward([inputs[i] for i in (2, 0, 1)], eq_cfg, weights).params
    per = 32 * 32
    pa, pb = a[:3 * per].reshape(3, per, 20), b[:3 * per].reshape(3, per, 20)
    equivariant = np.array_equal(pa, pb[[1, 2, 0]]) and np.array_equal(a[3 * per:], b[3 * per:])

    fd = max(transformer_gradcheck(seed).max_rel_err for seed in range(2))
    elapsed = time.perf_counter() - start
    ok = achieved >= 28 and steps <= 5000 and equivariant and fd < 1e-3
    criterion(8, "toy transformer", ok,
              f"overfit PSNR {achieved:.2f} dB after {steps} steps (need >= 28 within 5000); "
              f"view-permutation equivariance exact: {equivariant}; micro-model FD max rel err {fd:.2e} (tol 1e-3); "
              f"{elapsed:.0f}s")


def test_criterion_09_setup_counts(criterion):
    expected = {
        "alternating_canonical": (24, 24),
        "frame_interpolation": (24, 12),
        "two_rotating": (24, 24),
        "random_input": (24, 24),
        "single_view_video": (27, 24),
    }
    got = {}
    for kind in expected:
        views = make_camera_setup(CameraSetupSpec(kind, 24))
        got[kind] = (len(views), len({v.time for v in views}))
    criterion(9, "camera-setup counts at 24 frames", got == expected,
              "; ".join(f"{k} {v[0]} views / {v[1]} times" for k, v in got.items()))


def _cli(*args):
    proc = subprocess.run([sys.executable, "-m", "splat4d.cli", *map(str, args)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    return proc


def test_criterion_10_determinism(criterion, tmp_path):
    _cli("make-scene", "--seed", 42, "--out", tmp_path / "s.4dgs")
    write_cameras(tmp_path / "c.json", [orbit_view(30, 10, 2.7, 0.0, 32)])
    for name in ("a", "b"):
        _cli("render", "--scene", tmp_path / "s.4dgs", "--cameras", tmp_path / "c.json", "--time", 0,
             "--out", tmp_path / f"{name}.png")
    render_same = (tmp_path / "a.png").read_bytes() == (tmp_path / "b.png").read_bytes()

    train_views = [orbit_view(45 * k, 10, 2.7, -1 + 2 * k / 7, 32) for k in range(8)]
    write_cameras(tmp_path / "train.json", train_views)
    _cli("render", "--scene", tmp_path / "s.4dgs", "--cameras", tmp_path / "train.json", "--out", tmp_path / "targets")
    for name in ("a", "b"):
        _cli("fit", "--targets", tmp_path / "targets", "--cameras", tmp_path / "train.json", "--n", 16,
             "--iters", 20, "--seed", 3, "--out", tmp_path / f"{name}.4dgs")
    fit_same = (tmp_path / "a.4dgs").read_bytes() == (tmp_path / "b.4dgs").read_bytes()

    save_episode(tmp_path / "ep", make_episode(1, resolution=32, n_moving=3, n_static=1))
    for name in ("a", "b"):
        _cli("train-toy", "--data", tmp_path / "ep", "--iters", 5, "--seed", 2, "--out", tmp_path / f"{name}.4dlw")
    toy_same = (tmp_path / "a.4dlw").read_bytes() == (tmp_path / "b.4dlw").read_bytes()
    criterion(10, "bit-identical repeated CLI runs", render_same and fit_same and toy_same,
              f"render PNG {render_same}, fit scene file {fit_same}, train-toy checkpoint {toy_same}")


def test_criterion_11_filtering(criterion):
    rng = np.random.default_rng(111)
    mismatches, checked, kept, dropped = 0, 0, 0, 0
    for _ in range(100):
        scene = random_scene(rng, 50)
        params = scene.params
        params[:, 19] = rng.uniform(0.01, 1.0, 50)
        scene = type(scene).from_params(params)
        view = random_view(rng, 16)
        t = float(rng.uniform(-1, 1))
        cg = condition_on_time(scene, t)
        rot, trans = view.pose.world_to_camera()
        front = (cg.mean @ rot.T + trans)[:, 2] > 1e-6
        p = cg.temporal_weight
        brute = np.flatnonzero(front & (p >= 0.05) & (p * scene.opacity >= 0.05))
        got = active_set(scene, view, t, INFERENCE_OPTIONS)
        training = active_set(scene, view, t, DEFAULT_OPTIONS)
        mismatches += int(not np.array_equal(got, brute)) + int(not np.array_equal(training, np.flatnonzero(front)))
        checked += 1
        kept += brute.size
        dropped += int(front.sum()) - brute.size
    criterion(11, "inference filter = brute-force set, training never filters", mismatches == 0,
              f"{mismatches} mismatches over {checked} scenes ({kept} kept, {dropped} filtered in inference mode)")
