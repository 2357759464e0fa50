import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from splat4d.exceptions import DegenerateCovarianceError, InvalidInputError, ValidationError
from splat4d.gaussians import (
    Gaussian4D,
    Scene4D,
    build_covariance4,
    build_rotation4,
    condition_on_time,
    conditional_density,
    covariance4,
    density_4d,
    left_quaternion_matrix,
    normalize_quaternion,
    right_quaternion_matrix,
    rotation4_to_quaternions,
    temporal_marginal,
)

from conftest import axis_gaussian, random_scene, unit_quats

finite = st.floats(-10, 10, allow_nan=False)
quat = arrays(np.float64, 4, elements=finite).filter(lambda q: np.linalg.norm(q) > 1e-3)


def cofactor_det(m):
    m = [list(r) for r in m]
    if len(m) == 1:
        return m[0][0]
    return sum((-1) ** j * m[0][j] * cofactor_det([r[:j] + r[j + 1:] for r in m[1:]]) for j in range(len(m)))


def test_identity_rotation():
    e = np.array([1.0, 0, 0, 0])
    assert np.array_equal(build_rotation4(e, e), np.eye(4))


def test_left_matrix_pattern():
    r = build_rotation4([0, 1, 0, 0], [1, 0, 0, 0])
    expected = np.array([[0, -1, 0, 0], [1, 0, 0, 0], [0, 0, 0, -1], [0, 0, 1, 0]], float)
    assert np.array_equal(r, expected)
    assert np.abs(r.T @ r - np.eye(4)).max() < 1e-12


def test_left_right_commute(rng):
    # left and right isoclinic multiplications commute
    a, b = unit_quats(rng, 2)
    la, rb = left_quaternion_matrix(a), right_quaternion_matrix(b)
    assert np.allclose(la @ rb, rb @ la, atol=1e-14)


def test_rotation_determinant_cofactor(rng):
    ql, qr = unit_quats(rng, 1000), unit_quats(rng, 1000)
    rots = build_rotation4(ql, qr)
    for r in rots[:200]:
        assert abs(cofactor_det(r) - 1) < 1e-9
    assert np.abs(np.linalg.det(rots) - 1).max() < 1e-9


def test_non_unit_quaternion_rejected():
    with pytest.raises(InvalidInputError):
        build_rotation4([1.01, 0, 0, 0], [1, 0, 0, 0])
    build_rotation4([1.0005, 0, 0, 0], [1, 0, 0, 0])


@settings(max_examples=200, deadline=None)
@given(quat, quat)
def test_rotation_orthogonal_property(a, b):
    r = build_rotation4(normalize_quaternion(a), normalize_quaternion(b))
    assert np.abs(r.T @ r - np.eye(4)).max() < 1e-9
    assert abs(np.linalg.det(r) - 1) < 1e-9


@settings(max_examples=100, deadline=None)
@given(quat, quat)
def test_rotation_factorisation_roundtrip(a, b):
    r = build_rotation4(normalize_quaternion(a), normalize_quaternion(b))
    ql, qr = rotation4_to_quaternions(r)
    assert np.abs(build_rotation4(ql, qr) - r).max() < 1e-12


def test_normalize_zero_quaternion():
    assert np.array_equal(normalize_quaternion(np.zeros(4)), [1, 0, 0, 0])
    assert np.array_equal(normalize_quaternion([1e-9, 0, 0, 0]), [1, 0, 0, 0])
    assert np.allclose(np.linalg.norm(normalize_quaternion([3, 4, 0, 0])), 1)


def test_covariance_closed_forms():
    assert np.array_equal(build_covariance4(np.ones(4), np.eye(4)), np.eye(4))
    assert np.array_equal(build_covariance4([2, 1, 1, 1], np.eye(4)), np.diag([4.0, 1, 1, 1]))
    with pytest.raises(InvalidInputError):
        build_covariance4([1, 0, 1, 1], np.eye(4))


@settings(max_examples=100, deadline=None)
@given(arrays(np.float64, 4, elements=st.floats(0.01, 5)), quat, quat)
def test_covariance_eigenvalues_are_squared_scales(scale, a, b):
    r = build_rotation4(normalize_quaternion(a), normalize_quaternion(b))
    sigma = build_covariance4(scale, r)
    assert np.abs(sigma - sigma.T).max() < 1e-9
    assert np.allclose(np.sort(np.linalg.eigvalsh(sigma)), np.sort(scale ** 2), atol=1e-9, rtol=1e-9)


def test_temporal_marginal_closed_form():
    g = axis_gaussian(mean=(0, 0, 0, 0.2), scale=(0.1, 0.1, 0.1, 0.3))
    assert temporal_marginal(g, 0.2) == 1.0
    assert temporal_marginal(g, 0.5) == pytest.approx(np.exp(-0.5), abs=1e-15)
    assert temporal_marginal(g, 0.2 + 0.17) == pytest.approx(temporal_marginal(g, 0.2 - 0.17), abs=1e-15)


def test_temporal_marginal_matches_quadrature():
    # integrate the 4D density over xyz on a grid; the ratio to t = mu_t is p(t)
    g = Gaussian4D([0.1, -0.1, 0, 0.0], [0.2, 0.15, 0.1, 0.4], normalize_quaternion([1, 0.3, -0.2, 0.5]),
                   normalize_quaternion([0.8, -0.4, 0.1, 0.3]), [1, 1, 1], 0.5)
    axis = np.linspace(-2.5, 2.5, 101)
    x = np.stack(np.meshgrid(axis, axis, axis, indexing="ij"), -1).reshape(-1, 3)

    def mass(t):
        return density_4d(g, x, np.full(len(x), t)).sum()

    for t in (0.3, -0.5):
        assert mass(t) / mass(0.0) == pytest.approx(temporal_marginal(g, t), rel=1e-6)


def test_degenerate_temporal_variance():
    g = axis_gaussian(scale=(0.1, 0.1, 0.1, 1e-7))
    with pytest.raises(DegenerateCovarianceError):
        temporal_marginal(g, 0.0)
    with pytest.raises(DegenerateCovarianceError):
        condition_on_time(g, 0.0)


def test_condition_block_diagonal_is_unchanged():
    g = axis_gaussian(mean=(0.1, 0.2, 0.3, 0.0), scale=(0.1, 0.2, 0.3, 0.5))
    for t in (-1, 0.4):
        cg = condition_on_time(g, t)
        assert np.array_equal(cg.mean, g.mean[:3])
        assert np.allclose(cg.cov, covariance4(g)[:3, :3], atol=0)


def test_condition_closed_form_shift():
    sigma = np.eye(4)
    sigma[0, 3] = sigma[3, 0] = 0.5
    g = axis_gaussian(mean=(0, 0, 0, 0.1))
    cg = condition_on_time(g, 0.9, sigma=sigma)
    assert cg.mean == pytest.approx([0.5 * 0.8, 0, 0], abs=1e-15)
    assert cg.cov[0, 0] == pytest.approx(0.75)


def test_condition_at_mean_time_is_exact(rng):
    scene = random_scene(rng, 50)
    cg = condition_on_time(scene, scene.mean[:, 3])
    assert np.array_equal(cg.mean, scene.mean[:, :3])
    assert np.array_equal(cg.temporal_weight, np.ones(50))


def test_factorisation_identity(rng):
    scene = random_scene(rng, 2000)
    x = scene.mean[:, :3] + rng.normal(0, 0.2, (2000, 3))
    t = rng.uniform(-1, 1, 2000)
    direct = density_4d(scene, x, t)
    cg = condition_on_time(scene, t)
    assert np.abs(direct - cg.temporal_weight * conditional_density(cg, x)).max() < 1e-10


def test_density_closed_forms():
    g = axis_gaussian(scale=(1, 1, 1, 1))
    assert density_4d(g, np.zeros(3), 0.0) == 1.0
    assert density_4d(g, np.array([1.0, 0, 0]), 0.0) == pytest.approx(np.exp(-0.5))
    assert density_4d(g, np.zeros(3), 1.0) == pytest.approx(np.exp(-0.5))


def test_density_ill_conditioned():
    g = axis_gaussian(scale=(1e-7, 1, 1, 1))
    with pytest.raises(DegenerateCovarianceError):
        density_4d(g, np.zeros(3), 0.0)


def test_scene_container(rng):
    scene = random_scene(rng, 5)
    assert len(scene) == 5
    assert np.array_equal(scene[2].params, scene.params[2])
    assert np.array_equal(Scene4D.from_gaussians(list(scene)).params, scene.params)
    assert len(Scene4D.from_gaussians([])) == 0
    assert np.array_equal(scene.subset([4, 1]).params, scene.params[[4, 1]])


def test_scene_validation_reports_index(rng):
    params = random_scene(rng, 6).params
    params[3, 19] = 1.5
    with pytest.raises(ValidationError) as err:
        Scene4D.from_params(params).validate()
    assert err.value.index == 3
    params[3, 19] = 0.5
    params[4, 5] = -0.1
    with pytest.raises(ValidationError) as err:
        Scene4D.from_params(params).validate()
    assert err.value.index == 4
