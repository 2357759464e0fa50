"""Space-time Gaussian primitives and the closed-form math around them.

A 4D Gaussian lives over ``(x, y, z, t)``.  Its covariance is factorised as
``R S S^T R^T`` where ``R`` is a 4D rotation built from a left/right
isoclinic quaternion pair.  Slicing it at a time ``t`` gives a 3D Gaussian
(the conditional) weighted by the unnormalised temporal marginal ``p(t)``.

Every function here accepts a single primitive or a batch: arrays carry
arbitrary leading dimensions and the last axis holds the components.
Quaternions are stored w-first.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .exceptions import DegenerateCovarianceError, InvalidInputError, ValidationError

#: Parameter layout used for packed arrays and the binary scene format.
PARAM_LAYOUT = (
    ("mean", 4),
    ("scale", 4),
    ("q_left", 4),
    ("q_right", 4),
    ("rgb", 3),
    ("opacity", 1),
)
PARAM_DIM = 20

_QUAT_EPS = 1e-8
_UNIT_TOL = 1e-3
_VAR_FLOOR = 1e-12
_MAX_CONDITION = 1e12

IDENTITY_QUATERNION = np.array([1.0, 0.0, 0.0, 0.0])


def normalize_quaternion(q):
    """L2-normalise quaternions; vectors with norm < 1e-8 become the identity."""
    q = np.asarray(q, dtype=np.float64)
    norm = np.linalg.norm(q, axis=-1, keepdims=True)
    small = norm < _QUAT_EPS
    out = q / np.where(small, 1.0, norm)
    return np.where(small, IDENTITY_QUATERNION, out)


def left_quaternion_matrix(q):
    """Matrix of left multiplication by ``q = (a, b, c, d)``."""
    q = np.asarray(q, dtype=np.float64)
    a, b, c, d = np.moveaxis(q, -1, 0)
    rows = [
        [a, -b, -c, -d],
        [b, a, -d, c],
        [c, d, a, -b],
        [d, -c, b, a],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def right_quaternion_matrix(q):
    """Matrix of right multiplication by ``q = (p, q, r, s)``."""
    q = np.asarray(q, dtype=np.float64)
    p, q_, r, s = np.moveaxis(q, -1, 0)
    rows = [
        [p, -q_, -r, -s],
        [q_, p, s, -r],
        [r, -s, p, q_],
        [s, r, -q_, p],
    ]
    return np.stack([np.stack(r, axis=-1) for r in rows], axis=-2)


def _check_unit(q, name):
    norm = np.linalg.norm(q, axis=-1)
    if not np.all(np.isfinite(norm)) or np.any(np.abs(norm - 1.0) > _UNIT_TOL):
        worst = float(np.max(np.abs(norm - 1.0)))
        raise InvalidInputError(f"{name} is not a unit quaternion (norm deviation {worst:.3g})")


def build_rotation4(q_left, q_right):
    """4D rotation ``L(q_left) @ R(q_right)`` from two unit quaternions.

    Raises InvalidInputError when either quaternion is more than 1e-3 away
    from unit norm.
    """
    q_left = np.asarray(q_left, dtype=np.float64)
    q_right = np.asarray(q_right, dtype=np.float64)
    _check_unit(q_left, "q_left")
    _check_unit(q_right, "q_right")
    return left_quaternion_matrix(q_left) @ right_quaternion_matrix(q_right)


def _isoclinic_basis():
    eye = np.eye(4)
    return np.array(
        [[left_quaternion_matrix(eye[a]) @ right_quaternion_matrix(eye[b]) for b in range(4)] for a in range(4)]
    )


_ISOCLINIC_BASIS = _isoclinic_basis()


def rotation4_to_quaternions(rotation):
    """Factor a rotation in SO(4) into ``(q_left, q_right)``.

    The 16 matrices ``L(e_a) R(e_b)`` are an orthogonal basis of 4x4
    matrices (each with squared Frobenius norm 4), so projecting onto it
    recovers the rank-one matrix ``q_left q_right^T``.  The pair is unique
    up to a joint sign flip; the left quaternion is returned with a
    non-negative largest-magnitude component.
    """
    rotation = np.asarray(rotation, dtype=np.float64)
    if np.any(np.abs(np.linalg.det(rotation) - 1.0) > 1e-6):
        raise InvalidInputError("rotation must be orthogonal with determinant +1")
    outer = np.einsum("abij,...ij->...ab", _ISOCLINIC_BASIS, rotation) / 4.0
    rows = np.linalg.norm(outer, axis=-1)
    pick = np.argmax(rows, axis=-1)
    row = np.take_along_axis(outer, pick[..., None, None], axis=-2)[..., 0, :]
    q_right = row / np.linalg.norm(row, axis=-1, keepdims=True)
    q_left = outer @ q_right[..., :, None]
    q_left = q_left[..., 0] / np.linalg.norm(q_left[..., 0], axis=-1, keepdims=True)
    lead = np.take_along_axis(q_left, np.argmax(np.abs(q_left), axis=-1)[..., None], axis=-1)
    sign = np.where(lead < 0, -1.0, 1.0)
    return q_left * sign, q_right * sign


def build_covariance4(scale, rotation):
    """``R diag(s)^2 R^T``; every scale component must be positive."""
    scale = np.asarray(scale, dtype=np.float64)
    rotation = np.asarray(rotation, dtype=np.float64)
    if not np.all(scale > 0):
        raise InvalidInputError("scale components must be strictly positive")
    m = rotation * scale[..., None, :]
    sigma = m @ np.swapaxes(m, -1, -2)
    return 0.5 * (sigma + np.swapaxes(sigma, -1, -2))


@dataclass(frozen=True)
class Gaussian4D:
    """One space-time primitive.

    ``mean`` is ``(x, y, z, t)``, ``scale`` is ``(s_x, s_y, s_z, s_t)`` and
    ``rgb`` holds zero-order colour in ``[0, 1]``.
    """

    mean: np.ndarray
    scale: np.ndarray
    q_left: np.ndarray
    q_right: np.ndarray
    rgb: np.ndarray
    opacity: float

    def __post_init__(self):
        for name, dim in PARAM_LAYOUT[:-1]:
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(dim)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "opacity", float(self.opacity))

    @property
    def params(self):
        return np.concatenate([self.mean, self.scale, self.q_left, self.q_right, self.rgb, [self.opacity]])

    @classmethod
    def from_params(cls, params):
        params = np.asarray(params, dtype=np.float64)
        if params.shape != (PARAM_DIM,):
            raise InvalidInputError(f"expected {PARAM_DIM} parameters, got shape {params.shape}")
        return cls(*_split_params(params)[:-1], float(params[-1]))

    def validate(self):
        """Raise ValidationError when a type invariant is violated."""
        problem = _invariant_problem(self.params[None, :])
        if problem is not None:
            raise ValidationError(problem[1], index=None)
        return self


def _split_params(params):
    out, start = [], 0
    for _, dim in PARAM_LAYOUT:
        out.append(params[..., start : start + dim])
        start += dim
    return out


def _invariant_problem(params):
    """Return ``(index, message)`` for the first invalid row, else None."""
    params = np.asarray(params, dtype=np.float64)
    mean, scale, ql, qr, rgb, opacity = _split_params(params)
    checks = [
        (~np.all(np.isfinite(params), axis=-1), "non-finite parameter"),
        (~np.all(scale > 0, axis=-1), "scale must be > 0"),
        (~((opacity[..., 0] > 0) & (opacity[..., 0] < 1)), "opacity must lie in (0, 1)"),
        (~np.all((rgb >= 0) & (rgb <= 1), axis=-1), "rgb must lie in [0, 1]"),
        (np.abs(np.linalg.norm(ql, axis=-1) - 1) > 1e-4, "q_left is not unit norm"),
        (np.abs(np.linalg.norm(qr, axis=-1) - 1) > 1e-4, "q_right is not unit norm"),
    ]
    first = None
    for bad, message in checks:
        idx = np.flatnonzero(bad)
        if idx.size and (first is None or idx[0] < first[0]):
            first = (int(idx[0]), message)
    return first


@dataclass
class Scene4D:
    """An ordered cloud of 4D Gaussians stored as stacked arrays.

    Indexing yields :class:`Gaussian4D` views; the array attributes share the
    names of the single-primitive fields so the math helpers accept both.
    """

    mean: np.ndarray
    scale: np.ndarray
    q_left: np.ndarray
    q_right: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray
    time_domain: tuple = (-1.0, 1.0)

    def __post_init__(self):
        self.mean = np.asarray(self.mean, dtype=np.float64).reshape(-1, 4)
        n = self.mean.shape[0]
        for name, dim in PARAM_LAYOUT[1:-1]:
            setattr(self, name, np.asarray(getattr(self, name), dtype=np.float64).reshape(n, dim))
        self.opacity = np.asarray(self.opacity, dtype=np.float64).reshape(n)
        self.time_domain = (float(self.time_domain[0]), float(self.time_domain[1]))

    def __len__(self):
        return self.mean.shape[0]

    def __getitem__(self, i) -> Gaussian4D:
        return Gaussian4D(self.mean[i], self.scale[i], self.q_left[i], self.q_right[i], self.rgb[i], self.opacity[i])

    def __iter__(self) -> Iterator[Gaussian4D]:
        return (self[i] for i in range(len(self)))

    @property
    def params(self):
        """Packed ``(N, 20)`` array in file order."""
        return np.concatenate(
            [self.mean, self.scale, self.q_left, self.q_right, self.rgb, self.opacity[:, None]], axis=1
        )

    @classmethod
    def from_params(cls, params, time_domain=(-1.0, 1.0)):
        params = np.asarray(params, dtype=np.float64).reshape(-1, PARAM_DIM)
        mean, scale, ql, qr, rgb, opacity = _split_params(params)
        return cls(mean, scale, ql, qr, rgb, opacity[:, 0], time_domain)

    @classmethod
    def from_gaussians(cls, gaussians: Sequence[Gaussian4D], time_domain=(-1.0, 1.0)):
        if len(gaussians) == 0:
            return cls.from_params(np.zeros((0, PARAM_DIM)), time_domain)
        return cls.from_params(np.stack([g.params for g in gaussians]), time_domain)

    def subset(self, index):
        return Scene4D.from_params(self.params[index], self.time_domain)

    def validate(self):
        """Raise ValidationError naming the first record that breaks an invariant."""
        problem = _invariant_problem(self.params)
        if problem is not None:
            index, message = problem
            raise ValidationError(f"gaussian {index}: {message}", index=index)
        return self


@dataclass(frozen=True)
class ConditionalGaussian3:
    """A 4D Gaussian sliced at a fixed time (batched when arrays carry a leading axis)."""

    mean: np.ndarray
    cov: np.ndarray
    temporal_weight: np.ndarray
    rgb: np.ndarray
    opacity: np.ndarray


def covariance4(g):
    """Covariance of a Gaussian4D or Scene4D; quaternions are re-normalised first."""
    rotation = left_quaternion_matrix(normalize_quaternion(g.q_left)) @ right_quaternion_matrix(
        normalize_quaternion(g.q_right)
    )
    return build_covariance4(g.scale, rotation)


def _temporal_variance(sigma):
    var_t = sigma[..., 3, 3]
    if np.any(~(var_t > _VAR_FLOOR)):
        raise DegenerateCovarianceError(f"temporal variance {float(np.min(var_t)):.3g} <= {_VAR_FLOOR}")
    return var_t


def temporal_marginal(g, t, sigma=None):
    """Unnormalised temporal marginal ``exp(-(t - mu_t)^2 / (2 Sigma_tt))``; peaks at 1."""
    sigma = covariance4(g) if sigma is None else sigma
    var_t = _temporal_variance(sigma)
    dt = np.asarray(t, dtype=np.float64) - np.asarray(g.mean)[..., 3]
    return np.exp(-0.5 * dt * dt / var_t)


def condition_on_time(g, t, sigma=None) -> ConditionalGaussian3:
    """Slice ``g`` at time ``t``: conditional mean/covariance of xyz given t."""
    sigma = covariance4(g) if sigma is None else sigma
    var_t = _temporal_variance(sigma)
    mean = np.asarray(g.mean, dtype=np.float64)
    dt = np.asarray(t, dtype=np.float64) - mean[..., 3]
    cross = sigma[..., :3, 3]
    gain = cross / var_t[..., None]
    mu = mean[..., :3] + gain * dt[..., None]
    cov = sigma[..., :3, :3] - gain[..., :, None] * cross[..., None, :]
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    weight = np.exp(-0.5 * dt * dt / var_t)
    return ConditionalGaussian3(mu, cov, weight, np.asarray(g.rgb), np.asarray(g.opacity))


def density_4d(g, x, t, sigma=None):
    """Unnormalised 4D density ``exp(-0.5 (p - mu)^T Sigma^-1 (p - mu))`` at ``p = (x, t)``."""
    sigma = covariance4(g) if sigma is None else sigma
    eig = np.linalg.eigvalsh(sigma)
    if np.any(eig[..., 0] <= 0) or np.any(eig[..., -1] / eig[..., 0] > _MAX_CONDITION):
        raise DegenerateCovarianceError("4D covariance is singular or ill-conditioned (condition number > 1e12)")
    x = np.asarray(x, dtype=np.float64)
    t = np.asarray(t, dtype=np.float64)
    p = np.concatenate([x, t[..., None] * np.ones(x.shape[:-1] + (1,))], axis=-1)
    d = p - np.asarray(g.mean)
    sol = np.linalg.solve(sigma, d[..., None])[..., 0]
    return np.exp(-0.5 * np.sum(d * sol, axis=-1))


def conditional_density(cg: ConditionalGaussian3, x):
    """Unnormalised 3D density of the sliced Gaussian at ``x``."""
    d = np.asarray(x, dtype=np.float64) - cg.mean
    sol = np.linalg.solve(cg.cov, d[..., None])[..., 0]
    return np.exp(-0.5 * np.sum(d * sol, axis=-1))
