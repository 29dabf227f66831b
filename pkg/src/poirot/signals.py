"""Grids, quadrature and signal containers on S^2 and SO(3).

Sphere points are (theta, phi) with theta measured from +z.  Both the sphere
grid and the SO(3) grid use the equiangular polar nodes
``theta_a = pi (2a + 1) / (4B)`` together with Driscoll-Healy weights, which
integrate polynomials in cos(theta) of degree < 2B exactly.

Rotation grid points are ZYZ Euler triples ``R = Rz(alpha) Ry(beta) Rz(gamma)``
stored on axes (alpha, beta, gamma).
"""

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import ConfigError, ShapeError

HAAR_VOLUME = 8.0 * np.pi**2


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@lru_cache(maxsize=None)
def polar_nodes(B):
    nodes = np.pi * (2 * np.arange(2 * B) + 1) / (4 * B)
    nodes.setflags(write=False)
    return nodes


@lru_cache(maxsize=None)
def polar_weights(B):
    """Driscoll-Healy weights for the 2B midpoint polar nodes.

    They sum to 2 (the integral of sin(theta) over [0, pi]).
    """
    theta = polar_nodes(B)
    k = np.arange(B)
    s = np.sin(np.outer(theta, 2 * k + 1)) / (2 * k + 1)
    w = (2.0 / B) * np.sin(theta) * s.sum(axis=1)
    w.setflags(write=False)
    return w


@lru_cache(maxsize=None)
def azimuth_nodes(B):
    nodes = 2.0 * np.pi * np.arange(2 * B) / (2 * B)
    nodes.setflags(write=False)
    return nodes


def _check_bandwidth(B, minimum=1):
    if int(B) != B or B < minimum:
        raise ConfigError(f"bandwidth must be an integer >= {minimum}, got {B!r}")
    return int(B)


@dataclass(frozen=True)
class SphereGrid:
    """Equiangular 2B x 2B grid on the unit sphere.

    ``directions`` has shape (2B, 2B, 3) indexed [polar, azimuth];
    ``quadrature_weights`` has shape (2B, 2B) and sums to 4 pi.
    """

    bandwidth: int
    theta: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)
    directions: np.ndarray = field(repr=False)
    quadrature_weights: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, B):
        B = _check_bandwidth(B, 2)
        theta = polar_nodes(B)
        phi = azimuth_nodes(B)
        st, ct = np.sin(theta)[:, None], np.cos(theta)[:, None]
        dirs = np.stack(
            [st * np.cos(phi)[None, :], st * np.sin(phi)[None, :], np.broadcast_to(ct, (2 * B, 2 * B))],
            axis=-1,
        )
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        w = np.outer(polar_weights(B), np.full(2 * B, 2 * np.pi / (2 * B)))
        return cls(B, _frozen(theta), _frozen(phi), _frozen(dirs), _frozen(w))

    @property
    def shape(self):
        return (2 * self.bandwidth, 2 * self.bandwidth)

    def integrate(self, values):
        """Quadrature over the last two axes."""
        return np.tensordot(values, self.quadrature_weights, axes=([-2, -1], [0, 1]))


@dataclass(frozen=True)
class SO3Grid:
    """(2B)^3 Euler-angle grid with Haar quadrature weights over beta."""

    bandwidth: int
    alpha: np.ndarray = field(repr=False)
    beta: np.ndarray = field(repr=False)
    gamma: np.ndarray = field(repr=False)
    beta_weights: np.ndarray = field(repr=False)

    @classmethod
    def build(cls, B):
        B = _check_bandwidth(B, 1)
        a = azimuth_nodes(B)
        step = 2 * np.pi / (2 * B)
        return cls(B, _frozen(a), _frozen(polar_nodes(B)), _frozen(a), _frozen(polar_weights(B) * step * step))

    @property
    def shape(self):
        n = 2 * self.bandwidth
        return (n, n, n)

    @property
    def weights(self):
        """Full quadrature weights of shape (2B, 2B, 2B); they sum to 8 pi^2."""
        n = 2 * self.bandwidth
        return np.broadcast_to(self.beta_weights[None, :, None], (n, n, n))

    def integrate(self, values):
        return np.tensordot(values.sum(axis=(-3, -1)), self.beta_weights, axes=([-1], [0]))

    def rotations(self):
        from .harmonic import euler_to_matrix

        A, Bt, G = np.meshgrid(self.alpha, self.beta, self.gamma, indexing="ij")
        return euler_to_matrix(A, Bt, G)


def _check_values(values, expected_tail, what):
    values = np.asarray(values, dtype=float)
    if values.ndim != len(expected_tail) + 1 or values.shape[1:] != tuple(expected_tail):
        raise ShapeError(f"{what} values must have shape (C, {', '.join(map(str, expected_tail))}), got {values.shape}")
    if values.shape[0] < 1:
        raise ShapeError(f"{what} needs at least one channel")
    if not np.all(np.isfinite(values)):
        raise ValueError(f"{what} values must be finite")
    return _frozen(values)


@dataclass(frozen=True)
class SphericalSignal:
    """Multi-channel real signal sampled on a :class:`SphereGrid`."""

    grid: SphereGrid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.values, self.grid.shape, "spherical signal"))

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def bandwidth(self):
        return self.grid.bandwidth


@dataclass(frozen=True)
class SO3Signal:
    """Multi-channel real signal on an :class:`SO3Grid`, axes (alpha, beta, gamma)."""

    grid: SO3Grid
    values: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "values", _check_values(self.values, self.grid.shape, "SO(3) signal"))

    @property
    def channels(self):
        return self.values.shape[0]

    @property
    def bandwidth(self):
        return self.grid.bandwidth


@dataclass(frozen=True)
class S2Spectrum:
    """Coefficients ``coeffs[c, l, m + B - 1]``; zero where |m| > l."""

    bandwidth: int
    coeffs: np.ndarray

    def __post_init__(self):
        B = self.bandwidth
        c = np.array(self.coeffs, dtype=complex, copy=True)
        if c.ndim != 3 or c.shape[1:] != (B, 2 * B - 1):
            raise ShapeError(f"S2 spectrum must have shape (C, {B}, {2 * B - 1}), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def channels(self):
        return self.coeffs.shape[0]

    def get(self, c, l, m):
        return self.coeffs[c, l, m + self.bandwidth - 1]


@dataclass(frozen=True)
class SO3Spectrum:
    """Coefficients ``coeffs[c, l, m + B - 1, n + B - 1]``."""

    bandwidth: int
    coeffs: np.ndarray

    def __post_init__(self):
        B = self.bandwidth
        c = np.array(self.coeffs, dtype=complex, copy=True)
        if c.ndim != 4 or c.shape[1:] != (B, 2 * B - 1, 2 * B - 1):
            raise ShapeError(f"SO(3) spectrum must have shape (C, {B}, {2 * B - 1}, {2 * B - 1}), got {c.shape}")
        c.setflags(write=False)
        object.__setattr__(self, "coeffs", c)

    @property
    def channels(self):
        return self.coeffs.shape[0]

    def get(self, c, l, m, n):
        B = self.bandwidth
        return self.coeffs[c, l, m + B - 1, n + B - 1]


@lru_cache(maxsize=None)
def degree_mask_s2(B):
    ms = np.arange(-(B - 1), B)
    mask = np.abs(ms)[None, :] <= np.arange(B)[:, None]
    mask.setflags(write=False)
    return mask


@lru_cache(maxsize=None)
def degree_mask_so3(B):
    ms = np.abs(np.arange(-(B - 1), B))
    l = np.arange(B)[:, None, None]
    mask = (ms[None, :, None] <= l) & (ms[None, None, :] <= l)
    mask.setflags(write=False)
    return mask
