"""Omni-directional spherical responses of a point cloud and response-driven sampling.

The response of point ``x_i`` in direction ``y`` (a unit vector, scaled to
radius r) is ``sum_k max(0, r y.(x_k - x_i))`` over points outside the closed
ball of radius r around ``x_i``.  With normals the sum is split into bins of
the folded normal angle ``arccos(|n_k . n_i|)`` over [0, pi/2].
"""

import warnings
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .errors import ConfigError, EmptyError, ShapeError, SizeError
from .geometry import centroid
from .harmonic import sph_harm_at
from .signals import S2Spectrum, SphereGrid, SphericalSignal

REFINE_STEPS = 50
REFINE_STARTS = 3


def make_grid(B):
    return SphereGrid.build(B)


@dataclass(frozen=True)
class ResponseConfig:
    radius: float
    partitions: int = 1
    use_normals: bool = False

    def __post_init__(self):
        if not (np.isfinite(self.radius) and self.radius > 0):
            raise ConfigError(f"radius must be positive, got {self.radius}")
        if int(self.partitions) != self.partitions or self.partitions < 1:
            raise ConfigError(f"partitions must be an integer >= 1, got {self.partitions}")

    @property
    def channels(self):
        return int(self.partitions) if self.use_normals else 1


def _check_center(cloud, center_index):
    n = len(cloud)
    if n == 0:
        raise EmptyError("response of an empty cloud")
    if not 0 <= center_index < n:
        raise IndexError(f"center index {center_index} out of range for {n} points")


def partition_weights(cloud, center_index, config):
    """(C, N) 0/1 matrix: which points feed which channel (ball interior excluded)."""
    _check_center(cloud, center_index)
    if config.use_normals and cloud.normals is None:
        raise ConfigError("use_normals requires a cloud with normals")
    diff = cloud.points - cloud.points[center_index]
    outside = np.linalg.norm(diff, axis=1) > config.radius
    if not config.use_normals:
        return outside[None, :].astype(float)
    n = int(config.partitions)
    cosang = np.clip(np.abs(cloud.normals @ cloud.normals[center_index]), 0.0, 1.0)
    angle = np.arccos(cosang)
    bins = np.minimum(np.floor(angle / (np.pi / (2 * n))).astype(int), n - 1)
    W = np.zeros((n, len(cloud)))
    W[bins, np.arange(len(cloud))] = 1.0
    return W * outside[None, :]


def respond_at(cloud, center_index, config, directions):
    """Responses at arbitrary unit ``directions`` (..., 3); returns (C, ...)."""
    W = partition_weights(cloud, center_index, config)
    diff = cloud.points - cloud.points[center_index]
    dirs = np.asarray(directions, dtype=float)
    proj = np.maximum(0.0, config.radius * (dirs.reshape(-1, 3) @ diff.T))
    return (proj @ W.T).T.reshape((W.shape[0],) + dirs.shape[:-1])


def respond(cloud, center_index, config, grid):
    return SphericalSignal(grid, respond_at(cloud, center_index, config, grid.directions))


def respond_many(cloud, centers, config, grid):
    """Stacked grid responses for several centers: (len(centers), C, 2B, 2B)."""
    dirs = grid.directions.reshape(-1, 3)
    out = np.empty((len(centers), config.channels) + grid.shape)
    for j, i in enumerate(centers):
        W = partition_weights(cloud, i, config)
        proj = np.maximum(0.0, config.radius * (dirs @ (cloud.points - cloud.points[i]).T))
        out[j] = (proj @ W.T).T.reshape((W.shape[0],) + grid.shape)
    return out


@lru_cache(maxsize=None)
def relu_legendre_coeffs(B):
    """``max(0, t) = sum_l c_l P_l(t)`` for l < B (exact by Gauss-Legendre)."""
    from numpy.polynomial import legendre

    t, w = legendre.leggauss(B + 2)
    t = 0.5 * (t + 1.0)  # nodes on [0, 1]
    w = 0.5 * w
    c = np.array([(2 * l + 1) / 2 * np.sum(w * t * legendre.legval(t, np.eye(B)[l])) for l in range(B)])
    c.setflags(write=False)
    return c


def respond_spectrum(cloud, center_index, config, B):
    """Degree < B projection of the response function, in closed form.

    Each term ``r |d| max(0, y.u)`` is expanded by the addition theorem, so
    the coefficients transform exactly by D^l(R) under rotation of the cloud.
    """
    W = partition_weights(cloud, center_index, config)
    diff = cloud.points - cloud.points[center_index]
    norm = np.linalg.norm(diff, axis=1)
    keep = norm > 0
    Y = sph_harm_at(B, diff[keep])  # (K, l, m)
    ls = np.arange(B)
    radial = relu_legendre_coeffs(B) * 4 * np.pi / (2 * ls + 1)
    amp = config.radius * norm[keep]
    coeffs = np.einsum("ck,k,klm->clm", W[:, keep], amp, Y.conj()) * radial[None, :, None]
    return S2Spectrum(B, coeffs)


def _refine(diff, mask, start):
    """Fixed-point ascent of ``y -> sum_k max(0, y.d_k)`` on the unit sphere."""
    y = start
    value = 0.0
    for _ in range(REFINE_STEPS):
        active = (diff @ y > 0) & mask
        s = diff[active].sum(axis=0)
        ns = np.linalg.norm(s)
        if ns == 0:
            break
        y_new = s / ns
        value = ns
        if np.array_equal(active, (diff @ y_new > 0) & mask):
            y = y_new
            break
        y = y_new
    return value


def response_scores(cloud, config, grid, refine=False):
    """Per-point maximum response over grid directions and channels.

    With ``refine`` each point's best grid directions seed a fixed-point
    ascent, giving the exact local maxima; the refined scores are then
    rotation invariant rather than grid dependent.
    """
    if len(cloud) == 0:
        raise EmptyError("scores of an empty cloud")
    dirs = grid.directions.reshape(-1, 3)
    scores = np.empty(len(cloud))
    for i in range(len(cloud)):
        W = partition_weights(cloud, i, config)
        diff = cloud.points - cloud.points[i]
        vals = np.maximum(0.0, config.radius * (dirs @ diff.T)) @ W.T  # (dirs, C)
        best = vals.max()
        if refine and best > 0:
            for c in range(W.shape[0]):
                order = np.argsort(-vals[:, c], kind="stable")[:REFINE_STARTS]
                for j in order:
                    best = max(best, config.radius * _refine(diff, W[c] > 0, dirs[j]))
        scores[i] = best
    return scores


def downsample(cloud, scores, n_samples, seed):
    """Sequential draws without replacement, each proportional to remaining scores."""
    n = len(cloud)
    scores = np.asarray(scores, dtype=float)
    if scores.shape != (n,):
        raise ShapeError(f"scores must have shape ({n},), got {scores.shape}")
    if not 1 <= n_samples < n:
        raise SizeError(f"n_samples must satisfy 1 <= n_samples < {n}, got {n_samples}")
    if np.any(scores < 0) or not np.all(np.isfinite(scores)):
        raise ValueError("scores must be finite and nonnegative")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    p = scores.copy()
    if p.sum() <= 0:
        warnings.warn("all scores are zero; sampling uniformly", RuntimeWarning, stacklevel=2)
        p = np.ones(n)
    chosen = []
    for _ in range(int(n_samples)):
        total = p.sum()
        if total <= 0:
            warnings.warn("remaining scores are zero; sampling the rest uniformly", RuntimeWarning, stacklevel=2)
            p = np.where(p < 0, 0.0, 1.0)
            p[chosen] = 0.0
            total = p.sum()
        u = rng.random() * total
        j = int(np.searchsorted(np.cumsum(p), u, side="right"))
        j = min(j, n - 1)
        while p[j] == 0:  # guard against rounding at the upper end
            j -= 1
        chosen.append(j)
        p[j] = 0.0
    return np.array(chosen, dtype=int)


@dataclass(frozen=True)
class ConfidenceMap:
    """``c(v) = max(0, w.v + b)``."""

    weight: np.ndarray
    bias: float = 0.0

    def __call__(self, v):
        return np.maximum(0.0, np.asarray(v) @ np.asarray(self.weight, dtype=float) + self.bias)


def attention_directions(cloud, centroid_index=None):
    if centroid_index is None:
        centroid_index = centroid(cloud)
    d = cloud.points - cloud.points[centroid_index]
    norm = np.linalg.norm(d, axis=1, keepdims=True)
    return np.divide(d, norm, out=np.zeros_like(d), where=norm > 0), norm[:, 0] > 0


def attention_subset(cloud, centroid_index, confidence_params, n_samples, seed):
    """Subset drawn with probabilities from a confidence map of centroid directions."""
    v, nonzero = attention_directions(cloud, centroid_index)
    conf = np.asarray(confidence_params(v), dtype=float)
    conf = np.where(nonzero, conf, 0.0)
    return downsample(cloud, conf, n_samples, seed)
