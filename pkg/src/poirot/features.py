"""Per-point features: affine coordinates, interpolation, attention gating, pooling, deformation."""

from dataclasses import dataclass, field

import numpy as np

from .equivariant import Linear, Module, softmax
from .errors import EmptyError, ShapeError, SizeError, UnrepresentablePointError
from .geometry import PointCloud, pairwise_distances

ROLES = ("local", "global", "combined")
AFFINE_RESIDUAL = 1e-6
COINCIDENT = 1e-9


@dataclass(frozen=True)
class FeatureField:
    values: np.ndarray = field(repr=False)
    role: str = "local"

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.ndim != 2:
            raise ShapeError(f"feature field must be 2-D (N, d), got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}")
        object.__setattr__(self, "values", v)


@dataclass(frozen=True)
class AffineCoords:
    coords: np.ndarray = field(repr=False)
    hull_indices: np.ndarray


def affine_coords(cloud, S):
    """Minimum-norm coefficients c with ``sum_j c_j x_{S_j} = x`` and ``sum_j c_j = 1``.

    The solution set is preserved by rigid motions and the Euclidean norm is
    unchanged by them, so the coefficients are rotation and translation
    invariant.
    """
    S = np.asarray(S, dtype=int)
    if S.size == 0:
        raise EmptyError("affine coordinates need a non-empty subset")
    X = cloud.points
    origin = X[S].mean(axis=0)
    A = np.vstack([(X[S] - origin).T, np.ones(len(S))])  # (4, |S|)
    rhs = np.vstack([(X - origin).T, np.ones(len(X))])  # (4, N)
    coeffs = np.linalg.pinv(A) @ rhs
    residual = np.linalg.norm(A @ coeffs - rhs, axis=0)
    scale = max(cloud.diameter, 1.0)
    bad = np.flatnonzero(residual > AFFINE_RESIDUAL * scale)
    if bad.size:
        raise UnrepresentablePointError(
            f"point {bad[0]} lies outside the affine span of the subset (residual {residual[bad[0]]:.3g})"
        )
    return AffineCoords(coeffs.T, S.copy())


def interpolation_matrix(cloud, S, k):
    """(N, |S|) row-stochastic weights from the k nearest subset points (1/d^2, normalized)."""
    S = np.asarray(S, dtype=int)
    k = int(k)
    if k > len(S):
        raise SizeError(f"k={k} exceeds subset size {len(S)}")
    if k < 1:
        raise SizeError("k must be positive")
    d = pairwise_distances(cloud.points, cloud.points[S])
    order = np.argsort(d, axis=1, kind="stable")[:, :k]
    dk = np.take_along_axis(d, order, axis=1)
    M = np.zeros((len(cloud), len(S)))
    rows = np.arange(len(cloud))
    tol = COINCIDENT * max(cloud.diameter, np.finfo(float).tiny)
    near = dk[:, 0] < tol
    w = 1.0 / np.where(near[:, None], 1.0, dk) ** 2
    w /= w.sum(axis=1, keepdims=True)
    np.put_along_axis(M, order, w, axis=1)
    M[near] = 0.0
    M[rows[near], order[near, 0]] = 1.0
    return M


def interpolate(local_on_S, cloud, S, k):
    vals = local_on_S.values if isinstance(local_on_S, FeatureField) else np.asarray(local_on_S, float)
    if vals.shape[0] != len(S):
        raise ShapeError(f"{vals.shape[0]} feature rows for a subset of {len(S)} points")
    return FeatureField(interpolation_matrix(cloud, S, k) @ vals, "local")


def neighbor_indices(cloud, k):
    """k nearest cloud points of every point (itself first), ties to lower index."""
    if k > len(cloud):
        raise SizeError(f"k={k} exceeds point count {len(cloud)}")
    d = pairwise_distances(cloud.points)
    return np.argsort(d, axis=1, kind="stable")[:, :k]


class AttentionGate(Module):
    """Two-way softmax weighting local against global features.

    A shared linear map acts on each of the k neighbor local features, the
    results are averaged, passed through ReLU and an affine layer to two
    logits (local, global).
    """

    def __init__(self, d_local, hidden=8, rng=None):
        super().__init__()
        rng = np.random.default_rng(rng)
        self.d_local = d_local
        self.children["embed"] = Linear(d_local, hidden, rng)
        self.children["head"] = Linear(hidden, 2, rng)

    def logits(self, local, neighbors):
        pooled = local[neighbors].mean(axis=1)  # shared linear map commutes with the mean
        z = self.children["embed"].forward(pooled)
        mask = z > 0
        out = self.children["head"].forward(np.where(mask, z, 0.0))
        return out, (neighbors, mask, local.shape)

    def forward(self, local, global_coords, neighbors):
        if local.shape[1] != self.d_local:
            raise ShapeError(f"expected {self.d_local} local features, got {local.shape[1]}")
        if global_coords.shape[0] != local.shape[0] or neighbors.shape[0] != local.shape[0]:
            raise ShapeError("local, global and neighbor rows must agree")
        logit, aux = self.logits(local, neighbors)
        p = softmax(logit, axis=1)
        out = np.hstack([p[:, :1] * local, p[:, 1:] * global_coords])
        self._cache = (local, global_coords, p, aux)
        return out, p

    def backward(self, g_out, g_p=None):
        """Gradient with respect to the local features (global coordinates are constants)."""
        local, glob, p, (neighbors, mask, shape) = self._pop_cache()
        d = local.shape[1]
        gl, gg = g_out[:, :d], g_out[:, d:]
        grad_local = p[:, :1] * gl
        gp = np.stack([np.sum(gl * local, axis=1), np.sum(gg * glob, axis=1)], axis=1)
        if g_p is not None:
            gp = gp + g_p
        g_logit = p * (gp - np.sum(gp * p, axis=1, keepdims=True))
        gz = self.children["head"].backward(g_logit) * mask
        g_pooled = self.children["embed"].backward(gz)
        k = neighbors.shape[1]
        np.add.at(grad_local, neighbors.ravel(), np.repeat(g_pooled / k, k, axis=0))
        return grad_local


def attention_combine(local, global_coords, cloud, k, attn_params):
    """Combined features ``(p_l * local, p_g * global)`` and the per-point (p_l, p_g)."""
    lv = local.values if isinstance(local, FeatureField) else np.asarray(local, float)
    gv = global_coords.coords if isinstance(global_coords, AffineCoords) else np.asarray(global_coords, float)
    if lv.shape[0] != len(cloud):
        raise ShapeError(f"{lv.shape[0]} local rows for {len(cloud)} points")
    out, p = attn_params.forward(lv, gv, neighbor_indices(cloud, k))
    attn_params._cache = None
    return FeatureField(out, "combined"), p


class GlobalPool(Module):
    """Coordinatewise max over rows, optionally after a shared per-row linear map."""

    def __init__(self, mode="max", d_in=None, d_out=None, rng=None):
        super().__init__()
        if mode not in ("max", "conv1"):
            raise ValueError("pool mode must be 'max' or 'conv1'")
        self.mode = mode
        if mode == "conv1":
            self.children["map"] = Linear(d_in, d_out, rng)

    def forward(self, rows):
        rows = np.asarray(rows, dtype=float)
        if rows.shape[0] == 0:
            raise EmptyError("pooling over an empty set")
        h = self.children["map"].forward(rows) if self.mode == "conv1" else rows
        arg = np.argmax(h, axis=0)
        self._cache = (h.shape, arg)
        return h[arg, np.arange(h.shape[1])]

    def backward(self, g):
        shape, arg = self._pop_cache()
        gh = np.zeros(shape)
        gh[arg, np.arange(shape[1])] = g
        if self.mode == "conv1":
            return self.children["map"].backward(gh)
        return gh


def global_pool(local_on_S, mode="max", params=None):
    rows = local_on_S.values if isinstance(local_on_S, FeatureField) else np.asarray(local_on_S, float)
    pool = params if params is not None else GlobalPool(mode)
    out = pool.forward(rows)
    pool._cache = None
    return out


@dataclass
class DeformParams:
    """Affine maps with tanh activations; the displacement is ``scale * tanh(last layer)``."""

    weights: list
    biases: list
    scale: float

    def __post_init__(self):
        if self.scale < 0:
            raise ValueError("deformation scale must be nonnegative")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ShapeError("need matching, non-empty weight and bias lists")
        if np.shape(self.weights[0])[0] != 3 or np.shape(self.weights[-1])[1] != 3:
            raise ShapeError("deformation net must map 3-vectors to 3-vectors")

    def displacement(self, x):
        h = np.asarray(x, dtype=float)
        for W, b in zip(self.weights, self.biases):
            h = np.tanh(h @ W + b)
        return self.scale * h


def random_deform_params(rng, scale, hidden=16, zero_last=False):
    rng = np.random.default_rng(rng)
    W1 = rng.normal(0, 1.0, (3, hidden))
    b1 = rng.normal(0, 0.5, hidden)
    W2 = np.zeros((hidden, 3)) if zero_last else rng.normal(0, 1.0 / np.sqrt(hidden), (hidden, 3))
    return DeformParams([W1, W2], [b1, np.zeros(3)], float(scale))


def deform(cloud, params):
    """``x -> x + scale * tanh-net(x)``; normals and labels are kept."""
    if params.scale == 0:
        return cloud
    return PointCloud(cloud.points + params.displacement(cloud.points), cloud.normals, cloud.labels)


def mean_iou(pred, truth, parts=None):
    """Mean over parts of intersection over union for one shape.

    A part absent from both prediction and truth counts as IoU 1.
    """
    pred, truth = np.asarray(pred), np.asarray(truth)
    if pred.shape != truth.shape:
        raise ShapeError("prediction and truth must have the same shape")
    parts = np.unique(np.concatenate([pred, truth])) if parts is None else parts
    ious = []
    for q in parts:
        inter = np.sum((pred == q) & (truth == q))
        union = np.sum((pred == q) | (truth == q))
        ious.append(1.0 if union == 0 else inter / union)
    return float(np.mean(ious))
