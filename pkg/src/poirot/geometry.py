"""Point clouds, neighborhoods, geodesic distances, hull tests and rotations."""

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .errors import EmptyError, ShapeError, SizeError

NORMAL_TOLERANCE = 1e-9
ORTHO_TOLERANCE = 1e-12
DEGENERACY_THRESHOLD = 1e-9


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class PointCloud:
    """Ordered 3D points with optional unit normals and integer labels."""

    points: np.ndarray
    normals: np.ndarray | None = None
    labels: np.ndarray | None = None

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.size == 0:
            pts = pts.reshape(0, 3)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ShapeError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("point coordinates must be finite")
        object.__setattr__(self, "points", _frozen(pts))
        if self.normals is not None:
            nrm = np.asarray(self.normals, dtype=float).reshape(-1, 3) if np.size(self.normals) else np.zeros((0, 3))
            if nrm.shape != pts.shape:
                raise ShapeError(f"normals shape {nrm.shape} does not match points {pts.shape}")
            if not np.all(np.isfinite(nrm)) or np.any(np.abs(np.linalg.norm(nrm, axis=1) - 1) > NORMAL_TOLERANCE):
                raise ValueError("normals must be finite unit vectors")
            object.__setattr__(self, "normals", _frozen(nrm))
        if self.labels is not None:
            lab = np.asarray(self.labels)
            if lab.shape != (len(pts),):
                raise ShapeError(f"labels must have shape ({len(pts)},), got {lab.shape}")
            if lab.size and not np.all(lab == np.round(lab)):
                raise ValueError("labels must be integers")
            object.__setattr__(self, "labels", _frozen(lab, dtype=np.int64))

    def __len__(self):
        return len(self.points)

    @property
    def diameter(self):
        if len(self) < 2:
            return 0.0
        return float(np.sqrt(_pairwise_sq(self.points).max()))

    def transformed(self, R=None, t=None):
        """Apply ``x -> R x + t``; normals are rotated, labels kept."""
        R = np.eye(3) if R is None else np.asarray(getattr(R, "matrix", R), dtype=float)
        t = np.zeros(3) if t is None else np.asarray(t, dtype=float)
        normals = None if self.normals is None else self.normals @ R.T
        return PointCloud(self.points @ R.T + t, normals, self.labels)

    def subset(self, indices):
        idx = np.asarray(indices, dtype=int)
        return PointCloud(
            self.points[idx],
            None if self.normals is None else self.normals[idx],
            None if self.labels is None else self.labels[idx],
        )


@dataclass(frozen=True)
class Rotation:
    matrix: np.ndarray

    def __post_init__(self):
        R = np.asarray(self.matrix, dtype=float)
        if R.shape != (3, 3):
            raise ShapeError(f"rotation must be 3x3, got {R.shape}")
        if np.abs(R.T @ R - np.eye(3)).max() > ORTHO_TOLERANCE or abs(np.linalg.det(R) - 1) > ORTHO_TOLERANCE:
            raise ValueError("matrix is not a proper rotation")
        object.__setattr__(self, "matrix", _frozen(R))

    @property
    def T(self):
        return Rotation(self.matrix.T)

    def apply(self, x):
        return np.asarray(x, dtype=float) @ self.matrix.T


@dataclass(frozen=True)
class GeodesicAffinity:
    """All-pairs shortest path lengths in the epsilon graph (``inf`` if unreachable)."""

    distances: np.ndarray = field(repr=False)
    epsilon: float


def _pairwise_sq(a, b=None):
    b = a if b is None else b
    d = np.sum(a * a, 1)[:, None] + np.sum(b * b, 1)[None, :] - 2 * a @ b.T
    return np.maximum(d, 0)


def pairwise_distances(a, b=None):
    """Euclidean distances computed from explicit differences (exact zeros on duplicates)."""
    b = a if b is None else b
    return np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)


def knn(cloud, query, k):
    """Indices of the k nearest points, ascending distance, ties to the lower index."""
    n = len(cloud)
    k = int(k)
    if k < 1:
        raise SizeError("k must be positive")
    if k > n:
        raise SizeError(f"k={k} exceeds point count {n}")
    d = np.linalg.norm(cloud.points - np.asarray(query, dtype=float), axis=1)
    return np.argsort(d, kind="stable")[:k]


def centroid(cloud):
    """Index of the point nearest to the arithmetic mean."""
    if len(cloud) == 0:
        raise EmptyError("centroid of an empty cloud")
    mean = cloud.points.mean(axis=0)
    d = np.linalg.norm(cloud.points - mean, axis=1)
    return int(np.argmin(d))


def floyd_warshall(weights):
    """All-pairs shortest paths on a dense weight matrix (inf = no edge)."""
    D = np.array(weights, dtype=float, copy=True)
    n = len(D)
    np.fill_diagonal(D, 0.0)
    for k in range(n):
        np.minimum(D, D[:, k, None] + D[None, k, :], out=D)
    return D


def geodesic_affinity(cloud, epsilon):
    if not epsilon > 0:
        raise ValueError("epsilon must be positive")
    d = pairwise_distances(cloud.points)
    w = np.where(d <= epsilon, d, np.inf)
    D = floyd_warshall(w)
    D = np.minimum(D, D.T)
    D.setflags(write=False)
    return GeodesicAffinity(D, float(epsilon))


def _affine_frame(points):
    """Coordinates of ``points`` in their affine span and the span dimension."""
    c = points - points.mean(axis=0)
    diam = np.sqrt(_pairwise_sq(points).max()) if len(points) > 1 else 0.0
    if diam == 0:
        return np.zeros((len(points), 0)), 0
    _, s, vt = np.linalg.svd(c, full_matrices=False)
    rank = int(np.sum(s > DEGENERACY_THRESHOLD * diam))
    return c @ vt[:rank].T, rank


def _strict_support(diffs):
    """Largest t with y.diff >= t for all rows, |y|_inf <= 1 (t capped at 1)."""
    dim = diffs.shape[1]
    # variables (y, t); maximize t
    cost = np.zeros(dim + 1)
    cost[-1] = -1.0
    A = np.hstack([-diffs, np.ones((len(diffs), 1))])
    b = np.zeros(len(diffs))
    bounds = [(-1, 1)] * dim + [(None, 1)]
    res = linprog(cost, A_ub=A, b_ub=b, bounds=bounds, method="highs")
    if res.status != 0:
        raise RuntimeError(f"support LP failed: {res.message}")
    return -res.fun


def is_hull_vertex(cloud, index):
    """True iff some direction strictly separates point ``index`` from all others.

    Coplanar or collinear clouds are tested in their spanning subspace.
    """
    n = len(cloud)
    if n == 0:
        raise EmptyError("hull test on an empty cloud")
    if not 0 <= index < n:
        raise IndexError(f"index {index} out of range for {n} points")
    if n == 1:
        return True
    coords, rank = _affine_frame(cloud.points)
    if rank == 0:
        return False
    diffs = coords[index] - np.delete(coords, index, axis=0)
    scale = np.abs(coords).max()
    return bool(_strict_support(diffs / scale) > 1e-9)


def hull_vertices(cloud):
    return np.array([i for i in range(len(cloud)) if is_hull_vertex(cloud, i)], dtype=int)


def random_rotation(seed):
    """Haar-uniform rotation via QR of a Gaussian matrix with sign correction."""
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    A = rng.standard_normal((3, 3))
    Q, Rr = np.linalg.qr(A)
    Q = Q * np.sign(np.diag(Rr))[None, :]
    if np.linalg.det(Q) < 0:
        Q[:, 0] = -Q[:, 0]
    # re-orthonormalize to full precision
    u, _, vt = np.linalg.svd(Q)
    return Rotation(u @ vt)
