"""Unsupervised atlas detection: geodesic candidates, invariant features, entropy-sharpened softmax."""

import logging
from dataclasses import dataclass, field

import numpy as np

from .equivariant import ActNorm, Integrate, ReLU, S2Correlation, Sequential, SO3Correlation
from .errors import ConfigError, EmptyError, ShapeError
from .geometry import centroid, geodesic_affinity, pairwise_distances
from .signals import SphericalSignal
from .sphere import ResponseConfig, make_grid, respond, respond_spectrum

log = logging.getLogger(__name__)

EPSILON_FACTOR = 5.0


@dataclass(frozen=True)
class Candidate:
    anchor: int
    members: np.ndarray
    response: SphericalSignal = field(repr=False)

    def __post_init__(self):
        if self.anchor not in self.members:
            raise ShapeError("candidate anchor must be one of its members")


@dataclass(frozen=True)
class DetectionResult:
    probabilities: np.ndarray
    entropy: float
    selected: int
    members: np.ndarray
    scores: np.ndarray = None
    anchors: np.ndarray = None
    entropy_trace: tuple = ()


@dataclass(frozen=True)
class DetectConfig:
    """``radius`` is a fraction of the atlas diameter; ``epsilon`` <= 0 means the default."""

    epsilon: float = 0.0
    m: int = 0
    bandwidth: int = 6
    radius: float = 0.2
    widths: tuple[int, ...] = (4, 8)
    core_size: int = 2
    steps: int = 200
    lr: float = 0.01
    momentum: float = 0.9
    responses: str = "grid"
    standardize: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.bandwidth < 2 or self.radius <= 0 or self.steps < 0 or self.lr < 0:
            raise ConfigError("detection needs bandwidth >= 2, radius > 0, steps >= 0, lr >= 0")
        if len(self.widths) < 2:
            raise ConfigError("detection features need at least a sphere and a rotation correlation layer")
        if self.responses not in ("grid", "bandlimited"):
            raise ConfigError("responses must be 'grid' or 'bandlimited'")


def default_epsilon(cloud):
    """Five times the median nearest-neighbor spacing."""
    if len(cloud) < 2:
        raise EmptyError("need at least two points for a spacing estimate")
    d = pairwise_distances(cloud.points)
    np.fill_diagonal(d, np.inf)
    return EPSILON_FACTOR * float(np.median(d.min(axis=1)))


def candidate_members(affinity, anchor, m):
    """Anchor plus its m-1 geodesically nearest points, or None if too few are reachable."""
    row = affinity.distances[anchor].copy()
    row[anchor] = -1.0  # anchor first regardless of duplicates
    order = np.argsort(row, kind="stable")
    if np.sum(np.isfinite(row)) < m:
        return None
    return order[:m]


def build_candidates(cloud, affinity, m, response_config, grid):
    m = int(m)
    if not 1 <= m <= len(cloud):
        raise ConfigError(f"candidate size m={m} must lie in [1, {len(cloud)}]")
    out = []
    for j in range(len(cloud)):
        members = candidate_members(affinity, j, m)
        if members is None:
            log.info("anchor %d skipped: fewer than %d reachable neighbors", j, m - 1)
            continue
        sub = cloud.subset(members)
        out.append(Candidate(j, members, respond(sub, 0, response_config, grid)))
    return out


class FeatureExtractor:
    """Sphere correlation, rotation correlations with ReLU, Haar integral.

    With ``standardize`` a final ActNorm (fitted on the first batch it sees,
    normally the whole candidate pool) centers and scales every feature
    dimension, so that cosine scores are not dominated by the common
    positive component that ReLU features share.
    """

    def __init__(self, bandwidth, widths, core_size=2, seed=0, standardize=True):
        rng = np.random.default_rng(seed)
        core = core_size if core_size > 0 else None
        layers = []
        chans = (1,) + tuple(widths)
        for i in range(len(widths)):
            cls = S2Correlation if i == 0 else SO3Correlation
            layers.append(cls(bandwidth, chans[i], chans[i + 1], core_size=core, rng=rng))
            layers.append(ReLU())
        layers.append(Integrate(bandwidth))
        if standardize:
            layers.append(ActNorm(widths[-1]))
        self.stack = Sequential(*layers)
        self.bandwidth = bandwidth

    def __call__(self, x):
        out = self.stack.forward(x)
        self.stack._cache = None
        for layer in self.stack.layers:
            layer._cache = None
        return out


def _unit(F):
    n = np.linalg.norm(F, axis=-1, keepdims=True)
    return np.divide(F, n, out=np.zeros_like(F), where=n > 0), n


def score_candidates(candidates, atlas_cloud, feature_extractor, response_config=None, grid=None):
    """Inner products of unit-normalized candidate and atlas features."""
    if not candidates:
        return np.zeros(0)
    grid = candidates[0].response.grid if grid is None else grid
    x = np.stack([c.response.values for c in candidates])
    if response_config is None:
        response_config = ResponseConfig(0.2 * atlas_cloud.diameter)
    atlas = respond(atlas_cloud, centroid(atlas_cloud), response_config, grid).values[None]
    F = feature_extractor(np.concatenate([atlas, x]))
    if F.ndim != 2:
        raise ShapeError("feature extractor must return one vector per input")
    U, _ = _unit(F)
    return U[1:] @ U[0]


def select(scores):
    """Softmax probabilities, entropy (nats) and argmax (lowest index on ties)."""
    s = np.asarray(scores, dtype=float)
    if s.size == 0:
        raise EmptyError("cannot select from an empty score list")
    z = s - s.max()
    e = np.exp(z)
    p = e / e.sum()
    logp = z - np.log(e.sum())
    entropy = float(-np.sum(np.where(p > 0, p * logp, 0.0)))
    j = int(np.argmax(p))
    return DetectionResult(p, max(entropy, 0.0), j, np.array([j]), scores=s)


def entropy_and_grad(scores):
    """Entropy of softmax(scores) and its gradient with respect to the scores."""
    s = np.asarray(scores, dtype=float)
    z = s - s.max()
    logp = z - np.log(np.exp(z).sum())
    p = np.exp(logp)
    H = float(-np.sum(p * logp))
    return H, -p * (logp + H)


def _normalized_inputs(x, n, radius, diameter):
    return x / (n * radius * diameter)


class _Pool:
    """Stacked, scale-normalized inputs for the atlas (row 0) and every candidate."""

    def __init__(self, x):
        self.x = x

    def entropy(self, stack, want_grad=False):
        F = stack.forward(self.x)
        U, norm = _unit(F)
        s = U[1:] @ U[0]
        H, gs = entropy_and_grad(s)
        if not want_grad:
            for layer in stack.layers:
                layer._cache = None
            return H, s
        gU = np.zeros_like(U)
        gU[0] = gs @ U[1:]
        gU[1:] = gs[:, None] * U[0][None, :]
        gF = (gU - U * np.sum(U * gU, axis=1, keepdims=True)) / np.where(norm > 0, norm, 1.0)
        stack.backward(gF)
        return H, s


def minimize_entropy(pool, extractor, steps, lr, momentum, max_halvings=20):
    """Momentum descent on candidate-pool entropy; a step that raises entropy is retried at half size."""
    params = [p for _, p in extractor.stack.named_parameters()]
    velocity = [np.zeros_like(p.value) for p in params]
    extractor.stack.zero_grad()
    H, s = pool.entropy(extractor.stack, want_grad=True)
    trace = [H]
    for _ in range(steps):
        grads = [p.grad.copy() for p in params]
        gnorm = np.sqrt(sum(float(np.sum(g * g)) for g in grads))
        if gnorm == 0 or not np.isfinite(gnorm):
            break
        accepted = False
        for _ in range(max_halvings):
            old = [p.value.copy() for p in params]
            trial_v = [momentum * v + g / gnorm for v, g in zip(velocity, grads)]
            for p, v in zip(params, trial_v):
                p.value -= lr * v
            H_new, _ = pool.entropy(extractor.stack)
            if H_new <= H:
                velocity = trial_v
                accepted = True
                break
            for p, o in zip(params, old):
                p.value[...] = o
            lr *= 0.5
            velocity = [np.zeros_like(v) for v in velocity]
        if not accepted:
            break
        extractor.stack.zero_grad()
        H, s = pool.entropy(extractor.stack, want_grad=True)
        trace.append(H)
    extractor.stack.zero_grad()
    return trace


def detect(cloud, atlas, config=DetectConfig()):
    """Build candidates, score them against the atlas, optionally sharpen by entropy descent, select."""
    m = config.m if config.m > 0 else len(atlas)
    eps = config.epsilon if config.epsilon > 0 else default_epsilon(cloud)
    affinity = geodesic_affinity(cloud, eps)
    rc = ResponseConfig(config.radius * atlas.diameter)
    grid = make_grid(config.bandwidth)
    candidates = build_candidates(cloud, affinity, m, rc, grid)
    if not candidates:
        raise EmptyError("no candidate has enough geodesic neighbors; increase epsilon or reduce m")
    scale = (m, rc.radius, atlas.diameter)
    if config.responses == "grid":
        atlas_x = respond(atlas, centroid(atlas), rc, grid).values[None]
        cand_x = np.stack([c.response.values for c in candidates])
    else:
        B = config.bandwidth
        atlas_x = respond_spectrum(atlas, centroid(atlas), rc, B).coeffs[None]
        cand_x = np.stack([respond_spectrum(cloud.subset(c.members), 0, rc, B).coeffs for c in candidates])
    x = _normalized_inputs(np.concatenate([atlas_x, cand_x]), *scale)
    extractor = FeatureExtractor(config.bandwidth, config.widths, config.core_size, config.seed, config.standardize)
    pool = _Pool(x)
    trace = minimize_entropy(pool, extractor, config.steps, config.lr, config.momentum) if config.steps else []
    _, s = pool.entropy(extractor.stack)
    res = select(s)
    anchors = np.array([c.anchor for c in candidates])
    return DetectionResult(
        res.probabilities,
        res.entropy,
        res.selected,
        candidates[res.selected].members,
        scores=s,
        anchors=anchors,
        entropy_trace=tuple(trace),
    )
