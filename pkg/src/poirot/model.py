"""Classification and segmentation networks built from the equivariant stack."""

import json
from dataclasses import dataclass

import numpy as np

from . import config as cfgmod
from .equivariant import (
    SGD,
    ActNorm,
    BatchNorm,
    Integrate,
    Linear,
    Module,
    ReLU,
    S2Correlation,
    Sequential,
    SO3Correlation,
    softmax_cross_entropy,
)
from .errors import ConfigError, EmptyError, ParseError, ShapeError, SizeError, TrainingError
from .features import AttentionGate, affine_coords, deform, interpolation_matrix, mean_iou, neighbor_indices, random_deform_params
from .io import LE_INT, atomic_write, tensor_from_stream, tensor_to_bytes
from .sphere import ResponseConfig, downsample, make_grid, respond_many, respond_spectrum, response_scores

TASKS = ("classification", "segmentation")
CHECKPOINT_MAGIC = b"POIROT-CHECKPOINT\n"
CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class ModelConfig:
    """Architecture settings.  ``radius`` is a fraction of the cloud diameter."""

    task: str = "classification"
    bandwidth: int = 8
    radius: float = 0.2
    samples: int = 32
    widths: tuple[int, ...] = (8, 16, 16)
    norm: str = "act"
    core_size: int = 4
    classes: int = 2
    parts: int = 2
    partitions: int = 1
    use_normals: bool = False
    responses: str = "grid"
    refine_scores: bool = True
    interp_k: int = 3
    attention_k: int = 8
    attention_hidden: int = 8
    head_hidden: int = 16
    pool: str = "max"
    seed: int = 0

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigError(f"task must be one of {TASKS}, got {self.task!r}")
        if self.bandwidth < 2:
            raise ConfigError("bandwidth must be >= 2")
        if not self.radius > 0:
            raise ConfigError("radius must be positive")
        if not self.widths or any(w < 1 for w in self.widths):
            raise ConfigError("widths must be a non-empty list of positive integers")
        if self.norm not in ("act", "batch", "none"):
            raise ConfigError("norm must be 'act', 'batch' or 'none'")
        if self.responses not in ("grid", "bandlimited"):
            raise ConfigError("responses must be 'grid' or 'bandlimited'")
        if self.pool not in ("max", "conv1"):
            raise ConfigError("pool must be 'max' or 'conv1'")
        for name in ("samples", "classes", "parts", "partitions", "interp_k", "attention_k", "attention_hidden"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if self.core_size < 0 or self.head_hidden < 0:
            raise ConfigError("core_size and head_hidden must be nonnegative")
        if self.interp_k > self.samples:
            raise ConfigError("interp_k cannot exceed samples")

    @property
    def in_channels(self):
        return self.partitions if self.use_normals else 1


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    epochs: int = 10
    batch_size: int = 8
    weight_decay: float = 0.0
    deform_scale: float = 0.0
    clip_norm: float = 1.0
    seed: int = 0

    def __post_init__(self):
        if self.clip_norm < 0:
            raise ConfigError("clip_norm must be nonnegative (0 disables clipping)")
        if self.lr < 0 or not 0 <= self.momentum < 1:
            raise ConfigError("need lr >= 0 and 0 <= momentum < 1")
        if self.epochs < 0 or self.batch_size < 1:
            raise ConfigError("need epochs >= 0 and batch_size >= 1")


@dataclass
class Prepared:
    """Parameter-independent per-cloud inputs: subset, responses and geometry."""

    subset: np.ndarray
    inputs: np.ndarray
    n_points: int
    interp: np.ndarray | None = None
    affine: np.ndarray | None = None
    neighbors: np.ndarray | None = None


@dataclass
class Dataset:
    clouds: list
    labels: np.ndarray | None = None
    categories: list | None = None
    seeds: list | None = None

    def __post_init__(self):
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=int)
            if len(self.labels) != len(self.clouds):
                raise ShapeError("one label per cloud is required")
        if self.seeds is None:
            self.seeds = list(range(len(self.clouds)))

    def __len__(self):
        return len(self.clouds)


def _norm_layer(kind, channels):
    if kind == "act":
        return ActNorm(channels)
    if kind == "batch":
        return BatchNorm(channels)
    return None


class POIRot(Module):
    """Equivariant stack (sphere correlation, rotation correlations, Haar integral) plus a task head."""

    def __init__(self, config):
        super().__init__()
        self.config = config
        c = config
        rng = np.random.default_rng(c.seed)
        core = c.core_size if c.core_size > 0 else None
        layers = []
        chans = (c.in_channels,) + tuple(c.widths)
        for i in range(len(c.widths)):
            cls = S2Correlation if i == 0 else SO3Correlation
            layers.append(cls(c.bandwidth, chans[i], chans[i + 1], core_size=core, rng=rng))
            norm = _norm_layer(c.norm, chans[i + 1])
            if norm is not None:
                layers.append(norm)
            layers.append(ReLU())
        layers.append(Integrate(c.bandwidth))
        self.children["stack"] = Sequential(*layers)
        d = c.widths[-1]
        if c.task == "classification":
            if c.pool == "conv1":
                self.children["pool_map"] = Linear(d, d, rng)
            self.children["fc"] = Linear(d, c.classes, rng)
        else:
            self.children["gate"] = AttentionGate(d, c.attention_hidden, rng)
            width = d + c.samples
            if c.head_hidden:
                self.children["head1"] = Linear(width, c.head_hidden, rng)
                self.children["head2"] = Linear(c.head_hidden, c.parts, rng)
            else:
                self.children["head2"] = Linear(width, c.parts, rng)

    @property
    def stack(self):
        return self.children["stack"]

    # -- preprocessing -------------------------------------------------

    def response_config(self, cloud):
        diam = cloud.diameter
        if diam <= 0:
            raise EmptyError("cloud has zero diameter")
        return ResponseConfig(self.config.radius * diam, self.config.partitions, self.config.use_normals)

    def prepare(self, cloud, seed):
        c = self.config
        n = len(cloud)
        if n < c.samples:
            raise SizeError(f"cloud has {n} points, fewer than the {c.samples} samples required")
        rc = self.response_config(cloud)
        grid = make_grid(c.bandwidth)
        if n == c.samples:
            subset = np.arange(n)
        else:
            scores = response_scores(cloud, rc, grid, refine=c.refine_scores)
            subset = downsample(cloud, scores, c.samples, seed)
        if c.responses == "grid":
            inputs = respond_many(cloud, subset, rc, grid)
        else:
            inputs = np.stack([respond_spectrum(cloud, i, rc, c.bandwidth).coeffs for i in subset])
        # responses grow like N * r * diameter; dividing makes the inputs scale free
        inputs = inputs / (n * rc.radius * cloud.diameter)
        prep = Prepared(subset, inputs, n)
        if c.task == "segmentation":
            prep.interp = interpolation_matrix(cloud, subset, c.interp_k)
            prep.affine = affine_coords(cloud, subset).coords
            prep.neighbors = neighbor_indices(cloud, min(c.attention_k, n))
        return prep

    # -- forward / backward over a batch of prepared clouds ------------

    def forward_batch(self, preps):
        c = self.config
        S = c.samples
        x = np.concatenate([p.inputs for p in preps])
        phi = self.stack.forward(x)  # (n*S, d)
        n = len(preps)
        if c.task == "classification":
            rows = phi
            if c.pool == "conv1":
                rows = self.children["pool_map"].forward(phi)
            rows = rows.reshape(n, S, -1)
            arg = np.argmax(rows, axis=1)
            pooled = np.take_along_axis(rows, arg[:, None, :], axis=1)[:, 0, :]
            logits = self.children["fc"].forward(pooled)
            self._cache = ("cls", rows.shape, arg)
            return logits
        phi_s = phi.reshape(n, S, -1)
        local = np.concatenate([p.interp @ phi_s[i] for i, p in enumerate(preps)])
        glob = np.concatenate([p.affine for p in preps])
        offsets = np.cumsum([0] + [p.n_points for p in preps])
        nbrs = np.concatenate([p.neighbors + offsets[i] for i, p in enumerate(preps)])
        combined, _ = self.children["gate"].forward(local, glob, nbrs)
        h = combined
        mask = None
        if c.head_hidden:
            h = self.children["head1"].forward(h)
            mask = h > 0
            h = np.where(mask, h, 0.0)
        logits = self.children["head2"].forward(h)
        self._cache = ("seg", offsets, mask, [p.interp for p in preps])
        out = [logits[offsets[i] : offsets[i + 1]] for i in range(n)]
        return out

    def backward_batch(self, grad):
        kind, *rest = self._pop_cache()
        if kind == "cls":
            shape, arg = rest
            g_pooled = self.children["fc"].backward(grad)
            g_rows = np.zeros(shape)
            np.put_along_axis(g_rows, arg[:, None, :], g_pooled[:, None, :], axis=1)
            g_rows = g_rows.reshape(shape[0] * shape[1], -1)
            if self.config.pool == "conv1":
                g_rows = self.children["pool_map"].backward(g_rows)
            self.stack.backward(g_rows)
            return
        offsets, mask, interps = rest
        g = np.concatenate(grad)
        g = self.children["head2"].backward(g)
        if mask is not None:
            g = self.children["head1"].backward(g * mask)
        g_local = self.children["gate"].backward(g)
        g_phi = np.concatenate([M.T @ g_local[offsets[i] : offsets[i + 1]] for i, M in enumerate(interps)])
        self.stack.backward(g_phi)


def forward_classify(model, cloud, seed=0):
    """Class logits for one cloud."""
    if model.config.task != "classification":
        raise ConfigError("model is not a classifier")
    out = model.forward_batch([model.prepare(cloud, seed)])
    model._clear_caches()
    return out[0]


def forward_segment(model, cloud, seed=0):
    """Per-point part logits (N, parts)."""
    if model.config.task != "segmentation":
        raise ConfigError("model is not a segmenter")
    out = model.forward_batch([model.prepare(cloud, seed)])
    model._clear_caches()
    return out[0]


def _clear(module):
    module._cache = None
    for c in module.children.values():
        _clear(c)


POIRot._clear_caches = _clear


def count_params(model):
    return model.parameter_count()


def dense_param_count(model):
    """Parameter count if every correlation kernel were stored densely."""
    total = 0
    for name, p in model.named_parameters():
        if ".kernel." not in name:
            total += p.value.size
    for layer in model.stack.layers:
        if isinstance(layer, (S2Correlation, SO3Correlation)):
            total += layer.kernel.dense_size()
    return total


# ---------------------------------------------------------------------------
# loss, training, evaluation


def batch_loss(model, preps, targets):
    """Forward plus backward on a batch; returns (loss, outputs).  Gradients accumulate."""
    out = model.forward_batch(preps)
    if model.config.task == "classification":
        loss, g = softmax_cross_entropy(out, targets)
        model.backward_batch(g)
        return loss, out
    logits = np.concatenate(out)
    labels = np.concatenate(targets)
    loss, g = softmax_cross_entropy(logits, labels)
    sizes = np.cumsum([0] + [len(t) for t in targets])
    model.backward_batch([g[sizes[i] : sizes[i + 1]] for i in range(len(out))])
    return loss, out


def _targets(model, dataset, idx):
    if model.config.task == "classification":
        if dataset.labels is None:
            raise ShapeError("classification needs per-cloud labels")
        return dataset.labels[idx]
    out = []
    for i in idx:
        if dataset.clouds[i].labels is None:
            raise ShapeError(f"cloud {i} lacks per-point labels")
        out.append(dataset.clouds[i].labels)
    return out


def prepare_dataset(model, dataset):
    return [model.prepare(c, s) for c, s in zip(dataset.clouds, dataset.seeds)]


def format_record(record):
    return json.dumps(record, sort_keys=True, separators=(", ", ": "))


def train(model, dataset, tcfg, preps=None, log=None):
    """Mini-batch momentum SGD; returns one metric record per epoch."""
    if len(dataset) == 0:
        raise EmptyError("training dataset is empty")
    model.train()
    preps = prepare_dataset(model, dataset) if preps is None else preps
    params = [p for _, p in model.named_parameters()]
    opt = SGD(params, tcfg.lr, tcfg.momentum, tcfg.weight_decay)
    rng = np.random.default_rng(tcfg.seed)
    records = []
    step = 0
    for epoch in range(tcfg.epochs):
        order = rng.permutation(len(dataset))
        total, count = 0.0, 0
        hits, scores = [], []
        for start in range(0, len(order), tcfg.batch_size):
            idx = order[start : start + tcfg.batch_size]
            if tcfg.deform_scale > 0:
                batch = []
                for i in idx:
                    params_d = random_deform_params(rng, tcfg.deform_scale)
                    batch.append(model.prepare(deform(dataset.clouds[i], params_d), dataset.seeds[i]))
            else:
                batch = [preps[i] for i in idx]
            targets = _targets(model, dataset, idx)
            opt.zero_grad()
            loss, out = batch_loss(model, batch, targets)
            if not np.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            if not all(np.all(np.isfinite(p.grad)) for p in params):
                raise TrainingError(f"non-finite gradient at epoch {epoch}, step {step}")
            if tcfg.clip_norm > 0:
                norm = np.sqrt(sum(float(np.sum(p.grad**2)) for p in params))
                if norm > tcfg.clip_norm:
                    for p in params:
                        p.grad *= tcfg.clip_norm / norm
            opt.step()
            step += 1
            total += loss * len(idx)
            count += len(idx)
            if model.config.task == "classification":
                hits.extend(np.argmax(out, axis=1) == targets)
            else:
                parts = list(range(model.config.parts))
                for o, t in zip(out, targets):
                    pred = np.argmax(o, axis=1)
                    hits.extend(pred == t)
                    scores.append(mean_iou(pred, t, parts))
        record = {"epoch": epoch, "step": step, "loss": total / count, "accuracy": float(np.mean(hits))}
        if scores:
            record["miou"] = float(np.mean(scores))
        records.append(record)
        if log is not None:
            log(format_record(record))
    model.step = getattr(model, "step", 0) + step
    return records


def predict(model, preps, batch_size=16):
    model.eval()
    outs = []
    for start in range(0, len(preps), batch_size):
        out = model.forward_batch(preps[start : start + batch_size])
        model._clear_caches()
        outs.extend(list(out))
    return outs


def evaluate(model, dataset, preps=None):
    """Accuracy for classifiers; mIoU (per shape, then per category) for segmenters."""
    if len(dataset) == 0:
        raise EmptyError("evaluation dataset is empty")
    preps = prepare_dataset(model, dataset) if preps is None else preps
    outs = predict(model, preps)
    if model.config.task == "classification":
        pred = np.array([int(np.argmax(o)) for o in outs])
        return {"accuracy": float(np.mean(pred == dataset.labels)), "predictions": pred.tolist()}
    parts = list(range(model.config.parts))
    ious, preds = [], []
    for o, cloud in zip(outs, dataset.clouds):
        p = np.argmax(o, axis=1)
        preds.append(p)
        ious.append(mean_iou(p, cloud.labels, parts))
    cats = dataset.categories or ["all"] * len(dataset)
    per_cat = {}
    for cat in sorted(set(cats)):
        per_cat[str(cat)] = float(np.mean([iou for iou, c in zip(ious, cats) if c == cat]))
    return {
        "miou": float(np.mean(list(per_cat.values()))),
        "miou_per_category": per_cat,
        "accuracy": float(np.mean(np.concatenate([p == c.labels for p, c in zip(preds, dataset.clouds)]))),
        "predictions": [p.tolist() for p in preds],
    }


# ---------------------------------------------------------------------------
# checkpoints


def _state(model):
    state = {f"param:{k}": p.value for k, p in model.named_parameters()}
    state.update({f"buffer:{k}": b for k, b in model.named_buffers()})
    return dict(sorted(state.items()))


def checkpoint_bytes(model, step=None):
    step = getattr(model, "step", 0) if step is None else step
    head = CHECKPOINT_MAGIC + f"version = {CHECKPOINT_VERSION}\nstep = {int(step)}\n[config]\n".encode()
    head += cfgmod.to_text(model.config).encode() + b"[tensors]\n"
    state = _state(model)
    body = [np.array([len(state)], dtype=LE_INT).tobytes()]
    for name, value in state.items():
        raw = name.encode()
        body.append(np.array([len(raw)], dtype=LE_INT).tobytes() + raw + tensor_to_bytes(value))
    return head + b"".join(body)


def save_checkpoint(path, model, step=None):
    return atomic_write(path, checkpoint_bytes(model, step))


def load_checkpoint_bytes(data):
    if not data.startswith(CHECKPOINT_MAGIC):
        raise ParseError("not a checkpoint file (bad magic)")
    marker = b"[tensors]\n"
    cut = data.find(marker)
    if cut < 0:
        raise ParseError("checkpoint lacks a tensor section")
    lines = data[len(CHECKPOINT_MAGIC) : cut].decode().splitlines()
    if not lines or lines[0] != f"version = {CHECKPOINT_VERSION}":
        raise ParseError(f"unsupported checkpoint version line {lines[:1]!r}")
    step = int(lines[1].split("=", 1)[1])
    if lines[2] != "[config]":
        raise ParseError("checkpoint lacks a config section")
    config = cfgmod.from_mapping(ModelConfig, cfgmod.parse_config_text("\n".join(lines[3:])))
    model = POIRot(config)
    pos = cut + len(marker)
    count = int(np.frombuffer(data, dtype=LE_INT, count=1, offset=pos)[0])
    pos += 8
    params = dict(model.named_parameters())
    buffers = dict(model.named_buffers())
    seen = set()
    for _ in range(count):
        ln = int(np.frombuffer(data, dtype=LE_INT, count=1, offset=pos)[0])
        name = data[pos + 8 : pos + 8 + ln].decode()
        value, pos = tensor_from_stream(data, pos + 8 + ln)
        kind, key = name.split(":", 1)
        target = params[key].value if kind == "param" and key in params else buffers.get(key)
        if target is None:
            raise ParseError(f"checkpoint tensor {name!r} does not belong to this model")
        if target.shape != value.shape:
            raise ShapeError(f"checkpoint tensor {name!r} has shape {value.shape}, expected {target.shape}")
        target[...] = value
        seen.add(name)
    missing = set(_state(model)) - seen
    if missing:
        raise ParseError(f"checkpoint is missing tensors: {sorted(missing)[:3]}")
    model.step = step
    return model


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return load_checkpoint_bytes(fh.read())
