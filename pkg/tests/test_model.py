import numpy as np
import pytest

from poirot.datasets import barbell, classification_dataset
from poirot.equivariant import Linear
from poirot.errors import ConfigError, EmptyError, ParseError, SizeError, TrainingError
from poirot.geometry import PointCloud, random_rotation
from poirot.model import (
    Dataset,
    ModelConfig,
    POIRot,
    TrainConfig,
    batch_loss,
    checkpoint_bytes,
    count_params,
    dense_param_count,
    evaluate,
    forward_classify,
    forward_segment,
    load_checkpoint,
    load_checkpoint_bytes,
    save_checkpoint,
    train,
)

SMALL = dict(bandwidth=4, samples=8, widths=(4, 6), core_size=2, head_hidden=6, attention_k=4)


def small_cloud(rng, n=16):
    return PointCloud(rng.normal(size=(n, 3)) * [1.0, 0.6, 0.3])


def toy_classification(n_per_class=4, points=24, seed=0):
    return classification_dataset(n_per_class, points, seed)


# -- configuration and parameter counts --------------------------------------


def test_linear_parameter_count():
    assert Linear(3, 3).parameter_count() == 12


def test_default_classifier_budget():
    model = POIRot(ModelConfig())
    assert count_params(model) < 10_000
    assert count_params(model) < dense_param_count(model)
    seg = POIRot(ModelConfig(task="segmentation"))
    assert count_params(seg) < dense_param_count(seg)


@pytest.mark.parametrize(
    "kwargs",
    [dict(task="detect"), dict(bandwidth=1), dict(widths=()), dict(norm="layer"), dict(samples=2, interp_k=3)],
)
def test_config_validation(kwargs):
    with pytest.raises(ConfigError):
        ModelConfig(**kwargs)


def test_stack_layout():
    from poirot.equivariant import ActNorm, Integrate, ReLU, S2Correlation, SO3Correlation

    kinds = [type(layer) for layer in POIRot(ModelConfig()).stack.layers]
    assert kinds == [S2Correlation, ActNorm, ReLU, SO3Correlation, ActNorm, ReLU, SO3Correlation, ActNorm, ReLU, Integrate]


# -- forward passes ----------------------------------------------------------


def test_classify_permutation_invariant(rng):
    cloud = small_cloud(rng, 8)
    model = POIRot(ModelConfig(**SMALL))
    a = forward_classify(model, cloud)
    perm = rng.permutation(8)
    b = forward_classify(model, PointCloud(cloud.points[perm]))
    np.testing.assert_allclose(a, b, rtol=1e-10, atol=1e-12)


def test_classify_rotation_bandlimited(rng):
    cloud = small_cloud(rng, 24)
    model = POIRot(ModelConfig(**SMALL, responses="bandlimited"))
    model.eval()
    a = forward_classify(model, cloud, seed=3)
    b = forward_classify(model, cloud.transformed(random_rotation(rng)), seed=3)
    np.testing.assert_allclose(a, b, rtol=0, atol=1e-6 * max(1.0, np.abs(a).max()))


def test_segment_shapes_and_size_error(rng):
    model = POIRot(ModelConfig(task="segmentation", **SMALL))
    out = forward_segment(model, small_cloud(rng, 20))
    assert out.shape == (20, 2)
    with pytest.raises(SizeError):
        forward_segment(model, small_cloud(rng, 5))
    with pytest.raises(ConfigError):
        forward_classify(model, small_cloud(rng, 20))


def test_zero_diameter_cloud():
    with pytest.raises(EmptyError):
        forward_classify(POIRot(ModelConfig(**SMALL)), PointCloud(np.zeros((10, 3))))


# -- gradients ---------------------------------------------------------------


def _loss(model, preps, targets):
    out = model.forward_batch(preps)
    model._clear_caches()
    from poirot.equivariant import softmax_cross_entropy

    if model.config.task == "classification":
        return softmax_cross_entropy(out, targets)[0]
    return softmax_cross_entropy(np.concatenate(out), np.concatenate(targets))[0]


@pytest.mark.parametrize("task", ["classification", "segmentation"])
def test_end_to_end_gradient(rng, task):
    model = POIRot(ModelConfig(task=task, **SMALL))
    clouds = [small_cloud(rng, 16) for _ in range(2)]
    preps = [model.prepare(c, i) for i, c in enumerate(clouds)]
    if task == "classification":
        targets = np.array([0, 1])
    else:
        targets = [(c.points[:, 0] > 0).astype(int) for c in clouds]
    _loss(model, preps, targets)  # data-dependent normalization initializes here
    model.zero_grad()
    batch_loss(model, preps, targets)
    h = 1e-5
    worst = 0.0
    for name, p in model.named_parameters():
        for _ in range(3):
            i = tuple(int(rng.integers(0, s)) for s in p.value.shape)
            p.value[i] += h
            a = _loss(model, preps, targets)
            p.value[i] -= 2 * h
            b = _loss(model, preps, targets)
            p.value[i] += h
            fd, an = (a - b) / (2 * h), p.grad[i]
            if abs(fd) + abs(an) > 1e-9:
                worst = max(worst, abs(fd - an) / (abs(fd) + abs(an)))
    assert worst < 1e-4


# -- training ----------------------------------------------------------------


def test_zero_learning_rate_is_noop():
    data = toy_classification()
    model = POIRot(ModelConfig(**SMALL))
    _loss(model, [model.prepare(data.clouds[0], 0)], data.labels[:1])  # initialize normalization
    before = {k: p.value.copy() for k, p in model.named_parameters()}
    train(model, data, TrainConfig(lr=0.0, epochs=2, batch_size=3))
    for k, p in model.named_parameters():
        np.testing.assert_array_equal(p.value, before[k], err_msg=k)


def test_single_sample_overfit():
    data = toy_classification(1, 24)
    one = Dataset(data.clouds[:1], data.labels[:1])
    model = POIRot(ModelConfig(**SMALL))
    records = train(model, one, TrainConfig(lr=0.05, epochs=500, batch_size=1))
    assert len(records) == 500
    assert min(r["loss"] for r in records) < 1e-2


def test_single_part_object_fits():
    rng = np.random.default_rng(0)
    clouds = [PointCloud(small_cloud(rng, 16).points, labels=np.zeros(16, int)) for _ in range(3)]
    model = POIRot(ModelConfig(task="segmentation", **SMALL))
    train(model, Dataset(clouds), TrainConfig(lr=0.05, epochs=10, batch_size=3))
    assert evaluate(model, Dataset(clouds))["accuracy"] == 1.0


def test_training_is_deterministic(tmp_path):
    data = toy_classification()
    logs = []
    for run in range(2):
        model = POIRot(ModelConfig(**SMALL))
        lines = []
        train(model, data, TrainConfig(lr=0.02, epochs=2, batch_size=3), log=lines.append)
        logs.append(lines)
        save_checkpoint(tmp_path / f"{run}.bin", model)
    assert logs[0] == logs[1]
    assert (tmp_path / "0.bin").read_bytes() == (tmp_path / "1.bin").read_bytes()


def test_training_loss_decreases():
    data = toy_classification(6, 24)
    model = POIRot(ModelConfig(**SMALL))
    records = train(model, data, TrainConfig(lr=0.01, momentum=0.0, epochs=10, batch_size=12))
    assert records[-1]["loss"] < records[0]["loss"] - 0.02
    assert set(records[0]) == {"epoch", "step", "loss", "accuracy"}


def test_nonfinite_loss_aborts():
    data = toy_classification()
    model = POIRot(ModelConfig(**SMALL))
    model.children["fc"].params["bias"].value[0] = np.nan
    with pytest.raises(TrainingError):
        train(model, data, TrainConfig(epochs=1))


def test_empty_datasets():
    model = POIRot(ModelConfig(**SMALL))
    with pytest.raises(EmptyError):
        train(model, Dataset([], []), TrainConfig())
    with pytest.raises(EmptyError):
        evaluate(model, Dataset([], []))


def test_evaluate_segmentation_per_category(monkeypatch):
    rng = np.random.default_rng(0)
    clouds = []
    for _ in range(2):
        pts, lab = barbell(20, rng)
        clouds.append(PointCloud(pts, labels=lab))
    model = POIRot(ModelConfig(task="segmentation", **SMALL))
    fixed = [np.array([[1.0, 0.0]] * 20), np.array([[0.0, 1.0]] * 20)]
    monkeypatch.setattr(POIRot, "forward_batch", lambda self, preps: fixed[: len(preps)] if len(preps) == 2 else fixed)
    res = evaluate(model, Dataset(clouds, categories=["a", "b"]))
    # all-0 predictions: IoU of part 0 is its share of points, part 1 scores 0
    share = [np.mean(c.labels == 0) for c in clouds]
    assert abs(res["miou_per_category"]["a"] - share[0] / 2) < 1e-15
    assert abs(res["miou_per_category"]["b"] - (1 - share[1]) / 2) < 1e-15
    assert abs(res["miou"] - (share[0] + 1 - share[1]) / 4) < 1e-15


# -- checkpoints -------------------------------------------------------------


@pytest.mark.parametrize("task", ["classification", "segmentation"])
def test_checkpoint_round_trip(tmp_path, rng, task):
    model = POIRot(ModelConfig(task=task, norm="batch", **SMALL))
    cloud = PointCloud(small_cloud(rng, 20).points, labels=(rng.uniform(size=20) > 0.5).astype(int))
    data = Dataset([cloud, cloud], [0, 1])
    train(model, data, TrainConfig(lr=0.01, epochs=1, batch_size=2))
    model.eval()
    path = tmp_path / "m.bin"
    save_checkpoint(path, model)
    back = load_checkpoint(path)
    back.eval()
    assert back.config == model.config and back.step == model.step
    fwd = forward_classify if task == "classification" else forward_segment
    np.testing.assert_array_equal(fwd(back, cloud), fwd(model, cloud))
    assert checkpoint_bytes(back) == path.read_bytes()


def test_checkpoint_corruption(rng):
    model = POIRot(ModelConfig(**SMALL))
    data = checkpoint_bytes(model)
    with pytest.raises(ParseError):
        load_checkpoint_bytes(b"X" + data)
    with pytest.raises(ParseError):
        load_checkpoint_bytes(data.replace(b"version = 1", b"version = 9"))
    with pytest.raises((ParseError, ValueError)):
        load_checkpoint_bytes(data[:-20])
