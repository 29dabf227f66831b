import json

import numpy as np
import pytest

from poirot.cli import image_to_cloud, main, normalize_unit, resolve, resolved_text
from poirot.datasets import arc_atlas
from poirot.errors import ConfigError, EmptyError
from poirot.geometry import PointCloud
from poirot.io import format_xyz, parse_xyz, signal_from_bytes
from poirot.model import load_checkpoint
from poirot.plotting import read_bmp

TINY_TRAIN = """\
bandwidth = 4
samples = 8
widths = 4,6
core_size = 2
n_shapes = 8
n_train = 6
points = 24
epochs = 2
batch_size = 3
lr = 0.02
"""


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def write_cloud(path, pts):
    path.write_text(format_xyz(PointCloud(pts)))
    return path


# -- convert -----------------------------------------------------------------


def test_image_to_cloud_examples(rng):
    with pytest.raises(EmptyError, match="no foreground pixels"):
        image_to_cloud(np.zeros((4, 4)))
    img = np.zeros((5, 5))
    img[2, 3] = 1.0
    np.testing.assert_array_equal(image_to_cloud(img, 1).points, [[0.0, 0.0, 0.0]])
    img = rng.uniform(size=(12, 12))
    fg = int(np.sum(img > 0.5 * img.max()))
    for n in (10, 1000):
        a = image_to_cloud(img, n, seed=4)
        assert len(a) == min(n, fg)
        np.testing.assert_array_equal(a.points, image_to_cloud(img, n, seed=4).points)
    assert abs(image_to_cloud(img, 1000).diameter - 1.0) < 1e-12


def test_convert_mesh_and_image(tmp_path, capsys):
    off = tmp_path / "m.off"
    off.write_text("OFF\n3 0 0\n0 0 0\n4 0 0\n0 3 0\n")
    code, out, _ = run(capsys, "convert", off, "--out", tmp_path / "o.xyz")
    assert code == 0 and "3 points" in out
    c = parse_xyz((tmp_path / "o.xyz").read_text())
    assert abs(c.diameter - 1.0) < 1e-12
    np.testing.assert_allclose(c.points.mean(axis=0), 0.0, atol=1e-15)
    grid = tmp_path / "digit.txt"
    grid.write_text("0 0 0\n0 9 0\n0 0 0\n")
    code, _, _ = run(capsys, "convert", grid, "--out", tmp_path / "d", "--points", 5)
    assert code == 0
    assert parse_xyz((tmp_path / "d" / "digit.xyz").read_text()).points.tolist() == [[0.0, 0.0, 0.0]]
    assert "points = 5" in (tmp_path / "d" / "resolved_config.txt").read_text()


def test_convert_errors(tmp_path, capsys):
    blank = tmp_path / "blank.txt"
    blank.write_text("0 0\n0 0\n")
    code, _, err = run(capsys, "convert", blank, "--out", tmp_path / "x.xyz")
    assert code == 1 and err.startswith("error: empty: no foreground pixels")
    bad = tmp_path / "bad.xyz"
    bad.write_text("0 0 0\n1 2\n")
    code, _, err = run(capsys, "convert", bad, "--out", tmp_path / "y.xyz")
    assert code == 3 and err.startswith("error: parse:") and ":2:" in err
    code, _, err = run(capsys, "convert", tmp_path / "missing.xyz", "--out", tmp_path / "z.xyz")
    assert code == 4 and err.startswith("error: io:")
    assert len(err.strip().splitlines()) == 1


# -- respond -----------------------------------------------------------------


def test_respond_two_point_peak(tmp_path, capsys):
    cloud = write_cloud(tmp_path / "two.xyz", [[0.0, 0, 0], [1.0, 0, 0]])
    out = tmp_path / "r"
    code, text, _ = run(capsys, "respond", cloud, "--center", 0, "--bandwidth", 8, "--radius", 0.1, "--out", out)
    assert code == 0
    sig = signal_from_bytes((out / "response.bin").read_bytes())
    i, j = np.unravel_index(np.argmax(sig.values[0]), sig.values[0].shape)
    d = sig.grid.directions[i, j]
    # the heat-map maximum is the grid direction closest to +x
    assert np.argmax(sig.grid.directions.reshape(-1, 3) @ [1.0, 0, 0]) == i * 16 + j
    assert d[0] > 0.99
    assert read_bmp((out / "response.bmp").read_bytes()).shape == (128, 128, 3)
    assert (out / "response.png").read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    assert (out / "response.csv").read_text().count("\n") == 257
    assert "peak direction" in text


def test_respond_is_reproducible_from_resolved_config(tmp_path, capsys):
    cloud = write_cloud(tmp_path / "c.xyz", np.random.default_rng(0).normal(size=(20, 3)))
    run(capsys, "respond", cloud, "--bandwidth", 3, "--out", tmp_path / "a")
    code, _, _ = run(capsys, "respond", "--config", tmp_path / "a" / "resolved_config.txt", "--out", tmp_path / "b")
    assert code == 0
    for name in ("response.bin", "response.csv", "response.bmp", "response.png", "resolved_config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes(), name


# -- train / eval ------------------------------------------------------------


def test_train_eval_round_trip(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(TINY_TRAIN)
    code, out, _ = run(capsys, "train", "--config", cfg, "--seed", 3, "--out", tmp_path / "t")
    assert code == 0
    record = json.loads(out)
    assert record["epoch"] == 1 and record["params"] < 10_000
    lines = (tmp_path / "t" / "metrics.jsonl").read_text().splitlines()
    assert [json.loads(x)["epoch"] for x in lines] == [0, 1]
    assert (tmp_path / "t" / "training.png").exists()
    # the resolved config reproduces the run byte for byte
    code, _, _ = run(capsys, "train", "--config", tmp_path / "t" / "resolved_config.txt", "--out", tmp_path / "u")
    assert code == 0
    for name in ("metrics.jsonl", "checkpoint.bin", "training.png", "resolved_config.txt"):
        assert (tmp_path / "t" / name).read_bytes() == (tmp_path / "u" / name).read_bytes(), name
    ev = tmp_path / "eval.cfg"
    ev.write_text("n_shapes = 8\nn_train = 6\npoints = 24\nseed = 3\n")
    code, _, _ = run(capsys, "eval", tmp_path / "t" / "checkpoint.bin", "--config", ev, "--out", tmp_path / "e")
    assert code == 0
    metrics = json.loads((tmp_path / "e" / "metrics.json").read_text())
    assert metrics["n"] == 2 and 0.0 <= metrics["accuracy"] <= 1.0


def test_train_with_zero_lr_keeps_initialization(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(TINY_TRAIN.replace("lr = 0.02", "lr = 0.0") + "norm = none\n")
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "t")[0] == 0
    from poirot.model import POIRot

    trained = load_checkpoint(tmp_path / "t" / "checkpoint.bin")
    fresh = POIRot(trained.config)
    for (k, p), (_, q) in zip(trained.named_parameters(), fresh.named_parameters()):
        np.testing.assert_array_equal(p.value, q.value, err_msg=k)


def test_eval_after_single_sample_overfit(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    text = TINY_TRAIN.replace("n_shapes = 8", "n_shapes = 2").replace("n_train = 6", "n_train = 1")
    text = text.replace("epochs = 2", "epochs = 60").replace("batch_size = 3", "batch_size = 1")
    cfg.write_text(text)
    assert run(capsys, "train", "--config", cfg, "--out", tmp_path / "t")[0] == 0
    ev = tmp_path / "eval.cfg"
    ev.write_text("n_shapes = 2\nn_train = 1\npoints = 24\nsplit = train\n")
    code, out, _ = run(capsys, "eval", tmp_path / "t" / "checkpoint.bin", "--config", ev, "--out", tmp_path / "e")
    assert code == 0 and json.loads(out)["accuracy"] == 1.0


def test_train_segmentation_flag(tmp_path, capsys):
    cfg = tmp_path / "train.cfg"
    cfg.write_text(TINY_TRAIN.replace("epochs = 2", "epochs = 1"))
    code, out, _ = run(capsys, "train", "--config", cfg, "--task", "segmentation", "--out", tmp_path / "s")
    assert code == 0 and "miou" in json.loads(out)


# -- detect ------------------------------------------------------------------


def test_detect_outputs(tmp_path, capsys):
    atlas = arc_atlas(16)
    scene = np.vstack([atlas + [10.0, 0, 0], 0.4 * np.random.default_rng(0).normal(size=(16, 3))])
    sp = write_cloud(tmp_path / "scene.xyz", scene)
    ap = write_cloud(tmp_path / "atlas.xyz", atlas)
    cfg = tmp_path / "d.cfg"
    cfg.write_text("steps = 2\n")
    code, out, _ = run(capsys, "detect", sp, ap, "--config", cfg, "--bandwidth", 4, "--out", tmp_path / "d")
    assert code == 0
    members = [int(x) for x in (tmp_path / "d" / "members.txt").read_text().split()]
    assert sorted(members) == list(range(16))
    probs = [json.loads(x) for x in (tmp_path / "d" / "probabilities.jsonl").read_text().splitlines()]
    assert abs(sum(p["probability"] for p in probs) - 1.0) < 1e-12
    labeled = parse_xyz((tmp_path / "d" / "labeled.xyz").read_text())
    assert labeled.labels.sum() == 16 and labeled.labels[:16].all()
    assert (tmp_path / "d" / "detection.png").exists()
    assert json.loads(out)["anchor"] < 16


# -- configuration and errors ------------------------------------------------


def test_resolve_rejects_unknown_keys():
    with pytest.raises(ConfigError):
        resolve("respond", {"bandwith": "4"})
    (s,) = resolve("respond", {"bandwidth": "4"})
    assert s.bandwidth == 4
    assert "bandwidth = 4" in resolved_text([s])


@pytest.mark.parametrize(
    "argv, code, category",
    [
        ([], 2, "usage"),
        (["respond", "--out", "x", "--task", "classification"], 2, "usage"),
        (["train", "--out", "OUT", "--bandwidth", "1"], 2, "config"),
        (["respond", "--out", "OUT"], 2, "usage"),
    ],
)
def test_error_categories(tmp_path, capsys, argv, code, category):
    argv = [str(tmp_path / "o") if a == "OUT" else a for a in argv]
    got, _, err = run(capsys, *argv)
    assert got == code
    assert err.startswith(f"error: {category}:")


def test_bad_config_file(tmp_path, capsys):
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bandwidth = 4\nnonsense\n")
    code, _, err = run(capsys, "respond", "x.xyz", "--config", cfg, "--out", tmp_path / "o")
    assert code == 3 and ":2:" in err


def test_threads_env(tmp_path, capsys, monkeypatch):
    cloud = write_cloud(tmp_path / "c.xyz", [[0.0, 0, 0], [1.0, 0, 0]])
    monkeypatch.setenv("POIROT_THREADS", "1")
    assert run(capsys, "respond", cloud, "--bandwidth", 2, "--out", tmp_path / "o")[0] == 0
    monkeypatch.setenv("POIROT_THREADS", "zero")
    code, _, err = run(capsys, "respond", cloud, "--bandwidth", 2, "--out", tmp_path / "o")
    assert code == 2 and err.startswith("error: config:")


def test_normalize_unit_single_point():
    c = normalize_unit(PointCloud([[3.0, 4.0, 5.0]]))
    np.testing.assert_array_equal(c.points, [[0.0, 0.0, 0.0]])
