import os
import struct

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from poirot import config as cfgmod
from poirot.errors import ConfigError, ParseError, ShapeError
from poirot.geometry import PointCloud, geodesic_affinity
from poirot.io import (
    affinity_to_csv,
    atomic_write,
    features_to_csv,
    format_xyz,
    pack_envelope,
    parse_image_grid,
    parse_off,
    parse_ply,
    parse_xyz,
    read_cloud,
    signal_from_bytes,
    signal_to_bytes,
    signal_to_csv,
    spectrum_from_bytes,
    spectrum_to_bytes,
    tensor_from_stream,
    tensor_to_bytes,
    unpack_envelope,
)
from poirot.model import ModelConfig, TrainConfig
from poirot.signals import S2Spectrum, SO3Spectrum, SphereGrid, SphericalSignal, degree_mask_s2, degree_mask_so3

# -- point-cloud formats -----------------------------------------------------


def test_parse_xyz_columns():
    c = parse_xyz("# header\n0 0 0\n1 2 3\n")
    np.testing.assert_array_equal(c.points, [[0, 0, 0], [1, 2, 3]])
    c = parse_xyz("0 0 0 0 0 1 2\n1 1 1 0 2 0 5\n")
    np.testing.assert_array_equal(c.normals, [[0, 0, 1], [0, 1, 0]])
    np.testing.assert_array_equal(c.labels, [2, 5])
    c = parse_xyz("0 0 0 7\n")
    assert c.normals is None and list(c.labels) == [7]


@pytest.mark.parametrize(
    "text, line",
    [
        ("0 0 0\n1 2\n", 2),
        ("0 0 0\n\n1 nan 2\n", 3),
        ("0 0 inf\n", 1),
        ("0 0 0\n1 1 1 1\n", 2),
        ("0 0 0 x\n", 1),
        ("0 0 0 0 0 0\n", 1),
    ],
)
def test_parse_xyz_errors_carry_line_numbers(text, line):
    with pytest.raises(ParseError) as exc:
        parse_xyz(text, path="a.xyz")
    assert exc.value.line == line
    assert f"a.xyz:{line}:" in str(exc.value)


def test_parse_off():
    text = "OFF\n# comment\n4 1 0\n0 0 0\n1 0 0\n0 1 0\n0 0 1\n3 0 1 2\n"
    c = parse_off(text)
    assert len(c) == 4
    np.testing.assert_array_equal(c.points[3], [0, 0, 1])
    c = parse_off("OFF 2 0 0\n0 0 0\n1 1 1\n")
    assert len(c) == 2
    c = parse_off("NOFF\n1 0 0\n0 0 0 0 0 2\n")
    np.testing.assert_array_equal(c.normals, [[0, 0, 1]])


@pytest.mark.parametrize(
    "text, line",
    [
        ("OF\n1 0 0\n0 0 0\n", 1),
        ("OFF\n2 0 0\n0 0 0\n", 3),
        ("OFF\n1 0 0\n0 0\n", 3),
        ("OFF\n1 0 0\n0 0 nan\n", 3),
        ("OFF\nx 0 0\n", 2),
    ],
)
def test_parse_off_errors(text, line):
    with pytest.raises(ParseError) as exc:
        parse_off(text)
    assert exc.value.line == line


PLY = """ply
format ascii 1.0
comment toy
element vertex 3
property float x
property float y
property float z
property int label
element face 1
property list uchar int vertex_indices
end_header
0 0 0 1
1 0 0 0
0 1 0 1
3 0 1 2
"""


def test_parse_ply():
    c = parse_ply(PLY)
    assert len(c) == 3
    np.testing.assert_array_equal(c.labels, [1, 0, 1])


def test_parse_ply_faces_first():
    text = PLY.replace("element vertex 3", "element face 1\nproperty list uchar int v\nelement vertex 3", 1)
    text = text.replace("element face 1\nproperty list uchar int vertex_indices\n", "", 1)
    body = text.split("end_header\n")
    lines = body[1].splitlines()
    text = body[0] + "end_header\n" + "\n".join([lines[-1]] + lines[:-1]) + "\n"
    np.testing.assert_array_equal(parse_ply(text).points[1], [1, 0, 0])


@pytest.mark.parametrize(
    "mutate, line",
    [
        (lambda t: t.replace("ply\n", "plx\n", 1), 1),
        (lambda t: t.replace("ascii", "binary_little_endian"), 2),
        (lambda t: t.replace("1 0 0 0\n", "1 0 nan 0\n"), 13),
        (lambda t: t.replace("1 0 0 0\n", "1 0\n"), 13),
        (lambda t: t.replace("end_header\n", "bogus\nend_header\n"), 11),
    ],
)
def test_parse_ply_errors(mutate, line):
    with pytest.raises(ParseError) as exc:
        parse_ply(mutate(PLY))
    assert exc.value.line == line


def test_read_cloud_dispatch(tmp_path):
    p = tmp_path / "a.off"
    p.write_text("OFF\n1 0 0\n1 2 3\n")
    np.testing.assert_array_equal(read_cloud(p).points, [[1, 2, 3]])
    q = tmp_path / "a.obj"
    q.write_text("v 0 0 0\n")
    with pytest.raises(ParseError):
        read_cloud(q)


@given(st.integers(0, 10_000))
def test_xyz_round_trip(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    nrm = rng.normal(size=(n, 3))
    nrm /= np.linalg.norm(nrm, axis=1, keepdims=True)
    c = PointCloud(rng.normal(size=(n, 3)) * 100, nrm, rng.integers(0, 5, n))
    back = parse_xyz(format_xyz(c))
    np.testing.assert_array_equal(back.points, c.points)
    np.testing.assert_allclose(back.normals, c.normals, atol=1e-15)
    np.testing.assert_array_equal(back.labels, c.labels)


def test_parse_image_grid():
    img = parse_image_grid("0 1 2\n3 4 5\n")
    assert img.shape == (2, 3)
    with pytest.raises(ParseError) as exc:
        parse_image_grid("0 1\n0 1 2\n")
    assert exc.value.line == 2


# -- binary envelope ---------------------------------------------------------


def test_envelope_layout():
    data = pack_envelope([2, 1], np.array([1.5, -2.0]))
    assert data[:16] == struct.pack("<qq", 2, 1)
    assert data[16:] == struct.pack("<dd", 1.5, -2.0)
    header, body = unpack_envelope(data, 2)
    assert list(header) == [2, 1]
    np.testing.assert_array_equal(body, [1.5, -2.0])
    with pytest.raises(ParseError):
        unpack_envelope(data[:-3], 2)


def test_signal_round_trip(rng):
    g = SphereGrid.build(3)
    s = SphericalSignal(g, rng.normal(size=(2, 6, 6)))
    data = signal_to_bytes(s)
    assert len(data) == 16 + 8 * 72
    back = signal_from_bytes(data)
    np.testing.assert_array_equal(back.values, s.values)
    with pytest.raises(ShapeError):
        signal_from_bytes(data[:-8])


def test_spectrum_round_trip(rng):
    B = 3
    c = (rng.normal(size=(2, B, 2 * B - 1)) + 1j * rng.normal(size=(2, B, 2 * B - 1))) * degree_mask_s2(B)
    back = spectrum_from_bytes(spectrum_to_bytes(S2Spectrum(B, c)))
    np.testing.assert_array_equal(back.coeffs, c)
    m = degree_mask_so3(B)
    c3 = (rng.normal(size=(1,) + m.shape) + 1j * rng.normal(size=(1,) + m.shape)) * m
    back = spectrum_from_bytes(spectrum_to_bytes(SO3Spectrum(B, c3)), kind="so3")
    np.testing.assert_array_equal(back.coeffs, c3)


def test_tensor_stream(rng):
    a, b = rng.normal(size=(2, 3)), rng.normal(size=(4,))
    buf = tensor_to_bytes(a) + tensor_to_bytes(b)
    x, pos = tensor_from_stream(buf)
    y, end = tensor_from_stream(buf, pos)
    np.testing.assert_array_equal(x, a)
    np.testing.assert_array_equal(y, b)
    assert end == len(buf)
    with pytest.raises(ParseError):
        tensor_from_stream(buf[:20])


# -- CSV ---------------------------------------------------------------------


def test_csv_exports(rng):
    g = SphereGrid.build(2)
    s = SphericalSignal(g, rng.normal(size=(1, 4, 4)))
    lines = signal_to_csv(s).splitlines()
    assert lines[0] == "channel,polar_index,azimuth_index,theta,phi,value"
    assert len(lines) == 17
    assert float(lines[5].split(",")[-1]) == s.values[0, 1, 0]
    f = features_to_csv(np.arange(6.0).reshape(3, 2))
    assert f.splitlines()[2] == "1,2.0,3.0"
    aff = geodesic_affinity(PointCloud([[0, 0, 0], [5, 0, 0]]), 1.0)
    assert affinity_to_csv(aff) == "0.0,inf\ninf,0.0\n"


# -- atomic writes and config text -------------------------------------------


def test_atomic_write(tmp_path):
    p = tmp_path / "sub" / "x.txt"
    atomic_write(p, "hello")
    atomic_write(p, b"bye")
    assert p.read_bytes() == b"bye"
    assert [f.name for f in p.parent.iterdir()] == ["x.txt"]
    mask = os.umask(0)
    os.umask(mask)
    assert p.stat().st_mode & 0o777 == 0o666 & ~mask


def test_config_text_round_trip():
    cfg = ModelConfig(task="segmentation", widths=(4, 8), radius=0.25)
    text = cfgmod.to_text(cfg)
    assert text.splitlines() == sorted(text.splitlines())
    back = cfgmod.from_mapping(ModelConfig, cfgmod.parse_config_text(text))
    assert back == cfg


def test_config_errors():
    with pytest.raises(ParseError) as exc:
        cfgmod.parse_config_text("a = 1\nb\n")
    assert exc.value.line == 2
    with pytest.raises(ParseError):
        cfgmod.parse_config_text("a = 1\na = 2\n")
    with pytest.raises(ConfigError):
        cfgmod.from_mapping(TrainConfig, {"learning_rate": "1"})
    with pytest.raises(ConfigError):
        cfgmod.from_mapping(TrainConfig, {"lr": "fast"})
    with pytest.raises(ConfigError):
        cfgmod.from_mapping(TrainConfig, {"lr": "-1"})
