"""Point-cloud file formats, the binary envelope, CSV dumps and atomic writes.

Binary envelope: little-endian int64 header words followed by the row-major
float64 body.  Sphere signals use the header ``(B, C)``; spectra add a
trailing real/imag axis of length 2 to the body.
"""

import io as _io
import math
import os
import tempfile
from pathlib import Path

import numpy as np

from .errors import ParseError, ShapeError
from .geometry import PointCloud
from .signals import S2Spectrum, SO3Spectrum, SphereGrid, SphericalSignal

LE_INT = np.dtype("<i8")
LE_FLOAT = np.dtype("<f8")


def _umask():
    mask = os.umask(0)
    os.umask(mask)
    return mask


def atomic_write(path, data):
    """Write bytes or text to ``path`` through a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.chmod(tmp, 0o666 & ~_umask())  # mkstemp creates 0600
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise
    return path


# ---------------------------------------------------------------------------
# parsing helpers


def _float(tok, lineno, path):
    try:
        v = float(tok)
    except ValueError:
        raise ParseError(f"not a number: {tok!r}", lineno, path) from None
    if not math.isfinite(v):
        raise ParseError(f"non-finite value {tok!r}", lineno, path)
    return v


def _int(tok, lineno, path):
    try:
        return int(tok)
    except ValueError:
        raise ParseError(f"not an integer: {tok!r}", lineno, path) from None


def _content_lines(text):
    """(line number, tokens) for non-blank, non-comment lines."""
    for i, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if line:
            yield i, line.split()


def _normalize_normals(normals, lines, path):
    norms = np.linalg.norm(normals, axis=1)
    bad = np.flatnonzero(norms == 0)
    if bad.size:
        raise ParseError("zero-length normal", lines[bad[0]], path)
    return normals / norms[:, None]


def parse_xyz(text, path=None):
    """Lines ``x y z [nx ny nz] [label]``."""
    rows, lines = [], []
    width = None
    for lineno, tok in _content_lines(text):
        if len(tok) not in (3, 4, 6, 7):
            raise ParseError(f"expected 3, 4, 6 or 7 columns, got {len(tok)}", lineno, path)
        if width is None:
            width = len(tok)
        elif len(tok) != width:
            raise ParseError(f"column count {len(tok)} differs from first row ({width})", lineno, path)
        ncoord = 6 if width >= 6 else 3
        vals = [_float(t, lineno, path) for t in tok[:ncoord]]
        if width in (4, 7):
            vals.append(_int(tok[-1], lineno, path))
        rows.append(vals)
        lines.append(lineno)
    if not rows:
        return PointCloud(np.zeros((0, 3)))
    arr = np.array(rows, dtype=float)
    normals = _normalize_normals(arr[:, 3:6], lines, path) if width >= 6 else None
    labels = arr[:, -1].astype(np.int64) if width in (4, 7) else None
    return PointCloud(arr[:, :3], normals, labels)


def parse_off(text, path=None):
    """ASCII OFF; only vertices are read."""
    it = iter(_content_lines(text))
    try:
        lineno, tok = next(it)
    except StopIteration:
        raise ParseError("empty OFF file", 1, path) from None
    head = tok[0]
    if not head.endswith("OFF"):
        raise ParseError(f"missing OFF header, got {head!r}", lineno, path)
    has_normals = head.startswith("N") or "N" in head[:-3]
    rest = tok[1:]
    if not rest:
        try:
            lineno, rest = next(it)
        except StopIteration:
            raise ParseError("missing vertex/face counts", lineno, path) from None
    if len(rest) < 1:
        raise ParseError("missing vertex count", lineno, path)
    nv = _int(rest[0], lineno, path)
    if nv < 0:
        raise ParseError("negative vertex count", lineno, path)
    rows, lines = [], []
    for _ in range(nv):
        try:
            lineno, tok = next(it)
        except StopIteration:
            raise ParseError(f"expected {nv} vertices, file ended after {len(rows)}", lineno, path) from None
        need = 6 if has_normals else 3
        if len(tok) < need:
            raise ParseError(f"vertex needs {need} values, got {len(tok)}", lineno, path)
        rows.append([_float(t, lineno, path) for t in tok[:need]])
        lines.append(lineno)
    arr = np.array(rows, dtype=float).reshape(-1, 6 if has_normals else 3)
    normals = _normalize_normals(arr[:, 3:], lines, path) if has_normals and len(arr) else None
    return PointCloud(arr[:, :3], normals)


def parse_ply(text, path=None):
    """ASCII PLY; the vertex element's x, y, z (and nx, ny, nz, label if present)."""
    lines = text.splitlines()
    if not lines or lines[0].strip() != "ply":
        raise ParseError("missing 'ply' magic", 1, path)
    elements = []  # (name, count, [property names])
    fmt_seen = False
    body_start = None
    for i in range(1, len(lines)):
        tok = lines[i].split()
        lineno = i + 1
        if not tok or tok[0] in ("comment", "obj_info"):
            continue
        if tok[0] == "format":
            if len(tok) < 2 or tok[1] != "ascii":
                raise ParseError(f"only ascii PLY is supported, got {' '.join(tok[1:])!r}", lineno, path)
            fmt_seen = True
        elif tok[0] == "element":
            if len(tok) != 3:
                raise ParseError("malformed element line", lineno, path)
            elements.append((tok[1], _int(tok[2], lineno, path), []))
        elif tok[0] == "property":
            if not elements:
                raise ParseError("property before any element", lineno, path)
            elements[-1][2].append(tok[-1] if tok[1] != "list" else None)
        elif tok[0] == "end_header":
            body_start = i + 1
            break
        else:
            raise ParseError(f"unexpected header keyword {tok[0]!r}", lineno, path)
    if body_start is None:
        raise ParseError("missing end_header", len(lines), path)
    if not fmt_seen:
        raise ParseError("missing format line", 2, path)
    pos = body_start
    for name, count, props in elements:
        if name != "vertex":
            pos += count
            continue
        for axis in ("x", "y", "z"):
            if axis not in props:
                raise ParseError(f"vertex element lacks property {axis!r}", body_start, path)
        ix = [props.index(a) for a in ("x", "y", "z")]
        inrm = [props.index(a) for a in ("nx", "ny", "nz")] if all(a in props for a in ("nx", "ny", "nz")) else None
        ilab = props.index("label") if "label" in props else None
        pts, nrm, lab, lns = [], [], [], []
        for _ in range(count):
            if pos >= len(lines):
                raise ParseError(f"expected {count} vertices, file ended", pos, path)
            tok = lines[pos].split()
            lineno = pos + 1
            pos += 1
            if len(tok) < len(props):
                raise ParseError(f"vertex needs {len(props)} values, got {len(tok)}", lineno, path)
            pts.append([_float(tok[j], lineno, path) for j in ix])
            if inrm:
                nrm.append([_float(tok[j], lineno, path) for j in inrm])
            if ilab is not None:
                lab.append(_int(tok[ilab], lineno, path))
            lns.append(lineno)
        normals = _normalize_normals(np.array(nrm), lns, path) if inrm and nrm else None
        return PointCloud(np.array(pts).reshape(-1, 3), normals, np.array(lab) if ilab is not None else None)
    raise ParseError("no vertex element", body_start, path)


def parse_image_grid(text, path=None):
    """Whitespace-separated pixel intensities, one image row per line."""
    rows = []
    width = None
    for lineno, tok in _content_lines(text):
        vals = [_float(t, lineno, path) for t in tok]
        if width is None:
            width = len(vals)
        elif len(vals) != width:
            raise ParseError(f"row has {len(vals)} pixels, expected {width}", lineno, path)
        rows.append(vals)
    if not rows:
        raise ParseError("empty image", 1, path)
    return np.array(rows, dtype=float)


FORMATS = {"xyz": parse_xyz, "off": parse_off, "ply": parse_ply}


def detect_format(path):
    suffix = Path(path).suffix.lower().lstrip(".")
    if suffix in ("txt", "img", "pgm_txt"):
        return "image"
    return suffix


def read_cloud(path, fmt=None):
    fmt = (fmt or detect_format(path)).lower()
    if fmt not in FORMATS:
        raise ParseError(f"unsupported point-cloud format {fmt!r}", path=path)
    text = Path(path).read_text()
    return FORMATS[fmt](text, path=str(path))


def format_xyz(cloud, labels=None):
    labels = cloud.labels if labels is None else np.asarray(labels)
    buf = _io.StringIO()
    for i, p in enumerate(cloud.points):
        cols = [repr(float(v)) for v in p]
        if cloud.normals is not None:
            cols += [repr(float(v)) for v in cloud.normals[i]]
        if labels is not None:
            cols.append(str(int(labels[i])))
        buf.write(" ".join(cols) + "\n")
    return buf.getvalue()


def write_xyz(path, cloud, labels=None):
    return atomic_write(path, format_xyz(cloud, labels))


# ---------------------------------------------------------------------------
# binary envelope


def pack_envelope(header, body):
    header = np.asarray(header, dtype=LE_INT)
    body = np.ascontiguousarray(body, dtype=LE_FLOAT)
    return header.tobytes() + body.tobytes()


def unpack_envelope(data, n_header):
    need = 8 * n_header
    if len(data) < need:
        raise ParseError(f"envelope shorter than its {n_header}-word header")
    header = np.frombuffer(data[:need], dtype=LE_INT).astype(int)
    if (len(data) - need) % 8:
        raise ParseError("envelope body is not a whole number of float64 values")
    body = np.frombuffer(data[need:], dtype=LE_FLOAT).astype(float)
    return header, body


def signal_to_bytes(signal):
    return pack_envelope([signal.bandwidth, signal.channels], signal.values)


def signal_from_bytes(data):
    (B, C), body = unpack_envelope(data, 2)
    if B < 2 or C < 1 or body.size != C * 4 * B * B:
        raise ShapeError(f"envelope header (B={B}, C={C}) does not match {body.size} values")
    return SphericalSignal(SphereGrid.build(B), body.reshape(C, 2 * B, 2 * B))


def spectrum_to_bytes(spectrum):
    c = spectrum.coeffs
    return pack_envelope([spectrum.bandwidth, spectrum.channels], np.stack([c.real, c.imag], -1))


def spectrum_from_bytes(data, kind="s2"):
    (B, C), body = unpack_envelope(data, 2)
    M = 2 * B - 1
    tail = (B, M) if kind == "s2" else (B, M, M)
    if body.size != C * int(np.prod(tail)) * 2:
        raise ShapeError(f"envelope header (B={B}, C={C}) does not match {body.size} values")
    arr = body.reshape((C,) + tail + (2,))
    coeffs = arr[..., 0] + 1j * arr[..., 1]
    return S2Spectrum(B, coeffs) if kind == "s2" else SO3Spectrum(B, coeffs)


def tensor_to_bytes(array):
    """Shape-prefixed envelope: ndim, shape..., values."""
    a = np.asarray(array, dtype=float)
    return pack_envelope([a.ndim, *a.shape], a)


def tensor_from_stream(buf, offset=0):
    """Read one shape-prefixed tensor from ``buf`` starting at ``offset``."""
    if offset + 8 > len(buf):
        raise ParseError("truncated tensor header")
    ndim = int(np.frombuffer(buf, dtype=LE_INT, count=1, offset=offset)[0])
    if ndim < 0 or ndim > 16:
        raise ParseError(f"implausible tensor rank {ndim}")
    if offset + 8 * (1 + ndim) > len(buf):
        raise ParseError("truncated tensor shape")
    shape = tuple(int(s) for s in np.frombuffer(buf, dtype=LE_INT, count=ndim, offset=offset + 8))
    start = offset + 8 * (1 + ndim)
    n = int(np.prod(shape, dtype=int))
    if start + 8 * n > len(buf):
        raise ParseError("truncated tensor body")
    values = np.frombuffer(buf, dtype=LE_FLOAT, count=n, offset=start).astype(float).reshape(shape)
    return values, start + 8 * n


def signal_to_csv(signal):
    """Rows ``channel,polar_index,azimuth_index,theta,phi,value``."""
    g = signal.grid
    buf = _io.StringIO()
    buf.write("channel,polar_index,azimuth_index,theta,phi,value\n")
    for c in range(signal.channels):
        for a in range(len(g.theta)):
            for b in range(len(g.phi)):
                buf.write(f"{c},{a},{b},{float(g.theta[a])!r},{float(g.phi[b])!r},{float(signal.values[c, a, b])!r}\n")
    return buf.getvalue()


def features_to_csv(values):
    """Rows ``index,v0,...,v{d-1}``."""
    values = np.asarray(values, dtype=float)
    buf = _io.StringIO()
    buf.write("index," + ",".join(f"v{j}" for j in range(values.shape[1])) + "\n")
    for i, row in enumerate(values):
        buf.write(f"{i}," + ",".join(repr(float(v)) for v in row) + "\n")
    return buf.getvalue()


def format_distance(d):
    return "inf" if math.isinf(d) else repr(float(d))


def affinity_to_csv(affinity):
    return "".join(",".join(format_distance(v) for v in row) + "\n" for row in affinity.distances)
