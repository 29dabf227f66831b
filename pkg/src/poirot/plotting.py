"""Figures: an uncompressed BMP heat map writer and matplotlib PNG renderings."""

import io
import struct

import numpy as np

from .io import atomic_write

# control points of a dark-to-bright perceptual ramp (approximately "inferno")
_RAMP = np.array(
    [
        [0, 0, 4],
        [40, 11, 84],
        [101, 21, 110],
        [159, 42, 99],
        [212, 72, 66],
        [245, 125, 21],
        [250, 193, 39],
        [252, 255, 164],
    ],
    dtype=float,
)


def colorize(values):
    """Map a 2-D array to RGB bytes by its own min/max (constant arrays map to the darkest color)."""
    v = np.asarray(values, dtype=float)
    lo, hi = v.min(), v.max()
    t = np.zeros_like(v) if hi <= lo else (v - lo) / (hi - lo)
    pos = t * (len(_RAMP) - 1)
    i = np.minimum(pos.astype(int), len(_RAMP) - 2)
    f = (pos - i)[..., None]
    rgb = _RAMP[i] * (1 - f) + _RAMP[i + 1] * f
    return np.clip(np.round(rgb), 0, 255).astype(np.uint8)


def bmp_bytes(rgb):
    """24-bit uncompressed BMP; ``rgb`` is (H, W, 3) uint8 with row 0 at the top."""
    rgb = np.asarray(rgb, dtype=np.uint8)
    h, w, _ = rgb.shape
    row_bytes = (3 * w + 3) & ~3
    pixels = bytearray()
    pad = b"\x00" * (row_bytes - 3 * w)
    for r in range(h - 1, -1, -1):  # bottom-up rows, BGR order
        pixels += rgb[r, :, ::-1].tobytes() + pad
    header = struct.pack("<2sIHHI", b"BM", 54 + len(pixels), 0, 0, 54)
    info = struct.pack("<IiiHHIIiiII", 40, w, h, 1, 24, 0, len(pixels), 2835, 2835, 0, 0)
    return header + info + bytes(pixels)


def read_bmp(data):
    """Inverse of :func:`bmp_bytes` for 24-bit files (used by tests and tools)."""
    if data[:2] != b"BM":
        raise ValueError("not a BMP file")
    offset = struct.unpack_from("<I", data, 10)[0]
    w, h = struct.unpack_from("<ii", data, 18)
    bpp = struct.unpack_from("<H", data, 28)[0]
    if bpp != 24:
        raise ValueError("only 24-bit BMP is supported")
    row_bytes = (3 * w + 3) & ~3
    out = np.empty((h, w, 3), dtype=np.uint8)
    for r in range(h):
        start = offset + (h - 1 - r) * row_bytes
        out[r] = np.frombuffer(data, np.uint8, 3 * w, start).reshape(w, 3)[:, ::-1]
    return out


def heatmap_bmp(values, upscale=8):
    """Equirectangular heat map: rows are polar angle (north at the top), columns azimuth."""
    rgb = colorize(values)
    rgb = np.repeat(np.repeat(rgb, upscale, axis=0), upscale, axis=1)
    return bmp_bytes(rgb)


def _figure_bytes(fig):
    buf = io.BytesIO()
    fig.savefig(buf, format="png", dpi=100, metadata={"Software": None})
    import matplotlib.pyplot as plt

    plt.close(fig)
    return buf.getvalue()


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def render_response_png(path, signal, title="spherical response"):
    """One equirectangular panel per channel with a colorbar."""
    plt = _pyplot()
    C = signal.channels
    fig, axes = plt.subplots(1, C, figsize=(4.2 * C, 3.0), squeeze=False)
    extent = [0.0, 360.0, 180.0, 0.0]
    for c in range(C):
        ax = axes[0, c]
        im = ax.imshow(signal.values[c], extent=extent, aspect="auto", cmap="inferno", interpolation="nearest")
        ax.set_xlabel("azimuth (deg)")
        ax.set_ylabel("polar angle (deg)")
        ax.set_title(f"{title}, channel {c}" if C > 1 else title)
        fig.colorbar(im, ax=ax)
    fig.tight_layout()
    return atomic_write(path, _figure_bytes(fig))


def render_training_png(path, records, metric="accuracy"):
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    epochs = [r["epoch"] for r in records]
    ax.plot(epochs, [r["loss"] for r in records], marker="o", label="loss")
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    if records and metric in records[0]:
        ax2 = ax.twinx()
        ax2.plot(epochs, [r[metric] for r in records], color="tab:orange", marker="s", label=metric)
        ax2.set_ylabel(metric)
        ax2.set_ylim(0, 1.05)
    ax.set_title("training")
    fig.tight_layout()
    return atomic_write(path, _figure_bytes(fig))


def render_detection_png(path, cloud, result):
    """Scene points colored by selection, plus the sorted candidate probabilities."""
    plt = _pyplot()
    fig = plt.figure(figsize=(8, 3.5))
    ax = fig.add_subplot(1, 2, 1, projection="3d")
    sel = np.zeros(len(cloud), bool)
    sel[result.members] = True
    P = cloud.points
    ax.scatter(P[~sel, 0], P[~sel, 1], P[~sel, 2], s=4, c="0.6")
    ax.scatter(P[sel, 0], P[sel, 1], P[sel, 2], s=6, c="tab:red")
    ax.set_box_aspect(np.maximum(np.ptp(P, axis=0), 1e-3 * max(np.ptp(P), 1e-12)))
    ax.set_title("selected region")
    ax2 = fig.add_subplot(1, 2, 2)
    ax2.plot(np.sort(result.probabilities)[::-1], marker=".")
    ax2.set_xlabel("candidate (sorted)")
    ax2.set_ylabel("probability")
    ax2.set_title(f"entropy {result.entropy:.4f} nats")
    fig.tight_layout()
    return atomic_write(path, _figure_bytes(fig))
