"""Sample export: tiled PGM images and 2-D point lists."""

import math

import numpy as np

FORMATS = ("pgm-grid", "csv-points")


def _images(batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim == 4 and x.shape[1] == 1:
        x = x[:, 0]
    if x.ndim != 3:
        raise ValueError(f"pgm-grid needs (N, H, W) or (N, 1, H, W) samples, got shape {x.shape}")
    return x


def tile(batch, fill=-1.0):
    """Tile N images into a ceil(sqrt(N))-wide square grid; empty cells get ``fill``."""
    x = _images(batch)
    n, h, w = x.shape
    side = max(1, math.ceil(math.sqrt(n)))
    grid = np.full((side * h, side * w), fill, dtype=np.float64)
    for i in range(n):
        r, c = divmod(i, side)
        grid[r * h:(r + 1) * h, c * w:(c + 1) * w] = x[i]
    return grid


def to_bytes(values):
    """Map [-1, 1] to 0..255 with clamping."""
    v = np.clip((np.asarray(values, dtype=np.float64) + 1.0) * 127.5, 0.0, 255.0)
    return np.floor(v + 0.5).astype(np.uint8)


def write_pgm(path, grid):
    pix = to_bytes(grid)
    h, w = pix.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pix.tobytes())


def read_pgm(path):
    """Pixel array of a binary P5 file written by :func:`write_pgm`."""
    with open(path, "rb") as fh:
        raw = fh.read()
    head = raw.split(b"\n", 3)
    if head[0] != b"P5" or len(head) < 4:
        raise ValueError(f"{path}: not a binary PGM")
    w, h = (int(v) for v in head[1].split())
    return np.frombuffer(head[3], dtype=np.uint8).reshape(h, w)


def write_points(path, batch):
    x = np.asarray(batch, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2:
        raise ValueError(f"csv-points needs (N, 2) samples, got shape {x.shape}")
    with open(path, "w") as fh:
        for a, b in x.tolist():
            fh.write(f"{a!r},{b!r}\n")


def read_points(path):
    return np.loadtxt(path, delimiter=",", ndmin=2)


def export_samples(batch, path, format="auto"):
    """Write ``batch`` to ``path`` as a PGM grid or as ``x,y`` rows; returns the format used."""
    x = np.asarray(batch)
    if format == "auto":
        format = "csv-points" if x.ndim == 2 else "pgm-grid"
    if format == "pgm-grid":
        write_pgm(path, tile(x))
    elif format == "csv-points":
        write_points(path, x)
    else:
        raise ValueError(f"unknown export format {format!r}; expected one of {FORMATS}")
    return format
