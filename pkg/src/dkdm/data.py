"""Procedural datasets, their on-disk format, and the closed-form Gaussian denoiser.

Dataset file (``.dkds``): five ASCII header lines

    DKDS v1
    kind=<kind>
    n=<count>
    dims=<d1,d2,...>
    seed=<int>

followed by ``n * prod(dims)`` little-endian float32 values, one sample per
record, row-major.
"""

from dataclasses import dataclass, field

import numpy as np

from dkdm import rng as rngmod
from dkdm.errors import FormatError

KINDS = ("gauss2d", "mixture2d-rings", "shapes8x8")
HEADER = b"DKDS v1"


@dataclass
class Dataset:
    kind: str
    samples: np.ndarray
    seed: int = 0
    params: dict = field(default_factory=dict)

    @property
    def n(self):
        return int(self.samples.shape[0])

    @property
    def dims(self):
        return tuple(self.samples.shape[1:])

    def __len__(self):
        return self.n


def _gauss2d(gen, n, mean=(1.0, -1.0), std=0.5):
    mean = np.asarray(mean, dtype=np.float64)
    return mean + std * gen.standard_normal((n, 2))


def _rings(gen, n, modes=8, radius=2.0, std=0.15):
    k = gen.integers(0, modes, n)
    ang = 2.0 * np.pi * k / modes
    centers = radius * np.stack([np.cos(ang), np.sin(ang)], axis=1)
    return centers + std * gen.standard_normal((n, 2))


def _shapes(gen, n, size=8):
    """Filled rectangles or plus-shaped crosses on a dark background."""
    out = np.empty((n, 1, size, size))
    for i in range(n):
        bg = gen.uniform(-1.0, -0.8)
        fg = gen.uniform(0.5, 1.0)
        img = np.full((size, size), bg)
        if gen.random() < 0.5:
            h, w = gen.integers(2, 6, 2)
            r, c = gen.integers(0, size - h + 1), gen.integers(0, size - w + 1)
            img[r:r + h, c:c + w] = fg
        else:
            r, c = gen.integers(2, size - 2, 2)
            arm = gen.integers(1, 3)
            img[r, max(c - arm - 1, 0):c + arm + 2] = fg
            img[max(r - arm - 1, 0):r + arm + 2, c] = fg
        out[i, 0] = img
    return np.clip(out, -1.0, 1.0)


def make_dataset(kind, n, seed=0, **params):
    """Draw ``n`` samples of a procedural dataset from the ``"data"`` stream of ``seed``.

    gauss2d takes ``mean`` and ``std``; mixture2d-rings takes ``modes``,
    ``radius`` and ``std``; shapes8x8 has no parameters.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    gen = seed if isinstance(seed, np.random.Generator) else rngmod.stream(seed, "data")
    if kind == "gauss2d":
        x = _gauss2d(gen, n, **params)
    elif kind == "mixture2d-rings":
        x = _rings(gen, n, **params)
    elif kind == "shapes8x8":
        x = _shapes(gen, n, **params)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}; expected one of {KINDS}")
    s = seed if isinstance(seed, (int, np.integer)) else 0
    return Dataset(kind, x.astype(np.float32), int(s), dict(params))


def save_dataset(ds, path):
    dims = ",".join(str(d) for d in ds.dims)
    head = b"\n".join([
        HEADER,
        f"kind={ds.kind}".encode(),
        f"n={ds.n}".encode(),
        f"dims={dims}".encode(),
        f"seed={ds.seed}".encode(),
    ]) + b"\n"
    with open(path, "wb") as fh:
        fh.write(head)
        fh.write(np.ascontiguousarray(ds.samples, dtype="<f4").tobytes())


def load_dataset(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    lines = raw.split(b"\n", 5)
    if len(lines) < 6 or lines[0] != HEADER:
        raise FormatError(f"{path}: not a DKDS v1 dataset")
    fields = {}
    for ln in lines[1:5]:
        key, sep, val = ln.decode("ascii", "replace").partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed header line {ln!r}")
        fields[key] = val
    try:
        n = int(fields["n"])
        dims = tuple(int(d) for d in fields["dims"].split(","))
        seed = int(fields["seed"])
        kind = fields["kind"]
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad header ({exc})") from exc
    payload = lines[5]
    need = n * int(np.prod(dims)) * 4
    if len(payload) != need:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {need}")
    samples = np.frombuffer(payload, dtype="<f4").reshape((n,) + dims).astype(np.float32)
    return Dataset(kind, samples, seed)


def analytic_teacher_eps(xt, t, m, s2, sched):
    """E[eps | x^t] when x^0 ~ N(m, s2 I).

    sqrt(1 - abar) (x^t - sqrt(abar) m) / (abar s2 + 1 - abar), with abar taken
    at ``t`` (scalar or one per row of ``xt``).
    """
    if s2 <= 0:
        raise ValueError("s2 must be positive")
    sched.check_t(t)
    xt = np.asarray(xt, dtype=np.float64)
    t = np.asarray(t)
    ab = sched.alpha_bar[t]
    if t.ndim:
        ab = ab.reshape((-1,) + (1,) * (xt.ndim - 1))
    m = np.asarray(m, dtype=np.float64)
    return np.sqrt(1.0 - ab) * (xt - np.sqrt(ab) * m) / (ab * s2 + 1.0 - ab)
