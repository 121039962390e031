"""Sample-set distances and the timestep-uniformity statistic."""

from dataclasses import dataclass

import numpy as np

from dkdm import rng as rngmod

MAX_FRECHET_DIM = 64


@dataclass
class MetricReport:
    name: str
    value: float
    n_a: int
    n_b: int
    projections: int = None
    seed: int = None


def _flat(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    return x.reshape(x.shape[0], -1)


def _clamp(w):
    # eigenvalues at round-off level are treated as exact zeros; their square
    # roots would otherwise inject ~1e-8 noise for rank-deficient covariances
    tol = 64 * np.finfo(np.float64).eps * max(float(np.abs(w).max(initial=0.0)), 1e-300)
    return np.where(w > tol, w, 0.0)


def _sqrtm_psd(m):
    w, v = np.linalg.eigh((m + m.T) / 2)
    return (v * np.sqrt(_clamp(w))) @ v.T


def frechet_gaussian_distance(a, b):
    """Frechet distance between Gaussian fits of two sample sets.

    ||mu_a - mu_b||^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)). The trace term is
    evaluated as Tr((S_a^(1/2) S_b S_a^(1/2))^(1/2)) through symmetric
    eigendecompositions, with negative eigenvalues clamped to zero.
    """
    a, b = _flat(a), _flat(b)
    if a.shape[0] < 2 or b.shape[0] < 2:
        raise ValueError("need at least 2 samples per set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if a.shape[1] > MAX_FRECHET_DIM:
        raise ValueError(f"dimension {a.shape[1]} exceeds {MAX_FRECHET_DIM}")
    mu_a, mu_b = a.mean(0), b.mean(0)
    ca = np.atleast_2d(np.cov(a, rowvar=False))
    cb = np.atleast_2d(np.cov(b, rowvar=False))
    ra = _sqrtm_psd(ca)
    inner = ra @ cb @ ra
    w = np.linalg.eigvalsh((inner + inner.T) / 2)
    tr_cross = np.sqrt(_clamp(w)).sum()
    val = float(((mu_a - mu_b) ** 2).sum() + np.trace(ca) + np.trace(cb) - 2.0 * tr_cross)
    return MetricReport("frechet", max(val, 0.0), a.shape[0], b.shape[0])


def _quantiles(sorted_x, m):
    """Empirical quantile function of sorted columns at the ``m`` midpoints (i + 0.5) / m."""
    n = sorted_x.shape[0]
    if n == m:
        return sorted_x
    pos = (np.arange(m) + 0.5) / m * n - 0.5
    pos = np.clip(pos, 0.0, n - 1)
    lo = np.floor(pos).astype(int)
    hi = np.minimum(lo + 1, n - 1)
    frac = (pos - lo)[:, None]
    return sorted_x[lo] * (1.0 - frac) + sorted_x[hi] * frac


def sliced_wasserstein(a, b, n_projections=128, seed=0):
    """Mean over random unit directions of the 1-D 2-Wasserstein distance.

    Directions come from the ``"projections"`` stream of ``seed``. Unequal
    sample counts are matched by linear quantile interpolation.
    """
    a, b = _flat(a), _flat(b)
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise ValueError("empty sample set")
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch {a.shape[1]} vs {b.shape[1]}")
    if n_projections < 1:
        raise ValueError("n_projections must be >= 1")
    d = a.shape[1]
    gen = rngmod.stream(seed, "projections")
    dirs = gen.standard_normal((d, n_projections))
    dirs /= np.linalg.norm(dirs, axis=0, keepdims=True)
    pa = np.sort(a @ dirs, axis=0)
    pb = np.sort(b @ dirs, axis=0)
    m = max(pa.shape[0], pb.shape[0])
    qa, qb = _quantiles(pa, m), _quantiles(pb, m)
    w2 = np.sqrt(np.mean((qa - qb) ** 2, axis=0))
    return MetricReport("sliced_w2", float(w2.mean()), a.shape[0], b.shape[0], n_projections, seed)


@dataclass
class UniformityReport:
    counts: np.ndarray
    expected: np.ndarray
    max_abs_deviation: float
    z: np.ndarray
    max_abs_z: float


def t_uniformity_stat(t_values, T, bins=10):
    """Histogram of timesteps over equal-width bins of [1, T] against the uniform law.

    Per-bin z-scores use the multinomial standard deviation sqrt(n p (1 - p)).
    """
    t = np.asarray(t_values).ravel()
    if t.size == 0:
        raise ValueError("no timesteps given")
    if t.min() < 1 or t.max() > T:
        raise ValueError(f"timesteps outside [1, {T}]")
    edges = np.linspace(0.5, T + 0.5, bins + 1)
    counts, _ = np.histogram(t, bins=edges)
    support = np.arange(1, T + 1)
    per_bin, _ = np.histogram(support, bins=edges)
    p = per_bin / T
    n = t.size
    expected = n * p
    sd = np.sqrt(n * p * (1.0 - p))
    with np.errstate(divide="ignore", invalid="ignore"):
        z = np.where(sd > 0, (counts - expected) / np.where(sd > 0, sd, 1.0), 0.0)
        # a bin with zero probability that still received mass is infinitely unlikely
        z = np.where((sd == 0) & (counts != expected), np.inf, z)
    return UniformityReport(counts, expected, float(np.abs(counts - expected).max()), z, float(np.abs(z).max()))
