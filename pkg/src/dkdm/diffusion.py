"""Gaussian diffusion: schedules, forward process, posterior, losses, samplers.

Timesteps are 1-based throughout: ``t = 1`` is the last reverse step and
``t = T`` is pure noise. Functions accept a scalar ``t`` or an integer array
with one timestep per batch row.

Every model passed to the samplers is a callable ``model(x, t) -> ModelOut``
where ``t`` holds *model* timesteps (the original horizon, even when the
sampler runs on a respaced schedule).
"""

from dataclasses import dataclass, field

import numpy as np

from dkdm import rng as rngmod
from dkdm.engine import tensor as E
from dkdm.engine.tensor import Tensor

LOG_FLOOR = 1e-20


@dataclass
class NoiseSchedule:
    """Per-step quantities for a diffusion chain of length ``T``.

    Arrays indexed by ``t - 1`` for ``t = 1..T``, except ``alpha_bar`` which is
    indexed by ``t`` directly and starts with ``alpha_bar[0] = 1``.
    ``timesteps[t - 1]`` is the model timestep evaluated at chain position
    ``t`` (identity unless the schedule was respaced).
    """

    T: int
    betas: np.ndarray
    kind: str = "linear"
    timesteps: np.ndarray = None
    alphas: np.ndarray = field(init=False)
    alpha_bar: np.ndarray = field(init=False)
    beta_tilde: np.ndarray = field(init=False)

    def __post_init__(self):
        self.betas = np.asarray(self.betas, dtype=np.float64)
        if self.betas.shape != (self.T,):
            raise ValueError(f"expected {self.T} betas, got {self.betas.shape}")
        self.alphas = 1.0 - self.betas
        self.alpha_bar = np.concatenate([[1.0], np.cumprod(self.alphas)])
        self.beta_tilde = (1.0 - self.alpha_bar[:-1]) / (1.0 - self.alpha_bar[1:]) * self.betas
        if self.timesteps is None:
            self.timesteps = np.arange(1, self.T + 1)
        self.timesteps = np.asarray(self.timesteps, dtype=np.int64)
        # log(beta_tilde) with beta_tilde_1 = 0 floored
        self.log_beta = np.log(self.betas)
        self.log_beta_tilde = np.log(np.maximum(self.beta_tilde, LOG_FLOOR))

    def check_t(self, t):
        ta = np.asarray(t)
        if ta.size and (ta.min() < 1 or ta.max() > self.T):
            raise ValueError(f"timestep out of range [1, {self.T}]: {t}")
        return ta


def build_schedule(kind="linear", T=1000):
    """Linear beta schedule scaled by 1000/T so every horizon keeps the canonical endpoints."""
    if int(T) != T or T < 1:
        raise ValueError(f"T must be a positive integer, got {T}")
    T = int(T)
    if kind != "linear":
        raise ValueError(f"unknown schedule kind {kind!r}")
    scale = 1000.0 / T
    betas = np.linspace(1e-4 * scale, 0.02 * scale, T, dtype=np.float64)
    betas = np.clip(betas, 1e-12, 0.999)
    return NoiseSchedule(T=T, betas=betas, kind=kind)


def respaced_timesteps(T, n_steps):
    """Evenly spaced subsequence of ``1..T`` of length ``n_steps``.

    Both endpoints are kept when ``n_steps >= 2``; interior points are
    ``1 + floor(i * (T - 1) / (n_steps - 1) + 0.5)``. ``n_steps = 1`` keeps
    only ``T``.
    """
    if n_steps < 1 or n_steps > T:
        raise ValueError(f"n_steps must be in [1, {T}], got {n_steps}")
    if n_steps == 1:
        return np.array([T], dtype=np.int64)
    stride = (T - 1) / (n_steps - 1)
    return np.array([1 + int(np.floor(i * stride + 0.5)) for i in range(n_steps)], dtype=np.int64)


def respace(sched, n_steps):
    """Schedule over the subsequence from :func:`respaced_timesteps`.

    Betas are re-derived so the respaced chain keeps the original
    ``alpha_bar`` at the retained steps. With ``n_steps == T`` the original
    schedule is returned unchanged.
    """
    if n_steps == sched.T:
        return sched
    ts = respaced_timesteps(sched.T, n_steps)
    ab = sched.alpha_bar[ts]
    prev = np.concatenate([[1.0], ab[:-1]])
    betas = 1.0 - ab / prev
    model_ts = sched.timesteps[ts - 1]
    return NoiseSchedule(T=len(ts), betas=betas, kind=sched.kind, timesteps=model_ts)


# ------------------------------------------------------------------ helpers
def _data(x):
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _coef(values, t, like):
    """Gather per-step coefficients and shape them to broadcast over ``like``."""
    t = np.asarray(t)
    arr = _data(like)
    c = np.asarray(values[t - 1] if values.ndim else values, dtype=arr.dtype)
    if t.ndim == 0:
        return c
    return c.reshape((-1,) + (1,) * (arr.ndim - 1))


def _t(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)


# ------------------------------------------------------------ forward process
def q_sample(x0, t, eps, sched):
    """sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps."""
    sched.check_t(t)
    x0, eps = _t(x0), _t(eps)
    if x0.shape != eps.shape:
        raise ValueError(f"x0 {x0.shape} and eps {eps.shape} differ")
    t = np.asarray(t)
    a = _coef(np.sqrt(sched.alpha_bar[1:]), t, x0)
    b = _coef(np.sqrt(1.0 - sched.alpha_bar[1:]), t, x0)
    return x0 * a + eps * b


@dataclass
class GaussianParams:
    """Diagonal Gaussian. ``log_variance`` is optional and preferred when given."""

    mean: object
    variance: object
    log_variance: object = None


def posterior_params(x0, xt, t, sched):
    """Mean and variance of q(x^{t-1} | x^t, x^0)."""
    sched.check_t(t)
    x0, xt = _t(x0), _t(xt)
    t = np.asarray(t)
    ab, ab_prev = sched.alpha_bar[1:], sched.alpha_bar[:-1]
    c0 = np.sqrt(ab_prev) * sched.betas / (1.0 - ab)
    ct = np.sqrt(sched.alphas) * (1.0 - ab_prev) / (1.0 - ab)
    mean = x0 * _coef(c0, t, x0) + xt * _coef(ct, t, xt)
    shape = xt.shape
    var = np.broadcast_to(_coef(sched.beta_tilde, t, xt), shape).astype(xt.dtype)
    logvar = np.broadcast_to(_coef(sched.log_beta_tilde, t, xt), shape).astype(xt.dtype)
    return GaussianParams(mean, Tensor(var), Tensor(logvar))


def mean_from_eps(xt, t, eps_pred, sched):
    """(1 / sqrt(alpha_t)) * (xt - beta_t / sqrt(1 - alpha_bar_t) * eps_pred)."""
    sched.check_t(t)
    xt, eps_pred = _t(xt), _t(eps_pred)
    t = np.asarray(t)
    inv = 1.0 / np.sqrt(sched.alphas)
    k = sched.betas / np.sqrt(1.0 - sched.alpha_bar[1:])
    return (xt - eps_pred * _coef(k, t, xt)) * _coef(inv, t, xt)


def log_variance_from_v(v_raw, t, sched):
    """Log of the learned variance: v log(beta) + (1 - v) log(beta_tilde), v = (tanh(v_raw) + 1) / 2."""
    sched.check_t(t)
    v_raw = _t(v_raw)
    t = np.asarray(t)
    half = 0.5 * (sched.log_beta - sched.log_beta_tilde)
    mid = sched.log_beta_tilde + half
    return E.tanh(v_raw) * _coef(half, t, v_raw) + _coef(mid, t, v_raw)


def sigma_from_v(v_raw, t, sched):
    """Learned variance interpolated in log space between beta_tilde_t and beta_t."""
    return E.exp(log_variance_from_v(v_raw, t, sched))


def _logvar(g):
    if g.log_variance is not None:
        return _t(g.log_variance)
    var = _data(g.variance)
    if isinstance(g.variance, Tensor) and g.variance.requires_grad:
        raise ValueError("a differentiable variance needs an explicit log_variance")
    return Tensor(np.log(var))


def gaussian_kl(p, q, reduce="sum"):
    """KL(p || q) between diagonal Gaussians, summed over all elements.

    ``reduce="none"`` returns the elementwise terms.
    """
    for g in (p, q):
        # an explicit log-variance already carries the t=1 floor
        if g.log_variance is None and not np.all(_data(g.variance) > 0):
            raise ValueError("variances must be strictly positive")
    mp, mq = _t(p.mean), _t(q.mean)
    if mp.shape != mq.shape:
        raise ValueError(f"mean shapes differ: {mp.shape} vs {mq.shape}")
    lp, lq = _logvar(p), _logvar(q)
    diff = mp - mq
    # 0.5*(lq - lp) + 0.5*exp(lp - lq) + 0.5*diff^2*exp(-lq) - 0.5
    kl = E.affine(lq - lp, 0.5) + E.affine(E.exp(lp - lq), 0.5) \
        + E.affine(diff * diff * E.exp(E.affine(lq, -1.0)), 0.5)
    kl = E.affine(kl, 1.0, -0.5)
    if reduce == "none":
        return kl
    return kl.sum()


# -------------------------------------------------------------------- losses
def hybrid_loss(model_out, x0, xt, t, eps, sched, lam=0.001, loss_mode="hybrid"):
    """Simple eps-MSE plus ``lam`` times the variational KL term.

    The KL sees the model mean through a stop-gradient, so it trains only the
    variance head. Returns ``(loss, parts)``; ``parts`` has ``simple``,
    ``loss`` and, in hybrid mode, ``vlb`` (batch mean of per-sample KL sums).
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if loss_mode not in ("hybrid", "simple"):
        raise ValueError(f"unknown loss_mode {loss_mode!r}")
    eps = _t(eps)
    d = eps - model_out.eps_pred
    simple = E.mean(d * d)
    parts = {"simple": simple.item()}
    if loss_mode == "simple":
        parts["loss"] = parts["simple"]
        return simple, parts
    post = posterior_params(x0, xt, t, sched)
    mu = mean_from_eps(xt, t, E.stop_gradient(model_out.eps_pred), sched)
    lv = log_variance_from_v(model_out.v_raw, t, sched)
    model = GaussianParams(mu, None, lv)
    n = _data(xt).shape[0]
    vlb = E.affine(gaussian_kl(post, model), 1.0 / n)
    loss = simple + E.affine(vlb, lam)
    parts["vlb"] = vlb.item()
    parts["loss"] = loss.item()
    return loss, parts


# ------------------------------------------------------------------ sampling
def model_timesteps(sched, t, n):
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(n, int(t), dtype=np.int64)
    return sched.timesteps[t - 1]


def p_step(out, xt, t, sched, z):
    """One ancestral step given a model output: mean + sqrt(var) * z, no noise where t == 1."""
    mean = mean_from_eps(xt, t, out.eps_pred, sched)
    lv = log_variance_from_v(out.v_raw, t, sched)
    if z is None:
        return mean
    std = np.exp(0.5 * lv.data)
    t = np.asarray(t)
    mask = (t > 1).astype(mean.dtype)
    if mask.ndim:
        mask = mask.reshape((-1,) + (1,) * (mean.ndim - 1))
    return Tensor(mean.data + mask * std * _data(z).astype(mean.dtype))


def ddim_step(out, xt, t, sched):
    """Deterministic (eta = 0) DDIM update from the eps prediction."""
    xt_d = _data(xt)
    eps = _data(out.eps_pred)
    t = np.asarray(t)
    ab = _coef(sched.alpha_bar[1:], t, xt_d)
    ab_prev = _coef(sched.alpha_bar[:-1], t, xt_d)
    x0_pred = (xt_d - np.sqrt(1.0 - ab) * eps) / np.sqrt(ab)
    return Tensor(np.sqrt(ab_prev) * x0_pred + np.sqrt(1.0 - ab_prev) * eps)


def denoise_step(model, xt, t, sched, sampler="ancestral", z=None):
    """x^{t-1} from x^t using ``model``."""
    sched.check_t(t)
    xt = _t(xt)
    if sampler == "ancestral":
        if z is None and np.any(np.asarray(t) > 1):
            raise ValueError("ancestral sampling needs noise z for t > 1")
        with E.no_grad():
            out = model(xt, model_timesteps(sched, t, xt.shape[0]))
            return p_step(out, xt, t, sched, z)
    if sampler == "ddim":
        with E.no_grad():
            out = model(xt, model_timesteps(sched, t, xt.shape[0]))
            return ddim_step(out, xt, t, sched)
    raise ValueError(f"unknown sampler {sampler!r}")


def _chunked(model, x, t, chunk):
    if chunk is None or x.shape[0] <= chunk:
        return model(Tensor(x), t)
    eps, v = [], []
    for i in range(0, x.shape[0], chunk):
        o = model(Tensor(x[i:i + chunk]), t[i:i + chunk])
        eps.append(o.eps_pred.data)
        v.append(o.v_raw.data)
    return ModelOut(Tensor(np.concatenate(eps)), Tensor(np.concatenate(v)))


def generate(model, sched, n_steps, sampler="ancestral", rng_seed=0, count=1,
             shape=None, dtype=np.float32, chunk=None):
    """Draw ``count`` samples by running the reverse chain from pure noise.

    ``rng_seed`` is an int or a ``np.random.Generator``. Noise is drawn in the
    order x^T, then z for each step with t > 1, each of shape
    ``(count, *shape)``. ``chunk`` bounds the model batch size.
    """
    if n_steps < 1 or n_steps > sched.T:
        raise ValueError(f"n_steps must be in [1, {sched.T}], got {n_steps}")
    if shape is None:
        shape = model.spec.input_shape
    shape = tuple(shape)
    if count == 0:
        return np.zeros((0,) + shape, dtype=dtype)
    gen = rng_seed if isinstance(rng_seed, np.random.Generator) else rngmod.stream(rng_seed, "sample")
    sub = respace(sched, n_steps)
    x = rngmod.normal(gen, (count,) + shape, dtype)
    with E.no_grad():
        for k in range(sub.T, 0, -1):
            tt = np.full(count, sub.timesteps[k - 1], dtype=np.int64)
            out = _chunked(model, x, tt, chunk)
            if sampler == "ancestral":
                z = rngmod.normal(gen, (count,) + shape, dtype) if k > 1 else None
                x = p_step(out, x, k, sub, z).data
            elif sampler == "ddim":
                x = ddim_step(out, x, k, sub).data
            else:
                raise ValueError(f"unknown sampler {sampler!r}")
    return x


@dataclass
class ModelOut:
    """Network outputs: the noise prediction and the raw variance signal."""

    eps_pred: Tensor
    v_raw: Tensor
