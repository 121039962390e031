"""Data-free distillation of a teacher denoiser into a student.

The student never sees real data. Its training pairs come from the teacher's
own reverse chain: a pool of partially denoised states at mixed noise levels
is kept alive, and each iteration the teacher takes one step on a random
subset of it, supplying both the regression targets and the next states.
"""

import logging
from dataclasses import dataclass, field

import numpy as np

from dkdm import rng as rngmod
from dkdm.data import Dataset
from dkdm.diffusion import (
    GaussianParams,
    gaussian_kl,
    generate,
    log_variance_from_v,
    mean_from_eps,
    model_timesteps,
    p_step,
)
from dkdm.engine import tensor as E
from dkdm.engine.optim import Adam
from dkdm.engine.tensor import Tensor
from dkdm.errors import ShapeError, StateError
from dkdm.models import init_model
from dkdm.training import train_on_data

log = logging.getLogger(__name__)

STRATEGIES = ("synthetic_dataset", "iterative", "shuffled", "dynamic")


@dataclass
class DistillConfig:
    strategy: str = "dynamic"
    rho: float = 0.4
    b: int = 64
    lam: float = 0.001
    loss_mode: str = "hybrid"
    iterations: int = 20000
    seed: int = 0
    lr: float = 1e-3
    clip_norm: float = 1.0
    # synthetic_dataset baseline
    synth_n: int = 5000
    synth_steps: int = 50
    synth_sampler: str = "ancestral"
    # shuffle-denoise timestep assignment: "balanced" or "iid"
    t_assign: str = "balanced"
    teacher_checkpoint: str = None
    student_spec: object = None

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ValueError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")
        if self.b < 1:
            raise ValueError("b must be >= 1")
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.strategy == "dynamic" and not self.rho > 0:
            raise ValueError("rho must be > 0 for the dynamic strategy")
        if self.lam < 0:
            raise ValueError("lambda must be non-negative")
        if self.clip_norm is not None and self.clip_norm < 0:
            raise ValueError("clip_norm must be non-negative (0 turns clipping off)")
        if self.loss_mode not in ("hybrid", "simple"):
            raise ValueError(f"unknown loss_mode {self.loss_mode!r}")
        if self.t_assign not in ("balanced", "iid"):
            raise ValueError(f"unknown t_assign {self.t_assign!r}")


@dataclass
class KnowledgeItem:
    state: np.ndarray
    t: int


@dataclass
class KnowledgeBatchSet:
    """Pool of (state, t) pairs stored as two parallel arrays."""

    capacity: int
    dims: tuple
    rho: float = 0.0
    states: np.ndarray = None
    t: np.ndarray = None
    generation: int = 0

    @property
    def initialized(self):
        return self.states is not None

    def items(self):
        return [KnowledgeItem(self.states[i], int(self.t[i])) for i in range(self.capacity)]

    def check(self, T):
        if not self.initialized:
            raise StateError("batch set is not initialized")
        if self.states.shape != (self.capacity,) + tuple(self.dims) or self.t.shape != (self.capacity,):
            raise StateError("batch set arrays do not match its capacity")
        if self.t.min() < 1 or self.t.max() > T:
            raise StateError(f"batch set holds timesteps outside [1, {T}]")


def batch_set_capacity(rho, T, b):
    """round(rho * T * b), rounding halves up; smaller than ``b`` is an error."""
    cap = int(np.floor(rho * T * b + 0.5))
    if cap < b:
        raise ValueError(f"capacity round({rho}*{T}*{b}) = {cap} is smaller than b = {b}")
    return cap


# --------------------------------------------------------------------- loss
def _detached(x):
    return Tensor(x.data if isinstance(x, Tensor) else np.asarray(x))


def dkdm_loss(teacher_out, student_out, xt, t, sched, lam=0.001, loss_mode="hybrid"):
    """Match the student's reverse step to the teacher's.

    ``simple`` is the MSE between the two noise predictions. In hybrid mode
    ``vlb`` is KL(teacher step || student step) averaged over the batch; the
    student mean inside it is built from a stop-gradient copy of its noise
    prediction, so the KL only trains the variance head. Teacher outputs are
    treated as constants.
    """
    if lam < 0:
        raise ValueError("lambda must be non-negative")
    if loss_mode not in ("hybrid", "simple"):
        raise ValueError(f"unknown loss_mode {loss_mode!r}")
    te, tv = _detached(teacher_out.eps_pred), _detached(teacher_out.v_raw)
    se, sv = student_out.eps_pred, student_out.v_raw
    if te.shape != se.shape or tv.shape != sv.shape or te.shape != tuple(np.shape(getattr(xt, "data", xt))):
        raise ShapeError(f"teacher {te.shape}, student {se.shape} and state shapes differ")
    d = te - se
    simple = E.mean(d * d)
    parts = {"simple": simple.item()}
    if loss_mode == "simple":
        parts["loss"] = parts["simple"]
        return simple, parts
    p = GaussianParams(mean_from_eps(xt, t, te, sched), None, log_variance_from_v(tv, t, sched))
    q = GaussianParams(mean_from_eps(xt, t, E.stop_gradient(se), sched), None,
                       log_variance_from_v(sv, t, sched))
    vlb = E.affine(gaussian_kl(p, q), 1.0 / te.shape[0])
    loss = simple + E.affine(vlb, lam)
    parts["vlb"] = vlb.item()
    parts["loss"] = loss.item()
    return loss, parts


# ------------------------------------------------------------ teacher chain
def teacher_step(teacher, xt, t, sched, z):
    """One ancestral teacher step x^t -> x^{t-1}, plus the teacher output that produced it.

    ``t`` is a scalar or one timestep per row; noise ``z`` is ignored where
    ``t == 1``. Returns ``(x_next ndarray, ModelOut)``.
    """
    sched.check_t(t)
    xt = np.asarray(getattr(xt, "data", xt))
    with E.no_grad():
        out = teacher(Tensor(xt), model_timesteps(sched, t, xt.shape[0]))
        x_next = p_step(out, xt, t, sched, z)
    return x_next.data, out


def generate_chain(teacher, sched, k, gen, count=1, dtype=np.float32):
    """x^{T-k} after ``k`` teacher steps from fresh noise (``k = 0`` returns the noise).

    Noise is drawn from ``gen`` in the order x^T, then one z per step.
    """
    if k < 0 or k > sched.T:
        raise ValueError(f"k must be in [0, {sched.T}], got {k}")
    shape = (count,) + teacher.spec.input_shape
    x = rngmod.normal(gen, shape, dtype)
    for j in range(k):
        z = rngmod.normal(gen, shape, dtype)
        x, _ = teacher_step(teacher, x, sched.T - j, sched, z)
    return x


def assign_timesteps(n, T, gen, mode="balanced"):
    """Target noise levels for shuffle denoise, each marginally uniform on [1, T].

    ``iid`` draws independently. ``balanced`` takes ``n // T`` full copies of
    1..T plus ``n % T`` distinct levels, randomly permuted, so the set's
    histogram is as flat as ``n`` allows.
    """
    if mode == "iid":
        return gen.integers(1, T + 1, n)
    if mode != "balanced":
        raise ValueError(f"unknown assignment mode {mode!r}")
    full = np.tile(np.arange(1, T + 1), n // T)
    rest = gen.choice(T, n % T, replace=False) + 1
    return gen.permutation(np.concatenate([full, rest]).astype(np.int64))


def shuffle_denoise(noise_batch, teacher, sched, gen, t_targets=None, mode="balanced"):
    """Denoise each row of ``noise_batch`` (taken to be at t = T) down to its own level t_i.

    Row i takes exactly ``T - t_i`` teacher steps. Returns ``(states, t)``.
    """
    x = np.array(noise_batch, copy=True)
    n = x.shape[0]
    T = sched.T
    t = assign_timesteps(n, T, gen, mode) if t_targets is None else np.asarray(t_targets, dtype=np.int64)
    sched.check_t(t)
    for s in range(T, 1, -1):
        act = np.nonzero(t < s)[0]
        if act.size == 0:
            continue
        z = rngmod.normal(gen, (act.size,) + x.shape[1:], x.dtype)
        x[act], _ = teacher_step(teacher, x[act], s, sched, z)
    return x, t


def init_batch_set(config, teacher, sched, gen, dtype=np.float32):
    """Pool of round(rho T b) items built by shuffle denoise, ``b`` rows at a time."""
    cap = batch_set_capacity(config.rho, sched.T, config.b)
    dims = teacher.spec.input_shape
    bset = KnowledgeBatchSet(cap, dims, config.rho)
    t_all = assign_timesteps(cap, sched.T, gen, config.t_assign)
    states = np.empty((cap,) + dims, dtype=dtype)
    for lo in range(0, cap, config.b):
        hi = min(lo + config.b, cap)
        noise = rngmod.normal(gen, (hi - lo,) + dims, dtype)
        states[lo:hi], _ = shuffle_denoise(noise, teacher, sched, gen, t_all[lo:hi])
        if (lo // config.b) % 10 == 0:
            log.info("batch set warmup %d/%d items", hi, cap)
    bset.states, bset.t = states, t_all
    return bset


def lockstep_batch_set(b, dims, sched, gen, dtype=np.float32):
    """``b`` fresh noise items all at t = T."""
    bset = KnowledgeBatchSet(b, dims, 0.0)
    bset.states = rngmod.normal(gen, (b,) + tuple(dims), dtype)
    bset.t = np.full(b, sched.T, dtype=np.int64)
    return bset


def select_subset(bset, b, gen):
    """``b`` distinct indices drawn uniformly; all indices in order when ``b`` equals the capacity."""
    if b > bset.capacity:
        raise ValueError(f"cannot select {b} items from a set of {bset.capacity}")
    if b == bset.capacity:
        return np.arange(b)
    return gen.choice(bset.capacity, b, replace=False)


def distill_iteration(bset, teacher, student, opt, config, sched, streams):
    """One training step on ``b`` pool items, updating the pool and ``student`` in place.

    The selected items are replaced by their one-step denoised successors;
    those that reach t = 0 restart from fresh noise at t = T. Returns the loss
    parts with ``teacher_fwd`` set to this iteration's teacher evaluations.
    """
    bset.check(sched.T)
    noise = streams["noise"]
    idx = select_subset(bset, config.b, streams["select"])
    xs, ts = bset.states[idx], bset.t[idx]
    before = teacher.n_forward
    z = rngmod.normal(noise, xs.shape, xs.dtype)
    x_next, t_out = teacher_step(teacher, xs, ts, sched, z)
    fwd = teacher.n_forward - before
    s_out = student(Tensor(xs), model_timesteps(sched, ts, xs.shape[0]))
    loss, parts = dkdm_loss(t_out, s_out, xs, ts, sched, config.lam, config.loss_mode)
    grads = E.grad(loss, student.params)
    opt.update(student.params, grads)

    t_new = ts - 1
    done = np.nonzero(t_new == 0)[0]
    if done.size:
        x_next[done] = rngmod.normal(noise, (done.size,) + x_next.shape[1:], x_next.dtype)
        t_new[done] = sched.T
    bset.states[idx] = x_next
    bset.t[idx] = t_new
    bset.generation += 1
    parts["teacher_fwd"] = fwd
    return parts


# ---------------------------------------------------------------- baselines
def synthesize_dataset(teacher, sched, n, sampler="ancestral", n_steps=None, gen=0, chunk=1024):
    """A dataset of ``n`` teacher samples drawn with ``n_steps`` reverse steps."""
    if n < 1:
        raise ValueError("n must be >= 1")
    n_steps = sched.T if n_steps is None else n_steps
    x = generate(teacher, sched, n_steps, sampler, gen, n, chunk=chunk)
    seed = gen if isinstance(gen, (int, np.integer)) else 0
    return Dataset("synthetic", x.astype(np.float32), int(seed), {"n_steps": n_steps, "sampler": sampler})


def mix_dataset(real, synthetic, p, gen):
    """Same size as ``synthetic`` with round(p * size) rows taken from ``real``, shuffled."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must be in [0, 1]")
    if real.dims != synthetic.dims:
        raise ValueError(f"dims differ: {real.dims} vs {synthetic.dims}")
    size = synthetic.n
    k = int(np.floor(p * size + 0.5))
    if k > real.n:
        raise ValueError(f"need {k} real samples, only {real.n} available")
    ri = gen.choice(real.n, k, replace=False) if k < real.n else gen.permutation(real.n)
    si = gen.choice(size, size - k, replace=False)
    x = np.concatenate([real.samples[ri], synthetic.samples[si]])
    return Dataset("mixed", x[gen.permutation(size)], synthetic.seed, {"p": p})


# ------------------------------------------------------------------ runner
@dataclass
class DistillResult:
    student: object
    opt: object
    bset: KnowledgeBatchSet = None
    teacher_fwd: int = 0
    history: list = field(default_factory=list)


def run_distillation(config, teacher, sched, student=None, callback=None, streams=None, keep_history=False):
    """Train a student with the configured strategy for ``config.iterations`` steps.

    ``callback(it, parts, student)`` runs after every iteration; ``parts``
    carries the cumulative ``teacher_fwd`` count including any warmup or
    dataset synthesis. A student is initialized from ``config.student_spec``
    when none is given.
    """
    streams = streams or rngmod.Streams(config.seed)
    if student is None:
        if config.student_spec is None:
            raise ValueError("no student model or student spec given")
        student = init_model(config.student_spec, streams["init"], teacher.dtype)
    opt = Adam(student.params, lr=config.lr, clip_norm=config.clip_norm or None)
    res = DistillResult(student, opt)
    start_fwd = teacher.n_forward

    def emit(it, parts):
        parts["teacher_fwd"] = teacher.n_forward - start_fwd
        res.teacher_fwd = parts["teacher_fwd"]
        if keep_history:
            res.history.append(dict(parts, iter=it))
        if callback is not None:
            callback(it, parts, student)

    if config.strategy == "synthetic_dataset":
        ds = synthesize_dataset(teacher, sched, config.synth_n, config.synth_sampler,
                                config.synth_steps, streams["sample"])
        train_on_data(student, opt, ds.samples, sched, config.iterations, config.b, streams,
                      config.lam, config.loss_mode, callback=emit)
        return res

    dims = teacher.spec.input_shape
    if config.strategy == "iterative":
        bset = lockstep_batch_set(config.b, dims, sched, streams["noise"], teacher.dtype)
    elif config.strategy == "shuffled":
        bset = KnowledgeBatchSet(config.b, dims, 0.0)
        noise = rngmod.normal(streams["noise"], (config.b,) + dims, teacher.dtype)
        bset.states, bset.t = shuffle_denoise(noise, teacher, sched, streams["noise"], mode=config.t_assign)
    else:
        bset = init_batch_set(config, teacher, sched, streams["noise"], teacher.dtype)
    res.bset = bset
    for it in range(1, config.iterations + 1):
        emit(it, distill_iteration(bset, teacher, student, opt, config, sched, streams))
    return res
