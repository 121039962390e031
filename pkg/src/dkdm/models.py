"""Denoiser networks: a time-conditioned MLP and a small CNN.

Both predict the injected noise and a raw variance signal with the same shape
as the input. The two output layers start at zero, so a fresh network predicts
eps = 0 and the midpoint variance everywhere.
"""

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from dkdm import rng as rngmod
from dkdm.diffusion import ModelOut
from dkdm.engine import tensor as E
from dkdm.engine.tensor import Tensor
from dkdm.errors import ShapeError


@dataclass(frozen=True)
class DenoiserSpec:
    arch: str
    input_shape: tuple
    hidden: tuple
    temb_dim: int = 32
    T: int = 100

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(d) for d in self.input_shape))
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.arch not in ("mlp", "cnn"):
            raise ValueError(f"unknown architecture {self.arch!r}")
        if not self.hidden:
            raise ValueError("at least one hidden stage is required")
        if self.temb_dim <= 0 or self.temb_dim % 2:
            raise ValueError(f"time-embedding dim must be positive and even, got {self.temb_dim}")
        if self.arch == "cnn" and len(self.input_shape) != 3:
            raise ValueError(f"cnn needs (channels, H, W) input, got {self.input_shape}")

    @property
    def flat_dim(self):
        return int(np.prod(self.input_shape))

    def layer_shapes(self):
        """Name -> shape inventory of every parameter."""
        shapes = {}
        if self.arch == "mlp":
            width = self.flat_dim + self.temb_dim
            for i, h in enumerate(self.hidden):
                shapes[f"h{i}.w"] = (width, h)
                shapes[f"h{i}.b"] = (h,)
                width = h
            for head in ("eps", "var"):
                shapes[f"{head}.w"] = (width, self.flat_dim)
                shapes[f"{head}.b"] = (self.flat_dim,)
        else:
            c = self.input_shape[0]
            for i, ch in enumerate(self.hidden):
                shapes[f"conv{i}.w"] = (ch, c, 3, 3)
                shapes[f"conv{i}.b"] = (ch,)
                shapes[f"temb{i}.w"] = (self.temb_dim, ch)
                shapes[f"temb{i}.b"] = (ch,)
                c = ch
            cin = self.input_shape[0]
            for head in ("eps", "var"):
                shapes[f"{head}.w"] = (cin, c, 3, 3)
                shapes[f"{head}.b"] = (cin,)
        return shapes

    def to_dict(self):
        return {
            "arch": self.arch,
            "input_shape": ",".join(map(str, self.input_shape)),
            "hidden": ",".join(map(str, self.hidden)),
            "temb_dim": str(self.temb_dim),
            "T": str(self.T),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(
            arch=d["arch"],
            input_shape=tuple(int(x) for x in str(d["input_shape"]).split(",")),
            hidden=tuple(int(x) for x in str(d["hidden"]).split(",")),
            temb_dim=int(d["temb_dim"]),
            T=int(d["T"]),
        )


def time_embedding(t, dim, T):
    """Sinusoidal features of timestep ``t`` (scalar or array).

    ``t`` is rescaled to ``t * 1000 / T`` so every horizon spans the same
    phases; frequencies are ``10000 ** (-k / (dim / 2))``. Output is
    ``[sin..., cos...]`` with shape ``(..., dim)``.
    """
    if dim % 2:
        raise ValueError(f"embedding dim must be even, got {dim}")
    t = np.asarray(t, dtype=np.float64)
    if np.any(t < 0) or np.any(t > T):
        raise ValueError(f"timestep outside [0, {T}]")
    half = dim // 2
    freqs = np.exp(-math.log(10000.0) * np.arange(half, dtype=np.float64) / half)
    args = (t * (1000.0 / T))[..., None] * freqs
    return np.concatenate([np.sin(args), np.cos(args)], axis=-1)


@dataclass
class DenoiserModel:
    spec: DenoiserSpec
    params: dict
    n_forward: int = field(default=0, compare=False)

    def __post_init__(self):
        expected = self.spec.layer_shapes()
        if set(expected) != set(self.params):
            missing = sorted(set(expected) - set(self.params))
            extra = sorted(set(self.params) - set(expected))
            raise ShapeError(f"parameter inventory mismatch; missing={missing} extra={extra}")
        for k, shape in expected.items():
            if tuple(self.params[k].shape) != shape:
                raise ShapeError(f"{k}: expected shape {shape}, got {self.params[k].shape}")

    def __call__(self, x, t):
        return denoiser_forward(self, x, t)

    @property
    def dtype(self):
        return next(iter(self.params.values())).dtype

    def param_count(self):
        return int(sum(p.data.size for p in self.params.values()))

    def copy(self):
        params = {k: Tensor(p.data.copy(), requires_grad=p.requires_grad) for k, p in self.params.items()}
        return DenoiserModel(copy.deepcopy(self.spec), params)

    def astype(self, dtype):
        params = {k: Tensor(p.data.astype(dtype), requires_grad=p.requires_grad) for k, p in self.params.items()}
        return DenoiserModel(self.spec, params)

    def trainable(self, flag=True):
        for p in self.params.values():
            p.requires_grad = flag
        return self


def init_model(spec, seed=0, dtype=np.float32):
    """Random initialization; output heads are zero.

    Weights are uniform in +-1/sqrt(fan_in), biases zero. ``seed`` is an int
    (the ``"init"`` stream of that seed) or a Generator.
    """
    gen = seed if isinstance(seed, np.random.Generator) else rngmod.stream(seed, "init")
    params = {}
    for name, shape in spec.layer_shapes().items():
        if name.startswith(("eps.", "var.")) or name.endswith(".b"):
            arr = np.zeros(shape, dtype=dtype)
        else:
            if len(shape) == 4:
                fan_in = shape[1] * shape[2] * shape[3]
            else:
                fan_in = shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            arr = gen.uniform(-bound, bound, size=shape).astype(dtype)
        params[name] = Tensor(arr, requires_grad=True)
    return DenoiserModel(spec, params)


def denoiser_forward(model, x, t):
    """Run the network on a batch ``x`` of shape ``(B, *input_shape)`` at timesteps ``t``."""
    spec = model.spec
    x = x if isinstance(x, Tensor) else Tensor(x)
    if tuple(x.shape[1:]) != spec.input_shape:
        raise ShapeError(f"input {x.shape} does not match spec {spec.input_shape}")
    b = x.shape[0]
    t = np.asarray(t)
    if t.ndim == 0:
        t = np.full(b, int(t))
    if t.shape != (b,):
        raise ShapeError(f"need one timestep per row, got {t.shape} for batch {b}")
    if b and (t.min() < 1 or t.max() > spec.T):
        raise ValueError(f"timestep outside [1, {spec.T}]")
    model.n_forward += b
    temb = time_embedding(t, spec.temb_dim, spec.T).astype(x.dtype)
    p = model.params
    if spec.arch == "mlp":
        h = E.concat([E.reshape(x, (b, spec.flat_dim)), Tensor(temb)], axis=1)
        for i in range(len(spec.hidden)):
            h = E.silu(E.add(E.matmul(h, p[f"h{i}.w"]), p[f"h{i}.b"]))
        eps = E.add(E.matmul(h, p["eps.w"]), p["eps.b"])
        v = E.add(E.matmul(h, p["var.w"]), p["var.b"])
        shape = (b,) + spec.input_shape
        return ModelOut(E.reshape(eps, shape), E.reshape(v, shape))
    temb_t = Tensor(temb)
    h = x
    for i, ch in enumerate(spec.hidden):
        h = E.conv2d(h, p[f"conv{i}.w"], p[f"conv{i}.b"])
        proj = E.add(E.matmul(temb_t, p[f"temb{i}.w"]), p[f"temb{i}.b"])
        h = E.silu(E.add(h, E.reshape(proj, (b, ch, 1, 1))))
    eps = E.conv2d(h, p["eps.w"], p["eps.b"])
    v = E.conv2d(h, p["var.w"], p["var.b"])
    return ModelOut(eps, v)


def default_specs(input_shape, T, teacher_arch="mlp", student_arch="mlp"):
    """Teacher/student specs used by the desk-scale experiments.

    Students have roughly a quarter of the teacher's parameters.
    """
    flat = int(np.prod(input_shape))
    widths = {
        "mlp": ((128, 128, 128), (64, 64, 64)) if flat <= 8 else ((256, 256, 256), (128, 128, 128)),
        "cnn": ((16, 16, 16), (8, 8, 8)),
    }
    teacher = DenoiserSpec(teacher_arch, input_shape, widths[teacher_arch][0], 32, T)
    student = DenoiserSpec(student_arch, input_shape, widths[student_arch][1], 32, T)
    return teacher, student
