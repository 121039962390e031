"""Data-based training loop shared by teachers and the synthetic-dataset baseline."""

import numpy as np

from dkdm import rng as rngmod
from dkdm.diffusion import hybrid_loss, model_timesteps, q_sample
from dkdm.engine import tensor as E
from dkdm.engine.tensor import Tensor


def data_step(model, opt, x0, sched, gen, lam=0.001, loss_mode="hybrid"):
    """One gradient step on a clean batch ``x0``.

    Draws ``t`` uniform on [1, T] and ``eps`` from ``gen`` (in that order),
    forms x^t with the forward process and minimizes the hybrid (or simple)
    loss. Returns the loss parts.
    """
    b = x0.shape[0]
    t = gen.integers(1, sched.T + 1, b)
    eps = rngmod.normal(gen, x0.shape, x0.dtype)
    xt = q_sample(x0, t, eps, sched)
    out = model(Tensor(xt.data), model_timesteps(sched, t, b))
    loss, parts = hybrid_loss(out, x0, xt.data, t, eps, sched, lam=lam, loss_mode=loss_mode)
    grads = E.grad(loss, model.params)
    opt.update(model.params, grads)
    return parts


def sample_batch(samples, b, gen):
    """``b`` rows drawn uniformly with replacement."""
    idx = gen.integers(0, samples.shape[0], b)
    return samples[idx]


def train_on_data(model, opt, samples, sched, iterations, b, streams, lam=0.001,
                  loss_mode="hybrid", start=0, callback=None):
    """Run iterations ``start+1 .. iterations`` of data-based training.

    ``streams`` supplies the ``"batch"`` and ``"noise"`` generators.
    ``callback(it, parts)`` is called after every step.
    """
    samples = np.asarray(samples, dtype=model.dtype)
    for it in range(start + 1, iterations + 1):
        x0 = sample_batch(samples, b, streams["batch"])
        parts = data_step(model, opt, x0, sched, streams["noise"], lam, loss_mode)
        parts["teacher_fwd"] = 0
        if callback is not None:
            callback(it, parts)
    return model
