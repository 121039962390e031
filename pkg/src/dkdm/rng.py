"""Seeded random streams.

All randomness comes from numpy's Philox-4x64 counter-based bit generator.
Standard normal variates use numpy's ziggurat transform
(``Generator.standard_normal``). A stream is identified by a master seed and a
role label; the Philox key is the first 16 bytes of
``sha256(f"{seed}:{role}")``, so streams for different roles are independent
and reproducible on any machine.
"""

import hashlib
import json

import numpy as np


def derive_key(seed, role):
    digest = hashlib.sha256(f"{int(seed)}:{role}".encode()).digest()
    return int.from_bytes(digest[:16], "little")


def stream(seed, role="default"):
    """A fresh ``np.random.Generator`` for ``(seed, role)``."""
    return np.random.Generator(np.random.Philox(key=derive_key(seed, role)))


def get_state(gen):
    """JSON-serializable snapshot of a generator's position."""
    st = gen.bit_generator.state

    def conv(x):
        if isinstance(x, dict):
            return {k: conv(v) for k, v in x.items()}
        if isinstance(x, np.ndarray):
            return {"__nd__": x.tolist(), "dtype": str(x.dtype)}
        if isinstance(x, np.integer):
            return int(x)
        return x

    return json.dumps(conv(st), sort_keys=True)


def set_state(gen, text):
    def conv(x):
        if isinstance(x, dict):
            if "__nd__" in x:
                return np.array(x["__nd__"], dtype=x["dtype"])
            return {k: conv(v) for k, v in x.items()}
        return x

    gen.bit_generator.state = conv(json.loads(text))
    return gen


def normal(gen, shape, dtype=np.float32):
    return gen.standard_normal(shape, dtype=dtype)


class Streams:
    """Lazily created per-role generators derived from one master seed.

    Roles in use: ``data`` (dataset draws), ``init`` (weights), ``batch``
    (minibatch indices), ``noise`` (diffusion noise and timesteps),
    ``select`` (batch-set selection), ``sample`` and ``eval`` (generation).
    """

    def __init__(self, seed):
        self.seed = int(seed)
        self._gens = {}

    def __getitem__(self, role):
        if role not in self._gens:
            self._gens[role] = stream(self.seed, role)
        return self._gens[role]

    def states(self):
        return {role: get_state(g) for role, g in sorted(self._gens.items())}

    def load_states(self, states):
        for role, text in states.items():
            set_state(self[role], text)
        return self
