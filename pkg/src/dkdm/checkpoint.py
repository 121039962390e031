"""Checkpoint directories: ``manifest.txt`` plus one tensor blob per parameter.

The manifest is ``key=value`` text holding the format version, the model
spec, schedule parameters, the iteration count and, for resumable training
checkpoints, RNG stream positions (``rng.<role>``) and the optimizer step.
Optimizer moments live under ``optim/<name>.m.dkt1`` / ``.v.dkt1``.
"""

import os
import shutil

from dkdm.engine import blob
from dkdm.engine.optim import Adam
from dkdm.engine.tensor import Tensor
from dkdm.errors import FormatError, SpecMismatchError
from dkdm.models import DenoiserModel, DenoiserSpec

FORMAT = "dkdm-checkpoint"
VERSION = 1


class Checkpoint:
    def __init__(self, model, iteration=0, schedule=None, rng_states=None, optim=None, extra=None):
        self.model = model
        self.iteration = iteration
        self.schedule = schedule or {"kind": "linear", "T": model.spec.T}
        self.rng_states = rng_states or {}
        self.optim = optim
        self.extra = extra or {}


def save_checkpoint(model, path, iteration=0, schedule=None, streams=None, opt=None, extra=None):
    """Write ``model`` (and optionally RNG and optimizer state) to directory ``path``.

    The directory is assembled next to ``path`` and swapped in at the end so a
    crash never leaves a half-written checkpoint behind.
    """
    path = os.fspath(path)
    tmp = path.rstrip("/\\") + ".tmp"
    shutil.rmtree(tmp, ignore_errors=True)
    os.makedirs(os.path.join(tmp, "params"))
    schedule = schedule or {"kind": "linear", "T": model.spec.T}
    lines = [f"format={FORMAT}", f"version={VERSION}"]
    lines += [f"spec.{k}={v}" for k, v in model.spec.to_dict().items()]
    lines += [f"schedule.kind={schedule['kind']}", f"schedule.T={schedule['T']}"]
    lines.append(f"iteration={int(iteration)}")
    lines.append(f"dtype={model.dtype}")
    for k, v in sorted((extra or {}).items()):
        lines.append(f"extra.{k}={v}")
    for name, p in model.params.items():
        blob.save(os.path.join(tmp, "params", f"{name}.dkt1"), p.data)
    if opt is not None:
        os.makedirs(os.path.join(tmp, "optim"))
        lines += [f"optim.step={opt.step}", f"optim.lr={opt.lr!r}", f"optim.beta1={opt.beta1!r}",
                  f"optim.beta2={opt.beta2!r}", f"optim.eps={opt.eps!r}"]
        if opt.clip_norm is not None:
            lines.append(f"optim.clip_norm={float(opt.clip_norm)!r}")
        for name, arr in opt.state_arrays().items():
            blob.save(os.path.join(tmp, "optim", f"{name}.dkt1"), arr)
    if streams is not None:
        for role, text in streams.states().items():
            lines.append(f"rng.{role}={text}")
    with open(os.path.join(tmp, "manifest.txt"), "w") as fh:
        fh.write("\n".join(lines) + "\n")
    if os.path.isdir(path):
        shutil.rmtree(path)
    os.replace(tmp, path)


def read_manifest(path):
    mpath = os.path.join(path, "manifest.txt")
    try:
        with open(mpath) as fh:
            text = fh.read()
    except OSError as exc:
        raise FormatError(f"{mpath}: cannot read manifest ({exc.strerror})") from None
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        if not line.strip():
            continue
        k, sep, v = line.partition("=")
        if not sep:
            raise FormatError(f"{mpath}:{n}: malformed manifest line")
        out[k] = v
    if out.get("format") != FORMAT:
        raise FormatError(f"{mpath}: not a checkpoint manifest")
    if out.get("version") != str(VERSION):
        raise FormatError(f"{mpath}: unsupported checkpoint version {out.get('version')!r}, expected {VERSION}")
    return out


def _load_blob(path):
    try:
        return blob.load(path)
    except OSError as exc:
        raise FormatError(f"{path}: cannot read tensor blob ({exc.strerror})") from None


def load_checkpoint(path, spec=None):
    """Load a checkpoint directory. A given ``spec`` must match the stored one exactly."""
    path = os.fspath(path)
    man = read_manifest(path)
    try:
        stored = DenoiserSpec.from_dict({k[5:]: v for k, v in man.items() if k.startswith("spec.")})
    except (KeyError, ValueError) as exc:
        raise FormatError(f"{path}: bad model spec in manifest ({exc})") from None
    if spec is not None and spec != stored:
        raise SpecMismatchError(f"{path}: checkpoint holds {stored}, requested {spec}")
    params = {}
    for name in stored.layer_shapes():
        arr = _load_blob(os.path.join(path, "params", f"{name}.dkt1"))
        params[name] = Tensor(arr, requires_grad=True)
    try:
        model = DenoiserModel(stored, params)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from None
    optim = None
    if "optim.step" in man:
        opt = Adam(params, lr=float(man["optim.lr"]), beta1=float(man["optim.beta1"]),
                   beta2=float(man["optim.beta2"]), eps=float(man["optim.eps"]),
                   clip_norm=float(man["optim.clip_norm"]) if "optim.clip_norm" in man else None)
        arrays = {}
        for key in opt.state_arrays():
            arrays[key] = _load_blob(os.path.join(path, "optim", f"{key}.dkt1"))
        opt.load_state_arrays(arrays, int(man["optim.step"]))
        optim = opt
    rng_states = {k[4:]: v for k, v in man.items() if k.startswith("rng.")}
    schedule = {"kind": man.get("schedule.kind", "linear"), "T": int(man.get("schedule.T", stored.T))}
    extra = {k[6:]: v for k, v in man.items() if k.startswith("extra.")}
    return Checkpoint(model, int(man.get("iteration", 0)), schedule, rng_states, optim, extra)
