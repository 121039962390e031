"""Experiment runners behind the command-line subcommands.

Each runner takes a parsed :class:`~dkdm.config.Config`, writes everything
into ``run.out_dir`` and returns a small result object for programmatic use.

Output layout (per run directory):

    config.txt        canonical copy of the resolved config
    metrics.csv       one row per iteration (primary eval metric on eval rows)
    eval.csv          every eval metric: iter,metric_name,metric_value
    checkpoint/       teacher checkpoint (train-teacher)
    student/          student checkpoint (distill)
    *.png             figures
"""

import logging
import os
import time
from dataclasses import dataclass, field

import numpy as np

from dkdm import plotting
from dkdm import rng as rngmod
from dkdm.checkpoint import load_checkpoint, save_checkpoint
from dkdm.data import load_dataset, make_dataset, save_dataset
from dkdm.diffusion import build_schedule, generate
from dkdm.distill import DistillConfig, run_distillation, synthesize_dataset
from dkdm.engine.optim import Adam
from dkdm.errors import ConfigError
from dkdm.export import export_samples
from dkdm.metrics import MAX_FRECHET_DIM, frechet_gaussian_distance, sliced_wasserstein
from dkdm.models import DenoiserSpec, default_specs, init_model
from dkdm.records import EVAL_HEADER, MetricsRecord, MetricsWriter, truncate_after
from dkdm.training import train_on_data

log = logging.getLogger(__name__)

GEN_CHUNK = 1024


# ------------------------------------------------------------------ inputs
def _prepare_out(cfg):
    out = cfg["run.out_dir"]
    os.makedirs(out, exist_ok=True)
    with open(os.path.join(out, "config.txt"), "w") as fh:
        fh.write(cfg.to_text())
    return out


def _data_params(cfg):
    if cfg["data.kind"] == "gauss2d":
        return {"mean": tuple(cfg["data.mean"]), "std": cfg["data.std"]}
    return {}


def load_data(cfg, seed=None):
    """Training set: the file at ``data.path`` or a fresh procedural draw."""
    if cfg["data.path"]:
        return load_dataset(cfg["data.path"])
    seed = cfg["run.seed"] if seed is None else seed
    return make_dataset(cfg["data.kind"], cfg["data.n"], seed, **_data_params(cfg))


def reference_set(cfg, n=None):
    """Held-out real samples for evaluation, from the ``"reference"`` stream of the master seed."""
    n = n or cfg["eval.reference_n"]
    gen = rngmod.stream(cfg["run.seed"], "reference")
    if cfg["data.path"]:
        ds = load_dataset(cfg["data.path"])
        if ds.kind not in ("gauss2d", "mixture2d-rings", "shapes8x8"):
            return ds.samples
        return make_dataset(ds.kind, n, gen).samples
    return make_dataset(cfg["data.kind"], n, gen, **_data_params(cfg)).samples


def model_specs(cfg, input_shape, T):
    teacher, student = default_specs(input_shape, T, cfg["teacher.arch"], cfg["student.arch"])
    if cfg["teacher.hidden"] or cfg["teacher.temb_dim"] != teacher.temb_dim:
        teacher = DenoiserSpec(teacher.arch, input_shape, cfg["teacher.hidden"] or teacher.hidden,
                               cfg["teacher.temb_dim"], T)
    if cfg["student.hidden"] or cfg["student.temb_dim"] != student.temb_dim:
        student = DenoiserSpec(student.arch, input_shape, cfg["student.hidden"] or student.hidden,
                               cfg["student.temb_dim"], T)
    return teacher, student


def _need(cfg, key):
    if cfg[key] is None:
        raise ConfigError(f"{key} is required for this command", cfg.lines.get(key), cfg.path)
    return cfg[key]


def load_model(path):
    ck = load_checkpoint(path)
    model = ck.model.trainable(False)
    sched = build_schedule(ck.schedule["kind"], ck.schedule["T"])
    return model, sched, ck


# -------------------------------------------------------------- evaluation
class Evaluator:
    """Scores a model's samples against a fixed reference set.

    Every evaluation restarts the ``"eval"`` stream, so successive
    evaluations (and different runs sharing a master seed) use the same
    starting noise.
    """

    def __init__(self, cfg, sched, seed=None, reference=None):
        self.cfg = cfg
        self.sched = sched
        self.seed = cfg["run.seed"] if seed is None else seed
        self.reference = reference_set(cfg) if reference is None else reference
        self.n_steps = cfg["eval.n_steps"] or sched.T
        self.primary = cfg["eval.metric"]

    def samples(self, model, count, role="eval"):
        return generate(model, self.sched, self.n_steps, self.cfg["eval.sampler"],
                        rngmod.stream(self.seed, role), count, chunk=GEN_CHUNK)

    def scores(self, x):
        out = {"sliced_w2": sliced_wasserstein(x, self.reference, self.cfg["eval.projections"],
                                               self.cfg["run.seed"]).value}
        if int(np.prod(x.shape[1:])) <= MAX_FRECHET_DIM:
            out["frechet"] = frechet_gaussian_distance(x, self.reference).value
        return out

    def __call__(self, model, count=None, role="eval"):
        x = self.samples(model, count or self.cfg["eval.samples"], role)
        return self.scores(x), x


class RunLog:
    """Writes metrics.csv / eval.csv rows and runs evaluations on the configured cadence."""

    def __init__(self, out, cfg, iterations, evaluator=None, loss_mode="hybrid", prefix="", resume_at=None):
        self.cfg = cfg
        self.metrics_path = os.path.join(out, f"{prefix}metrics.csv")
        self.eval_path = os.path.join(out, f"{prefix}eval.csv")
        if resume_at is None:
            for p in (self.metrics_path, self.eval_path):
                if os.path.exists(p):
                    os.remove(p)
        else:
            truncate_after(self.metrics_path, resume_at)
            truncate_after(self.eval_path, resume_at)
        self.writer = MetricsWriter(self.metrics_path)
        self.evaluator = evaluator
        self.iterations = iterations
        frac = cfg["eval.every_frac"]
        self.every = max(1, int(round(frac * iterations))) if frac and frac > 0 else None
        self.loss_mode = loss_mode
        self.wall = cfg["run.log_wall_clock"]
        self.tick = time.perf_counter()
        self.curve = []

    def _eval_row(self, it, name, value):
        new = not os.path.exists(self.eval_path)
        with open(self.eval_path, "a") as fh:
            if new:
                fh.write(EVAL_HEADER + "\n")
            fh.write(f"{it},{name},{float(value)!r}\n")

    def __call__(self, it, parts, model=None):
        now = time.perf_counter()
        wall = round((now - self.tick) * 1000.0, 3) if self.wall else None
        self.tick = now
        rec = MetricsRecord(it, parts["simple"], parts.get("vlb") if self.loss_mode == "hybrid" else None,
                            parts["loss"], int(parts.get("teacher_fwd", 0)), wall)
        if self.evaluator is not None and self.every and model is not None and \
                (it % self.every == 0 or it == self.iterations):
            scores, _ = self.evaluator(model)
            for name, val in scores.items():
                self._eval_row(it, name, val)
            rec.metric_name, rec.metric_value = self.evaluator.primary, scores[self.evaluator.primary]
            self.curve.append((it, rec.metric_value))
            self.tick = time.perf_counter()
        self.writer.append(rec)

    def final(self, model, it):
        scores, x = self.evaluator(model, self.cfg["eval.final_samples"], role="final")
        for name, val in scores.items():
            self._eval_row(it, f"final_{name}", val)
        return scores, x


# ----------------------------------------------------------------- runners
@dataclass
class RunResult:
    out_dir: str
    model: object = None
    final: dict = field(default_factory=dict)
    curve: list = field(default_factory=list)
    teacher_fwd: int = 0
    extra: dict = field(default_factory=dict)


def train_teacher(cfg):
    """Data-based training; checkpoints to ``checkpoint/`` every ``train.checkpoint_every`` steps."""
    out = _prepare_out(cfg)
    seed = cfg["run.seed"]
    ds = load_data(cfg)
    save_dataset(ds, os.path.join(out, "data.dkds"))
    sched = build_schedule(cfg["schedule.kind"], cfg["schedule.T"])
    spec, _ = model_specs(cfg, ds.dims, sched.T)
    ck_path = os.path.join(out, "checkpoint")
    streams = rngmod.Streams(seed)
    iterations = cfg["train.iterations"]
    start = 0
    if cfg["train.resume"] and os.path.isdir(ck_path):
        ck = load_checkpoint(ck_path, spec)
        model, opt, start = ck.model, ck.optim, ck.iteration
        if opt is None:
            raise ConfigError(f"{ck_path} holds no optimizer state; cannot resume")
        streams.load_states(ck.rng_states)
        log.info("resuming from iteration %d", start)
    else:
        model = init_model(spec, streams["init"])
        opt = Adam(model.params, lr=cfg["train.lr"], clip_norm=cfg["train.clip_norm"] or None)
    sched_info = {"kind": sched.kind, "T": sched.T}
    evaluator = Evaluator(cfg, sched)
    runlog = RunLog(out, cfg, iterations, evaluator, cfg["train.loss_mode"], resume_at=start or None)
    every = cfg["train.checkpoint_every"]

    def callback(it, parts):
        runlog(it, parts, model)
        if every and it % every == 0 and it != iterations:
            save_checkpoint(model, ck_path, it, sched_info, streams, opt)

    train_on_data(model, opt, ds.samples, sched, iterations, cfg["train.batch"], streams,
                  cfg["train.lambda"], cfg["train.loss_mode"], start=start, callback=callback)
    save_checkpoint(model, ck_path, iterations, sched_info, streams, opt)
    final, x = runlog.final(model, iterations)
    _figures(out, runlog.curve, {"teacher": runlog.curve}, x, evaluator.reference)
    return RunResult(out, model, final, runlog.curve)


def distill_config(cfg, student_spec, strategy=None, rho=None, seed=None):
    return DistillConfig(
        strategy=strategy or cfg["distill.strategy"],
        rho=cfg["distill.rho"] if rho is None else rho,
        b=cfg["distill.b"],
        lam=cfg["distill.lambda"],
        loss_mode=cfg["distill.loss_mode"],
        iterations=cfg["distill.iterations"],
        seed=cfg["run.seed"] if seed is None else seed,
        lr=cfg["distill.lr"],
        clip_norm=cfg["distill.clip_norm"] or None,
        synth_n=cfg["synth.n"],
        synth_steps=cfg["synth.n_steps"] or None,
        synth_sampler=cfg["synth.sampler"],
        t_assign=cfg["distill.t_assign"],
        teacher_checkpoint=cfg["teacher.checkpoint"],
        student_spec=student_spec,
    )


def _distill_once(cfg, teacher, sched, dcfg, out, prefix="", reference=None):
    evaluator = Evaluator(cfg, sched, seed=dcfg.seed, reference=reference)
    runlog = RunLog(out, cfg, dcfg.iterations, evaluator, dcfg.loss_mode, prefix=prefix)
    res = run_distillation(dcfg, teacher, sched, callback=runlog)
    final, x = runlog.final(res.student, dcfg.iterations)
    return RunResult(out, res.student, final, runlog.curve, res.teacher_fwd), x, evaluator


def distill(cfg):
    """Train a fresh student from ``teacher.checkpoint`` with ``distill.strategy``."""
    out = _prepare_out(cfg)
    teacher, sched, _ = load_model(_need(cfg, "teacher.checkpoint"))
    _, sspec = model_specs(cfg, teacher.spec.input_shape, sched.T)
    dcfg = distill_config(cfg, sspec)
    result, x, ev = _distill_once(cfg, teacher, sched, dcfg, out)
    save_checkpoint(result.model, os.path.join(out, "student"), dcfg.iterations, {"kind": sched.kind, "T": sched.T},
                    extra={"strategy": dcfg.strategy, "teacher_fwd": result.teacher_fwd})
    _figures(out, result.curve, {dcfg.strategy: result.curve}, x, ev.reference)
    return result


def synthesize(cfg):
    """Teacher-generated dataset written to ``synthetic.dkds``."""
    out = _prepare_out(cfg)
    teacher, sched, _ = load_model(_need(cfg, "teacher.checkpoint"))
    n_steps = cfg["synth.n_steps"] or sched.T
    ds = synthesize_dataset(teacher, sched, cfg["synth.n"], cfg["synth.sampler"], n_steps,
                            rngmod.stream(cfg["run.seed"], "sample"), chunk=GEN_CHUNK)
    ds.seed = cfg["run.seed"]
    path = os.path.join(out, "synthetic.dkds")
    save_dataset(ds, path)
    plotting.plot_samples(ds.samples[:2000], os.path.join(out, "synthetic.png"))
    return RunResult(out, teacher, teacher_fwd=teacher.n_forward, extra={"dataset": path})


def _model_for(cfg, key):
    path = cfg[key] or cfg["teacher.checkpoint"]
    if path is None:
        raise ConfigError(f"{key} (or teacher.checkpoint) is required for this command", cfg.lines.get(key), cfg.path)
    return load_model(path)


def sample(cfg):
    """Draw ``sample.count`` samples and export them as a PGM grid or CSV points."""
    out = _prepare_out(cfg)
    model, sched, _ = _model_for(cfg, "sample.checkpoint")
    n_steps = cfg["sample.n_steps"] or sched.T
    x = generate(model, sched, n_steps, cfg["sample.sampler"], rngmod.stream(cfg["run.seed"], "sample"),
                 cfg["sample.count"], chunk=GEN_CHUNK)
    fmt = cfg["sample.format"]
    if fmt == "auto":
        fmt = "csv-points" if x.ndim == 2 else "pgm-grid"
    path = os.path.join(out, "samples.csv" if fmt == "csv-points" else "samples.pgm")
    export_samples(x, path, fmt)
    plotting.plot_samples(x, os.path.join(out, "samples.png"))
    return RunResult(out, model, extra={"samples": path, "format": fmt})


def evaluate(cfg):
    """Score ``eval.final_samples`` model samples against the reference set."""
    out = _prepare_out(cfg)
    model, sched, ck = _model_for(cfg, "eval.checkpoint")
    ev = Evaluator(cfg, sched)
    scores, x = ev(model, cfg["eval.final_samples"], role="final")
    path = os.path.join(out, "eval.csv")
    with open(path, "w") as fh:
        fh.write(EVAL_HEADER + "\n")
        for name, val in scores.items():
            fh.write(f"{ck.iteration},{name},{float(val)!r}\n")
    plotting.plot_samples(x[:2000] if x.ndim == 2 else x, os.path.join(out, "samples.png"),
                          reference=ev.reference[:2000] if x.ndim == 2 else None)
    return RunResult(out, model, scores)


def ablate(cfg):
    """Strategy comparison or rho sweep against one teacher, one CSV pair per run.

    All runs with the same seed share the dataset, teacher, student
    initialization and evaluation noise, so differences come from the varied
    setting alone.
    """
    out = _prepare_out(cfg)
    teacher, sched, _ = load_model(_need(cfg, "teacher.checkpoint"))
    _, sspec = model_specs(cfg, teacher.spec.input_shape, sched.T)
    reference = reference_set(cfg)
    seeds = cfg["ablate.seeds"] or (cfg["run.seed"],)
    if cfg["ablate.kind"] == "strategies":
        settings = [(s, dict(strategy=s)) for s in cfg["ablate.strategies"]]
    else:
        settings = [(f"rho={r:g}", dict(strategy="dynamic", rho=r)) for r in cfg["ablate.rhos"]]
    results = {}
    summary = os.path.join(out, "summary.csv")
    with open(summary, "w") as fh:
        fh.write("setting,seed,teacher_fwd,metric_name,metric_value\n")
    for seed in seeds:
        for label, kw in settings:
            prefix = f"{label}_" if len(seeds) == 1 else f"{label}_seed{seed}_"
            dcfg = distill_config(cfg, sspec, seed=seed, **kw)
            log.info("ablate: %s seed %d", label, seed)
            res, _, _ = _distill_once(cfg, teacher, sched, dcfg, out, prefix=prefix, reference=reference)
            results[(label, seed)] = res
            with open(summary, "a") as fh:
                for name, val in res.final.items():
                    fh.write(f"{label},{seed},{res.teacher_fwd},{name},{float(val)!r}\n")
    first = seeds[0]
    curves = {label: results[(label, first)].curve for label, _ in settings}
    plotting.plot_curves({k: tuple(zip(*v)) for k, v in curves.items() if v},
                         os.path.join(out, "curves.png"), ylabel=cfg["eval.metric"])
    if cfg["ablate.kind"] == "rho":
        metric = cfg["eval.metric"]
        ys = [[results[(label, s)].final[metric] for s in seeds] for label, _ in settings]
        plotting.plot_sweep(list(cfg["ablate.rhos"]), ys, os.path.join(out, "sweep.png"), ylabel=metric)
    return RunResult(out, extra={"results": results, "summary": summary})


def _figures(out, curve, curves, x, reference):
    if curve:
        plotting.plot_curves({k: tuple(zip(*v)) for k, v in curves.items()}, os.path.join(out, "curves.png"))
    if x is not None:
        two_d = x.ndim == 2
        plotting.plot_samples(x[:2000] if two_d else x, os.path.join(out, "samples.png"),
                              reference=reference[:2000] if two_d else None)


RUNNERS = {
    "train-teacher": train_teacher,
    "distill": distill,
    "synthesize": synthesize,
    "sample": sample,
    "eval": evaluate,
    "ablate": ablate,
}
