"""Training loop: distill a particle cloud against analytic score targets.

One step draws a minibatch of (view, particle, t, noise) tuples, turns the
objective's per-sample cotangents into a flat parameter gradient, and takes
an optimizer step. Everything downstream of the seed is deterministic, and
the trace file is written with fixed formatting so identical runs produce
byte-identical traces.
"""

import json
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .fake_score import DsmConfig, DsmTrainer, ScoreNet
from .generator import GeneratorState, render
from .objectives import (ObjectiveSpec, active_blocks, assemble_theta_grad,
                         divergence_estimate, grad_kl_unified, grad_sim_total,
                         kl_cotangents_batch, make_step_sample,
                         sample_draw_batch, sim_cotangents_batch)
from .optim import make_optimizer
from .prior import GaussianMixture, PromptBank
from .reward import RewardModel
from .schedule import NoiseSchedule


class EngineAbort(RuntimeError):
    """Raised when a run hits non-finite numbers; carries diagnostics."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics


@dataclass
class TrainConfig:
    steps: int = 4000
    batch_per_step: int = 8
    lr: float = 5e-3
    optimizer: str = "adam"
    seed: int = 0
    t_strategy: str = "uniform"
    snapshot_every: int = 200
    track_divergence: bool = True
    divergence_n_mc: int = 2000
    fake_warmup_steps: int = 500
    fake_updates_per_step: int = 1
    frames_every: int = 0
    particle_limit: float = 1e6


@dataclass
class RunSetup:
    """Everything a run needs besides the training hyperparameters."""

    sched: NoiseSchedule
    bank: PromptBank
    views: list
    spec: ObjectiveSpec
    n_particles: int = 64
    dim: int = 2
    init_mean: float = 0.0
    init_std: float = 0.5
    reward: RewardModel | None = None
    eval_mix: GaussianMixture | None = None
    dsm: DsmConfig = field(default_factory=DsmConfig)
    generator_kind: str = "particles"
    latent_dim: int = 2
    mlp_hidden: int = 32

    def evaluation_mixture(self) -> GaussianMixture:
        return self.eval_mix if self.eval_mix is not None else self.bank.mixture(None)


@dataclass
class RunReport:
    steps_run: int
    final_entropy: float
    mode_counts: list
    final_divergence: float
    aborted: bool
    wall_time: float
    outdir: str | None


def mode_coverage(points, mix: GaussianMixture, sched: NoiseSchedule):
    """Count points per mixture mode.

    A point belongs to the component with the highest posterior
    responsibility under the mixture diffused to the schedule's t_min
    (ties break toward the lowest component index, which argmax gives).
    """
    m = mix.diffuse(sched, sched.t_min)
    resp = m.responsibilities(np.asarray(points, dtype=float))
    assign = np.argmax(resp, axis=-1)
    return np.bincount(assign, minlength=mix.n_components)


def coverage_entropy(counts):
    """Shannon entropy in nats of the mode-occupancy histogram."""
    counts = np.asarray(counts, dtype=float)
    total = counts.sum()
    if total <= 0:
        return 0.0
    p = counts[counts > 0] / total
    return float(-np.sum(p * np.log(p)))


def _mlp_grad(state, setup, cfg, batch, net=None, spec=None):
    """Per-sample fallback for generator kinds without a batched path."""
    spec = setup.spec if spec is None else spec
    grad = np.zeros_like(state.theta)
    loss_sum = 0.0
    for j in range(batch.t.size):
        vi = int(batch.view_idx[j])
        _, pull = render(state, setup.views[vi], batch.selector[j],
                         view_index=vi)
        sample = make_step_sample(state, setup.views, setup.sched, setup.bank,
                                  spec, vi, batch.selector[j],
                                  batch.t[j], batch.eps[j],
                                  reward=setup.reward, net=net)
        if spec.family == "kl":
            cot = grad_kl_unified(sample, spec, setup.sched)
            loss = 0.5 * float(np.sum(cot**2))
        else:
            loss, cot = grad_sim_total(sample, spec, setup.sched)
        grad += pull(cot)
        loss_sum += loss
    return grad / batch.t.size, loss_sum / batch.t.size


def _single_block_spec(spec, block):
    """Copy of spec with every coefficient but one zeroed out."""
    a1, a2, a3 = spec.coefficients()
    keep = {"cond": (a1, 0.0, 0.0), "uncond": (0.0, a2, 0.0),
            "reward": (0.0, 0.0, a3)}[block]
    return replace(spec, alpha=keep)


def run_step(state, setup: RunSetup, cfg: TrainConfig, rng, step,
             opt=None, net=None, batch=None):
    """One generator update. Returns (grad, stats dict).

    By default every objective block reuses one drawn batch; when
    spec.independent_draws is set, each active block gets its own fresh
    batch and the block gradients are summed. ``batch`` overrides the
    drawn randomness (forcing the shared path); tests use it to feed
    mirrored or frozen draws through the exact production path.
    """
    if batch is None:
        draw = lambda: sample_draw_batch(state, setup.views, setup.sched,
                                         cfg.batch_per_step, rng,
                                         t_strategy=cfg.t_strategy, step=step,
                                         total_steps=cfg.steps)
        if setup.spec.independent_draws:
            batches = [(blk, draw()) for blk in active_blocks(setup.spec)]
        else:
            batches = [(None, draw())]
    else:
        batches = [(None, batch)]
    grad = np.zeros_like(state.theta)
    loss = 0.0
    for blk, b in batches:
        if state.kind == "particles":
            restrict = None if blk is None else (blk,)
            if setup.spec.family == "kl":
                cot, stats = kl_cotangents_batch(
                    state, setup.views, setup.sched, setup.bank, setup.spec,
                    b, reward=setup.reward, blocks=restrict)
            else:
                cot, stats = sim_cotangents_batch(
                    state, setup.views, setup.sched, setup.bank, setup.spec,
                    b, reward=setup.reward, net=net, blocks=restrict)
            grad = grad + assemble_theta_grad(state, setup.views, b, cot)
            loss += float(np.mean(stats["loss"]))
        else:
            sp = setup.spec if blk is None else _single_block_spec(setup.spec,
                                                                   blk)
            g, l = _mlp_grad(state, setup, cfg, b, net=net, spec=sp)
            grad = grad + g
            loss += l
    if not (np.all(np.isfinite(grad)) and np.isfinite(loss)):
        t_all = np.concatenate([b.t for _, b in batches])
        raise EngineAbort(
            f"non-finite update at step {step}",
            {"step": step, "loss": loss,
             "grad_finite_frac": float(np.mean(np.isfinite(grad))),
             "t_min": float(t_all.min()), "t_max": float(t_all.max()),
             "theta_max": float(np.max(np.abs(state.theta)))})
    if opt is not None:
        opt.step({"theta": state.theta}, {"theta": grad})
    return grad, {"loss": loss, "grad_norm": float(np.linalg.norm(grad))}


def _trace_row(step, loss, grad_norm, entropy, divergence, counts):
    cells = [str(step), "%.12g" % loss, "%.12g" % grad_norm,
             "%.12g" % entropy, "%.12g" % divergence]
    cells += [str(int(c)) for c in counts]
    return ",".join(cells) + "\n"


def _snapshot_divergence(state, setup, cfg, step):
    if not cfg.track_divergence:
        return float("nan")
    if state.kind != "particles":
        # The estimator needs the generator's own noisy score, which is
        # only closed-form for particle clouds; stand in a rendered cloud.
        pts = _mlp_cloud(state, setup, cfg)
        state = GeneratorState("particles", pts.ravel(), pts.shape[0],
                               state.dim)
    rng = np.random.default_rng([cfg.seed, 7919, step])
    return divergence_estimate(state, setup.evaluation_mixture(), setup.spec,
                               setup.sched, cfg.divergence_n_mc, rng)


def init_generator(setup: RunSetup, rng) -> GeneratorState:
    if setup.generator_kind == "particles":
        return GeneratorState.particles_init(setup.n_particles, setup.dim,
                                             setup.init_mean, setup.init_std,
                                             rng)
    return GeneratorState.mlp_init(setup.latent_dim, len(setup.views),
                                   setup.mlp_hidden, setup.dim, rng)


def run_experiment(setup: RunSetup, cfg: TrainConfig,
                   outdir=None) -> RunReport:
    """Full training run with snapshots; writes trace/report/particle files."""
    t_start = time.perf_counter()
    out = None
    if outdir is not None:
        out = Path(outdir)
        out.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng([cfg.seed, 101])
    state = init_generator(setup, rng)
    opt = make_optimizer(cfg.optimizer, cfg.lr)

    net = None
    trainer = None
    rng_fake = np.random.default_rng([cfg.seed, 202])
    if setup.spec.family == "sim" and setup.spec.fake_source == "learned":
        net = ScoreNet(setup.dim, len(setup.views), hidden=setup.dsm.hidden,
                       n_freqs=setup.dsm.n_freqs,
                       rng=np.random.default_rng([cfg.seed, 303]))
        trainer = DsmTrainer(net, setup.dsm)
        trainer.update(state, setup.views, setup.sched, rng_fake,
                       n_updates=cfg.fake_warmup_steps)

    eval_mix = setup.evaluation_mixture()
    trace_lines = ["step,loss,grad_norm,entropy,divergence," +
                   ",".join(f"mode_{k}" for k in range(eval_mix.n_components)) +
                   "\n"]
    aborted = False
    stats = {"loss": float("nan"), "grad_norm": float("nan")}
    entropy, counts, div = float("nan"), [], float("nan")

    def snapshot(step):
        nonlocal entropy, counts, div
        pts = state.particles if state.kind == "particles" else None
        if pts is None:
            pts = _mlp_cloud(state, setup, cfg)
        counts = mode_coverage(pts, eval_mix, setup.sched)
        entropy = coverage_entropy(counts)
        div = _snapshot_divergence(state, setup, cfg, step)
        trace_lines.append(_trace_row(step, stats["loss"], stats["grad_norm"],
                                      entropy, div, counts))
        if out is not None:
            np.savetxt(out / f"particles_{step}.csv", pts, delimiter=",",
                       fmt="%.17g")
            if cfg.frames_every and step % cfg.frames_every == 0:
                from .frames import render_frame
                (out / "frames").mkdir(exist_ok=True)
                render_frame(pts, eval_mix, out / "frames" / f"{step}.svg")

    step = 0
    try:
        for step in range(cfg.steps):
            _, stats = run_step(state, setup, cfg, rng, step, opt=opt, net=net)
            if trainer is not None:
                trainer.update(state, setup.views, setup.sched, rng_fake,
                               n_updates=cfg.fake_updates_per_step)
            if np.max(np.abs(state.theta)) > cfg.particle_limit:
                raise EngineAbort(
                    f"parameter blow-up at step {step}",
                    {"step": step,
                     "theta_max": float(np.max(np.abs(state.theta)))})
            if cfg.snapshot_every and (step + 1) % cfg.snapshot_every == 0:
                snapshot(step + 1)
        if not (cfg.snapshot_every and cfg.steps % cfg.snapshot_every == 0):
            snapshot(cfg.steps)
    except EngineAbort as exc:
        aborted = True
        if out is not None:
            (out / "abort.json").write_text(
                json.dumps(exc.diagnostics, indent=2, sort_keys=True))
        if not trace_lines[-1].startswith(str(step)):
            snapshot(step)

    wall = time.perf_counter() - t_start
    report = RunReport(steps_run=(step + 1) if not aborted else step,
                       final_entropy=float(entropy),
                       mode_counts=[int(c) for c in counts],
                       final_divergence=float(div), aborted=aborted,
                       wall_time=wall, outdir=str(out) if out else None)
    if out is not None:
        (out / "trace.csv").write_text("".join(trace_lines))
        (out / "report.json").write_text(json.dumps({
            "aborted": report.aborted,
            "final_divergence": report.final_divergence,
            "final_entropy": report.final_entropy,
            "mode_counts": report.mode_counts,
            "steps_run": report.steps_run,
            "wall_time_s": round(report.wall_time, 3),
        }, indent=2, sort_keys=True))
    return report


def _mlp_cloud(state, setup: RunSetup, cfg: TrainConfig, n=256):
    """Deterministic sample cloud from an mlp generator for evaluation."""
    rng = np.random.default_rng([cfg.seed, 404])
    lat = rng.standard_normal((n, state.latent_dim))
    pts = np.empty((n, state.dim))
    for j in range(n):
        vi = j % len(setup.views)
        pts[j], _ = render(state, setup.views[vi], lat[j], view_index=vi)
    return pts
