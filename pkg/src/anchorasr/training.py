"""Optimizer and training loop.

The loop is a pure function of (config, corpus): shuffling, mixing draws and
parameter init all come from keyed streams, so reruns and resumed runs
produce byte-identical checkpoints and logs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import Tape, backward
from . import autodiff as ad
from .config import ExperimentConfig
from .layers import ParamSet
from .mixsim import ToyCorpus, training_example
from .objectives import NonFiniteLoss, total_loss, vic_loss
from .seeding import rng_stream
from .system import ExampleForward, System


class Adam:
    """Adam with bias correction; moments live in the parameter dtype so
    checkpointed state round-trips bit-exactly."""

    def __init__(self, ps: ParamSet, beta1: float = 0.9, beta2: float = 0.999,
                 eps: float = 1e-8):
        self.ps = ps
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in ps.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in ps.items()}

    def step(self, lr: float) -> None:
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        for name, p in self.ps.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data -= (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for name in sorted(self.m):
            out[f"adam.m.{name}"] = self.m[name]
            out[f"adam.v.{name}"] = self.v[name]
        return out

    def load_state(self, arrays: dict[str, np.ndarray], t: int) -> None:
        for name in self.m:
            mk, vk = f"adam.m.{name}", f"adam.v.{name}"
            if mk not in arrays or vk not in arrays:
                raise ValueError(f"optimizer state missing for parameter {name!r}")
            if arrays[mk].shape != self.m[name].shape:
                raise ValueError(f"optimizer state shape mismatch for {name!r}")
            self.m[name][...] = arrays[mk]
            self.v[name][...] = arrays[vk]
        self.t = int(t)


def clip_global_norm(ps: ParamSet, max_norm: float) -> float:
    """Scale all gradients so their joint L2 norm is at most max_norm."""
    total = 0.0
    for _, p in ps.items():
        if p.grad is not None:
            total += float(np.sum(p.grad.astype(np.float64) ** 2))
    norm = math.sqrt(total)
    if not math.isfinite(norm):
        raise NonFiniteLoss(f"gradient norm is {norm!r}")
    if norm > max_norm:
        scale = max_norm / norm
        for _, p in ps.items():
            if p.grad is not None:
                p.grad *= np.asarray(scale, dtype=p.grad.dtype)
    return norm


def warmup_lr(base: float, step: int, warmup_steps: int) -> float:
    """Linear warmup to the base rate; step counts from 1."""
    return base * min(1.0, step / warmup_steps)


@dataclass
class BatchStats:
    total: float
    rnnt: float
    fr: float
    vic: float


def batch_loss(system: System, forwards: list[ExampleForward]):
    """Combine per-example terms into the batch objective.

    Mean transducer loss, plus the weighted mean reconstruction term, plus
    the decorrelation term over the batch of half-anchor context pairs.
    """
    cfg = system.cfg.objective
    n = len(forwards)
    if n == 0:
        raise ValueError("empty batch")
    rnnt = ad.affine(ad.add_n([f.rnnt for f in forwards]), 1.0 / n, 0.0)
    fr = None
    if cfg.mode in ("FR", "BOTH"):
        terms = [f.fr for f in forwards if f.fr is not None]
        if terms:
            fr = ad.affine(ad.add_n(terms), 1.0 / len(terms), 0.0)
    vic = None
    vic_parts = (0.0, 0.0, 0.0)
    if cfg.mode in ("VIC", "BOTH"):
        pairs = [f.half_contexts for f in forwards if f.half_contexts is not None]
        if len(pairs) >= 2:
            C = ad.concat([p[0] for p in pairs], axis=0)
            Cp = ad.concat([p[1] for p in pairs], axis=0)
            terms = vic_loss(system.expander, C, Cp, cfg.weights, cfg.variance_epsilon)
            vic = terms.total
            vic_parts = (terms.variance, terms.invariance, terms.covariance)
    mode = cfg.mode
    if fr is None and mode in ("FR", "BOTH"):
        mode = "VIC" if mode == "BOTH" else "NONE"
    if vic is None and mode in ("VIC", "BOTH"):
        mode = "FR" if mode == "BOTH" else "NONE"
    total = total_loss(rnnt, vic, fr, cfg.weights, mode)
    stats = BatchStats(total=total.item(), rnnt=rnnt.item(),
                       fr=fr.item() if fr is not None else 0.0,
                       vic=vic.item() if vic is not None else 0.0)
    return total, stats, vic_parts


def _dev_uids(corpus: ToyCorpus, cfg: ExperimentConfig) -> list[str]:
    uids = corpus.split_uids("dev")
    k = min(cfg.optimizer.dev_subset, len(uids))
    perm = rng_stream(cfg.seed, "dev-subset").permutation(len(uids))
    return [uids[i] for i in perm[:k]]


def dev_loss(system: System, corpus: ToyCorpus, cfg: ExperimentConfig) -> float:
    """Mean transducer loss on a fixed mixed dev subset (epoch-0 draws)."""
    uids = _dev_uids(corpus, cfg)
    vals = []
    with ad.suppress_recording():
        for uid in uids:
            ex = training_example(corpus, uid, 0, cfg.mixer)
            vals.append(system.training_forward(ex).rnnt.item())
    return float(np.mean(vals))


_LOG_HEADER = "step,epoch,lr,total,rnnt,vic,fr,grad_norm\n"


def _log_row(step, epoch, lr, st: BatchStats, gnorm) -> str:
    return (f"{step},{epoch},{lr:.10g},{st.total:.10g},{st.rnnt:.10g},"
            f"{st.vic:.10g},{st.fr:.10g},{gnorm:.10g}\n")


def _rewind_log(path: Path, start_epoch: int) -> list[str]:
    """Keep only rows from epochs before the resume point."""
    if not path.exists():
        return [_LOG_HEADER]
    lines = path.read_text().splitlines(keepends=True)
    kept = [lines[0]] if lines else [_LOG_HEADER]
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) > 1 and int(parts[1]) < start_epoch:
            kept.append(line)
    return kept


@dataclass
class TrainResult:
    system: System
    steps: int
    epochs_run: int
    best_dev: float
    last_path: Path
    best_path: Path
    log_path: Path


def train(cfg: ExperimentConfig, corpus: ToyCorpus, out_dir,
          resume: bool = False, progress=None) -> TrainResult:
    """Run (or continue) training; writes last.ckpt, best.ckpt and train_log.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    last_path, best_path = out / "last.ckpt", out / "best.ckpt"
    log_path = out / "train_log.csv"

    opt_cfg = cfg.optimizer
    start_epoch = 0
    best_dev = math.inf
    step = 0
    if resume and last_path.exists():
        # rebuild under the caller's config (not the checkpoint's) so that a
        # resumed run saves exactly what an uninterrupted run would save
        system, meta, rest = System.load(last_path, cfg)
        adam = Adam(system.ps, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
        adam.load_state(rest, meta["adam_t"])
        start_epoch = int(meta["epoch"]) + 1
        step = int(meta["step"])
        best_dev = float(meta["best_dev"])
    else:
        system = System(cfg)
        adam = Adam(system.ps, opt_cfg.beta1, opt_cfg.beta2, opt_cfg.eps)
    log_lines = _rewind_log(log_path, start_epoch)

    uids = corpus.split_uids("train")
    n = len(uids)
    bs = opt_cfg.batch_size
    for epoch in range(start_epoch, opt_cfg.epochs):
        perm = rng_stream(cfg.seed, "shuffle", epoch).permutation(n)
        for lo in range(0, n, bs):
            idx = perm[lo:lo + bs]
            examples = [training_example(corpus, uids[i], epoch, cfg.mixer) for i in idx]
            with Tape() as tape:
                forwards = [system.training_forward(ex) for ex in examples]
                total, stats, _ = batch_loss(system, forwards)
                backward(tape, total)
            gnorm = clip_global_norm(system.ps, opt_cfg.clip_norm)
            step += 1
            lr = warmup_lr(opt_cfg.learning_rate, step, opt_cfg.warmup_steps)
            adam.step(lr)
            system.ps.zero_grads()
            log_lines.append(_log_row(step, epoch, lr, stats, gnorm))
        dv = dev_loss(system, corpus, cfg)
        meta = {"epoch": epoch, "step": step, "adam_t": adam.t,
                "best_dev": min(best_dev, dv), "dev_loss": dv}
        system.save(last_path, extra_meta=meta, extra_arrays=adam.state_arrays())
        if dv < best_dev:
            best_dev = dv
            system.save(best_path, extra_meta=meta, extra_arrays=adam.state_arrays())
        log_path.write_text("".join(log_lines))
        if progress is not None:
            progress(epoch, step, stats.total, dv)
    if not best_path.exists():
        raise RuntimeError("training produced no checkpoint")
    return TrainResult(system=system, steps=step, epochs_run=opt_cfg.epochs - start_epoch,
                       best_dev=best_dev, last_path=last_path, best_path=best_path,
                       log_path=log_path)
