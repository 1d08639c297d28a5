"""Auxiliary training objectives on the anchor segment.

Feature reconstruction rebuilds anchor frames from frame labels plus the
context embedding. The variance-invariance-covariance regularizer pushes the
embeddings of the two anchor halves together while keeping per-dimension
spread and decorrelation, which stops the context encoder from collapsing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Embedding, Linear, ParamSet

MODES = ("NONE", "FR", "VIC", "BOTH")


@dataclass
class LossWeights:
    lambda_fr: float = 0.1
    gamma: float = 1.0    # variance hinge
    mu: float = 1.0       # invariance
    nu: float = 0.05      # covariance

    def validate(self) -> None:
        for name in ("lambda_fr", "gamma", "mu", "nu"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")


class Expander:
    """Two-layer projection from context space to the wide VIC space."""

    def __init__(self, ps: ParamSet, context_dim: int, hidden: int, out_dim: int,
                 rng: np.random.Generator):
        if out_dim < context_dim:
            raise ValueError(f"expander output {out_dim} must be >= context dim {context_dim}")
        self.l1 = Linear(ps, "expander.l1", context_dim, hidden, rng)
        self.l2 = Linear(ps, "expander.l2", hidden, out_dim, rng)
        self.out_dim = out_dim

    def __call__(self, c: Tensor) -> Tensor:
        return self.l2(ad.relu(self.l1(c)))


class FeatureReconstructor:
    """Per-frame decoder: label embedding plus context -> raw feature frame."""

    def __init__(self, ps: ParamSet, num_labels: int, label_embed: int,
                 context_dim: int, hidden: int, d_raw: int, rng: np.random.Generator):
        self.embed = Embedding(ps, "fr.embed", num_labels, label_embed, rng)
        self.l1 = Linear(ps, "fr.l1", label_embed + context_dim, hidden, rng)
        self.l2 = Linear(ps, "fr.l2", hidden, d_raw, rng)
        self.num_labels = num_labels

    def __call__(self, labels: np.ndarray, context: Tensor) -> Tensor:
        labels = np.asarray(labels, dtype=np.int64)
        if labels.ndim != 1 or labels.size < 1:
            raise ShapeError("feature reconstruction needs a non-empty 1-D label vector")
        if labels.min() < 0 or labels.max() >= self.num_labels:
            raise ValueError(f"frame label outside [0, {self.num_labels})")
        e = self.embed(labels)
        x = ad.concat([e, ad.broadcast_rows(context, labels.size)], axis=1)
        return self.l2(ad.relu(self.l1(x)))


def feature_reconstruction_loss(fr: FeatureReconstructor, labels: np.ndarray,
                                context: Tensor, anchor_frames: np.ndarray | Tensor) -> Tensor:
    """MSE between reconstructed and observed anchor frames."""
    target = anchor_frames if isinstance(anchor_frames, Tensor) else Tensor(anchor_frames, dtype=context.dtype)
    labels = np.asarray(labels, dtype=np.int64)
    if target.shape[0] != labels.size:
        raise ShapeError(f"label count {labels.size} != anchor frame count {target.shape[0]}")
    pred = fr(labels, context)
    return ad.mse(pred, target)


def split_anchor_halves(anchor_stacked: Tensor) -> tuple[Tensor, Tensor]:
    """Split the stacked anchor at its time midpoint; an odd frame count gives
    the extra frame to the first half. Anchors shorter than 2 frames are
    rejected (callers exclude those utterances from the VIC term)."""
    T = anchor_stacked.shape[0]
    if T < 2:
        raise ValueError(f"anchor has {T} encoder frame(s); need >= 2 to split")
    cut = (T + 1) // 2
    return ad.slice_rows(anchor_stacked, 0, cut), ad.slice_rows(anchor_stacked, cut, T)


def extract_half_contexts(aux, anchor_stacked: Tensor) -> tuple[Tensor, Tensor]:
    """Two context views of one anchor: summarize each time half separately."""
    h1, h2 = split_anchor_halves(anchor_stacked)
    return aux(h1), aux(h2)


@dataclass
class VicTerms:
    total: Tensor
    variance: float
    invariance: float
    covariance: float


def _variance_hinge(Z: Tensor, eps: float) -> Tensor:
    std = ad.sqrt(ad.affine(ad.var_axis0(Z, ddof=1), 1.0, eps))
    return ad.mean_all(ad.relu(ad.affine(std, -1.0, 1.0)))


def _off_diagonal_cov(Z: Tensor, mask: Tensor) -> Tensor:
    n, d = Z.shape
    centered = ad.sub(Z, ad.mean_axis0(Z))
    cov = ad.affine(ad.matmul(ad.transpose(centered), centered), 1.0 / (n - 1), 0.0)
    off = ad.mul(cov, mask)
    return ad.affine(ad.sum_all(ad.mul(off, off)), 1.0 / d, 0.0)


def vic_loss(expander: Expander, C: Tensor, C_prime: Tensor,
             weights: LossWeights, eps: float = 1e-4) -> VicTerms:
    """gamma (v(Z) + v(Z')) + mu s(Z, Z') + nu (c(Z) + c(Z')).

    v is the per-dimension hinge on sample std (sqrt stabilized by eps),
    s the elementwise MSE between branches, c the mean squared off-diagonal
    of the batch covariance. Needs at least 2 rows.
    """
    if C.shape != C_prime.shape:
        raise ShapeError(f"vic_loss: branch shapes differ, {C.shape} vs {C_prime.shape}")
    if C.shape[0] < 2:
        raise ValueError("vic_loss needs a batch of >= 2 anchors")
    Z = expander(C)
    Zp = expander(C_prime)
    d = Z.shape[1]
    mask = Tensor(1.0 - np.eye(d), dtype=Z.dtype)
    v = ad.add(_variance_hinge(Z, eps), _variance_hinge(Zp, eps))
    s = ad.mse(Z, Zp)
    c = ad.add(_off_diagonal_cov(Z, mask), _off_diagonal_cov(Zp, mask))
    total = ad.add_n([
        ad.affine(v, weights.gamma, 0.0),
        ad.affine(s, weights.mu, 0.0),
        ad.affine(c, weights.nu, 0.0),
    ])
    return VicTerms(total=total, variance=v.item(), invariance=s.item(), covariance=c.item())


class NonFiniteLoss(RuntimeError):
    """A loss component stopped being finite; training must abort."""


def total_loss(rnnt: Tensor, vic: Tensor | None, fr: Tensor | None,
               weights: LossWeights, mode: str) -> Tensor:
    """Combine components per objective mode; rejects non-finite inputs."""
    if mode not in MODES:
        raise ValueError(f"objective mode must be one of {MODES}, got {mode!r}")
    parts = {"rnnt": rnnt}
    total = rnnt
    if mode in ("FR", "BOTH"):
        if fr is None:
            raise ValueError(f"mode {mode} requires the reconstruction term")
        parts["fr"] = fr
        total = ad.add(total, ad.affine(fr, weights.lambda_fr, 0.0))
    if mode in ("VIC", "BOTH"):
        if vic is None:
            raise ValueError(f"mode {mode} requires the VIC term")
        parts["vic"] = vic
        total = ad.add(total, vic)
    for name, t in parts.items():
        if not np.isfinite(t.item()):
            raise NonFiniteLoss(f"{name} loss is {t.item()!r}")
    return total
