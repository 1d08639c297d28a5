"""Anchor-mean baselines operating on raw (pre-stacking) features.

AMS subtracts the per-dimension mean of the anchor segment from every frame.
AMC concatenates that mean to each frame and applies a learned affine map;
with weights [I; -I] and zero bias it reproduces AMS bit for bit.
"""
from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .layers import Linear, ParamSet

BASELINE_KINDS = ("none", "ams", "amc")


def anchor_mean(frames: Tensor, anchor_len: int) -> Tensor:
    """Per-dimension mean over the anchor span -> (1, d)."""
    if not (1 <= anchor_len <= frames.shape[0]):
        raise ValueError(f"anchor length {anchor_len} outside [1, {frames.shape[0]}]")
    return ad.mean_axis0(ad.slice_rows(frames, 0, anchor_len))


def apply_ams(frames: Tensor, mean: Tensor) -> Tensor:
    """Anchor mean subtraction."""
    return ad.sub(frames, mean)


def amc_equivalent_weights(d_raw: int) -> np.ndarray:
    """The AMC weight matrix that makes it coincide with AMS exactly."""
    eye = np.eye(d_raw)
    return np.concatenate([eye, -eye], axis=0)


def make_amc(ps: ParamSet, d_raw: int, rng: np.random.Generator) -> Linear:
    """AMC projection (2d -> d); initialized at the AMS-equivalent point."""
    return Linear(ps, "amc", 2 * d_raw, d_raw, rng,
                  bias=True, w_init=amc_equivalent_weights(d_raw))


def apply_amc(frames: Tensor, mean: Tensor, proj: Linear) -> Tensor:
    """Anchor mean concatenation followed by the learned affine map."""
    T = frames.shape[0]
    joined = ad.concat([frames, ad.broadcast_rows(mean, T)], axis=1)
    return proj(joined)
