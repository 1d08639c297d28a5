"""Anchor-based context: aux embeddings, encoder biasing, joiner gating.

The context embedding c summarizes the wake-word segment; biasing feeds it to
the encoder input, gating compares it against sub-segment embeddings and
shifts blank/label logits additively in both training and decoding.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Conv1dSame, Linear, ParamSet
from .transducer import ModelConfig, TransducerModel

log = logging.getLogger(__name__)


@dataclass
class AnchorSpec:
    """Where the anchor lives and which signal it is read from.

    source == "clean" reads `clean_frames` (raw rate); source == "mixed"
    reads the leading anchor_len_raw frames of the utterance itself.
    """

    anchor_len_raw: int
    source: str = "mixed"
    clean_frames: np.ndarray | None = None

    def validate(self, stack_factor: int) -> None:
        if self.source not in ("clean", "mixed"):
            raise ValueError(f"anchor source must be clean|mixed, got {self.source!r}")
        if self.anchor_len_raw < stack_factor:
            raise ValueError(
                f"anchor has {self.anchor_len_raw} raw frames; needs >= stack_factor "
                f"({stack_factor}) to survive stacking")
        if self.source == "clean":
            if self.clean_frames is None:
                raise ValueError("clean anchor source requires clean_frames")
            if self.clean_frames.shape[0] < self.anchor_len_raw:
                raise ValueError("clean_frames shorter than the declared anchor length")


@dataclass
class SubsegmentConfig:
    """Sub-segment windows in encoder frames: consecutive blocks plus context."""

    block: int = 4
    left_context: int = 32
    right_context: int = 4

    def validate(self) -> None:
        if self.block < 1 or self.left_context < 0 or self.right_context < 0:
            raise ValueError("block must be >= 1 and contexts >= 0")


class AuxNetwork:
    """Tiny convolutional summarizer: encoder-rate frames -> one embedding."""

    def __init__(self, ps: ParamSet, cfg: ModelConfig, rng: np.random.Generator):
        self.conv1 = Conv1dSame(ps, "aux.conv1", 3, cfg.d_model, cfg.aux_hidden, rng)
        self.conv2 = Conv1dSame(ps, "aux.conv2", 3, cfg.aux_hidden, cfg.aux_hidden, rng)
        self.out = Linear(ps, "aux.out", cfg.aux_hidden, cfg.context_dim, rng)

    def __call__(self, stacked: Tensor) -> Tensor:
        if stacked.shape[0] < 1:
            raise ValueError("aux network needs at least one encoder frame")
        h = ad.relu(self.conv1(stacked))
        h = ad.relu(self.conv2(h))
        return self.out(ad.mean_axis0(h))  # (1, D)


def extract_context(aux: AuxNetwork, anchor_stacked: Tensor) -> Tensor:
    """Context embedding from the stacked anchor segment."""
    return aux(anchor_stacked)


def bias_encoder_inputs(stacked: Tensor, context: Tensor, w_proj: Linear) -> Tensor:
    """x'_t = ReLU([x_t, c] W_proj); output keeps the encoder input width."""
    T = stacked.shape[0]
    tiled = ad.broadcast_rows(context, T)
    return ad.relu(w_proj(ad.concat([stacked, tiled], axis=1)))


def subsegment_windows(T: int, cfg: SubsegmentConfig) -> list[tuple[int, int, int, int]]:
    """(block_start, block_end, win_start, win_end) per block, ends exclusive.

    Windows extend each block by the configured left/right context and clip at
    the utterance boundary.
    """
    cfg.validate()
    if T < 1:
        raise ValueError("empty utterance has no sub-segments")
    out = []
    for s in range(0, T, cfg.block):
        e = min(s + cfg.block, T)
        out.append((s, e, max(0, s - cfg.left_context), min(T, e + cfg.right_context)))
    return out


def frame_block_map(T: int, cfg: SubsegmentConfig) -> np.ndarray:
    """Index of the block owning each encoder frame."""
    return np.arange(T) // cfg.block


def subsegment_embeddings(aux: AuxNetwork, stacked: Tensor,
                          cfg: SubsegmentConfig) -> Tensor:
    """Aux embedding per sub-segment window -> (num_blocks, D)."""
    rows = []
    for _, _, ws, we in subsegment_windows(stacked.shape[0], cfg):
        rows.append(aux(ad.slice_rows(stacked, ws, we)))
    return rows[0] if len(rows) == 1 else ad.concat(rows, axis=0)


def gate_bias(context: Tensor, seg_embeddings: Tensor) -> Tensor:
    """b = sigmoid(cos(c, h)) per sub-segment -> (num_blocks, 1).

    Cosine of a zero-norm operand is defined as 0 (b = 0.5); that case is
    degenerate and logged.
    """
    hd = seg_embeddings.data
    zero_rows = int(np.sum((hd * hd).sum(axis=1) == 0.0))
    cd = context.data
    if zero_rows or float((cd * cd).sum()) == 0.0:
        log.warning("gate_bias: degenerate zero-norm input (context=%s, rows=%d); cosine set to 0",
                    float((cd * cd).sum()) == 0.0, zero_rows)
    return ad.sigmoid(ad.cosine_rows(seg_embeddings, context))


def expand_gate_to_frames(block_bias: Tensor, block_map: np.ndarray) -> Tensor:
    """Per-block gate values -> per-frame column (T, 1)."""
    return ad.take_rows(block_bias, block_map)


def apply_joiner_gating(lattice: Tensor, frame_bias: Tensor) -> Tensor:
    """Additive gate: blank logits get 1 - b_t, every label logit gets b_t."""
    if lattice.ndim != 3:
        raise ShapeError(f"apply_joiner_gating: lattice must be 3-D, got {lattice.shape}")
    T = lattice.shape[0]
    if frame_bias.shape != (T, 1):
        raise ShapeError(f"apply_joiner_gating: bias must be ({T}, 1), got {frame_bias.shape}")
    b = frame_bias.data[:, 0]
    value = lattice.data.copy()
    value[:, :, 0] += (1.0 - b)[:, None]
    value[:, :, 1:] += b[:, None, None]

    def vjp(g):
        db = g[:, :, 1:].sum(axis=(1, 2)) - g[:, :, 0].sum(axis=1)
        return (g, db[:, None].astype(b.dtype, copy=False))

    return ad.apply([lattice, frame_bias], value, vjp)


@dataclass
class AnchoredForward:
    """Everything the losses and the decoder need from one anchored pass."""

    lattice: Tensor
    context: Tensor
    anchor_stacked: Tensor
    anchor_raw: np.ndarray
    gate_frames: Tensor | None = None
    gate_blocks: Tensor | None = None
    block_map: np.ndarray | None = None


def anchored_forward(model: TransducerModel, aux: AuxNetwork,
                     w_proj: Linear | None, seq_frames: np.ndarray,
                     tokens, spec: AnchorSpec, subseg: SubsegmentConfig,
                     enable_bias: bool = True, enable_gating: bool = True) -> AnchoredForward:
    """Full anchored forward pass to a (possibly gated) logits lattice.

    With both switches off this reduces exactly to the plain transducer pass.
    """
    spec.validate(model.cfg.stack_factor)
    if enable_bias and w_proj is None:
        raise ValueError("encoder biasing enabled but no projection parameters supplied")
    anchor_raw = (spec.clean_frames if spec.source == "clean" else seq_frames)[:spec.anchor_len_raw]
    anchor_stacked = model.stack_features(anchor_raw)
    context = extract_context(aux, anchor_stacked)

    stacked = model.stack_features(seq_frames)
    enc_in = bias_encoder_inputs(stacked, context, w_proj) if enable_bias else stacked
    f = model.encode(enc_in)
    g = model.predict(tokens)
    lattice = model.join(f, g)

    gate_frames = gate_blocks = block_map = None
    if enable_gating:
        segs = subsegment_embeddings(aux, stacked, subseg)
        gate_blocks = gate_bias(context, segs)
        block_map = frame_block_map(stacked.shape[0], subseg)
        gate_frames = expand_gate_to_frames(gate_blocks, block_map)
        lattice = apply_joiner_gating(lattice, gate_frames)
    return AnchoredForward(lattice=lattice, context=context,
                           anchor_stacked=anchor_stacked, anchor_raw=anchor_raw,
                           gate_frames=gate_frames, gate_blocks=gate_blocks,
                           block_map=block_map)


def gate_values_for_decode(model: TransducerModel, aux: AuxNetwork,
                           seq_frames: np.ndarray, spec: AnchorSpec,
                           subseg: SubsegmentConfig) -> np.ndarray:
    """Per-frame gate values b_t for decoding, computed without a tape."""
    with ad.suppress_recording():
        spec.validate(model.cfg.stack_factor)
        anchor_raw = (spec.clean_frames if spec.source == "clean" else seq_frames)[:spec.anchor_len_raw]
        context = extract_context(aux, model.stack_features(anchor_raw))
        stacked = model.stack_features(seq_frames)
        segs = subsegment_embeddings(aux, stacked, subseg)
        blocks = gate_bias(context, segs)
        bmap = frame_block_map(stacked.shape[0], subseg)
        return blocks.data[bmap, 0]
