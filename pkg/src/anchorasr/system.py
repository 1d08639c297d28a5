"""Assembles a full recognizer from an experiment config.

A System owns the parameter set and knows how to run the three flavors of
forward pass (plain, anchor-mean baseline, anchored with bias/gating), how
to decode, and how to snapshot itself into a checkpoint.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import checkpoint
from .anchoring import (AnchorSpec, AuxNetwork, anchored_forward,
                        bias_encoder_inputs, extract_context, frame_block_map,
                        gate_bias, subsegment_embeddings)
from .autodiff import Tensor
from .baselines import anchor_mean, apply_amc, apply_ams, make_amc
from .config import ExperimentConfig, config_from_dict, config_to_dict
from .layers import Linear, ParamSet
from .mixsim import TrainExample
from .objectives import (Expander, FeatureReconstructor, extract_half_contexts,
                         feature_reconstruction_loss)
from .seeding import rng_stream
from .transducer import TransducerModel, greedy_decode, rnnt_loss


@dataclass
class ExampleForward:
    """Per-utterance pieces of the training loss."""
    rnnt: Tensor
    fr: Tensor | None = None
    half_contexts: tuple[Tensor, Tensor] | None = None
    gate_frames: Tensor | None = None


class System:
    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.ps = ParamSet(cfg.precision)
        self.model = TransducerModel(cfg.model, self.ps, rng_stream(cfg.seed, "init", "model"))
        self.aux: AuxNetwork | None = None
        self.w_proj: Linear | None = None
        self.expander: Expander | None = None
        self.fr: FeatureReconstructor | None = None
        self.amc: Linear | None = None
        m = cfg.model
        if cfg.anchoring.enabled:
            self.aux = AuxNetwork(self.ps, m, rng_stream(cfg.seed, "init", "aux"))
            if cfg.anchoring.encoder_bias:
                self.w_proj = Linear(self.ps, "bias.proj", m.d_model + m.context_dim,
                                     m.d_model, rng_stream(cfg.seed, "init", "bias"),
                                     bias=False)
        obj = cfg.objective
        if obj.mode in ("VIC", "BOTH"):
            self.expander = Expander(self.ps, m.context_dim, obj.expander_hidden,
                                     obj.expander_dim, rng_stream(cfg.seed, "init", "expander"))
        if obj.mode in ("FR", "BOTH"):
            # frame labels are token ids with 0 reserved for non-speech
            self.fr = FeatureReconstructor(self.ps, m.vocab_size + 1, obj.fr_label_embed,
                                           m.context_dim, obj.fr_hidden, m.d_raw,
                                           rng_stream(cfg.seed, "init", "fr"))
        if cfg.baseline == "amc":
            self.amc = make_amc(self.ps, m.d_raw, rng_stream(cfg.seed, "init", "amc"))

    # -------------------------------------------------------------- forward

    def _baseline_frames(self, frames: np.ndarray, anchor_len: int) -> Tensor:
        x = Tensor(frames, dtype=self.ps.dtype)
        mean = anchor_mean(x, anchor_len)
        if self.cfg.baseline == "ams":
            return apply_ams(x, mean)
        return apply_amc(x, mean, self.amc)

    def training_forward(self, ex: TrainExample) -> ExampleForward:
        seq = ex.seq
        tokens = seq.transcript
        if self.cfg.baseline != "none":
            x = self._baseline_frames(seq.frames, seq.anchor_len_frames)
            lattice = self.model.forward_lattice(x, tokens)
            return ExampleForward(rnnt=rnnt_loss(lattice, tokens))
        if not self.cfg.anchoring.enabled:
            lattice = self.model.forward_lattice(seq.frames, tokens)
            return ExampleForward(rnnt=rnnt_loss(lattice, tokens))

        spec = AnchorSpec(
            anchor_len_raw=seq.anchor_len_frames, source=ex.anchor_source,
            clean_frames=ex.clean_frames if ex.anchor_source == "clean" else None)
        fwd = anchored_forward(
            self.model, self.aux, self.w_proj, seq.frames, tokens, spec,
            self.cfg.anchoring.subsegment,
            enable_bias=self.cfg.anchoring.encoder_bias,
            enable_gating=self.cfg.anchoring.joiner_gating)
        out = ExampleForward(rnnt=rnnt_loss(fwd.lattice, tokens),
                             gate_frames=fwd.gate_frames)
        if self.fr is not None:
            labels = seq.frame_labels[:spec.anchor_len_raw]
            out.fr = feature_reconstruction_loss(self.fr, labels, fwd.context, fwd.anchor_raw)
        if self.expander is not None and fwd.anchor_stacked.shape[0] >= 2:
            out.half_contexts = extract_half_contexts(self.aux, fwd.anchor_stacked)
        return out

    # --------------------------------------------------------------- decode

    def decode(self, frames: np.ndarray, anchor_len_raw: int,
               emission_cap: int = 4) -> list[int]:
        """Greedy transcript for one (possibly mixed) utterance."""
        with ad.suppress_recording():
            if self.cfg.baseline != "none":
                x = self._baseline_frames(frames, anchor_len_raw)
                encoded = self.model.encode(self.model.stack_features(x))
                return greedy_decode(self.model, encoded, None, emission_cap)
            if not self.cfg.anchoring.enabled:
                encoded = self.model.encode(self.model.stack_features(frames))
                return greedy_decode(self.model, encoded, None, emission_cap)
            anchor_raw = frames[:anchor_len_raw]
            context = extract_context(self.aux, self.model.stack_features(anchor_raw))
            stacked = self.model.stack_features(frames)
            enc_in = (bias_encoder_inputs(stacked, context, self.w_proj)
                      if self.cfg.anchoring.encoder_bias else stacked)
            encoded = self.model.encode(enc_in)
            gate = None
            if self.cfg.anchoring.joiner_gating:
                segs = subsegment_embeddings(self.aux, stacked, self.cfg.anchoring.subsegment)
                blocks = gate_bias(context, segs)
                bmap = frame_block_map(stacked.shape[0], self.cfg.anchoring.subsegment)
                gate = blocks.data[bmap, 0]
            return greedy_decode(self.model, encoded, gate, emission_cap)

    def gate_values(self, frames: np.ndarray, anchor_len_raw: int) -> np.ndarray:
        """Per-encoder-frame gate values b_t; needs the anchor summarizer."""
        if self.aux is None:
            raise ValueError("this system has no anchor summarizer, so no gates")
        with ad.suppress_recording():
            anchor_raw = frames[:anchor_len_raw]
            context = extract_context(self.aux, self.model.stack_features(anchor_raw))
            stacked = self.model.stack_features(frames)
            segs = subsegment_embeddings(self.aux, stacked, self.cfg.anchoring.subsegment)
            blocks = gate_bias(context, segs)
            bmap = frame_block_map(stacked.shape[0], self.cfg.anchoring.subsegment)
            return blocks.data[bmap, 0]

    # ----------------------------------------------------------- checkpoint

    def save(self, path, extra_meta: dict | None = None,
             extra_arrays: dict[str, np.ndarray] | None = None) -> None:
        meta = {"config": config_to_dict(self.cfg)}
        if extra_meta:
            meta.update(extra_meta)
        arrays = self.ps.state_arrays()
        if extra_arrays:
            overlap = set(arrays) & set(extra_arrays)
            if overlap:
                raise ValueError(f"extra arrays collide with parameters: {sorted(overlap)}")
            arrays.update(extra_arrays)
        checkpoint.save_checkpoint(path, arrays, meta)

    @classmethod
    def load(cls, path, cfg: ExperimentConfig | None = None
             ) -> tuple["System", dict, dict[str, np.ndarray]]:
        """Rebuild a system from a checkpoint.

        Returns (system, meta, leftover arrays not consumed as parameters),
        the leftovers being optimizer state when present. By default the
        config embedded in the checkpoint is used; passing cfg overrides it
        (the parameter shapes must still match).
        """
        meta, arrays = checkpoint.load_checkpoint(path)
        if cfg is None:
            cfg = config_from_dict(meta["config"])
        sys = cls(cfg)
        wanted = set(sys.ps.names())
        missing = wanted - set(arrays)
        if missing:
            raise ValueError(f"checkpoint {path} lacks parameter(s) {sorted(missing)}")
        sys.ps.load_arrays({k: arrays[k] for k in wanted})
        rest = {k: v for k, v in arrays.items() if k not in wanted}
        return sys, meta, rest


def make_cell_decoder(system: System, cell_dir):
    """decode_fn(entry) for scoring a materialized manifest cell."""
    from . import featio
    cdir = Path(cell_dir)

    def decode_fn(entry):
        frames = featio.read_features(cdir / entry.path)
        return system.decode(frames, entry.anchor_len)

    return decode_fn


def make_cell_gate_fn(system: System, cell_dir):
    """gate_fn(entry) returning per-encoder-frame gate values for a cell."""
    from . import featio
    cdir = Path(cell_dir)

    def gate_fn(entry):
        frames = featio.read_features(cdir / entry.path)
        return system.gate_values(frames, entry.anchor_len)

    return gate_fn
