"""Synthetic corpus and deterministic mixture simulation.

Utterances are sequences of per-token feature templates perturbed by a
speaker-style offset and tilt plus a small noise floor; the wake-word prefix
is the anchor. Mixtures add a second utterance at a controlled SNR and shift.
Everything derives from seeded streams, so regeneration is byte-identical.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np

from . import featio
from .seeding import derive_seed, rng_stream
from .transducer import FeatureSequence


@dataclass
class ToyCorpusConfig:
    d_raw: int = 16
    vocab_size: int = 16
    wake_word: tuple[int, ...] = (1, 2)
    body_len: tuple[int, int] = (3, 6)
    frames_per_token: tuple[int, int] = (4, 8)
    train_styles: int = 10
    dev_styles: int = 3
    test_styles: int = 3
    train_utts: int = 480
    dev_utts: int = 240
    test_utts: int = 600
    template_std: float = 1.0
    style_offset_std: float = 0.35
    style_tilt_std: float = 0.3
    # per-utterance loudness range (uniform); (1, 1) renders at a fixed scale
    utterance_gain: tuple[float, float] = (1.0, 1.0)
    # per-token loudness range (uniform), a stress/emphasis analog; with (1, 1)
    # every token of an utterance is rendered at the utterance's level
    token_gain: tuple[float, float] = (1.0, 1.0)
    noise_std: float = 0.08
    # noise-floor frames appended after the last token (endpointing margin);
    # labeled 0 = non-speech
    trailing_silence: int = 0
    seed: int = 0

    def validate(self) -> None:
        if not self.wake_word:
            raise ValueError("wake_word must contain at least one token")
        for tok in self.wake_word:
            if not (1 <= tok <= self.vocab_size):
                raise ValueError(f"wake-word token {tok} outside [1, {self.vocab_size}]")
        if self.body_len[0] < 1 or self.body_len[1] < self.body_len[0]:
            raise ValueError("body_len range must be non-empty and positive")
        if self.frames_per_token[0] < 1 or self.frames_per_token[1] < self.frames_per_token[0]:
            raise ValueError("frames_per_token range must be non-empty and positive")
        if min(self.train_styles, self.dev_styles, self.test_styles) < 1:
            raise ValueError("every split needs at least one style")
        if min(self.train_utts, self.dev_utts, self.test_utts) < 1:
            raise ValueError("every split needs at least one utterance")
        if min(self.template_std, self.noise_std) <= 0:
            raise ValueError("template_std and noise_std must be positive")
        for name in ("utterance_gain", "token_gain"):
            lo, hi = getattr(self, name)
            if lo <= 0 or hi < lo:
                raise ValueError(f"{name} range must be positive and non-empty")
        if self.trailing_silence < 0:
            raise ValueError("trailing_silence must be >= 0")
        if self.vocab_size < 3:
            raise ValueError("no-repeat body sampling needs vocab_size >= 3")


SPLITS = ("train", "dev", "test")


@dataclass
class Utterance:
    uid: str
    split: str
    style: int
    tokens: tuple[int, ...]
    frames: np.ndarray          # (T_raw, d_raw) float64
    frame_labels: np.ndarray    # (T_raw,) int64, 0 = non-speech
    anchor_len: int

    def as_feature_sequence(self) -> FeatureSequence:
        return FeatureSequence(frames=self.frames, transcript=self.tokens,
                               anchor_len_frames=self.anchor_len,
                               frame_labels=self.frame_labels,
                               uid=self.uid, style=self.style)


class ToyCorpus:
    def __init__(self, config: ToyCorpusConfig, feature_mean: np.ndarray,
                 utterances: dict[str, Utterance]):
        self.config = config
        self.feature_mean = feature_mean
        self.utterances = utterances
        self.splits: dict[str, list[str]] = {s: [] for s in SPLITS}
        for uid in sorted(utterances):
            self.splits[utterances[uid].split].append(uid)

    def __getitem__(self, uid: str) -> Utterance:
        return self.utterances[uid]

    def split_uids(self, split: str) -> list[str]:
        return list(self.splits[split])

    def style_of(self, uid: str) -> int:
        return self.utterances[uid].style

    # ------------------------------------------------------------------ io

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        feat_dir = out / "features"
        feat_dir.mkdir(parents=True, exist_ok=True)
        entries = []
        for uid in sorted(self.utterances):
            u = self.utterances[uid]
            rel = f"features/{uid}.bin"
            featio.write_features(out / rel, u.frames)
            entries.append({
                "uid": u.uid, "split": u.split, "style": u.style,
                "tokens": list(u.tokens), "anchor_len": u.anchor_len,
                "frame_labels": [int(x) for x in u.frame_labels],
                "path": rel,
            })
        doc = {
            "format_version": 1,
            "config": _config_to_jsonable(self.config),
            "feature_mean": [float(x) for x in self.feature_mean],
            "utterances": entries,
        }
        (out / "corpus.json").write_text(json.dumps(doc, sort_keys=True, indent=1) + "\n")

    @classmethod
    def load(cls, in_dir) -> "ToyCorpus":
        root = Path(in_dir)
        doc = json.loads((root / "corpus.json").read_text())
        if doc.get("format_version") != 1:
            raise ValueError(f"unsupported corpus format {doc.get('format_version')!r}")
        cfg = _config_from_jsonable(doc["config"])
        utts = {}
        for e in doc["utterances"]:
            frames = featio.read_features(root / e["path"])
            utts[e["uid"]] = Utterance(
                uid=e["uid"], split=e["split"], style=e["style"],
                tokens=tuple(e["tokens"]), frames=frames,
                frame_labels=np.asarray(e["frame_labels"], dtype=np.int64),
                anchor_len=e["anchor_len"])
        return cls(cfg, np.asarray(doc["feature_mean"], dtype=np.float64), utts)


def _config_to_jsonable(cfg: ToyCorpusConfig) -> dict:
    d = asdict(cfg)
    for key in ("wake_word", "body_len", "frames_per_token", "utterance_gain", "token_gain"):
        d[key] = list(d[key])
    return d


def _config_from_jsonable(d: dict) -> ToyCorpusConfig:
    kw = dict(d)
    for key in ("wake_word", "body_len", "frames_per_token", "utterance_gain", "token_gain"):
        kw[key] = tuple(kw[key])
    return ToyCorpusConfig(**kw)


# ---------------------------------------------------------------------------
# synthesis


def _style_params(cfg: ToyCorpusConfig, style_id: int):
    r = rng_stream(cfg.seed, "style", style_id)
    offset = r.standard_normal(cfg.d_raw) * cfg.style_offset_std
    tilt = float(r.standard_normal() * cfg.style_tilt_std)
    return offset, tilt


def synth_corpus(cfg: ToyCorpusConfig) -> ToyCorpus:
    """Render the full train/dev/test corpus from the config seed.

    Style ids are globally unique and split-disjoint; utterances are assigned
    round-robin over their split's styles so every style is populated.
    """
    cfg.validate()
    templates = rng_stream(cfg.seed, "templates").standard_normal(
        (cfg.vocab_size + 1, cfg.d_raw)) * cfg.template_std
    templates[0] = 0.0  # label 0 = non-speech, never rendered
    ramp = np.linspace(-0.5, 0.5, cfg.d_raw)

    style_ranges = {
        "train": range(0, cfg.train_styles),
        "dev": range(cfg.train_styles, cfg.train_styles + cfg.dev_styles),
        "test": range(cfg.train_styles + cfg.dev_styles,
                      cfg.train_styles + cfg.dev_styles + cfg.test_styles),
    }
    counts = {"train": cfg.train_utts, "dev": cfg.dev_utts, "test": cfg.test_utts}
    utts: dict[str, Utterance] = {}
    for split in SPLITS:
        styles = list(style_ranges[split])
        for k in range(counts[split]):
            style = styles[k % len(styles)]
            offset, tilt = _style_params(cfg, style)
            r = rng_stream(cfg.seed, "utt", split, k)
            gain = float(r.uniform(cfg.utterance_gain[0], cfg.utterance_gain[1]))
            # no immediate repeats: back-to-back copies of one token are
            # acoustically indistinguishable from a single long token
            n_body = int(r.integers(cfg.body_len[0], cfg.body_len[1] + 1))
            prev = cfg.wake_word[-1]
            body = []
            for _ in range(n_body):
                t = int(r.integers(1, cfg.vocab_size))
                if t >= prev:
                    t += 1
                body.append(t)
                prev = t
            tokens = tuple(cfg.wake_word) + tuple(body)
            rows, labels = [], []
            anchor_len = 0
            for pos, tok in enumerate(tokens):
                n = int(r.integers(cfg.frames_per_token[0], cfg.frames_per_token[1] + 1))
                tg = gain * float(r.uniform(cfg.token_gain[0], cfg.token_gain[1]))
                base = tg * (templates[tok] * (1.0 + tilt * ramp) + offset)
                rows.append(base[None, :] + r.standard_normal((n, cfg.d_raw)) * cfg.noise_std)
                labels.extend([tok] * n)
                if pos < len(cfg.wake_word):
                    anchor_len += n
            if cfg.trailing_silence > 0:
                rows.append(r.standard_normal((cfg.trailing_silence, cfg.d_raw))
                            * cfg.noise_std)
                labels.extend([0] * cfg.trailing_silence)
            uid = f"{split}-{k:05d}"
            utts[uid] = Utterance(uid=uid, split=split, style=style, tokens=tokens,
                                  frames=np.concatenate(rows, axis=0),
                                  frame_labels=np.asarray(labels, dtype=np.int64),
                                  anchor_len=anchor_len)
    mean = np.mean(np.concatenate([u.frames for _, u in sorted(utts.items())], axis=0), axis=0)
    return ToyCorpus(cfg, mean, utts)


# ---------------------------------------------------------------------------
# mixing


@dataclass
class MixtureSpec:
    main_uid: str
    background_uid: str
    snr_db: float
    shift_pct: float
    seed: int

    def validate(self) -> None:
        if not (0.0 <= self.shift_pct <= 100.0):
            raise ValueError(f"shift must be within [0, 100]%, got {self.shift_pct}")
        if self.main_uid == self.background_uid:
            raise ValueError("main and background must be different utterances")


def shift_offset(main_len: int, shift_pct: float) -> int:
    """Frame offset of the background start; round half up."""
    return int(np.floor(main_len * shift_pct / 100.0 + 0.5))


def crop_or_tile(frames: np.ndarray, target_len: int, rng: np.random.Generator) -> np.ndarray:
    """Fit a signal to target_len: seeded contiguous crop if longer, tile
    end-to-end then crop from the start if shorter."""
    if target_len < 1:
        raise ValueError("target length must be >= 1")
    n = frames.shape[0]
    if n >= target_len:
        start = int(rng.integers(0, n - target_len + 1))
        return frames[start:start + target_len].copy()
    reps = -(-target_len // n)
    return np.tile(frames, (reps, 1))[:target_len].copy()


def deviation_energy(frames: np.ndarray, mean: np.ndarray) -> float:
    """Mean squared deviation from the corpus mean, over frames and dims."""
    if frames.size == 0:
        return 0.0
    d = frames - mean[None, :]
    return float((d * d).mean())


def snr_gain(e_main: float, e_background: float, snr_db: float) -> float:
    """g = sqrt(E_main / (E_bg * 10^(snr/10)))."""
    if e_main <= 0 or e_background <= 0:
        raise ValueError("both signals need positive energy in the scaling region")
    return float(np.sqrt(e_main / (e_background * 10.0 ** (snr_db / 10.0))))


def scale_to_snr(main: np.ndarray, background: np.ndarray, snr_db: float,
                 mean: np.ndarray, overlap: tuple[slice, slice] | None = None) -> np.ndarray:
    """Scale the background's deviation from the corpus mean so the mixture
    hits snr_db. Energies come from the overlap region when one is given
    (empty overlap falls back to the full spans)."""
    if overlap is not None and (overlap[0].stop - overlap[0].start) > 0:
        main_seg, bg_seg = main[overlap[0]], background[overlap[1]]
    else:
        main_seg, bg_seg = main, background
    g = snr_gain(deviation_energy(main_seg, mean), deviation_energy(bg_seg, mean), snr_db)
    return mean[None, :] + g * (background - mean[None, :])


def mix(spec: MixtureSpec, corpus: ToyCorpus) -> FeatureSequence:
    """Deterministic two-utterance mixture.

    The background is cropped/tiled to the main length, scaled for the cell's
    SNR over the final overlap region, and added (as a deviation from the
    corpus mean) at the shift offset. Output length is L + offset; frames
    before the offset are bit-exactly the main's, frames past L are exactly
    the scaled background.
    """
    spec.validate()
    main = corpus[spec.main_uid]
    bg_src = corpus[spec.background_uid]
    if main.style == bg_src.style:
        raise ValueError(f"background style {bg_src.style} must differ from main style")
    mean = corpus.feature_mean
    L = main.frames.shape[0]
    off = shift_offset(L, spec.shift_pct)
    rng = rng_stream(spec.seed, "crop")
    bg = crop_or_tile(bg_src.frames, L, rng)
    overlap = (slice(off, L), slice(0, L - off))
    scaled = scale_to_snr(main.frames, bg, spec.snr_db, mean, overlap)
    out = np.empty((L + off, main.frames.shape[1]), dtype=np.float64)
    out[:L] = main.frames
    out[L:] = scaled[L - off:]
    if off < L:
        out[off:L] += scaled[:L - off] - mean[None, :]
    labels = np.zeros(L + off, dtype=np.int64)
    labels[:L] = main.frame_labels
    return FeatureSequence(frames=out, transcript=main.tokens,
                           anchor_len_frames=main.anchor_len,
                           frame_labels=labels, uid=f"mix-{main.uid}", style=main.style)


def measure_snr(mixture: np.ndarray, main: np.ndarray, mean: np.ndarray) -> float:
    """Recover the realized SNR over the overlap region of a mixture built by
    `mix`; +inf when nothing overlaps."""
    L = main.shape[0]
    off = mixture.shape[0] - L
    if off >= L:
        return float("inf")
    mix_ov = mixture[off:L]
    main_ov = main[off:L]
    bg_dev = mix_ov - main_ov
    e_bg = float((bg_dev * bg_dev).mean())
    e_main = deviation_energy(main_ov, mean)
    if e_bg == 0.0:
        return float("inf")
    return 10.0 * float(np.log10(e_main / e_bg))


# ---------------------------------------------------------------------------
# evaluation grid


@dataclass
class ManifestEntry:
    spec: MixtureSpec
    transcript: tuple[int, ...]
    anchor_len: int
    main_len: int
    path: str = ""


@dataclass
class ManifestCell:
    snr_db: float
    shift_pct: float
    split: str
    entries: list[ManifestEntry] = field(default_factory=list)

    @property
    def name(self) -> str:
        return cell_name(self.snr_db, self.shift_pct)


def cell_name(snr_db: float, shift_pct: float) -> str:
    return f"snr{snr_db:g}_shift{shift_pct:g}"


DEFAULT_SNR_GRID = (1.0, 5.0, 10.0, 20.0, 50.0)
DEFAULT_SHIFT_GRID = (0.0, 50.0, 100.0)


def build_eval_grid(corpus: ToyCorpus, split: str, utts_per_cell: int, seed: int,
                    snr_grid=DEFAULT_SNR_GRID, shift_grid=DEFAULT_SHIFT_GRID) -> list[ManifestCell]:
    """One manifest per (snr, shift) cell, all cells sharing the same
    (main, background) pairing so conditions are directly comparable."""
    uids = corpus.split_uids(split)
    if utts_per_cell > len(uids):
        raise ValueError(f"asked for {utts_per_cell} mains but split {split!r} has {len(uids)}")
    r = rng_stream(seed, "pairs", split)
    mains = [uids[i] for i in r.permutation(len(uids))[:utts_per_cell]]
    pairs = []
    for m in mains:
        style = corpus.style_of(m)
        candidates = [u for u in uids if corpus.style_of(u) != style]
        if not candidates:
            raise ValueError(f"no different-style background available for {m}")
        bg = candidates[int(r.integers(0, len(candidates)))]
        pairs.append((m, bg, derive_seed(seed, "crop", m, bg)))
    cells = []
    for snr in snr_grid:
        for shift in shift_grid:
            cell = ManifestCell(snr_db=float(snr), shift_pct=float(shift), split=split)
            for m, bg, crop_seed in pairs:
                u = corpus[m]
                cell.entries.append(ManifestEntry(
                    spec=MixtureSpec(m, bg, float(snr), float(shift), crop_seed),
                    transcript=u.tokens, anchor_len=u.anchor_len,
                    main_len=u.frames.shape[0]))
            cells.append(cell)
    return cells


def materialize_grid(cells: list[ManifestCell], corpus: ToyCorpus, out_dir) -> None:
    """Write every cell's mixture features and manifest plus a grid index."""
    out = Path(out_dir)
    index = {"format_version": 1, "cells": []}
    for cell in cells:
        cdir = out / cell.name
        cdir.mkdir(parents=True, exist_ok=True)
        entries = []
        for e in cell.entries:
            seq = mix(e.spec, corpus)
            rel = f"{e.spec.main_uid}.bin"
            e.path = rel
            featio.write_features(cdir / rel, seq.frames)
            entries.append({
                "spec": asdict(e.spec), "transcript": list(e.transcript),
                "anchor_len": e.anchor_len, "main_len": e.main_len, "path": rel,
            })
        (cdir / "manifest.json").write_text(json.dumps({
            "format_version": 1, "snr_db": cell.snr_db, "shift_pct": cell.shift_pct,
            "split": cell.split, "entries": entries}, sort_keys=True, indent=1) + "\n")
        index["cells"].append({"name": cell.name, "snr_db": cell.snr_db,
                               "shift_pct": cell.shift_pct, "manifest": f"{cell.name}/manifest.json"})
    (out / "index.json").write_text(json.dumps(index, sort_keys=True, indent=1) + "\n")


def load_cell(path) -> ManifestCell:
    doc = json.loads(Path(path).read_text())
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported manifest format in {path}")
    cell = ManifestCell(snr_db=doc["snr_db"], shift_pct=doc["shift_pct"], split=doc["split"])
    for e in doc["entries"]:
        cell.entries.append(ManifestEntry(
            spec=MixtureSpec(**e["spec"]), transcript=tuple(e["transcript"]),
            anchor_len=e["anchor_len"], main_len=e["main_len"], path=e["path"]))
    return cell


def load_grid_index(mix_dir) -> list[dict]:
    doc = json.loads((Path(mix_dir) / "index.json").read_text())
    if doc.get("format_version") != 1:
        raise ValueError(f"unsupported grid index format in {mix_dir}")
    return doc["cells"]


# ---------------------------------------------------------------------------
# training-time mixing


@dataclass
class MixerConfig:
    train_mix_prob: float = 0.5
    train_snr_db: float = 10.0
    clean_anchor_prob: float = 0.8
    eval_utts_per_cell: int = 500
    snr_grid: tuple[float, ...] = DEFAULT_SNR_GRID
    shift_grid: tuple[float, ...] = DEFAULT_SHIFT_GRID
    seed: int = 0

    def validate(self) -> None:
        if not (0.0 <= self.train_mix_prob <= 1.0):
            raise ValueError("train_mix_prob must be in [0, 1]")
        if not (0.0 <= self.clean_anchor_prob <= 1.0):
            raise ValueError("clean_anchor_prob must be in [0, 1]")
        if self.eval_utts_per_cell < 1:
            raise ValueError("eval_utts_per_cell must be >= 1")


@dataclass
class TrainExample:
    seq: FeatureSequence
    anchor_source: str            # "clean" | "mixed"
    clean_frames: np.ndarray      # clean main features (anchor lives in its head)
    was_mixed: bool


def training_example(corpus: ToyCorpus, uid: str, epoch: int, cfg: MixerConfig) -> TrainExample:
    """Mixing draw for one utterance; a pure function of (seed, epoch, uid)."""
    u = corpus[uid]
    r = rng_stream(cfg.seed, "train-mix", epoch, uid)
    mixed = bool(r.uniform() < cfg.train_mix_prob)
    if mixed:
        pool = [b for b in corpus.split_uids("train")
                if corpus.style_of(b) != u.style]
        bg = pool[int(r.integers(0, len(pool)))]
        shift = float(r.uniform(0.0, 100.0))
        spec = MixtureSpec(uid, bg, cfg.train_snr_db, shift,
                           derive_seed(cfg.seed, "train-crop", epoch, uid))
        seq = mix(spec, corpus)
    else:
        seq = u.as_feature_sequence()
    anchor_source = "clean" if bool(r.uniform() < cfg.clean_anchor_prob) else "mixed"
    return TrainExample(seq=seq, anchor_source=anchor_source,
                        clean_frames=u.frames, was_mixed=mixed)
