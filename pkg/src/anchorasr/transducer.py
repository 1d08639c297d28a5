"""Neural transducer: feature stacking, encoder, predictor, joiner, loss, decode.

The loss marginalizes over all monotone blank/label alignments with a
forward dynamic program in the log domain; `rnnt_loss_bruteforce` enumerates
the same path set explicitly and exists purely as an oracle for tests.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor
from .layers import Embedding, GRULayer, LayerNorm, Linear, ParamSet

BLANK = 0


@dataclass
class ModelConfig:
    """Sizes and wiring of the transducer. d_model must be divisible by
    stack_factor because frame stacking concatenates projected frames."""

    d_raw: int = 16
    stack_factor: int = 4
    d_model: int = 64
    encoder_layers: int = 2
    encoder_kind: str = "recurrent"  # or "chunked-attention"
    attention_chunk: int = 8
    predictor_layers: int = 1
    joiner_dim: int = 64
    vocab_size: int = 16
    context_dim: int = 32
    aux_hidden: int = 32

    def validate(self) -> None:
        if self.stack_factor < 1:
            raise ValueError("stack_factor must be >= 1")
        if self.d_model % self.stack_factor != 0:
            raise ValueError(f"d_model {self.d_model} not divisible by stack_factor {self.stack_factor}")
        if self.vocab_size < 1:
            raise ValueError("vocab_size must be >= 1")
        if self.encoder_kind not in ("recurrent", "chunked-attention"):
            raise ValueError(f"unknown encoder_kind {self.encoder_kind!r}")
        if self.encoder_kind == "chunked-attention" and self.attention_chunk < 1:
            raise ValueError("attention_chunk must be >= 1")
        if min(self.d_raw, self.d_model, self.joiner_dim, self.context_dim,
               self.encoder_layers, self.predictor_layers) < 1:
            raise ValueError("all model dims and layer counts must be >= 1")

    def enc_len(self, raw_len: int) -> int:
        return raw_len // self.stack_factor


@dataclass
class FeatureSequence:
    """One utterance in feature space, with symbol-rate framing metadata."""

    frames: np.ndarray                 # (T_raw, d_raw)
    transcript: tuple[int, ...]
    anchor_len_frames: int
    frame_labels: np.ndarray | None = None   # (T_raw,) ints, 0 = non-speech
    uid: str = ""
    style: int = -1

    def validate(self, vocab_size: int) -> None:
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be 2-D, got shape {self.frames.shape}")
        T = self.frames.shape[0]
        if not (0 < self.anchor_len_frames <= T):
            raise ValueError(f"anchor_len_frames {self.anchor_len_frames} outside (0, {T}]")
        validate_tokens(self.transcript, vocab_size)
        if self.frame_labels is not None and len(self.frame_labels) != T:
            raise ValueError("frame_labels length must equal the raw frame count")


def validate_tokens(tokens, vocab_size: int) -> None:
    for tok in tokens:
        if not (1 <= int(tok) <= vocab_size):
            raise ValueError(f"token {tok} outside [1, {vocab_size}] (0 is the blank)")


class _ChunkedAttentionLayer:
    """Single-head self-attention inside fixed non-overlapping chunks."""

    def __init__(self, ps: ParamSet, name: str, d: int, chunk: int, rng):
        self.chunk = chunk
        self.d = d
        self.wq = Linear(ps, f"{name}.wq", d, d, rng, bias=False)
        self.wk = Linear(ps, f"{name}.wk", d, d, rng, bias=False)
        self.wv = Linear(ps, f"{name}.wv", d, d, rng, bias=False)
        self.wo = Linear(ps, f"{name}.wo", d, d, rng)
        self.ln1 = LayerNorm(ps, f"{name}.ln1", d)
        self.ffn1 = Linear(ps, f"{name}.ffn1", d, 2 * d, rng)
        self.ffn2 = Linear(ps, f"{name}.ffn2", 2 * d, d, rng)
        self.ln2 = LayerNorm(ps, f"{name}.ln2", d)

    def __call__(self, x: Tensor) -> Tensor:
        T = x.shape[0]
        scale = 1.0 / math.sqrt(self.d)
        pieces = []
        for s in range(0, T, self.chunk):
            e = min(s + self.chunk, T)
            xc = ad.slice_rows(x, s, e)
            q = self.wq(xc)
            k = self.wk(xc)
            v = self.wv(xc)
            scores = ad.affine(ad.matmul(q, ad.transpose(k)), scale, 0.0)
            att = ad.softmax(scores)
            pieces.append(ad.matmul(att, v))
        ctx = pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)
        x = self.ln1(ad.add(x, self.wo(ctx)))
        h = self.ffn2(ad.relu(self.ffn1(x)))
        return self.ln2(ad.add(x, h))


class TransducerModel:
    """Parameters plus the forward pieces: stack, encode, predict, join."""

    def __init__(self, cfg: ModelConfig, ps: ParamSet, rng: np.random.Generator):
        cfg.validate()
        self.cfg = cfg
        self.ps = ps
        d_pre = cfg.d_model // cfg.stack_factor
        self.pre_proj = Linear(ps, "stack.proj", cfg.d_raw, d_pre, rng)
        self.enc_layers: list = []
        for i in range(cfg.encoder_layers):
            if cfg.encoder_kind == "recurrent":
                layer = GRULayer(ps, f"enc.gru{i}", cfg.d_model, cfg.d_model, rng)
            else:
                layer = _ChunkedAttentionLayer(ps, f"enc.att{i}", cfg.d_model, cfg.attention_chunk, rng)
            self.enc_layers.append(layer)
        self.enc_ln = LayerNorm(ps, "enc.ln", cfg.d_model)
        self.pred_embed = Embedding(ps, "pred.embed", cfg.vocab_size + 1, cfg.d_model, rng)
        self.pred_layers = [GRULayer(ps, f"pred.gru{i}", cfg.d_model, cfg.d_model, rng)
                            for i in range(cfg.predictor_layers)]
        self.pred_ln = LayerNorm(ps, "pred.ln", cfg.d_model)
        self.join_f = Linear(ps, "join.f", cfg.d_model, cfg.joiner_dim, rng)
        self.join_g = Linear(ps, "join.g", cfg.d_model, cfg.joiner_dim, rng)
        self.join_out = Linear(ps, "join.out", cfg.joiner_dim, cfg.vocab_size + 1, rng)

    @property
    def encoder_lookahead(self) -> int:
        """Frames beyond t that may influence f_t (0 for the recurrent stack)."""
        if self.cfg.encoder_kind == "recurrent":
            return 0
        return self.cfg.attention_chunk - 1

    def stack_features(self, frames) -> Tensor:
        """Project each raw frame then concatenate stack_factor consecutive
        projections into one encoder-rate frame; a raw tail shorter than the
        stack factor is dropped."""
        x = frames if isinstance(frames, Tensor) else Tensor(frames, dtype=self.ps.dtype)
        if x.ndim != 2 or x.shape[1] != self.cfg.d_raw:
            raise ShapeError(f"stack_features: expected (T, {self.cfg.d_raw}), got shape {x.shape}")
        s = self.cfg.stack_factor
        T = x.shape[0] // s
        if T < 1:
            raise ValueError(f"utterance too short to stack: {x.shape[0]} raw frames, factor {s}")
        proj = self.pre_proj(x)
        trimmed = ad.slice_rows(proj, 0, T * s) if proj.shape[0] != T * s else proj
        return ad.reshape(trimmed, (T, self.cfg.d_model))

    def encode(self, stacked: Tensor) -> Tensor:
        h = stacked
        for layer in self.enc_layers:
            h = layer(h)
        return self.enc_ln(h)

    def predict(self, tokens) -> Tensor:
        """Prediction-network states for the blank-started history: row u
        conditions on the first u tokens, so the output has U + 1 rows."""
        tokens = tuple(int(t) for t in tokens)
        validate_tokens(tokens, self.cfg.vocab_size)
        idx = np.array((BLANK,) + tokens, dtype=np.int64)
        h = self.pred_embed(idx)
        for layer in self.pred_layers:
            h = layer(h)
        return self.pred_ln(h)

    def join(self, f: Tensor, g: Tensor) -> Tensor:
        """Additive joiner: logits lattice of shape (T, U + 1, vocab + 1)."""
        pf = self.join_f(f)
        pg = self.join_g(g)
        mixed = ad.tanh(ad.outer_add(pf, pg))
        T, U1 = pf.shape[0], pg.shape[0]
        flat = ad.reshape(mixed, (T * U1, self.cfg.joiner_dim))
        logits = self.join_out(flat)
        return ad.reshape(logits, (T, U1, self.cfg.vocab_size + 1))

    def forward_lattice(self, frames, tokens) -> Tensor:
        f = self.encode(self.stack_features(frames))
        g = self.predict(tokens)
        return self.join(f, g)


# ---------------------------------------------------------------------------
# transducer loss


def _validate_lattice(lattice: Tensor | np.ndarray, tokens) -> tuple[int, int]:
    shape = lattice.shape
    if len(shape) != 3:
        raise ShapeError(f"rnnt loss: lattice must be 3-D, got shape {shape}")
    T, U1, V1 = shape
    U = len(tokens)
    if T < 1:
        raise ValueError("rnnt loss: empty lattice (T = 0)")
    if U1 != U + 1:
        raise ValueError(f"rnnt loss: lattice has {U1} label rows but {U} tokens (need U + 1)")
    validate_tokens(tokens, V1 - 1)
    return T, U


def _rnnt_alpha(lp: np.ndarray, y: tuple[int, ...]) -> np.ndarray:
    """Forward lattice: alpha[i, u] = log-mass of paths that have consumed
    frames 0..i and emitted the first u labels (state before frame i's own
    output is chosen). alpha[0, 0] = 0."""
    T, U1, _ = lp.shape
    U = U1 - 1
    A = np.full((T, U1), -np.inf)
    for i in range(T):
        if i == 0:
            A[0, 0] = 0.0
        else:
            A[i] = A[i - 1] + lp[i - 1, :, BLANK]
        for u in range(1, U1):
            A[i, u] = np.logaddexp(A[i, u], A[i, u - 1] + lp[i, u - 1, y[u - 1]])
    return A


def _rnnt_beta(lp: np.ndarray, y: tuple[int, ...]) -> np.ndarray:
    T, U1, _ = lp.shape
    U = U1 - 1
    B = np.full((T, U1), -np.inf)
    B[T - 1, U] = lp[T - 1, U, BLANK]
    for i in range(T - 1, -1, -1):
        for u in range(U, -1, -1):
            if i == T - 1 and u == U:
                continue
            best = -np.inf
            if i < T - 1:
                best = lp[i, u, BLANK] + B[i + 1, u]
            if u < U:
                best = np.logaddexp(best, lp[i, u, y[u]] + B[i, u + 1])
            B[i, u] = best
    return B


def rnnt_from_logprobs(lp: Tensor, tokens) -> Tensor:
    """Negative log-probability of the token sequence given a log-prob lattice.

    Single fused node: forward runs the alpha recursion, backward converts
    alpha/beta occupancies into gradients on the used transitions.
    """
    T, U = _validate_lattice(lp, tokens)
    y = tuple(int(t) for t in tokens)
    lp64 = lp.data.astype(np.float64, copy=False)
    A = _rnnt_alpha(lp64, y)
    total = A[T - 1, U] + lp64[T - 1, U, BLANK]
    loss = np.asarray(-total, dtype=lp.dtype)

    def vjp(g):
        B = _rnnt_beta(lp64, y)
        occ = np.zeros_like(lp64)
        # blank transitions (i, u) -> (i + 1, u), plus the final blank
        if T > 1:
            occ[:T - 1, :, BLANK] = np.exp(A[:T - 1] + lp64[:T - 1, :, BLANK] + B[1:] - total)
        occ[T - 1, U, BLANK] += np.exp(A[T - 1, U] + lp64[T - 1, U, BLANK] - total)
        # label transitions (i, u) -> (i, u + 1)
        for u in range(U):
            occ[:, u, y[u]] += np.exp(A[:, u] + lp64[:, u, y[u]] + B[:, u + 1] - total)
        scale = -float(g.reshape(()))
        return ((scale * occ).astype(lp.dtype, copy=False),)

    return ad.apply([lp], loss, vjp)


def rnnt_loss(lattice: Tensor, tokens) -> Tensor:
    """Full-lattice transducer loss from raw logits."""
    _validate_lattice(lattice, tokens)
    return rnnt_from_logprobs(ad.log_softmax(lattice), tokens)


def rnnt_loss_bruteforce(lattice, tokens, count_paths: bool = False):
    """Oracle: enumerate every monotone alignment explicitly.

    An alignment interleaves T - 1 in-path blanks with the U labels and ends
    with the mandatory final blank, so there are C(T - 1 + U, U) paths. Only
    valid on tiny lattices (T + U <= 12).
    """
    data = lattice.data if isinstance(lattice, Tensor) else np.asarray(lattice)
    T, U = _validate_lattice(Tensor(data), tokens)
    if T + U > 12:
        raise ValueError(f"brute force limited to T + U <= 12, got {T + U}")
    y = tuple(int(t) for t in tokens)
    x = data.astype(np.float64)
    m = x.max(axis=-1, keepdims=True)
    z = x - m
    lp = z - np.log(np.exp(z).sum(axis=-1, keepdims=True))
    terms: list[float] = []

    def walk(i: int, u: int, acc: float) -> None:
        if i == T - 1 and u == U:
            terms.append(acc + lp[i, u, BLANK])
            return
        if i < T - 1:
            walk(i + 1, u, acc + lp[i, u, BLANK])
        if u < U:
            walk(i, u + 1, acc + lp[i, u, y[u]])

    walk(0, 0, 0.0)
    hi = max(terms)
    loss = -(hi + math.log(sum(math.exp(t - hi) for t in terms)))
    if count_paths:
        return loss, len(terms)
    return loss


def alignment_path_count(T: int, U: int) -> int:
    """Number of complete alignments for a (T, U) lattice."""
    return math.comb(T - 1 + U, U)


# ---------------------------------------------------------------------------
# greedy decoding


class PredictorState:
    """Incremental prediction-network state for decoding."""

    def __init__(self, model: TransducerModel):
        self.model = model
        dt = model.ps.dtype
        self.hidden = [np.zeros(model.cfg.d_model, dtype=dt) for _ in model.pred_layers]
        self.advance(BLANK)

    def advance(self, token: int) -> None:
        x = self.model.pred_embed.table.data[token]
        for i, layer in enumerate(self.model.pred_layers):
            self.hidden[i] = layer.step(x, self.hidden[i])
            x = self.hidden[i]
        self.g_row = _ln_row(x, self.model.pred_ln)


def _ln_row(row: np.ndarray, ln: LayerNorm) -> np.ndarray:
    mu = row.mean()
    var = row.var()
    return (row - mu) / np.sqrt(var + ln.eps) * ln.gain.data[0] + ln.bias.data[0]


def greedy_decode(model: TransducerModel, encoded: np.ndarray | Tensor,
                  gate: np.ndarray | None = None, emission_cap: int = 4) -> list[int]:
    """Frame-synchronous greedy search over an already-encoded utterance.

    Advances one frame on blank, emits on the argmax token otherwise (ties
    resolve to the lowest index, so blank wins any tie it is part of), and
    caps emissions per frame. `gate` optionally holds per-frame bias values
    b_t in (0, 1): blank logits get 1 - b_t added, labels get b_t.
    """
    f = encoded.data if isinstance(encoded, Tensor) else np.asarray(encoded)
    if f.ndim != 2 or f.shape[1] != model.cfg.d_model:
        raise ShapeError(f"greedy_decode: expected (T, {model.cfg.d_model}) encodings, got {f.shape}")
    if gate is not None and len(gate) != f.shape[0]:
        raise ValueError("gate length must match the encoded frame count")
    if emission_cap < 1:
        raise ValueError("emission_cap must be >= 1")
    pf = f @ model.join_f.w.data + model.join_f.b.data  # (T, J)
    wg, bg = model.join_g.w.data, model.join_g.b.data[0]
    wo, bo = model.join_out.w.data, model.join_out.b.data[0]
    state = PredictorState(model)
    out: list[int] = []
    pg = state.g_row @ wg + bg
    for t in range(f.shape[0]):
        for _ in range(emission_cap):
            logits = np.tanh(pf[t] + pg) @ wo + bo
            if gate is not None:
                b = gate[t]
                logits = logits.copy()
                logits[BLANK] += 1.0 - b
                logits[1:] += b
            k = int(np.argmax(logits))
            if k == BLANK:
                break
            out.append(k)
            state.advance(k)
            pg = state.g_row @ wg + bg
    return out


def decode_features(model: TransducerModel, frames: np.ndarray,
                    emission_cap: int = 4) -> list[int]:
    """Plain (unanchored) decode straight from raw features."""
    with ad.suppress_recording():
        f = model.encode(model.stack_features(frames))
    return greedy_decode(model, f, None, emission_cap)
