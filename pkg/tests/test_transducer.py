"""Transducer forward pieces and the full-lattice loss.

The loss has two independent routes: the alpha recursion and an explicit
enumeration of every alignment. They must agree to float64 round-off.
"""
import math

import numpy as np
import pytest

from anchorasr import autodiff as ad
from anchorasr.autodiff import ShapeError, Tape, Tensor, backward, finite_difference_check
from anchorasr.layers import ParamSet
from anchorasr.seeding import rng_stream
from anchorasr.transducer import (BLANK, FeatureSequence, ModelConfig,
                                  PredictorState, TransducerModel,
                                  alignment_path_count, greedy_decode,
                                  rnnt_from_logprobs, rnnt_loss,
                                  rnnt_loss_bruteforce)


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_raw=6, stack_factor=2, d_model=8, encoder_layers=1,
                predictor_layers=1, joiner_dim=8, vocab_size=4,
                context_dim=4, aux_hidden=4)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed=0, precision="float64", **kw):
    cfg = tiny_config(**kw)
    ps = ParamSet(precision)
    return TransducerModel(cfg, ps, rng_stream(seed, "init", "model")), ps


# --------------------------------------------------------------------------
# stacking / encoding / predicting / joining


def test_stack_features_shape_and_trim():
    model, _ = tiny_model()
    rng = np.random.default_rng(0)
    out = model.stack_features(rng.standard_normal((9, 6)))
    assert out.shape == (4, 8)  # 9 raw frames, factor 2: one frame dropped
    out2 = model.stack_features(rng.standard_normal((8, 6)))
    assert out2.shape == (4, 8)
    with pytest.raises(ValueError):
        model.stack_features(rng.standard_normal((1, 6)))
    with pytest.raises(ShapeError):
        model.stack_features(rng.standard_normal((8, 5)))


def test_stack_features_is_per_frame_then_grouped():
    model, _ = tiny_model()
    rng = np.random.default_rng(1)
    x = rng.standard_normal((6, 6))
    stacked = model.stack_features(x).data
    w, b = model.pre_proj.w.data, model.pre_proj.b.data[0]
    per = x @ w + b  # (6, 4)
    expect = per.reshape(3, 8)
    assert np.allclose(stacked, expect, atol=1e-14)


def test_recurrent_encoder_is_causal_bit_exact():
    model, _ = tiny_model(seed=3)
    rng = np.random.default_rng(3)
    x = rng.standard_normal((12, 6))
    base = model.encode(model.stack_features(x)).data
    x2 = x.copy()
    x2[8:] += 5.0  # raw frames 8.. affect encoder frames 4..
    pert = model.encode(model.stack_features(x2)).data
    assert np.array_equal(base[:4], pert[:4])
    assert not np.allclose(base[4:], pert[4:])
    assert model.encoder_lookahead == 0


def test_chunked_attention_encoder_lookahead_bound():
    model, _ = tiny_model(seed=4, encoder_kind="chunked-attention", attention_chunk=3)
    assert model.encoder_lookahead == 2
    rng = np.random.default_rng(4)
    x = rng.standard_normal((18, 6))  # 9 encoder frames, chunks [0:3),[3:6),[6:9)
    base = model.encode(model.stack_features(x)).data
    x2 = x.copy()
    x2[12:] += 5.0  # perturb encoder frames 6.. (last chunk only)
    pert = model.encode(model.stack_features(x2)).data
    assert np.array_equal(base[:6], pert[:6])
    assert not np.allclose(base[6:], pert[6:])


def test_predictor_prefix_property():
    model, _ = tiny_model(seed=5)
    tokens = (2, 1, 4, 3)
    full = model.predict(tokens).data
    for k in range(len(tokens) + 1):
        part = model.predict(tokens[:k]).data
        assert np.allclose(part, full[:k + 1], atol=1e-14)


def test_predict_validates_tokens():
    model, _ = tiny_model()
    with pytest.raises(ValueError):
        model.predict((0,))   # blank is not a label
    with pytest.raises(ValueError):
        model.predict((5,))   # outside the vocabulary


def test_join_lattice_factorizes_over_frames_and_labels():
    model, _ = tiny_model(seed=6)
    rng = np.random.default_rng(6)
    f = Tensor(rng.standard_normal((4, 8)), dtype="float64")
    g = Tensor(rng.standard_normal((3, 8)), dtype="float64")
    base = model.join(f, g).data
    f2 = f.data.copy()
    f2[2] += 1.0
    pert = model.join(Tensor(f2, dtype="float64"), g).data
    changed = np.abs(pert - base).reshape(4, -1).max(axis=1)
    assert changed[2] > 0
    assert changed[0] == changed[1] == changed[3] == 0.0


# --------------------------------------------------------------------------
# loss: frozen values and the dual-route check


def test_loss_single_frame_empty_transcript():
    rng = np.random.default_rng(7)
    lat = Tensor(rng.standard_normal((1, 1, 5)), dtype="float64")
    loss = rnnt_loss(lat, ())
    lp = ad.log_softmax(lat).data
    assert abs(loss.item() + lp[0, 0, BLANK]) < 1e-12


def test_loss_uniform_two_by_one_is_log_quarter():
    # blank and one label, all mass uniform: two alignments of three moves
    lat = Tensor(np.zeros((2, 2, 2)), dtype="float64")
    loss = rnnt_loss(lat, (1,))
    assert abs(loss.item() - (-math.log(0.25))) < 1e-12


def test_path_counts_match_closed_form():
    rng = np.random.default_rng(8)
    for T, U in [(1, 0), (2, 1), (3, 2), (4, 1), (2, 4), (5, 5)]:
        lat = rng.standard_normal((T, U + 1, 6))
        y = tuple(rng.integers(1, 6, size=U).tolist())
        _, n = rnnt_loss_bruteforce(lat, y, count_paths=True)
        assert n == alignment_path_count(T, U)
    assert alignment_path_count(2, 1) == 2
    assert alignment_path_count(3, 2) == 6


def test_dp_matches_bruteforce_random_instances():
    rng = np.random.default_rng(9)
    for trial in range(60):
        T = int(rng.integers(1, 7))
        U = int(rng.integers(0, min(6, 12 - T) + 1))
        V = int(rng.integers(1, 6))
        lat = Tensor(3.0 * rng.standard_normal((T, U + 1, V + 1)), dtype="float64")
        y = tuple(rng.integers(1, V + 1, size=U).tolist())
        dp = rnnt_loss(lat, y).item()
        bf = rnnt_loss_bruteforce(lat, y)
        assert abs(dp - bf) < 1e-9, (T, U, V, dp, bf)


def test_loss_validates_shapes_and_tokens():
    lat = Tensor(np.zeros((2, 2, 3)), dtype="float64")
    with pytest.raises(ValueError):
        rnnt_loss(lat, (1, 2))      # U + 1 mismatch
    with pytest.raises(ValueError):
        rnnt_loss(lat, (0,))        # blank as a label
    with pytest.raises(ValueError):
        rnnt_loss(lat, (3,))        # out of vocabulary
    with pytest.raises(ShapeError):
        rnnt_loss(Tensor(np.zeros((2, 2)), dtype="float64"), (1,))


def test_loss_gradient_against_finite_differences():
    rng = np.random.default_rng(10)
    lat = Tensor(rng.standard_normal((4, 3, 5)), requires_grad=True, dtype="float64")
    y = (2, 4)
    report = finite_difference_check(lambda: rnnt_loss(lat, y), {"lat": lat}, h=5e-6)
    assert not report.aborted
    assert report.max_rel_error < 1e-6, report.per_param


def test_logprob_gradient_occupancies_sum_to_moves():
    # every alignment makes exactly T + U moves, so the occupancy mass
    # (minus the gradient of the loss wrt log-probs) must sum to T + U
    rng = np.random.default_rng(11)
    for T, U in [(1, 0), (2, 1), (5, 3)]:
        logits = rng.standard_normal((T, U + 1, 4))
        lp = Tensor(logits - np.log(np.exp(logits).sum(-1, keepdims=True)),
                    requires_grad=True, dtype="float64")
        y = tuple(rng.integers(1, 4, size=U).tolist())
        with Tape() as tape:
            loss = rnnt_from_logprobs(lp, y)
            backward(tape, loss)
        assert abs(-lp.grad.sum() - (T + U)) < 1e-9
        assert np.all(-lp.grad >= -1e-12)  # occupancies are probabilities


def test_total_label_sequence_probability():
    # summed over every label sequence, exp(-loss) is a probability <= 1;
    # a lattice heavily biased toward blank concentrates it near 1
    model, ps = tiny_model(seed=12, vocab_size=2)
    rng = np.random.default_rng(12)
    frames = rng.standard_normal((6, 6))  # 3 encoder frames

    def total_mass():
        seqs = [()]
        for L in range(1, 6):
            stack = [()]
            for _ in range(L):
                stack = [s + (v,) for s in stack for v in (1, 2)]
            seqs.extend(stack)
        mass = 0.0
        for y in seqs:
            lat = model.forward_lattice(frames, y)
            mass += math.exp(-rnnt_loss(lat, y).item())
        return mass

    m = total_mass()
    assert m <= 1.0 + 1e-9
    # bias the blank output strongly and the mass must approach 1
    bias = model.join_out.b
    bias.data[0, BLANK] += 12.0
    m2 = total_mass()
    assert m2 <= 1.0 + 1e-9
    assert m2 > 1.0 - 1e-9


def test_loss_internally_float64_even_for_float32_inputs():
    rng = np.random.default_rng(13)
    lat64 = rng.standard_normal((3, 3, 4))
    lat32 = Tensor(lat64.astype(np.float32), dtype="float32")
    loss32 = rnnt_loss(lat32, (1, 2)).item()
    loss64 = rnnt_loss(Tensor(lat32.data.astype(np.float64), dtype="float64"), (1, 2)).item()
    assert abs(loss32 - loss64) < 1e-6
    assert rnnt_loss(lat32, (1, 2)).dtype == np.float32


# --------------------------------------------------------------------------
# greedy decoding


def test_predictor_state_matches_batch_predict():
    model, _ = tiny_model(seed=14)
    tokens = (3, 1, 2)
    batch = model.predict(tokens).data
    state = PredictorState(model)
    assert np.allclose(state.g_row, batch[0], atol=1e-12)
    for k, tok in enumerate(tokens, start=1):
        state.advance(tok)
        assert np.allclose(state.g_row, batch[k], atol=1e-12)


def test_greedy_decode_all_zero_logits_emits_nothing():
    # ties resolve to the lowest index, and blank is index 0
    model, ps = tiny_model(seed=15)
    for name in ("join.out.w", "join.out.b"):
        ps[name].data[...] = 0.0
    rng = np.random.default_rng(15)
    f = model.encode(model.stack_features(rng.standard_normal((8, 6)))).data
    assert greedy_decode(model, f) == []


def test_greedy_decode_emission_cap():
    model, ps = tiny_model(seed=16)
    ps["join.out.w"].data[...] = 0.0
    ps["join.out.b"].data[...] = 0.0
    ps["join.out.b"].data[0, 2] = 10.0  # label 2 always wins
    rng = np.random.default_rng(16)
    f = model.encode(model.stack_features(rng.standard_normal((8, 6)))).data  # 4 frames
    out = greedy_decode(model, f, emission_cap=3)
    assert out == [2] * 12
    with pytest.raises(ValueError):
        greedy_decode(model, f, emission_cap=0)


def test_greedy_decode_gate_shifts_decisions():
    model, ps = tiny_model(seed=17)
    ps["join.out.w"].data[...] = 0.0
    ps["join.out.b"].data[...] = 0.0
    ps["join.out.b"].data[0, BLANK] = 0.2
    ps["join.out.b"].data[0, 3] = 0.05  # best label, still below blank
    rng = np.random.default_rng(17)
    f = model.encode(model.stack_features(rng.standard_normal((4, 6)))).data  # 2 frames
    # without a gate blank wins (0.2 > 0.05); a high gate flips it to label 3
    assert greedy_decode(model, f) == []
    high = np.full(f.shape[0], 0.7)
    out = greedy_decode(model, f, gate=high, emission_cap=1)
    # blank: 0.2 + (1 - 0.7) = 0.5 < label 3: 0.05 + 0.7
    assert out == [3, 3]
    low = np.full(f.shape[0], 0.3)
    assert greedy_decode(model, f, gate=low, emission_cap=1) == []


def test_greedy_decode_validates_inputs():
    model, _ = tiny_model(seed=18)
    rng = np.random.default_rng(18)
    f = model.encode(model.stack_features(rng.standard_normal((8, 6)))).data
    with pytest.raises(ValueError):
        greedy_decode(model, f, gate=np.zeros(99))
    with pytest.raises(ShapeError):
        greedy_decode(model, f[:, :4])


# --------------------------------------------------------------------------
# containers


def test_feature_sequence_validation():
    rng = np.random.default_rng(19)
    frames = rng.standard_normal((10, 6))
    labels = np.zeros(10, dtype=np.int64)
    seq = FeatureSequence(frames=frames, transcript=(1, 2), anchor_len_frames=4,
                          frame_labels=labels, uid="u0", style=0)
    seq.validate(vocab_size=4)
    bad = FeatureSequence(frames=frames, transcript=(9,), anchor_len_frames=4,
                          frame_labels=labels, uid="u1", style=0)
    with pytest.raises(ValueError):
        bad.validate(vocab_size=4)
    short = FeatureSequence(frames=frames, transcript=(1,), anchor_len_frames=99,
                            frame_labels=labels, uid="u2", style=0)
    with pytest.raises(ValueError):
        short.validate(vocab_size=4)


def test_model_config_validation():
    with pytest.raises(ValueError):
        ModelConfig(d_model=10, stack_factor=4).validate()
    with pytest.raises(ValueError):
        ModelConfig(encoder_kind="transformer").validate()
    cfg = tiny_config()
    assert cfg.enc_len(9) == 4
