"""Auxiliary objectives: feature reconstruction and the decorrelation loss.

vic_loss is checked against an independent plain-numpy computation of all
three terms, plus analytic cases where the exact value is known.
"""
import math

import numpy as np
import pytest

from anchorasr import autodiff as ad
from anchorasr.autodiff import Tape, Tensor, backward, finite_difference_check
from anchorasr.layers import ParamSet
from anchorasr.objectives import (MODES, Expander, FeatureReconstructor,
                                  LossWeights, NonFiniteLoss,
                                  extract_half_contexts,
                                  feature_reconstruction_loss,
                                  split_anchor_halves, total_loss, vic_loss)
from anchorasr.seeding import rng_stream


def identity_expander(d: int) -> tuple[ParamSet, Expander]:
    """Expander that computes the identity: relu decomposition [x, -x]."""
    ps = ParamSet("float64")
    exp = Expander(ps, d, 2 * d, d, np.random.default_rng(0))
    exp.l1.w.data[...] = np.hstack([np.eye(d), -np.eye(d)])
    exp.l1.b.data[...] = 0.0
    exp.l2.w.data[...] = np.vstack([np.eye(d), -np.eye(d)])
    exp.l2.b.data[...] = 0.0
    return ps, exp


def vic_oracle(Z: np.ndarray, Zp: np.ndarray, w: LossWeights, eps: float) -> float:
    """Plain-numpy route for the full decorrelation objective."""

    def v(M):
        std = np.sqrt(M.var(axis=0, ddof=1) + eps)
        return np.maximum(0.0, 1.0 - std).mean()

    def c(M):
        n, d = M.shape
        cen = M - M.mean(axis=0, keepdims=True)
        cov = cen.T @ cen / (n - 1)
        off = cov - np.diag(np.diag(cov))
        return (off ** 2).sum() / d

    s = ((Z - Zp) ** 2).mean()
    return w.gamma * (v(Z) + v(Zp)) + w.mu * s + w.nu * (c(Z) + c(Zp))


# --------------------------------------------------------------------------
# feature reconstruction


def test_fr_loss_matches_numpy_oracle():
    rng = np.random.default_rng(1)
    ps = ParamSet("float64")
    fr = FeatureReconstructor(ps, num_labels=5, label_embed=3, context_dim=4,
                              hidden=6, d_raw=2, rng=rng_stream(1, "fr"))
    labels = np.array([0, 2, 2, 4])
    context = Tensor(rng.standard_normal((1, 4)), dtype="float64")
    target = rng.standard_normal((4, 2))
    loss = feature_reconstruction_loss(fr, labels, context, target).item()

    emb = fr.embed.table.data[labels]
    x = np.hstack([emb, np.repeat(context.data, 4, axis=0)])
    h = np.maximum(0.0, x @ fr.l1.w.data + fr.l1.b.data)
    pred = h @ fr.l2.w.data + fr.l2.b.data
    expect = ((pred - target) ** 2).mean()
    assert abs(loss - expect) < 1e-12


def test_fr_perfect_reconstruction_is_zero():
    ps = ParamSet("float64")
    fr = FeatureReconstructor(ps, num_labels=3, label_embed=2, context_dim=2,
                              hidden=4, d_raw=3, rng=rng_stream(2, "fr"))
    labels = np.array([1, 1])
    context = Tensor(np.ones((1, 2)), dtype="float64")
    target = fr(labels, context).data.copy()
    assert feature_reconstruction_loss(fr, labels, context, target).item() == 0.0


def test_fr_validates_labels_and_lengths():
    ps = ParamSet("float64")
    fr = FeatureReconstructor(ps, num_labels=3, label_embed=2, context_dim=2,
                              hidden=4, d_raw=3, rng=rng_stream(3, "fr"))
    context = Tensor(np.zeros((1, 2)), dtype="float64")
    with pytest.raises(ValueError):
        fr(np.array([0, 5]), context)
    with pytest.raises(ValueError):
        feature_reconstruction_loss(fr, np.array([1, 2]), context, np.zeros((3, 3)))


def test_fr_gradient():
    rng = np.random.default_rng(4)
    ps = ParamSet("float64")
    fr = FeatureReconstructor(ps, num_labels=4, label_embed=3, context_dim=3,
                              hidden=5, d_raw=2, rng=rng_stream(4, "fr"))
    labels = np.array([1, 3, 1])
    context = Tensor(rng.standard_normal((1, 3)), requires_grad=True, dtype="float64")
    target = rng.standard_normal((3, 2))
    report = finite_difference_check(
        lambda: feature_reconstruction_loss(fr, labels, context, target),
        dict(ps.items()) | {"context": context}, h=5e-6)
    assert not report.aborted
    assert report.max_rel_error < 1e-6, report.per_param


# --------------------------------------------------------------------------
# anchor halves


def test_split_anchor_halves_even_and_odd():
    even = Tensor(np.arange(8, dtype=np.float64).reshape(4, 2), dtype="float64")
    a, b = split_anchor_halves(even)
    assert a.shape == (2, 2) and b.shape == (2, 2)
    odd = Tensor(np.arange(10, dtype=np.float64).reshape(5, 2), dtype="float64")
    a, b = split_anchor_halves(odd)
    assert a.shape == (3, 2) and b.shape == (2, 2)
    assert np.array_equal(np.vstack([a.data, b.data]), odd.data)
    with pytest.raises(ValueError):
        split_anchor_halves(Tensor(np.zeros((1, 2)), dtype="float64"))


def test_extract_half_contexts_uses_each_half():
    calls = []

    class FakeAux:
        def __call__(self, t):
            calls.append(t.shape)
            return ad.mean_axis0(t)

    anchor = Tensor(np.random.default_rng(5).standard_normal((5, 3)), dtype="float64")
    c1, c2 = extract_half_contexts(FakeAux(), anchor)
    assert calls == [(3, 3), (2, 3)]
    assert c1.shape == (1, 3) and c2.shape == (1, 3)


# --------------------------------------------------------------------------
# decorrelation loss


def test_vic_matches_numpy_oracle_through_random_expander():
    w = LossWeights()
    for seed in range(5):
        rng = np.random.default_rng(10 + seed)
        ps = ParamSet("float64")
        exp = Expander(ps, 4, 6, 8, rng_stream(seed, "exp"))
        C = Tensor(rng.standard_normal((7, 4)), dtype="float64")
        Cp = Tensor(rng.standard_normal((7, 4)), dtype="float64")
        terms = vic_loss(exp, C, Cp, w, eps=1e-4)
        Z = exp(C).data
        Zp = exp(Cp).data
        assert abs(terms.total.item() - vic_oracle(Z, Zp, w, 1e-4)) < 1e-12


def test_vic_zero_loss_on_orthogonal_wide_views():
    # identical branches, orthogonal centered columns, per-dim std > 1:
    # every term vanishes exactly
    _, exp = identity_expander(2)
    had = np.array([[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]])
    C = Tensor(had, dtype="float64")
    terms = vic_loss(exp, C, Tensor(had.copy(), dtype="float64"), LossWeights(), eps=1e-4)
    assert terms.total.item() == 0.0
    assert terms.variance == 0.0
    assert terms.invariance == 0.0
    assert terms.covariance == 0.0


def test_vic_collapse_value_is_exact():
    # all rows identical: variance term is 1 - sqrt(eps) per branch and
    # per dimension, everything else is zero
    _, exp = identity_expander(3)
    row = np.array([[0.4, -1.2, 2.0]])
    C = Tensor(np.repeat(row, 6, axis=0), dtype="float64")
    w = LossWeights(gamma=1.0, mu=1.0, nu=0.05)
    terms = vic_loss(exp, C, Tensor(C.data.copy(), dtype="float64"), w, eps=1e-4)
    expect = 2.0 * w.gamma * (1.0 - math.sqrt(1e-4))
    assert abs(terms.total.item() - expect) < 1e-12


def test_vic_invariance_zero_iff_branches_equal():
    _, exp = identity_expander(2)
    rng = np.random.default_rng(6)
    C = Tensor(rng.standard_normal((5, 2)), dtype="float64")
    same = vic_loss(exp, C, Tensor(C.data.copy(), dtype="float64"), LossWeights(), eps=1e-4)
    assert same.invariance == 0.0
    other = vic_loss(exp, C, Tensor(C.data + 0.1, dtype="float64"), LossWeights(), eps=1e-4)
    assert other.invariance > 0.0


def test_vic_needs_a_real_batch():
    _, exp = identity_expander(2)
    one = Tensor(np.zeros((1, 2)), dtype="float64")
    with pytest.raises(ValueError):
        vic_loss(exp, one, one, LossWeights(), eps=1e-4)


def test_vic_gradient():
    rng = np.random.default_rng(7)
    ps = ParamSet("float64")
    exp = Expander(ps, 3, 5, 6, rng_stream(7, "exp"))
    C = Tensor(rng.standard_normal((6, 3)), requires_grad=True, dtype="float64")
    Cp = Tensor(rng.standard_normal((6, 3)), requires_grad=True, dtype="float64")
    report = finite_difference_check(
        lambda: vic_loss(exp, C, Cp, LossWeights(), eps=1e-4).total,
        dict(ps.items()) | {"C": C, "Cp": Cp}, h=5e-6)
    assert not report.aborted
    assert report.max_rel_error < 1e-5, report.per_param


def test_variance_term_prevents_collapse():
    # two noisy views of shared data through a learnable linear map: the
    # invariance pull alone collapses the map to zero; the variance hinge
    # holds the representation open
    rng = np.random.default_rng(8)
    n, d = 16, 4
    x = rng.standard_normal((n, d))
    n1 = 0.3 * rng.standard_normal((n, d))
    n2 = 0.3 * rng.standard_normal((n, d))
    _, exp = identity_expander(d)

    def run(gamma: float, steps: int = 400, lr: float = 0.5) -> float:
        w = LossWeights(gamma=gamma, mu=1.0, nu=0.05)
        W = Tensor(0.5 * np.eye(d) + 0.01 * rng.standard_normal((d, d)),
                   requires_grad=True, dtype="float64")
        v1 = Tensor(x + n1, dtype="float64")
        v2 = Tensor(x + n2, dtype="float64")
        for _ in range(steps):
            with Tape() as tape:
                loss = vic_loss(exp, ad.matmul(v1, W), ad.matmul(v2, W), w, eps=1e-4).total
                backward(tape, loss)
            W.data -= lr * W.grad
            W.zero_grad()
        Z = (x + n1) @ W.data
        return float(np.sqrt(Z.var(axis=0, ddof=1)).min())

    assert run(gamma=0.0) < 1e-3
    assert run(gamma=1.0) > 0.5


# --------------------------------------------------------------------------
# combination


def test_total_loss_mode_wiring():
    rnnt = Tensor(np.array(2.0), dtype="float64")
    fr = Tensor(np.array(3.0), dtype="float64")
    vic = Tensor(np.array(0.5), dtype="float64")
    w = LossWeights(lambda_fr=0.1)
    assert total_loss(rnnt, None, None, w, "NONE").item() == 2.0
    assert abs(total_loss(rnnt, None, fr, w, "FR").item() - 2.3) < 1e-12
    assert abs(total_loss(rnnt, vic, None, w, "VIC").item() - 2.5) < 1e-12
    assert abs(total_loss(rnnt, vic, fr, w, "BOTH").item() - 2.8) < 1e-12
    with pytest.raises(ValueError):
        total_loss(rnnt, None, None, w, "FR")
    with pytest.raises(ValueError):
        total_loss(rnnt, None, None, w, "ALL")


def test_total_loss_rejects_non_finite():
    w = LossWeights()
    bad = Tensor(np.array(np.nan), dtype="float64")
    with pytest.raises(NonFiniteLoss):
        total_loss(bad, None, None, w, "NONE")
    inf = Tensor(np.array(np.inf), dtype="float64")
    with pytest.raises(NonFiniteLoss):
        total_loss(Tensor(np.array(1.0), dtype="float64"), inf, None, w, "VIC")


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(lambda_fr=-0.1).validate()
    LossWeights().validate()
    assert set(MODES) == {"NONE", "FR", "VIC", "BOTH"}
