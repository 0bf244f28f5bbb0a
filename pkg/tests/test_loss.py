import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from byolsl import loss as L
from byolsl import tensor as T
from byolsl.loss import ConfigError, LossConfig
from byolsl.tensor import ContractError, DimensionError, Tensor

from . import oracles
from .conftest import unit_rows

batches = st.tuples(st.integers(1, 16), st.integers(1, 8), st.integers(0, 2**31))


def _pair(n, d, seed):
    rng = np.random.default_rng(seed)
    return unit_rows(rng, n, d), unit_rows(rng, n, d)


# ------------------------------------------------------------------- byol


def test_byol_examples():
    e = np.eye(2)
    assert L.byol_pair_loss(Tensor(e), Tensor(e)).item() == 0.0
    assert L.byol_pair_loss(Tensor(e), Tensor(e[::-1].copy())).item() == pytest.approx(2.0)
    assert L.byol_pair_loss(Tensor(e), Tensor(-e)).item() == pytest.approx(4.0)


def test_byol_shape_mismatch():
    with pytest.raises(DimensionError):
        L.byol_pair_loss(Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))


@settings(max_examples=60, deadline=None)
@given(batches)
def test_byol_matches_oracle_and_bounds(args):
    q, z = _pair(*args)
    value = L.byol_pair_loss(Tensor(q), Tensor(z)).item()
    assert value == pytest.approx(oracles.byol(q, z), abs=1e-9)
    assert -1e-12 <= value <= 4.0 + 1e-12


# ------------------------------------------------------------------- ccsl


@settings(max_examples=60, deadline=None)
@given(batches, st.floats(0.0, 2.0), st.floats(-0.9, 0.95))
def test_ccsl_matches_oracle(args, lam, theta_p):
    q, z = _pair(*args)
    cfg = LossConfig("ccsl", lam=lam, theta_p=theta_p, theta_n=theta_p - 1.0)
    got = L.ccsl_loss(Tensor(q), Tensor(z), cfg).item()
    assert got == pytest.approx(oracles.ccsl(q, z, lam, theta_p), abs=1e-9)


@settings(max_examples=40, deadline=None)
@given(batches, st.floats(0.0, 2.0))
def test_ccsl_repulsion_matches_oracle(args, lam):
    q, z = _pair(*args)
    cfg = LossConfig("ccsl-with-repulsion", lam=lam, theta_p=0.3, theta_n=-0.3)
    got = L.ccsl_loss(Tensor(q), Tensor(z), cfg).item()
    assert got == pytest.approx(oracles.ccsl(q, z, lam, 0.3, -0.3, repulsion=True), abs=1e-9)


def test_ccsl_hand_batch():
    q = np.array([[1.0, 0.0], [0.8, 0.6], [0.0, 1.0]])
    z = np.array([[1.0, 0.0], [0.6, 0.8], [-1.0, 0.0]])
    cfg = LossConfig("ccsl", lam=0.1, theta_p=0.5, theta_n=-0.5)
    # S = [[1, .6, -1], [.8, .96, -.8], [0, .8, 0]]; positives: (0,1), (1,0), (2,1)
    diag = (0.0 + 0.08 + 2.0) / 3
    refine = 0.1 * ((2 - 1.2) + (2 - 1.6) + (2 - 1.6)) / 3
    assert L.ccsl_loss(Tensor(q), Tensor(z), cfg).item() == pytest.approx(diag + refine, abs=1e-12)


@settings(max_examples=40, deadline=None)
@given(batches)
def test_ccsl_lambda_zero_is_byol(args):
    q, z = _pair(*args)
    cfg = LossConfig("ccsl", lam=0.0)
    assert L.ccsl_loss(Tensor(q), Tensor(z), cfg).item() == pytest.approx(
        L.byol_pair_loss(Tensor(q), Tensor(z)).item(), abs=1e-9
    )


def test_ccsl_threshold_above_one_is_lambda_zero(rng):
    q = np.ones((4, 3)) / math.sqrt(3)
    hi = LossConfig("ccsl", lam=0.5, theta_p=1.5, theta_n=-0.5)
    zero = LossConfig("ccsl", lam=0.0)
    assert L.ccsl_loss(Tensor(q), Tensor(q), hi).item() == L.ccsl_loss(Tensor(q), Tensor(q), zero).item()


@settings(max_examples=30, deadline=None)
@given(batches, st.floats(0.0, 1.0), st.floats(0.0, 1.0))
def test_ccsl_monotone_in_lambda(args, a, b):
    q, z = _pair(*args)
    lo, hi = sorted((a, b))
    f = lambda lam: L.ccsl_loss(Tensor(q), Tensor(z), LossConfig("ccsl", lam=lam, theta_p=0.2)).item()  # noqa: E731
    assert f(lo) <= f(hi) + 1e-12


def test_empty_positive_mask_is_legal():
    q = np.eye(3)
    terms = L.ccsl_terms(Tensor(q), Tensor(q), LossConfig("ccsl"))
    assert terms.positives == 0 and terms.refinement == 0.0


# ------------------------------------------------------------------- cssl


def test_cssl_pairwise_examples():
    cfg = LossConfig("cssl", theta_p=0.0, theta_n=-0.5, sigmoid_temperature=1.0)
    a = Tensor([1.0, 0.0])
    b = Tensor([0.0, 1.0])
    assert L.cssl_pairwise(a, b, cfg).item() == pytest.approx(math.log(2.0), abs=1e-6)
    dead = LossConfig("cssl", theta_p=0.8, theta_n=-0.5)
    assert L.cssl_pairwise(a, b, dead).item() == 0.0


def test_cssl_lambda_zero_identical_rows():
    q = np.tile([[1.0, 0.0]], (3, 1))
    cfg = LossConfig("cssl", lam=0.0, sigmoid_temperature=1.0)
    assert L.cssl_loss(Tensor(q), Tensor(q), cfg).item() == pytest.approx(0.313262, abs=1e-6)


@settings(max_examples=60, deadline=None)
@given(batches, st.floats(0.0, 2.0), st.floats(0.1, 2.0))
def test_cssl_matches_oracle(args, lam, temperature):
    q, z = _pair(*args)
    cfg = LossConfig("cssl", lam=lam, theta_p=0.3, theta_n=-0.3, sigmoid_temperature=temperature)
    got = L.cssl_loss(Tensor(q), Tensor(z), cfg).item()
    assert got == pytest.approx(oracles.cssl(q, z, lam, 0.3, -0.3, temperature), abs=1e-9)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 8), st.integers(0, 2**31), st.floats(0.1, 2.0))
def test_cssl_pairwise_nonnegative_and_zero_on_dead_zone(d, seed, temperature):
    rng = np.random.default_rng(seed)
    a, b = unit_rows(rng, 2, d)
    cfg = LossConfig("cssl", theta_p=0.5, theta_n=-0.5, sigmoid_temperature=temperature)
    value = L.cssl_pairwise(Tensor(a), Tensor(b), cfg).item()
    s = float(a @ b)
    assert value >= 0.0
    if -0.5 < s < 0.5:
        assert value == 0.0
    else:
        assert value == pytest.approx(oracles.cssl_pair(a, b, 0.5, -0.5, temperature), abs=1e-9)


def test_cssl_dead_zone_contributes_nothing(rng):
    # all off-diagonal similarities inside (theta_n, theta_p): refinement is exactly zero
    q = np.eye(4)
    terms = L.cssl_terms(Tensor(q), Tensor(q), LossConfig("cssl", lam=5.0))
    assert terms.refinement == 0.0
    assert terms.total.item() == L.cssl_loss(Tensor(q), Tensor(q), LossConfig("cssl", lam=0.0)).item()


# ------------------------------------------------------------------- nt-xent


def test_nt_xent_orthogonal_example():
    e = np.eye(4)
    value = L.nt_xent(Tensor(e[:2]), Tensor(e[2:]), temperature=1.0).item()
    assert value == pytest.approx(-math.log(1 / 3), abs=1e-6)


def test_nt_xent_needs_two_rows():
    with pytest.raises(ContractError):
        L.nt_xent(Tensor(np.ones((1, 3))), Tensor(np.ones((1, 3))))


@settings(max_examples=60, deadline=None)
@given(st.integers(2, 16), st.integers(1, 8), st.integers(0, 2**31), st.floats(0.1, 2.0))
def test_nt_xent_matches_oracle(n, d, seed, t):
    rng = np.random.default_rng(seed)
    z, zt = rng.normal(size=(n, d)), rng.normal(size=(n, d))
    assert L.nt_xent(Tensor(z), Tensor(zt), t).item() == pytest.approx(oracles.nt_xent(z, zt, t), abs=1e-9)


def test_nt_xent_decreases_with_positive_similarity():
    neg = np.array([[0.0, 0.0, 1.0]])
    values = []
    for angle in np.linspace(1.5, 0.0, 6):
        z = np.vstack([[1.0, 0.0, 0.0], neg])
        zt = np.vstack([[np.cos(angle), np.sin(angle), 0.0], -neg])
        values.append(L.nt_xent(Tensor(z), Tensor(zt), 0.5).item())
    assert all(b < a for a, b in zip(values, values[1:]))


# ------------------------------------------------------------ similarities


def test_similarity_matrix_examples():
    same = np.tile([[0.6, 0.8]], (3, 1))
    sim = L.similarity_matrix(same, same, 0.8, -0.5)
    np.testing.assert_allclose(sim.scores, 1.0)
    assert sim.positive.sum() == 6 and not sim.positive.diagonal().any()
    sim = L.similarity_matrix(np.eye(3), np.eye(3), 0.5, -0.5)
    assert not sim.positive.any() and not sim.negative.any()
    with pytest.raises(ConfigError):
        L.similarity_matrix(np.eye(2), np.eye(2), 0.1, 0.2)


@settings(max_examples=40, deadline=None)
@given(batches)
def test_similarity_masks_disjoint_and_bounded(args):
    q, z = _pair(*args)
    sim = L.similarity_matrix(q, z, 0.2, -0.2)
    assert np.all(np.abs(sim.scores) <= 1 + 1e-6)
    assert not (sim.positive & sim.negative).any()
    assert not sim.positive.diagonal().any() and not sim.negative.diagonal().any()


def test_loss_config_validation():
    with pytest.raises(ConfigError):
        LossConfig("simclr")
    with pytest.raises(ConfigError):
        LossConfig(lam=-1.0)
    with pytest.raises(ConfigError):
        LossConfig(theta_p=0.1, theta_n=0.1)
    cfg = LossConfig()
    assert (cfg.lam, cfg.theta_p, cfg.theta_n, cfg.sigmoid_temperature) == (0.1, 0.8, -0.5, 0.5)


# ------------------------------------------------------------ symmetrization


def test_symmetrize_constant_inner_loss():
    c = Tensor(1.5)
    assert L.symmetrize(lambda a, b: c, (None, None), (None, None)).item() == 3.0


@settings(max_examples=40, deadline=None)
@given(batches, st.sampled_from(L.VARIANTS))
def test_symmetrized_loss_view_swap_invariant(args, variant):
    n, d, seed = args
    rng = np.random.default_rng(seed)
    qv, qw, zv, zw = (Tensor(unit_rows(rng, n, d)) for _ in range(4))
    cfg = LossConfig(variant, theta_p=0.3, theta_n=-0.3)
    fn = lambda q, z: L.variant_loss(q, z, cfg)  # noqa: E731
    a = L.symmetrize(fn, (qv, qw), (zv, zw)).item()
    b = L.symmetrize(fn, (qw, qv), (zw, zv)).item()
    assert a == pytest.approx(b, abs=1e-6)


def test_symmetrized_byol_matches_two_direction_oracle(rng):
    qv, qw, zv, zw = (unit_rows(rng, 5, 4) for _ in range(4))
    got = L.symmetrize(L.byol_pair_loss, (Tensor(qv), Tensor(qw)), (Tensor(zv), Tensor(zw))).item()
    assert got == pytest.approx(oracles.byol(qv, zw) + oracles.byol(qw, zv), abs=1e-9)


def test_masks_carry_no_gradient(rng):
    # the gradient equals the gradient of the loss with the masks frozen as constants
    q, z = unit_rows(rng, 6, 3), unit_rows(rng, 6, 3)
    cfg = LossConfig("ccsl", lam=0.7, theta_p=0.2)
    qt = Tensor(q, requires_grad=True)
    T.backward(L.ccsl_loss(qt, Tensor(z), cfg))
    pos = L.similarity_matrix(q, z, 0.2, -0.5).positive.astype(float)
    # d/dq_i: -2 z_i / n - lam * 2 * sum_j P_ij z_j / n
    expected = (-2 * z - 0.7 * 2 * pos @ z) / 6
    np.testing.assert_allclose(qt.grad, expected, atol=1e-12)
