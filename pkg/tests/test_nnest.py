"""Lifted power regression: forward model, gradients, training, ambiguity."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from irscov.errors import TrainingDivergedError
from irscov.measurement import PhaseAlphabet, random_pattern
from irscov.nnest import (ChannelEstimate, StructuredWeights, TrainConfig,
                          bias_closed_form, forward, gradient, lift, loss,
                          phase_ambiguity_check, train, train_from_patterns)

from conftest import rand_complex, rand_unit_vector


def _random_instance(rng, n, m, alpha=2):
    """Lifted patterns, a planted channel and its noise-free powers."""
    ab = PhaseAlphabet(alpha)
    v_rows = np.stack([random_pattern(rng, ab, n, pattern_id=i).v for i in range(m)])
    x = lift(v_rows)
    w = rand_complex(rng, n)
    powers = np.abs(v_rows @ np.conj(w)) ** 2
    return x, w, powers


# ---------------------------------------------------------------------------
# lift and the structured forward pass
# ---------------------------------------------------------------------------

def test_lift_real_ones():
    assert_allclose(lift(np.ones(4, dtype=complex)),
                    [1, 1, 1, 1, 0, 0, 0, 0], atol=1e-15)


def test_lift_quarter_turn():
    assert_allclose(lift(np.full(3, np.exp(0.5j * np.pi))),
                    [0, 0, 0, 1, 1, 1], atol=1e-15)


def test_lift_batch_shape_and_validation():
    rng = np.random.default_rng(0)
    rows = np.stack([rand_unit_vector(rng, 5) for _ in range(7)])
    assert lift(rows).shape == (7, 10)
    with pytest.raises(ValueError):
        lift(0.5 * np.ones(3, dtype=complex))


def test_power_term_equals_complex_inner_product():
    """The structured 2-unit layer computes exactly |v^H w|^2."""
    rng = np.random.default_rng(1)
    for _ in range(20):
        v = rand_unit_vector(rng, 6)
        w = rand_complex(rng, 6)
        weights = StructuredWeights(w.real, w.imag)
        got = forward(lift(v), weights)
        want = np.abs(np.vdot(v, w)) ** 2
        assert got == pytest.approx(want, rel=1e-10)


def test_hidden_pair_is_inner_product_split():
    rng = np.random.default_rng(2)
    v = rand_unit_vector(rng, 4)
    w = rand_complex(rng, 4)
    weights = StructuredWeights(w.real, w.imag)
    a, b = lift(v) @ weights.matrix
    inner = np.vdot(v, w)
    assert a == pytest.approx(inner.real)
    assert abs(b) == pytest.approx(abs(inner.imag))


def test_forward_zero_weights_returns_bias():
    weights = StructuredWeights(np.zeros(4), np.zeros(4), w0=2.5)
    x = lift(rand_unit_vector(np.random.default_rng(3), 4))
    assert forward(x, weights) == pytest.approx(2.5)


def test_structured_weights_round_trip():
    rng = np.random.default_rng(4)
    w = rand_complex(rng, 5)
    weights = StructuredWeights(w.real, w.imag, w0=0.1)
    assert_allclose(weights.w_complex, w)
    stacked = np.concatenate([w.real, w.imag])
    again = StructuredWeights.from_stacked(stacked, w0=0.1)
    assert_allclose(again.w1, weights.w1)
    assert_allclose(again.w2, weights.w2)


# ---------------------------------------------------------------------------
# bias and loss
# ---------------------------------------------------------------------------

def test_bias_closed_form_zero_weights():
    rng = np.random.default_rng(5)
    x, _, powers = _random_instance(rng, 4, 10)
    weights = StructuredWeights(np.zeros(4), np.zeros(4))
    assert bias_closed_form(x, powers, weights) == pytest.approx(powers.mean())


def test_bias_closed_form_recovers_offset():
    rng = np.random.default_rng(6)
    x, w, powers = _random_instance(rng, 4, 12)
    weights = StructuredWeights(w.real, w.imag)
    c = 3.75
    assert bias_closed_form(x, powers + c, weights) == pytest.approx(c)
    assert bias_closed_form(x, powers + c + 0.5, weights) == pytest.approx(c + 0.5)


def test_loss_zero_at_perfect_fit():
    rng = np.random.default_rng(7)
    x, w, powers = _random_instance(rng, 4, 16)
    weights = StructuredWeights(w.real, w.imag)
    assert loss(x, powers, weights) == pytest.approx(0.0, abs=1e-20)


def test_loss_single_record_always_zero():
    rng = np.random.default_rng(8)
    x, _, powers = _random_instance(rng, 4, 1)
    arbitrary = StructuredWeights(*rand_complex(rng, 4).view(float).reshape(2, 4))
    assert loss(x, powers[:1], arbitrary) == pytest.approx(0.0, abs=1e-18)


def test_loss_matches_two_pass_evaluation():
    rng = np.random.default_rng(9)
    x, w, powers = _random_instance(rng, 4, 20)
    noisy = powers + 0.1 * rng.standard_normal(20)
    guess = StructuredWeights(w.real + 0.05, w.imag - 0.02)
    w0 = bias_closed_form(x, noisy, guess)
    manual = np.mean((forward(x, StructuredWeights(guess.w1, guess.w2, w0)) - noisy) ** 2)
    assert loss(x, noisy, guess) == pytest.approx(manual, rel=1e-12)


# ---------------------------------------------------------------------------
# gradient
# ---------------------------------------------------------------------------

def test_gradient_vanishes_at_fit():
    rng = np.random.default_rng(10)
    x, w, powers = _random_instance(rng, 4, 16)
    g = gradient(x, powers, StructuredWeights(w.real, w.imag))
    assert np.linalg.norm(g) < 1e-8 * max(1.0, np.linalg.norm(powers))


def test_gradient_single_term_hand_value():
    # all phases at 2*pi (coefficient 1), w = e_1: residual 1, a = 1, b = 0,
    # so the gradient is 4 * 1 * 1 * x with x = [1 1 1 1 0 0 0 0]
    x = lift(np.ones(4, dtype=complex))
    weights = StructuredWeights(np.array([1.0, 0, 0, 0]), np.zeros(4))
    g = gradient(x, np.array([0.0]), weights, w0=0.0)
    assert_allclose(g, [4, 4, 4, 4, 0, 0, 0, 0], atol=1e-12)


@pytest.mark.parametrize("n", [2, 4, 8])
def test_gradient_matches_finite_differences(n):
    rng = np.random.default_rng(n)
    x, w, powers = _random_instance(rng, n, 12)
    noisy = powers + 0.05 * rng.standard_normal(len(powers))
    gamma = np.concatenate([w.real + 0.1, w.imag - 0.1])
    w0 = 0.3
    g = gradient(x, noisy, StructuredWeights.from_stacked(gamma), w0=w0)
    h = 1e-5
    for i in range(2 * n):
        up, dn = gamma.copy(), gamma.copy()
        up[i] += h
        dn[i] -= h
        fd = (loss(x, noisy, StructuredWeights.from_stacked(up), w0=w0)
              - loss(x, noisy, StructuredWeights.from_stacked(dn), w0=w0)) / (2 * h)
        assert abs(g[i] - fd) <= 1e-4 * max(1.0, abs(fd))


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

def test_train_recovers_planted_channel():
    rng = np.random.default_rng(11)
    x, w, powers = _random_instance(rng, 4, 80)
    est = train(x, powers, TrainConfig(seed=3))
    g_hat = est.covariance
    g_true = np.outer(w, np.conj(w))
    err = np.sum(np.abs(g_hat - g_true) ** 2) / np.sum(np.abs(g_true) ** 2)
    assert err < 1e-2
    assert phase_ambiguity_check(est.w_star, w, PhaseAlphabet(2), tol=0.1)


def test_train_constant_power_collapses_to_bias():
    rng = np.random.default_rng(12)
    ab = PhaseAlphabet(2)
    v_rows = np.stack([random_pattern(rng, ab, 4, pattern_id=i).v for i in range(40)])
    c = 5.0
    est = train(lift(v_rows), np.full(40, c), TrainConfig(seed=0))
    assert est.w0_star == pytest.approx(c, rel=1e-2)
    assert np.linalg.norm(est.w_star) ** 2 < 1e-3 * c


def test_train_validation_trace_and_best_epoch():
    rng = np.random.default_rng(13)
    x, w, powers = _random_instance(rng, 4, 60)
    est = train(x, powers, TrainConfig(seed=1))
    trace = est.validation_trace
    assert est.best_epoch == int(np.argmin(trace))
    assert trace[est.best_epoch] == trace.min()


def test_train_deterministic_in_seed():
    rng = np.random.default_rng(14)
    x, w, powers = _random_instance(rng, 4, 50)
    a = train(x, powers, TrainConfig(seed=7))
    b = train(x, powers, TrainConfig(seed=7))
    assert_allclose(a.w_star, b.w_star)
    assert a.w0_star == b.w0_star
    c = train(x, powers, TrainConfig(seed=8))
    assert not np.allclose(a.w_star, c.w_star)


def test_train_two_records_smallest_split():
    rng = np.random.default_rng(15)
    x, _, powers = _random_instance(rng, 2, 2)
    est = train(x, powers, TrainConfig(seed=0, epochs=5))
    assert est.w_star.shape == (2,)


def test_train_diverges_with_huge_rate():
    rng = np.random.default_rng(16)
    x, _, powers = _random_instance(rng, 4, 30)
    cfg = TrainConfig(learning_rate=1e6, decay=0.0, seed=0, max_restarts=0)
    with pytest.raises(TrainingDivergedError):
        train(x, powers, cfg)


def test_train_from_patterns_matches_train():
    rng = np.random.default_rng(17)
    ab = PhaseAlphabet(2)
    pats = [random_pattern(rng, ab, 4, pattern_id=i) for i in range(30)]
    w = rand_complex(rng, 4)
    powers = np.array([np.abs(np.vdot(p.v, w)) ** 2 for p in pats])
    from irscov.measurement import PowerProfile
    profile = PowerProfile(0, powers, tuple(range(30)))
    a = train_from_patterns(pats, profile, TrainConfig(seed=2))
    b = train(lift(np.stack([p.v for p in pats])), powers, TrainConfig(seed=2))
    assert_allclose(a.w_star, b.w_star)
    assert a.grid == 0


def test_train_from_patterns_unknown_id():
    rng = np.random.default_rng(18)
    ab = PhaseAlphabet(1)
    pats = [random_pattern(rng, ab, 4, pattern_id=i) for i in range(3)]
    from irscov.measurement import PowerProfile
    profile = PowerProfile(0, np.ones(3), (0, 1, 99))
    with pytest.raises(ValueError):
        train_from_patterns(pats, profile, TrainConfig())


def test_channel_estimate_covariance_outer_product():
    rng = np.random.default_rng(19)
    w = rand_complex(rng, 4)
    est = ChannelEstimate(w, 0.0, np.zeros(1), 0)
    g = est.covariance
    assert_allclose(g, np.outer(w, np.conj(w)))
    assert_allclose(g, g.conj().T)


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0)
    with pytest.raises(ValueError):
        TrainConfig(train_fraction=1.0)
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)


# ---------------------------------------------------------------------------
# phase ambiguity
# ---------------------------------------------------------------------------

def test_phase_ambiguity_accepts_global_rotation():
    rng = np.random.default_rng(20)
    h = rand_complex(rng, 6)
    w = h * np.exp(1.3j)
    assert phase_ambiguity_check(w, h, PhaseAlphabet(2))
    assert phase_ambiguity_check(w, h, PhaseAlphabet(1))


def test_phase_ambiguity_binary_admits_conjugate():
    rng = np.random.default_rng(21)
    h = rand_complex(rng, 5)
    assert phase_ambiguity_check(np.conj(h), h, PhaseAlphabet(1))


def test_phase_ambiguity_quaternary_rejects_conjugate():
    rng = np.random.default_rng(22)
    h = rand_complex(rng, 5)
    assert not phase_ambiguity_check(np.conj(h), h, PhaseAlphabet(2))
    # the conjugate really is distinguishable by some quaternary pattern
    ab = PhaseAlphabet(2)
    seen_difference = any(
        abs(np.abs(np.vdot(p.v, h)) - np.abs(np.vdot(p.v, np.conj(h)))) > 1e-6
        for p in (random_pattern(rng, ab, 5, pattern_id=i) for i in range(20))
    )
    assert seen_difference


def test_phase_ambiguity_zero_reference():
    assert phase_ambiguity_check(np.zeros(3), np.zeros(3), PhaseAlphabet(2))
    assert not phase_ambiguity_check(np.ones(3), np.zeros(3), PhaseAlphabet(2))


def test_phase_ambiguity_rejects_unrelated():
    rng = np.random.default_rng(23)
    assert not phase_ambiguity_check(rand_complex(rng, 6), rand_complex(rng, 6),
                                     PhaseAlphabet(2))
