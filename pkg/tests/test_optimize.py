"""Discrete phase optimization: measured pickers, relaxation, refinement."""

import itertools

import numpy as np
import pytest
from numpy.testing import assert_allclose

from irscov.errors import ConfigurationError, InstanceTooLargeError
from irscov.measurement import PhaseAlphabet, PowerProfile, ReflectionPattern
from irscov.optimize import (ObjectiveModel, csm, exhaustive_search, objective,
                             relax_init, rms, successive_refinement)

from conftest import rand_complex, rand_unit_vector


def _rank_one_sum_model(rng, n, k, alpha):
    vectors = [rand_complex(rng, n) for _ in range(k)]
    return ObjectiveModel.from_vectors(vectors, PhaseAlphabet(alpha)), vectors


def _pattern(alphabet, indices):
    return ReflectionPattern(alphabet.values[np.asarray(indices, dtype=int)])


def _brute_force(model):
    ab = model.alphabet
    best_val, best_idx = -1.0, None
    for combo in itertools.product(range(ab.size), repeat=model.n_elements):
        val = objective(_pattern(ab, combo), model)
        if val > best_val:
            best_val, best_idx = val, combo
    return best_val, best_idx


# ---------------------------------------------------------------------------
# objective model
# ---------------------------------------------------------------------------

def test_objective_is_mean_quadratic_form():
    rng = np.random.default_rng(0)
    ab = PhaseAlphabet(2)
    model, vectors = _rank_one_sum_model(rng, 4, 3, 2)
    covs = [np.outer(w, np.conj(w)) for w in vectors]
    for _ in range(5):
        pat = _pattern(ab, rng.integers(0, ab.size, size=4))
        v = pat.v
        manual = np.mean([np.real(np.conj(v) @ g @ v) for g in covs])
        assert objective(pat, model) == pytest.approx(manual, rel=1e-10)


def test_from_covariances_matches_from_vectors():
    rng = np.random.default_rng(1)
    ab = PhaseAlphabet(1)
    vectors = [rand_complex(rng, 5) for _ in range(2)]
    covs = [np.outer(w, np.conj(w)) for w in vectors]
    a = ObjectiveModel.from_vectors(vectors, ab)
    b = ObjectiveModel.from_covariances(covs, ab)
    for _ in range(5):
        pat = _pattern(ab, rng.integers(0, ab.size, size=5))
        assert objective(pat, a) == pytest.approx(objective(pat, b), rel=1e-9)


def test_from_covariances_rejects_non_hermitian():
    bad = np.array([[1.0, 2.0], [0.0, 1.0]], dtype=complex)
    with pytest.raises(ConfigurationError):
        ObjectiveModel.from_covariances([bad], PhaseAlphabet(1))


def test_objective_aligned_phases_reach_l1_bound():
    """When the channel's phases live on the alphabet, quantization is free."""
    rng = np.random.default_rng(2)
    ab = PhaseAlphabet(2)
    mags = rng.uniform(0.5, 2.0, size=6)
    idx = rng.integers(0, ab.size, size=6)
    w = mags * np.exp(1j * ab.values[idx])
    model = ObjectiveModel.from_vectors([w], ab)
    bound = float(np.sum(mags)) ** 2
    assert objective(_pattern(ab, idx), model) == pytest.approx(bound, rel=1e-10)
    for _ in range(10):
        other = _pattern(ab, rng.integers(0, ab.size, size=6))
        assert objective(other, model) <= bound * (1 + 1e-12)


def test_objective_zero_model():
    ab = PhaseAlphabet(1)
    model = ObjectiveModel.from_vectors([np.zeros(3, dtype=complex)], ab)
    assert objective(_pattern(ab, [0, 1, 0]), model) == 0.0


def test_objective_rejects_infeasible_patterns():
    model, _ = _rank_one_sum_model(np.random.default_rng(3), 4, 1, 1)
    with pytest.raises(ConfigurationError):
        objective(0.5 * np.ones(4), model)
    with pytest.raises(ConfigurationError):
        objective(rand_unit_vector(np.random.default_rng(4), 4), model)
    with pytest.raises(ConfigurationError):
        objective(_pattern(PhaseAlphabet(1), [0, 0, 0]), model)


def test_objective_global_rotation_invariance():
    rng = np.random.default_rng(5)
    ab = PhaseAlphabet(2)
    model, _ = _rank_one_sum_model(rng, 5, 2, 2)
    idx = rng.integers(0, ab.size, size=5)
    base = objective(_pattern(ab, idx), model)
    for shift in range(1, ab.size):
        rotated = _pattern(ab, (idx + shift) % ab.size)
        assert objective(rotated, model) == pytest.approx(base, rel=1e-9)


# ---------------------------------------------------------------------------
# measurement-driven pickers
# ---------------------------------------------------------------------------

def _two_pattern_setup(p_a, p_b):
    ab = PhaseAlphabet(1)
    patterns = [ReflectionPattern(np.array([np.pi]), id=0),
                ReflectionPattern(np.array([2 * np.pi]), id=1)]
    profiles = {0: PowerProfile(0, np.array([p_a, p_b]), (0, 1))}
    return ab, patterns, profiles


def test_rms_picks_highest_average():
    _, patterns, profiles = _two_pattern_setup(3.0, 5.0)
    result = rms(patterns, profiles)
    assert result.pattern.id == 1
    assert result.objective == 5.0
    assert result.method == "rms"


def test_rms_tie_goes_to_lowest_id():
    _, patterns, profiles = _two_pattern_setup(4.0, 4.0)
    assert rms(patterns, profiles).pattern.id == 0


def test_rms_averages_across_grids():
    ab = PhaseAlphabet(1)
    patterns = [ReflectionPattern(np.array([np.pi]), id=0),
                ReflectionPattern(np.array([2 * np.pi]), id=1)]
    profiles = {0: PowerProfile(0, np.array([9.0, 1.0]), (0, 1)),
                1: PowerProfile(1, np.array([0.0, 6.0]), (0, 1))}
    result = rms(patterns, profiles)
    assert result.pattern.id == 0  # averages 4.5 vs 3.5
    assert result.objective == pytest.approx(4.5)


def test_csm_single_element_conditional_means():
    ab, patterns, profiles = _two_pattern_setup(2.0, 7.0)
    result = csm(patterns, profiles, ab)
    assert_allclose(result.pattern.theta, [2 * np.pi])
    assert np.isnan(result.objective)


def test_csm_two_elements_matches_brute_force_means():
    ab = PhaseAlphabet(1)
    combos = list(itertools.product([np.pi, 2 * np.pi], repeat=2))
    patterns = [ReflectionPattern(np.array(c), id=i) for i, c in enumerate(combos)]
    powers = np.array([1.0, 8.0, 2.0, 3.0])
    profiles = {0: PowerProfile(0, powers, (0, 1, 2, 3))}
    result = csm(patterns, profiles, ab)
    expected = []
    for elem in range(2):
        means = {}
        for phase in (np.pi, 2 * np.pi):
            sel = [i for i, c in enumerate(combos) if c[elem] == phase]
            means[phase] = powers[sel].mean()
        best = max(means, key=lambda ph: (means[ph], -ph))
        expected.append(best)
    assert_allclose(result.pattern.theta, expected)


def test_csm_skips_unsampled_phases():
    ab = PhaseAlphabet(2)
    patterns = [ReflectionPattern(np.array([np.pi / 2]), id=0),
                ReflectionPattern(np.array([np.pi]), id=1)]
    profiles = {0: PowerProfile(0, np.array([1.0, 4.0]), (0, 1))}
    result = csm(patterns, profiles, ab)
    assert_allclose(result.pattern.theta, [np.pi])


def test_csm_tie_takes_smallest_phase():
    ab, patterns, profiles = _two_pattern_setup(6.0, 6.0)
    assert_allclose(csm(patterns, profiles, ab).pattern.theta, [np.pi])


def test_pickers_reject_empty_profiles():
    ab = PhaseAlphabet(1)
    patterns = [ReflectionPattern(np.array([np.pi]), id=0)]
    with pytest.raises(ConfigurationError):
        rms(patterns, {})
    with pytest.raises(ConfigurationError):
        csm(patterns, {}, ab)


def test_pickers_reject_mismatched_pattern_count():
    _, patterns, profiles = _two_pattern_setup(1.0, 2.0)
    with pytest.raises(ConfigurationError):
        rms(patterns[:1], profiles)


# ---------------------------------------------------------------------------
# relaxation initializer
# ---------------------------------------------------------------------------

def _canonical_quantized(w, alphabet):
    u = w / np.linalg.norm(w)
    u = u * np.exp(-1j * np.angle(u[int(np.argmax(np.abs(u)))]))
    theta = np.mod(np.angle(u), 2 * np.pi)
    return alphabet.values[alphabet.nearest_index(theta)]


@pytest.mark.parametrize("alpha", [1, 2, 3])
def test_relax_init_rank_one_quantizes_eigenvector(alpha):
    ab = PhaseAlphabet(alpha)
    rng = np.random.default_rng(alpha)
    for trial in range(20):
        w = rand_complex(rng, 6)
        model = ObjectiveModel.from_vectors([w], ab)
        pat = relax_init(model, np.random.default_rng(trial), samples=1)
        assert_allclose(pat.theta, _canonical_quantized(w, ab))


def test_relax_init_zero_spread_ignores_rng():
    rng = np.random.default_rng(6)
    model, _ = _rank_one_sum_model(rng, 5, 2, 2)
    a = relax_init(model, np.random.default_rng(0), samples=16, spread=0.0)
    b = relax_init(model, np.random.default_rng(999), samples=16, spread=0.0)
    assert_allclose(a.theta, b.theta)


def test_relax_init_degenerate_identity_model():
    ab = PhaseAlphabet(2)
    model = ObjectiveModel.from_covariances([np.eye(4, dtype=complex)], ab)
    a = relax_init(model, np.random.default_rng(0), samples=1)
    b = relax_init(model, np.random.default_rng(321), samples=1)
    assert_allclose(a.theta, b.theta)
    assert_allclose(a.theta, np.full(4, 2 * np.pi))


def test_relax_init_zero_matrix_gives_uniform_pattern():
    ab = PhaseAlphabet(2)
    model = ObjectiveModel.from_vectors([np.zeros(3, dtype=complex)], ab)
    pat = relax_init(model, np.random.default_rng(0))
    assert_allclose(pat.theta, np.full(3, 2 * np.pi))


def test_relax_init_more_samples_never_hurt():
    rng = np.random.default_rng(7)
    for trial in range(5):
        model, _ = _rank_one_sum_model(rng, 6, 3, 1)
        lone = objective(relax_init(model, np.random.default_rng(trial), samples=1), model)
        many = objective(relax_init(model, np.random.default_rng(trial), samples=64), model)
        assert many >= lone - 1e-12 * abs(lone)


def test_relax_init_rejects_bad_samples():
    model, _ = _rank_one_sum_model(np.random.default_rng(8), 4, 1, 1)
    with pytest.raises(ValueError):
        relax_init(model, np.random.default_rng(0), samples=0)


# ---------------------------------------------------------------------------
# successive refinement
# ---------------------------------------------------------------------------

def test_refinement_reaches_exhaustive_optimum_tiny():
    rng = np.random.default_rng(9)
    for trial in range(20):
        model, _ = _rank_one_sum_model(rng, 2, 1, 1)
        v0 = relax_init(model, np.random.default_rng(trial), samples=1)
        refined = successive_refinement(v0, model)
        exact = exhaustive_search(model)
        assert refined.objective == pytest.approx(exact.objective, rel=1e-9)


def test_refinement_monotone_trace_and_improvement():
    rng = np.random.default_rng(10)
    ab = PhaseAlphabet(2)
    for _ in range(10):
        model, _ = _rank_one_sum_model(rng, 6, 3, 2)
        v0 = ReflectionPattern(ab.values[rng.integers(0, ab.size, size=6)])
        start = objective(v0, model)
        result = successive_refinement(v0, model)
        assert result.objective >= start - 1e-12 * abs(start)
        assert np.all(np.diff(result.trace) >= 0)
        assert result.trace[0] == pytest.approx(start)
        assert result.method == "sr"


def test_refinement_fixed_point():
    rng = np.random.default_rng(11)
    model, _ = _rank_one_sum_model(rng, 5, 2, 2)
    first = successive_refinement(relax_init(model, np.random.default_rng(0)), model)
    second = successive_refinement(first.pattern, model)
    assert_allclose(second.pattern.theta, first.pattern.theta)
    assert len(second.trace) == 1


def test_refinement_sweep_order_must_be_permutation():
    model, _ = _rank_one_sum_model(np.random.default_rng(12), 4, 1, 1)
    v0 = relax_init(model, np.random.default_rng(0), samples=1)
    with pytest.raises(ValueError):
        successive_refinement(v0, model, sweep_order=[0, 1, 2, 2])
    reordered = successive_refinement(v0, model, sweep_order=[3, 1, 0, 2])
    assert reordered.objective > 0


def test_refinement_rejects_wrong_length():
    model, _ = _rank_one_sum_model(np.random.default_rng(13), 4, 1, 1)
    with pytest.raises(ConfigurationError):
        successive_refinement(ReflectionPattern(np.array([np.pi])), model)


# ---------------------------------------------------------------------------
# exhaustive search
# ---------------------------------------------------------------------------

def test_exhaustive_single_element_argmax():
    rng = np.random.default_rng(14)
    ab = PhaseAlphabet(2)
    model, _ = _rank_one_sum_model(rng, 1, 2, 2)
    result = exhaustive_search(model)
    vals = [objective(_pattern(ab, [i]), model) for i in range(ab.size)]
    assert result.objective == pytest.approx(max(vals), rel=1e-12)


def test_exhaustive_matches_full_enumeration():
    rng = np.random.default_rng(15)
    for trial in range(5):
        model, _ = _rank_one_sum_model(rng, 4, 2, 1)
        result = exhaustive_search(model)
        best_val, _ = _brute_force(model)
        assert result.objective == pytest.approx(best_val, rel=1e-12)
        assert result.pattern.theta[0] == model.alphabet.values[0]


def test_exhaustive_beats_random_patterns():
    rng = np.random.default_rng(16)
    ab = PhaseAlphabet(1)
    model, _ = _rank_one_sum_model(rng, 6, 3, 1)
    best = exhaustive_search(model).objective
    for _ in range(10):
        pat = _pattern(ab, rng.integers(0, ab.size, size=6))
        assert objective(pat, model) <= best * (1 + 1e-12)


def test_exhaustive_refuses_oversized_instances():
    model, _ = _rank_one_sum_model(np.random.default_rng(17), 11, 1, 2)
    with pytest.raises(InstanceTooLargeError):
        exhaustive_search(model)
