"""Phase alphabets, power measurements and campaign bookkeeping."""

import numpy as np
import pytest
from numpy.testing import assert_allclose
from scipy import stats

from irscov.measurement import (MeasurementRecord, PhaseAlphabet, PowerProfile,
                                ReflectionPattern, campaign, expected_measure,
                                measure_power, profiles_from_records,
                                random_pattern, read_measurements,
                                read_patterns, write_measurements,
                                write_patterns)
from irscov.propagation import (DeterministicChannels, GroundTruthChannels,
                                expected_power)

from conftest import make_scene


# ---------------------------------------------------------------------------
# phase alphabet
# ---------------------------------------------------------------------------

def test_alphabet_binary():
    ab = PhaseAlphabet(1)
    assert ab.size == 2
    assert_allclose(ab.values, [np.pi, 2 * np.pi])


def test_alphabet_quaternary():
    ab = PhaseAlphabet(2)
    assert ab.size == 4
    assert_allclose(ab.values, [np.pi / 2, np.pi, 3 * np.pi / 2, 2 * np.pi])


def test_alphabet_contains_excludes_zero():
    ab = PhaseAlphabet(2)
    assert ab.contains(np.array([2 * np.pi]))
    assert not ab.contains(np.array([0.0]))
    assert not ab.contains(np.array([0.1]))


def test_alphabet_rejects_bad_alpha():
    with pytest.raises(ValueError):
        PhaseAlphabet(0)


def test_alphabet_nearest_index_wraps_zero_up():
    ab = PhaseAlphabet(2)
    # an angle of 0 is the same phase as 2 pi, the last alphabet entry
    assert ab.nearest_index(np.array([0.0])) == np.array([3])
    assert ab.nearest_index(np.array([np.pi / 2 + 0.01])) == np.array([0])
    assert ab.nearest_index(np.array([2 * np.pi - 0.01])) == np.array([3])


def test_alphabet_index_of_round_trips():
    ab = PhaseAlphabet(3)
    idx = ab.index_of(ab.values)
    assert_allclose(idx, np.arange(ab.size))
    with pytest.raises(ValueError):
        ab.index_of(np.array([0.3]))


# ---------------------------------------------------------------------------
# patterns
# ---------------------------------------------------------------------------

def test_reflection_pattern_phase_to_coefficient():
    p = ReflectionPattern(np.array([np.pi / 2, np.pi, 2 * np.pi]), id=4)
    assert_allclose(p.v, [1j, -1.0, 1.0], atol=1e-12)
    assert p.n_elements == 3


def test_random_pattern_draws_from_alphabet():
    rng = np.random.default_rng(0)
    ab = PhaseAlphabet(2)
    pat = random_pattern(rng, ab, 16, pattern_id=3)
    assert pat.id == 3
    assert ab.contains(pat.theta)


def test_random_pattern_is_uniform():
    rng = np.random.default_rng(1)
    ab = PhaseAlphabet(2)
    draws = 10**5
    theta = np.concatenate([random_pattern(rng, ab, 10).theta for _ in range(draws // 10)])
    for value in ab.values:
        freq = np.mean(np.isclose(theta, value))
        assert freq == pytest.approx(1.0 / ab.size, abs=0.01)


# ---------------------------------------------------------------------------
# power measurement
# ---------------------------------------------------------------------------

def test_measure_power_noise_only_chi_square():
    """With no transmit power the Q-average is a scaled chi-square variable."""
    scene = make_scene()
    rng = np.random.default_rng(2)
    ab = PhaseAlphabet(1)
    q, noise = 60, 1e-3
    rec = measure_power(rng, scene, 0, random_pattern(rng, ab, 4), q=q,
                        p_tx=0.0, noise_power=noise)
    lo = noise / (2 * q) * stats.chi2.ppf(1e-6, 2 * q)
    hi = noise / (2 * q) * stats.chi2.ppf(1 - 1e-6, 2 * q)
    assert lo < rec.p_bar < hi


def test_measure_power_deterministic_noise_free_any_q():
    scene = make_scene(deterministic_only=True)
    det = DeterministicChannels.from_scene(scene)
    rng = np.random.default_rng(3)
    ab = PhaseAlphabet(2)
    pat = random_pattern(rng, ab, 4)
    p_tx = 2.0
    exact = p_tx * np.abs(np.vdot(pat.v, det.cascaded(0))) ** 2
    for q in (1, 7, 64):
        rec = measure_power(rng, scene, 0, pat, q=q, p_tx=p_tx, noise_power=0.0)
        assert rec.p_bar == pytest.approx(exact, rel=1e-12)
        assert rec.q == q


def test_measure_power_mean_matches_expected_power():
    scene = make_scene(rician_iu=2.0, rician_bi=3.0)
    p_tx, noise = 2.0, 1e-3
    truth = GroundTruthChannels.from_scene(scene, p_tx, noise)
    rng = np.random.default_rng(4)
    pat = random_pattern(rng, PhaseAlphabet(2), 4)
    exact = expected_power(truth, pat.v, 0)
    reps, q = 10000, 16
    vals = np.array([measure_power(rng, scene, 0, pat, q=q, p_tx=p_tx,
                                   noise_power=noise).p_bar
                     for _ in range(reps)])
    assert vals.mean() == pytest.approx(exact, rel=0.01)


def test_measure_power_variance_scales_inversely_with_q():
    scene = make_scene(deterministic_only=True)
    rng = np.random.default_rng(5)
    pat = random_pattern(rng, PhaseAlphabet(2), 4)
    qs = np.array([10, 100, 1000])
    variances = []
    for q in qs:
        vals = np.array([measure_power(rng, scene, 0, pat, q=int(q), p_tx=1.0,
                                       noise_power=1e-2).p_bar
                         for _ in range(200)])
        variances.append(vals.var())
    slope = np.polyfit(np.log(qs), np.log(variances), 1)[0]
    assert slope == pytest.approx(-1.0, abs=0.15)


def test_measure_power_coherence_blocks():
    """Coherence > 1 reuses each channel draw across a block of symbols."""
    scene = make_scene(rician_iu=1.0)
    ab = PhaseAlphabet(1)
    rng = np.random.default_rng(6)
    pat = random_pattern(rng, ab, 4)
    rec = measure_power(np.random.default_rng(7), scene, 0, pat, q=8,
                        p_tx=1.0, noise_power=0.0, coherence=8)
    single = measure_power(np.random.default_rng(7), scene, 0, pat, q=1,
                           p_tx=1.0, noise_power=0.0, coherence=1)
    assert rec.p_bar == pytest.approx(single.p_bar)


def test_expected_measure_equals_expected_power():
    scene = make_scene(rician_iu=2.5)
    p_tx, noise = 2.0, 1e-4
    truth = GroundTruthChannels.from_scene(scene, p_tx, noise)
    rng = np.random.default_rng(8)
    pat = random_pattern(rng, PhaseAlphabet(2), 4, pattern_id=9)
    rec = expected_measure(truth, 0, pat)
    assert rec.p_bar == pytest.approx(expected_power(truth, pat.v, 0))
    assert rec.pattern == 9
    # rotating every phase by one alphabet step leaves the mean unchanged
    ab = PhaseAlphabet(2)
    rotated = ReflectionPattern(ab.values[(ab.index_of(pat.theta) + 1) % ab.size], id=9)
    assert expected_measure(truth, 0, rotated).p_bar == pytest.approx(rec.p_bar)


# ---------------------------------------------------------------------------
# campaigns
# ---------------------------------------------------------------------------

def test_campaign_counts_and_shared_patterns():
    scene = make_scene(d1=15.0, d2=15.0)
    pats, profiles = campaign(123, scene, range(20), m=10, q=2, p_tx=1.0,
                              noise_power=1e-6, alphabet=PhaseAlphabet(2))
    assert len(pats) == 10
    assert [p.id for p in pats] == list(range(10))
    assert sorted(profiles) == list(range(20))
    ids = tuple(p.id for p in pats)
    total = 0
    for profile in profiles.values():
        assert profile.pattern_ids == ids
        total += len(profile)
    assert total == 200


def test_campaign_deterministic_and_thread_invariant():
    scene = make_scene(d1=9.0, d2=9.0, rician_iu=2.0)
    args = dict(m=4, q=3, p_tx=1.0, noise_power=1e-6, alphabet=PhaseAlphabet(1))
    pats_a, prof_a = campaign(77, scene, range(9), **args)
    pats_b, prof_b = campaign(77, scene, range(9), **args, threads=4)
    for a, b in zip(pats_a, pats_b):
        assert_allclose(a.theta, b.theta)
    for k in prof_a:
        assert_allclose(prof_a[k].powers, prof_b[k].powers)


def test_campaign_seed_changes_measurements():
    scene = make_scene()
    args = dict(m=3, q=2, p_tx=1.0, noise_power=1e-3, alphabet=PhaseAlphabet(1))
    _, prof_a = campaign(1, scene, [0], **args)
    _, prof_b = campaign(2, scene, [0], **args)
    assert not np.allclose(prof_a[0].powers, prof_b[0].powers)


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

def test_pattern_file_round_trip(tmp_path):
    rng = np.random.default_rng(9)
    ab = PhaseAlphabet(3)
    pats = [random_pattern(rng, ab, 6, pattern_id=i) for i in range(4)]
    path = tmp_path / "patterns.csv"
    write_patterns(path, pats)
    again = read_patterns(path)
    assert [p.id for p in again] == [0, 1, 2, 3]
    for a, b in zip(pats, again):
        assert_allclose(a.theta, b.theta)


def test_measurement_file_round_trip(tmp_path):
    records = [MeasurementRecord(grid=2, pattern=0, p_bar=3.25e-11, q=4,
                                 p_tx=2.0, noise_power=1e-12),
               MeasurementRecord(grid=2, pattern=1, p_bar=1.5e-10, q=4,
                                 p_tx=2.0, noise_power=1e-12)]
    path = tmp_path / "measurements.csv"
    write_measurements(path, records)
    again = read_measurements(path)
    assert again == records


def test_profiles_from_records_orders_by_pattern():
    records = [MeasurementRecord(0, 1, 5.0, 1, 1.0, 0.0),
               MeasurementRecord(0, 0, 3.0, 1, 1.0, 0.0)]
    profiles = profiles_from_records(records)
    assert profiles[0].pattern_ids == (0, 1)
    assert_allclose(profiles[0].powers, [3.0, 5.0])


def test_power_profile_validation():
    with pytest.raises(ValueError):
        PowerProfile(0, np.array([1.0, 2.0]), (0,))
