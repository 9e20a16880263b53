import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from oracles import enumerate_urn_paths
from photonlink.devices import (
    AmplifierKind,
    AmplifierModel,
    Beam,
    EncoderSetting,
    NonCoincidenceEvent,
    PhotonCounts,
    amplify_covariant,
    amplify_paper,
    amplify_urn,
    decode,
    default_threshold,
    detect_counts,
    encode,
    photon_vector,
    polarization_angle,
    receiver_count_pmf,
    truncation_for_gain,
    urn_pmf,
    urn_pmf_exact,
)
from photonlink.fock import LeakageExceeded
from photonlink.states import EventClass, PolarizationBasis, bell_pair, spdc_unentangled

H_BASIS = PolarizationBasis(0)


class TestEncoder:
    def test_bit_to_basis(self):
        assert EncoderSetting(0).basis.theta == 0.0
        assert EncoderSetting(1).basis.theta == 45.0
        with pytest.raises(ValueError):
            EncoderSetting(2)

    @pytest.mark.parametrize("bit, angles", [(0, {0.0, 90.0}), (1, {45.0, 135.0})])
    def test_bell_remote_polarizations(self, bit, angles):
        rng = np.random.default_rng(1)
        seen = {}
        n = 4000
        for _ in range(n):
            out = encode(EncoderSetting(bit), bell_pair(), rng)
            a = round(polarization_angle(out.collapsed_remote), 9)
            seen[a] = seen.get(a, 0) + 1
        assert set(seen) == angles
        for count in seen.values():
            assert abs(count / n - 0.5) <= 4 * math.sqrt(0.25 / n)

    def test_spdc_non_coincidence(self):
        rng = np.random.default_rng(3)
        outcomes = [encode(EncoderSetting(0), spdc_unentangled(), rng) for _ in range(400)]
        classes = {o.event_class for o in outcomes if isinstance(o, NonCoincidenceEvent)}
        assert classes == {EventClass.BOTH_SIGNAL, EventClass.BOTH_IDLER}
        assert any(not isinstance(o, NonCoincidenceEvent) for o in outcomes)


class TestDeterministicAmplifier:
    @pytest.mark.parametrize("m", [0, 3, 100])
    def test_composition(self, m):
        beam = amplify_paper(0.0, AmplifierModel.paper(m))
        assert beam.count_at(0.0) == 2 * m + 1
        assert beam.count_at(90.0) == m
        assert beam.total == 3 * m + 1

    def test_m3_example(self):
        assert amplify_paper(0.0, AmplifierModel.paper(3)).components == ((0.0, 7), (90.0, 3))

    def test_m100_diagonal(self):
        beam = amplify_paper(45.0, AmplifierModel.paper(100))
        assert beam.components == ((45.0, 201), (135.0, 100))

    def test_wrong_kind(self):
        with pytest.raises(ValueError):
            amplify_paper(0.0, AmplifierModel.urn(2))


class TestUrn:
    def test_m0_is_passthrough(self):
        rng = np.random.default_rng(0)
        for _ in range(10):
            assert amplify_urn(30.0, AmplifierModel.urn(0), rng).components == ((30.0, 1), (120.0, 0))

    def test_m1_matches_path_enumeration(self):
        paths = enumerate_urn_paths(1)
        exact = urn_pmf_exact(1)
        assert {(k, 4 - k): p for k, p in enumerate(exact) if p} == paths
        np.testing.assert_allclose(urn_pmf(1), [float(p) for p in exact], atol=1e-15)

    @pytest.mark.parametrize("m", [0, 1, 2, 3])
    def test_exact_mean(self, m):
        pmf = urn_pmf_exact(m)
        assert sum(k * p for k, p in enumerate(pmf)) == 2 * m + 1
        assert sum(pmf) == 1

    def test_enumeration_for_m2(self):
        paths = enumerate_urn_paths(2)
        assert {(k, 7 - k): p for k, p in enumerate(urn_pmf_exact(2)) if p} == paths

    def test_monte_carlo_mean(self):
        m, n = 40, 20_000
        model = AmplifierModel.urn(m)
        rng = np.random.default_rng(17)
        draws = np.array([amplify_urn(0.0, model, rng).count_at(0.0) for _ in range(n)])
        pmf = urn_pmf(m)
        k = np.arange(pmf.size)
        sd = math.sqrt(pmf @ k**2 - (pmf @ k) ** 2)
        assert abs(draws.mean() - (2 * m + 1)) <= 4 * sd / math.sqrt(n)

    def test_conservation(self):
        rng = np.random.default_rng(5)
        model = AmplifierModel.urn(7)
        assert all(amplify_urn(10.0, model, rng).total == 22 for _ in range(200))


class TestCovariant:
    def test_gain_mapping(self):
        model = AmplifierModel.covariant(3)
        assert model.gain == 4.0
        assert model.n_max >= 16

    @pytest.mark.parametrize("m", [1, 3, 10])
    def test_means_match_composition(self, m):
        dist = amplify_covariant(photon_vector(0.0), AmplifierModel.covariant(m))
        assert dist.mean("D_r") == pytest.approx(2 * m + 1, abs=1e-5)
        assert dist.mean("D_r'") == pytest.approx(m, abs=1e-5)
        assert dist.leakage < 1e-8

    def test_insufficient_truncation_is_loud(self):
        with pytest.raises(LeakageExceeded):
            amplify_covariant(photon_vector(0.0), AmplifierModel.covariant(3, n_max=16))

    def test_truncation_rule_is_honest(self):
        for gain in (1.5, 4.0, 26.0):
            n = truncation_for_gain(gain, 1e-9)
            dist = amplify_covariant(photon_vector(0.0), AmplifierModel.covariant(gain=gain, n_max=n))
            assert dist.leakage < 1e-9

    def test_routes_agree(self):
        model = AmplifierModel.covariant(gain=1.3, n_max=16)
        for angle in (0.0, 20.0, 45.0):
            a = amplify_covariant(photon_vector(angle), model, route="product")
            b = amplify_covariant(photon_vector(angle), model, route="dense")
            np.testing.assert_allclose(a.grid, b.grid, atol=1e-12)

    @pytest.mark.parametrize("theta", [0.0, 22.5, 45.0, 80.0, 135.0])
    def test_mixed_input_is_basis_independent(self, theta):
        model = AmplifierModel.covariant(gain=1.2, n_max=14)
        mixed = np.eye(2) / 2
        ref = amplify_covariant(mixed, model)
        other = amplify_covariant(mixed, model, PolarizationBasis(theta))
        assert np.abs(ref.grid - other.grid).max() <= 1e-9

    @pytest.mark.parametrize("theta", [10.0, 45.0, 100.0])
    def test_rotation_covariance(self, theta):
        model = AmplifierModel.covariant(gain=1.2, n_max=14)
        base = amplify_covariant(photon_vector(0.0), model)
        turned = amplify_covariant(photon_vector(theta), model, PolarizationBasis(theta))
        assert np.abs(base.grid - turned.grid).max() <= 1e-9

    @settings(max_examples=10, deadline=None)
    @given(st.floats(0, 180), st.floats(0, 180))
    def test_counts_depend_only_on_relative_angle(self, phi, theta):
        model = AmplifierModel.covariant(gain=1.2, n_max=14)
        aligned = amplify_covariant(photon_vector(phi - theta), model)
        turned = amplify_covariant(photon_vector(phi), model, PolarizationBasis(theta))
        assert np.abs(aligned.grid - turned.grid).max() <= 1e-9

    def test_thermal_perpendicular_marginal(self):
        # the unseeded channel is the thermal distribution with lam = (G-1)/G
        model = AmplifierModel.covariant(2)
        marg = amplify_covariant(photon_vector(0.0), model).marginal("D_r'")
        lam = 2 / 3
        ref = (1 - lam) * lam ** np.arange(marg.size)
        np.testing.assert_allclose(marg, ref / ref.sum(), atol=1e-10)


class TestDetection:
    def test_aligned_beam(self):
        rng = np.random.default_rng(0)
        beam = Beam(((0.0, 7), (90.0, 3)))
        assert all(detect_counts(beam, H_BASIS, rng) == PhotonCounts(7, 3) for _ in range(20))

    def test_diagonal_beam_statistics(self):
        m, n = 20, 20_000
        rng = np.random.default_rng(8)
        beam = amplify_paper(45.0, AmplifierModel.paper(m))
        deltas = np.array([detect_counts(beam, H_BASIS, rng).delta for _ in range(n)])
        var = 3 * m + 1
        assert abs(deltas.mean()) <= 4 * math.sqrt(var / n)
        assert deltas.var() == pytest.approx(var, rel=0.05)

    def test_single_photon_at_45_basis(self):
        rng = np.random.default_rng(2)
        n = 4000
        hits = sum(detect_counts(Beam(((0.0, 1),)), PolarizationBasis(45), rng).n_r for _ in range(n))
        assert abs(hits / n - 0.5) <= 4 * math.sqrt(0.25 / n)

    def test_pmf_basis_must_match(self):
        dist = amplify_covariant(photon_vector(0.0), AmplifierModel.covariant(1))
        with pytest.raises(ValueError):
            detect_counts(dist, PolarizationBasis(45), np.random.default_rng(0))

    def test_pmf_sampling(self):
        dist = amplify_covariant(photon_vector(0.0), AmplifierModel.covariant(2))
        rng = np.random.default_rng(12)
        n = 20_000
        draws = [detect_counts(dist, H_BASIS, rng) for _ in range(n)]
        mean_r = sum(c.n_r for c in draws) / n
        marg = dist.marginal("D_r")
        sd = math.sqrt(marg @ np.arange(marg.size) ** 2 - dist.mean("D_r") ** 2)
        assert abs(mean_r - 5.0) <= 4 * sd / math.sqrt(n)


class TestDecode:
    @pytest.mark.parametrize("m", [0, 1, 5, 100])
    def test_signal_zero_signature(self, m):
        t = default_threshold(m)
        assert decode(PhotonCounts(2 * m + 1, m), t) == 0
        assert decode(PhotonCounts(m, 2 * m + 1), t) == 0

    @given(st.integers(0, 10_000), st.integers(1, 500))
    def test_equal_counts_decode_one(self, k, t):
        assert decode(PhotonCounts(k, k), t) == 1

    @given(st.integers(0, 400), st.integers(0, 400), st.integers(0, 50), st.integers(1, 200))
    def test_monotone(self, a, b, extra, t):
        base = decode(PhotonCounts(a, b), t)
        wider = PhotonCounts(a + extra, b) if a >= b else PhotonCounts(a, b + extra)
        if base == 0:
            assert decode(wider, t) == 0

    def test_rejects_zero_threshold(self):
        with pytest.raises(ValueError):
            decode(PhotonCounts(1, 0), 0)

    def test_m100_false_zero_rate(self):
        # oracle: |2X - 301| >= 51 for X ~ Binomial(301, 1/2)
        x = np.arange(302)
        oracle = binom.pmf(x, 301, 0.5)[np.abs(2 * x - 301) >= 51].sum()
        assert oracle == pytest.approx(0.0038789896, abs=1e-9)
        dist = receiver_count_pmf(45.0, AmplifierModel.paper(100))
        grid = dist.grid
        idx = np.argwhere(grid > 0)
        p0 = sum(grid[i, j] for i, j in idx if abs(i - j) >= default_threshold(100))
        assert p0 == pytest.approx(oracle, abs=1e-12)


class TestReceiverPmf:
    def test_deterministic_aligned_is_point_mass(self):
        dist = receiver_count_pmf(90.0, AmplifierModel.paper(4))
        assert dist.as_dict() == {(4, 9): 1.0}

    def test_urn_aligned_matches_urn_pmf(self):
        m = 3
        dist = receiver_count_pmf(0.0, AmplifierModel.urn(m))
        for k, p in enumerate(urn_pmf(m)):
            assert dist.grid[k, 3 * m + 1 - k] == pytest.approx(p, abs=1e-14)

    def test_urn_diagonal_is_fair_binomial(self):
        m = 5
        dist = receiver_count_pmf(45.0, AmplifierModel.urn(m))
        ref = binom.pmf(np.arange(17), 16, 0.5)
        np.testing.assert_allclose(dist.marginal("D_r"), ref, atol=1e-12)

    def test_kinds(self):
        assert AmplifierModel.paper(2).kind is AmplifierKind.PAPER
        with pytest.raises(ValueError):
            AmplifierModel.paper(-1)
        with pytest.raises(ValueError):
            AmplifierModel.covariant(m=1, gain=2)
