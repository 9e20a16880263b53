import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import binom

from photonlink.channel import (
    POLICY_DROP,
    POLICY_RANDOM_BIT,
    DegenerateMatrix,
    NonStochasticRows,
    RunConfig,
    binary_entropy,
    capacity_blahut_arimoto,
    estimate_channel,
    exact_ber,
    miller_madow_mutual_information,
    mutual_information,
    no_signaling_test,
    run_trial,
    run_trials,
    snr_formula,
    snr_loglog_fit,
    sweep_m,
    wilson_interval,
)
from photonlink.devices import AmplifierModel
from photonlink.states import SPDC_UNENTANGLED, EventClass
from photonlink.streams import LANE_AUX, LANE_PHYSICS, LANE_SENT_BIT, trial_stream


def binomial_tail_ber(m):
    # sent "1": all 3m+1 photons split 50/50, Delta = 2X - (3m+1), X ~ Binom(3m+1, 1/2);
    # misread as "0" when |Delta| >= ceil((m+1)/2)
    n = 3 * m + 1
    t = math.ceil((m + 1) / 2)
    x = np.arange(n + 1)
    p_err_one = binom.pmf(x, n, 0.5)[np.abs(2 * x - n) >= t].sum()
    return 0.5 * p_err_one


class TestStreams:
    def test_same_key_same_draws(self):
        a = trial_stream(7, 123).random(4)
        b = trial_stream(7, 123).random(4)
        np.testing.assert_array_equal(a, b)

    @pytest.mark.parametrize("other", [(8, 123, LANE_PHYSICS), (7, 124, LANE_PHYSICS), (7, 123, LANE_SENT_BIT)])
    def test_streams_differ(self, other):
        assert trial_stream(7, 123, LANE_PHYSICS).random() != trial_stream(*other).random()

    def test_large_trial_index(self):
        assert 0 <= trial_stream(0, 2**70, LANE_AUX).random() < 1

    @pytest.mark.parametrize("seed", [-1, 2**64])
    def test_seed_range(self, seed):
        with pytest.raises(ValueError):
            trial_stream(seed, 0)


class TestInformation:
    def test_identity_one_bit(self):
        assert mutual_information(np.eye(2), [0.5, 0.5]) == pytest.approx(1.0, abs=1e-12)

    def test_uniform_zero(self):
        assert mutual_information(np.ones((2, 2)), [0.5, 0.5]) == pytest.approx(0.0, abs=1e-12)

    def test_bsc_quarter(self):
        conf = np.array([[3, 1], [1, 3]])
        expected = 1 - binary_entropy(0.25)
        assert expected == pytest.approx(0.1887, abs=1e-4)
        assert mutual_information(conf, [0.5, 0.5]) == pytest.approx(expected, abs=1e-12)

    def test_degenerate_row(self):
        with pytest.raises(DegenerateMatrix):
            mutual_information(np.array([[0, 0], [1, 2]]))

    def test_capacity_identity(self):
        cap, prior = capacity_blahut_arimoto(np.eye(2), tol=1e-12)
        assert cap == pytest.approx(1.0, abs=1e-10)
        np.testing.assert_allclose(prior, [0.5, 0.5], atol=1e-9)

    def test_capacity_identical_rows(self):
        cap, _ = capacity_blahut_arimoto(np.array([[0.3, 0.7], [0.3, 0.7]]), tol=1e-12)
        assert cap == pytest.approx(0.0, abs=1e-12)

    def test_capacity_bsc(self):
        cap, _ = capacity_blahut_arimoto(np.array([[0.89, 0.11], [0.11, 0.89]]), tol=1e-12)
        assert cap == pytest.approx(1 - binary_entropy(0.11), abs=1e-10)
        assert cap == pytest.approx(0.50008, abs=1e-5)

    def test_capacity_z_channel(self):
        # Z-channel with crossover 1/2: closed form log2(1 + (1-e) e^(e/(1-e))) = log2(5/4)
        cap, prior = capacity_blahut_arimoto(np.array([[1.0, 0.0], [0.5, 0.5]]), tol=1e-13)
        assert cap == pytest.approx(math.log2(1.25), abs=1e-10)
        assert prior[1] == pytest.approx(0.4, abs=1e-6)

    @pytest.mark.parametrize(
        "bad", [np.array([[0.5, 0.6], [0.5, 0.5]]), np.array([[-0.1, 1.1], [0.5, 0.5]])]
    )
    def test_non_stochastic(self, bad):
        with pytest.raises(NonStochasticRows):
            capacity_blahut_arimoto(bad)

    def test_bad_tol(self):
        with pytest.raises(ValueError):
            capacity_blahut_arimoto(np.eye(2), tol=0)

    @settings(max_examples=80, deadline=None)
    @given(st.lists(st.integers(1, 500), min_size=4, max_size=4))
    def test_mi_below_capacity(self, cells):
        conf = np.array(cells).reshape(2, 2)
        cap, _ = capacity_blahut_arimoto(conf / conf.sum(axis=1, keepdims=True))
        assert mutual_information(conf) <= cap + 1e-9

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.integers(1, 10_000), min_size=4, max_size=4))
    def test_miller_madow_correction_sign(self, cells):
        conf = np.array(cells).reshape(2, 2)
        # 2x2: the correction is (1 + 1 - k_xy + ...) / 2N, never positive when all cells are filled
        assert miller_madow_mutual_information(conf) <= mutual_information(conf) + 1e-12

    def test_miller_madow_near_zero_for_independent_counts(self):
        rng = np.random.default_rng(11)
        x = rng.integers(2, size=100_000)
        y = rng.integers(2, size=100_000)
        conf = np.zeros((2, 2), dtype=int)
        np.add.at(conf, (x, y), 1)
        assert abs(miller_madow_mutual_information(conf)) < 1e-3

    def test_wilson_matches_closed_form(self):
        k, n, z = 17, 1000, 1.959963984540054
        p = k / n
        centre = (p + z * z / (2 * n)) / (1 + z * z / n)
        half = z * math.sqrt(p * (1 - p) / n + z * z / (4 * n * n)) / (1 + z * z / n)
        lo, hi = wilson_interval(k, n)
        assert lo == pytest.approx(centre - half, abs=1e-9)
        assert hi == pytest.approx(centre + half, abs=1e-9)


class TestRunTrial:
    def test_deterministic(self):
        cfg = RunConfig(trials=1, master_seed=3)
        assert run_trial(cfg, 1, 17) == run_trial(cfg, 1, 17)

    def test_bell_bit_zero_always_read(self):
        cfg = RunConfig(amplifier=AmplifierModel.paper(10))
        for i in range(300):
            rec = run_trial(cfg, 0, i)
            assert rec.readout_bit == 0
            assert abs(rec.counts.delta) == 11

    def test_random_bit_policy_uniform(self):
        cfg = RunConfig(source=SPDC_UNENTANGLED, amplifier=AmplifierModel.paper(4))
        guesses = [
            r.readout_bit
            for r in (run_trial(cfg, 1, i) for i in range(4000))
            if r.event_class != EventClass.COINCIDENCE
        ]
        n = len(guesses)
        assert n == pytest.approx(2000, abs=4 * math.sqrt(1000))
        assert sum(guesses) / n == pytest.approx(0.5, abs=4 * 0.5 / math.sqrt(n))

    def test_drop_policy_marks_dropped(self):
        cfg = RunConfig(source=SPDC_UNENTANGLED, non_coincidence_policy=POLICY_DROP)
        recs = [run_trial(cfg, 0, i) for i in range(200)]
        for r in recs:
            assert r.dropped == (r.event_class != EventClass.COINCIDENCE)
            assert (r.counts is None) == r.dropped

    @pytest.mark.parametrize("kwargs", [{"source": "ghz"}, {"trials": 0}, {"threshold": 0}, {"non_coincidence_policy": "x"}])
    def test_config_validation(self, kwargs):
        with pytest.raises(ValueError):
            RunConfig(**kwargs)


class TestEstimate:
    def test_jobs_do_not_change_result(self):
        cfg = RunConfig(amplifier=AmplifierModel.paper(20), trials=3000, master_seed=5)
        t1, r1 = run_trials(cfg, jobs=1, keep_records=True)
        t3, r3 = run_trials(cfg, jobs=3, keep_records=True)
        assert r1 == r3
        np.testing.assert_array_equal(t1.confusion, t3.confusion)
        assert estimate_channel(cfg).to_dict() == estimate_channel(cfg, jobs=3).to_dict()

    def test_noiseless_channel_one_bit(self):
        cfg = RunConfig(amplifier=AmplifierModel.paper(2000), trials=2000, master_seed=1)
        est = estimate_channel(cfg)
        assert est.ber == 0
        assert est.mutual_information == pytest.approx(1.0, abs=2e-3)
        assert est.capacity == pytest.approx(1.0, abs=1e-9)

    def test_policy_irrelevant_for_bell(self):
        base = RunConfig(amplifier=AmplifierModel.paper(10), trials=2000, master_seed=9)
        a = estimate_channel(base).to_dict()
        b = estimate_channel(replace(base, non_coincidence_policy=POLICY_DROP)).to_dict()
        assert a == b

    def test_bell_deterministic_ber_against_binomial(self):
        cfg = RunConfig(amplifier=AmplifierModel.paper(100), trials=20_000, master_seed=42)
        expected = binomial_tail_ber(100)
        assert exact_ber(cfg) == pytest.approx(expected, rel=1e-12)
        est = estimate_channel(cfg)
        sigma = math.sqrt(expected * (1 - expected) / cfg.trials)
        assert abs(est.ber - expected) < 4 * sigma
        assert est.ber_ci[0] <= est.ber <= est.ber_ci[1]

    def test_delta_stats_bit_zero(self):
        cfg = RunConfig(amplifier=AmplifierModel.paper(7), trials=1000, master_seed=2)
        stats = estimate_channel(cfg).delta_stats["0"]
        n, mean = stats["count"], stats["mean"]
        assert stats["mean_abs"] == 8
        # delta is exactly +-8, so the sample variance is pinned by the sample mean
        assert stats["var"] == pytest.approx(n / (n - 1) * (64 - mean**2), rel=1e-12)

    def test_spdc_drop_policy_counts_coincidences_only(self):
        cfg = RunConfig(source=SPDC_UNENTANGLED, trials=2000, master_seed=4, non_coincidence_policy=POLICY_DROP)
        est = estimate_channel(cfg)
        assert est.non_coincidence_confusion.sum() == 0
        assert est.retained == est.coincidence_confusion.sum()
        assert est.retained == pytest.approx(1000, abs=4 * math.sqrt(500))

    def test_spdc_exact_ber_composition(self):
        cfg = RunConfig(source=SPDC_UNENTANGLED, amplifier=AmplifierModel.paper(100), non_coincidence_policy=POLICY_RANDOM_BIT)
        assert exact_ber(cfg) == pytest.approx(0.5 * binomial_tail_ber(100) + 0.25, rel=1e-12)
        dropped = replace(cfg, non_coincidence_policy=POLICY_DROP)
        assert exact_ber(dropped) == pytest.approx(binomial_tail_ber(100), rel=1e-12)

    def test_urn_exact_matches_monte_carlo(self):
        cfg = RunConfig(amplifier=AmplifierModel.urn(6), trials=4000, master_seed=8)
        p = exact_ber(cfg)
        est = estimate_channel(cfg)
        assert abs(est.ber - p) < 4 * math.sqrt(p * (1 - p) / cfg.trials)


class TestSweep:
    def test_snr_at_zero(self):
        assert snr_formula(0) == 1.0

    def test_slope(self):
        slope, _ = snr_loglog_fit([16, 64, 256, 1024])
        assert slope == pytest.approx(0.5, abs=0.05)

    def test_needs_two_values(self):
        with pytest.raises(ValueError):
            sweep_m(RunConfig(trials=10), [4])

    def test_rows_and_monotone_exact_ber(self):
        res = sweep_m(RunConfig(trials=500, master_seed=3), [4, 16, 64])
        assert [r["m"] for r in res.rows] == [4, 16, 64]
        bers = [r["ber_exact"] for r in res.rows]
        assert bers[0] > bers[1] > bers[2]
        for r in res.rows:
            assert r["ber_exact"] == pytest.approx(binomial_tail_ber(r["m"]), rel=1e-12)


class TestNoSignaling:
    def test_deterministic_model_signals(self):
        rep = no_signaling_test(AmplifierModel.paper(25))
        assert rep.tv_distance >= 0.9
        assert 0 < rep.js_divergence <= rep.mi_upper + 1e-12 <= 1 + 1e-12

    def test_deterministic_model_no_gain(self):
        rep = no_signaling_test(AmplifierModel.paper(0))
        assert rep.tv_distance == pytest.approx(0.0, abs=1e-15)

    @pytest.mark.parametrize("m", [1, 3, 10])
    def test_covariant_does_not_signal(self, m):
        rep = no_signaling_test(AmplifierModel.covariant(m))
        assert rep.tv_distance <= 1e-9
        assert rep.mi_upper <= 1e-9

    def test_covariant_arbitrary_bases(self):
        rep = no_signaling_test(AmplifierModel.covariant(2), basis_pair=(10.0, 77.0))
        assert rep.tv_distance <= 1e-9

    def test_setting_marginals_are_pmfs(self):
        rep = no_signaling_test(AmplifierModel.urn(5))
        for pmf in (rep.setting0_pmf, rep.setting1_pmf):
            assert pmf.probabilities.sum() == pytest.approx(1.0, abs=1e-12)
