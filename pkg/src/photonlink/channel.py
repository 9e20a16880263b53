"""
End-to-end Monte Carlo of the link and the statistics computed from it.

Each trial runs source -> encoder -> collapse -> amplifier -> receiver
counting (0-degree prism) -> threshold decoder. Trial ``i`` draws only from the
counter-based streams keyed by ``(master_seed, i)``, so a run is reproducible
bit for bit whatever the number of workers. Aggregates are integer tallies,
merged in trial order.
"""

from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.stats import binomtest

from .devices import (
    AmplifierKind,
    AmplifierModel,
    EncoderSetting,
    NonCoincidenceEvent,
    PhotonCounts,
    amplify,
    decode,
    default_threshold,
    detect_counts,
    encode,
    polarization_angle,
    receiver_count_pmf,
)
from .errors import SimulationError
from .fock import CountDistribution
from .states import (
    BELL,
    SENDER,
    SPDC_UNENTANGLED,
    EventClass,
    PolarizationBasis,
    condition_on_coincidence,
    event_probabilities,
    outcome_branches,
    source_pair,
)
from .streams import LANE_PHYSICS, LANE_SENT_BIT, check_seed, trial_stream

POLICY_RANDOM_BIT = "random_bit"
POLICY_DROP = "drop_trial"
POLICIES = (POLICY_RANDOM_BIT, POLICY_DROP)
SOURCES = (BELL, SPDC_UNENTANGLED)
RECEIVER_BASIS = PolarizationBasis(0.0)


class DegenerateMatrix(SimulationError):
    """A confusion-matrix row has no counts."""


class NonStochasticRows(SimulationError):
    """Transition-matrix rows are not probability vectors."""


@dataclass(frozen=True)
class RunConfig:
    source: str = BELL
    amplifier: AmplifierModel = field(default_factory=lambda: AmplifierModel.paper(100))
    trials: int = 10_000
    master_seed: int = 0
    threshold: int | None = None
    non_coincidence_policy: str = POLICY_RANDOM_BIT

    def __post_init__(self):
        if self.source not in SOURCES:
            raise ValueError(f"source must be one of {SOURCES}, got {self.source!r}")
        if self.non_coincidence_policy not in POLICIES:
            raise ValueError(f"policy must be one of {POLICIES}, got {self.non_coincidence_policy!r}")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        if self.threshold is not None and self.threshold < 1:
            raise ValueError("threshold must be >= 1")
        check_seed(self.master_seed)

    @property
    def resolved_threshold(self) -> int:
        return self.threshold if self.threshold is not None else default_threshold(self.amplifier.m)

    def to_dict(self) -> dict:
        amp = self.amplifier
        return {
            "source": self.source,
            "amplifier": amp.kind.value,
            "m": amp.m,
            "gain": amp.gain,
            "truncation": amp.n_max,
            "leakage_tol": amp.leakage_tol if amp.kind == AmplifierKind.COVARIANT else None,
            "trials": self.trials,
            "seed": self.master_seed,
            "threshold": self.resolved_threshold,
            "policy": self.non_coincidence_policy,
        }


@dataclass(frozen=True)
class TrialRecord:
    trial_index: int
    sent_bit: int
    event_class: EventClass
    counts: PhotonCounts | None
    readout_bit: int | None
    policy_applied: bool = False

    @property
    def dropped(self) -> bool:
        return self.readout_bit is None


def sent_bit_for(master_seed: int, trial_index: int) -> int:
    return int(trial_stream(master_seed, trial_index, LANE_SENT_BIT).integers(2))


def run_trial(config: RunConfig, sent_bit: int, trial_index: int) -> TrialRecord:
    rng = trial_stream(config.master_seed, trial_index, LANE_PHYSICS)
    pair = source_pair(config.source)
    result = encode(EncoderSetting(sent_bit), pair, rng)
    if isinstance(result, NonCoincidenceEvent):
        if config.non_coincidence_policy == POLICY_RANDOM_BIT:
            guess = int(rng.integers(2))
        else:
            guess = None
        return TrialRecord(trial_index, sent_bit, result.event_class, None, guess, policy_applied=True)
    angle = polarization_angle(result.collapsed_remote)
    beam = amplify(angle, config.amplifier, rng)
    counts = detect_counts(beam, RECEIVER_BASIS, rng)
    readout = decode(counts, config.resolved_threshold)
    return TrialRecord(trial_index, sent_bit, EventClass.COINCIDENCE, counts, readout)


@dataclass
class _Tally:
    confusion: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))
    coincidence: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))
    non_coincidence: np.ndarray = field(default_factory=lambda: np.zeros((2, 2), dtype=np.int64))
    dropped: int = 0
    # per sent bit: [n, sum delta, sum delta^2, sum |delta|], integer-exact
    delta: np.ndarray = field(default_factory=lambda: np.zeros((2, 4), dtype=object))

    def add(self, rec: TrialRecord) -> None:
        if rec.dropped:
            self.dropped += 1
            return
        self.confusion[rec.sent_bit, rec.readout_bit] += 1
        if rec.event_class == EventClass.COINCIDENCE:
            self.coincidence[rec.sent_bit, rec.readout_bit] += 1
            d = rec.counts.delta
            self.delta[rec.sent_bit] += np.array([1, d, d * d, abs(d)], dtype=object)
        else:
            self.non_coincidence[rec.sent_bit, rec.readout_bit] += 1

    def merge(self, other: "_Tally") -> None:
        self.confusion += other.confusion
        self.coincidence += other.coincidence
        self.non_coincidence += other.non_coincidence
        self.dropped += other.dropped
        self.delta = self.delta + other.delta


def _run_block(config: RunConfig, start: int, stop: int, keep_records: bool):
    tally = _Tally()
    records = [] if keep_records else None
    for i in range(start, stop):
        rec = run_trial(config, sent_bit_for(config.master_seed, i), i)
        tally.add(rec)
        if keep_records:
            records.append(rec)
    return tally, records


def run_trials(config: RunConfig, jobs: int = 1, keep_records: bool = False):
    """Run every trial of ``config``; returns (tally, records-or-None) in trial order."""
    if jobs < 1:
        raise ValueError("jobs must be >= 1")
    if jobs == 1:
        return _run_block(config, 0, config.trials, keep_records)
    n_blocks = min(config.trials, jobs * 4)
    edges = np.linspace(0, config.trials, n_blocks + 1).astype(int)
    tally = _Tally()
    records = [] if keep_records else None
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [
            pool.submit(_run_block, config, int(a), int(b), keep_records)
            for a, b in zip(edges[:-1], edges[1:])
            if b > a
        ]
        for fut in futures:  # submission order == trial order
            part, recs = fut.result()
            tally.merge(part)
            if keep_records:
                records.extend(recs)
    return tally, records


def binary_entropy(p: float) -> float:
    if p <= 0 or p >= 1:
        return 0.0
    return -p * math.log2(p) - (1 - p) * math.log2(1 - p)


def _entropy_bits(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log2(p)).sum())


def mutual_information(confusion: np.ndarray, prior: Sequence[float] | None = None) -> float:
    """I(X;Y) in bits of the channel given by the row-normalized ``confusion``.

    ``prior`` defaults to the empirical row frequencies.
    """
    counts = np.asarray(confusion, dtype=float)
    rows = counts.sum(axis=1)
    if np.any(rows <= 0):
        raise DegenerateMatrix("every input symbol needs at least one count")
    transition = counts / rows[:, None]
    px = rows / rows.sum() if prior is None else np.asarray(prior, dtype=float)
    joint = px[:, None] * transition
    return max(0.0, _entropy_bits(joint.sum(axis=0)) + _entropy_bits(px) - _entropy_bits(joint.ravel()))


def miller_madow_mutual_information(confusion: np.ndarray) -> float:
    """Plug-in MI from joint counts with the Miller-Madow correction on each entropy term.

    Bias of the corrected estimator is O(1/N^2); under independence its
    sampling spread is about chi2_1 / (2 N ln 2) bits.
    """
    counts = np.asarray(confusion, dtype=float)
    n = counts.sum()
    if n <= 0:
        raise DegenerateMatrix("empty confusion matrix")

    def h_mm(c):
        c = c[c > 0]
        return _entropy_bits(c / n) + (c.size - 1) / (2 * n * math.log(2))

    return h_mm(counts.sum(axis=1)) + h_mm(counts.sum(axis=0)) - h_mm(counts.ravel())


def capacity_blahut_arimoto(
    transition: np.ndarray, tol: float = 1e-12, max_iter: int = 100_000
) -> tuple[float, np.ndarray]:
    """Capacity (bits/use) and optimal input distribution of a discrete memoryless channel.

    Stops when the standard upper bound max_x D(W_x || q) and the lower bound
    I(p) are within ``tol``.
    """
    if tol <= 0:
        raise ValueError("tol must be > 0")
    w = np.asarray(transition, dtype=float)
    if w.ndim != 2 or np.any(w < 0) or not np.allclose(w.sum(axis=1), 1.0, atol=1e-9, rtol=0):
        raise NonStochasticRows("rows of the transition matrix must be probability vectors")
    w = w[:, w.sum(axis=0) > 0]
    p = np.full(w.shape[0], 1.0 / w.shape[0])
    log_w = np.log2(np.where(w > 0, w, 1.0))
    for _ in range(max_iter):
        q = p @ w
        log_q = np.log2(np.where(q > 0, q, 1.0))
        div = (w * (log_w - log_q)).sum(axis=1)
        lower = float(p @ div)
        upper = float(div.max())
        if upper - lower < tol:
            break
        p = p * np.exp2(div - upper)
        p /= p.sum()
    return max(0.0, lower), p


def snr_formula(m: float) -> float:
    """Signature separation (m + 1) over the fluctuation scale sqrt(3m + 1)."""
    return (m + 1) / math.sqrt(3 * m + 1)


def wilson_interval(errors: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return (0.0, 1.0)
    ci = binomtest(int(errors), int(n)).proportion_ci(confidence_level=confidence, method="wilson")
    return (float(ci.low), float(ci.high))


def _ber(confusion: np.ndarray) -> float:
    n = confusion.sum()
    return float(confusion[0, 1] + confusion[1, 0]) / n if n else float("nan")


@dataclass(frozen=True, eq=False)
class ChannelEstimate:
    confusion: np.ndarray
    trials: int
    retained: int
    ber: float
    ber_ci: tuple[float, float]
    mutual_information: float
    mutual_information_plugin: float
    capacity: float
    capacity_prior: tuple[float, float]
    snr: float
    snr_empirical: float
    coincidence_confusion: np.ndarray
    non_coincidence_confusion: np.ndarray
    delta_stats: dict

    @property
    def coincidence_ber(self) -> float:
        return _ber(self.coincidence_confusion)

    @property
    def non_coincidence_ber(self) -> float:
        return _ber(self.non_coincidence_confusion)

    def to_dict(self) -> dict:
        """JSON-ready summary; undefined values (NaN) become None."""
        return _nan_to_none({
            "ber": self.ber,
            "ci_low": self.ber_ci[0],
            "ci_high": self.ber_ci[1],
            "mi": self.mutual_information,
            "mi_plugin": self.mutual_information_plugin,
            "capacity": self.capacity,
            "capacity_prior": list(self.capacity_prior),
            "snr": self.snr,
            "snr_empirical": self.snr_empirical,
            "confusion": self.confusion.tolist(),
            "trials": self.trials,
            "retained": self.retained,
            "coincidence_confusion": self.coincidence_confusion.tolist(),
            "coincidence_ber": self.coincidence_ber,
            "non_coincidence_confusion": self.non_coincidence_confusion.tolist(),
            "non_coincidence_ber": self.non_coincidence_ber,
            "delta_stats": self.delta_stats,
        })


def _nan_to_none(obj):
    if isinstance(obj, float) and math.isnan(obj):
        return None
    if isinstance(obj, dict):
        return {k: _nan_to_none(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_nan_to_none(v) for v in obj]
    return obj


def _delta_stats(delta: np.ndarray) -> dict:
    out = {}
    for bit in (0, 1):
        n, s, s2, sa = (int(v) for v in delta[bit])
        if n == 0:
            out[str(bit)] = {"count": 0, "mean": None, "var": None, "mean_abs": None}
            continue
        mean = s / n
        var = (s2 - s * s / n) / (n - 1) if n > 1 else 0.0
        out[str(bit)] = {"count": n, "mean": mean, "var": var, "mean_abs": sa / n}
    return out


def summarize(config: RunConfig, tally: _Tally) -> ChannelEstimate:
    conf = tally.confusion.copy()
    retained = int(conf.sum())
    errors = int(conf[0, 1] + conf[1, 0])
    rows_ok = retained > 0 and np.all(conf.sum(axis=1) > 0)
    if rows_ok:
        mi_mm = max(0.0, miller_madow_mutual_information(conf))
        mi_plugin = mutual_information(conf)
        cap, prior = capacity_blahut_arimoto(conf / conf.sum(axis=1, keepdims=True))
        prior = (float(prior[0]), float(prior[1]))
    else:
        mi_mm = mi_plugin = cap = float("nan")
        prior = (float("nan"), float("nan"))
    stats = _delta_stats(tally.delta)
    s0, s1 = stats["0"], stats["1"]
    if s0["count"] and s1["count"] and s1["var"]:
        snr_emp = s0["mean_abs"] / math.sqrt(s1["var"])
    else:
        snr_emp = float("nan")
    return ChannelEstimate(
        confusion=conf,
        trials=config.trials,
        retained=retained,
        ber=errors / retained if retained else float("nan"),
        ber_ci=wilson_interval(errors, retained),
        mutual_information=mi_mm,
        mutual_information_plugin=mi_plugin,
        capacity=cap,
        capacity_prior=prior,
        snr=snr_formula(config.amplifier.m),
        snr_empirical=snr_emp,
        coincidence_confusion=tally.coincidence.copy(),
        non_coincidence_confusion=tally.non_coincidence.copy(),
        delta_stats=stats,
    )


def estimate_channel(config: RunConfig, jobs: int = 1, return_records: bool = False):
    """Monte Carlo channel estimate with uniform random sent bits (>= 1e4 trials advised).

    Returns the :class:`ChannelEstimate`, or ``(estimate, records)`` when
    ``return_records`` is set.
    """
    tally, records = run_trials(config, jobs=jobs, keep_records=return_records)
    est = summarize(config, tally)
    return (est, records) if return_records else est


def _decode_error_probability(dist: CountDistribution, sent_bit: int, threshold: int) -> float:
    grid = dist.grid
    n_r, n_rp = np.indices(grid.shape)
    reads_zero = np.abs(n_r - n_rp) >= threshold
    p_zero = float(grid[reads_zero].sum())
    return 1.0 - p_zero if sent_bit == 0 else p_zero


def exact_ber(config: RunConfig) -> float:
    """BER from exact count pmfs (no sampling), uniform sent bits."""
    pair = source_pair(config.source)
    coincident = condition_on_coincidence(pair)
    t = config.resolved_threshold
    per_bit = []
    for bit in (0, 1):
        err = 0.0
        for branch in outcome_branches(coincident, SENDER, EncoderSetting(bit).basis):
            if branch.probability == 0:
                continue
            dist = receiver_count_pmf(polarization_angle(branch.collapsed_remote), config.amplifier)
            err += branch.probability * _decode_error_probability(dist, bit, t)
        per_bit.append(err)
    ber_coinc = 0.5 * (per_bit[0] + per_bit[1])
    if config.source == BELL or config.non_coincidence_policy == POLICY_DROP:
        return ber_coinc
    p_c = event_probabilities(pair)[EventClass.COINCIDENCE]
    return p_c * ber_coinc + (1 - p_c) * 0.5


def with_m(model: AmplifierModel, m: int) -> AmplifierModel:
    if model.kind == AmplifierKind.PAPER:
        return AmplifierModel.paper(m)
    if model.kind == AmplifierKind.URN:
        return AmplifierModel.urn(m)
    return AmplifierModel.covariant(m, leakage_tol=model.leakage_tol)


@dataclass(frozen=True)
class SweepResult:
    rows: list
    slope: float
    intercept: float


def sweep_m(config: RunConfig, m_values: Sequence[int], jobs: int = 1) -> SweepResult:
    """Per m: Monte Carlo BER with Wilson interval, exact BER and SNR; log-log SNR slope."""
    if len(m_values) < 2:
        raise ValueError("sweep needs at least two m values")
    rows = []
    for m in m_values:
        cfg = replace(config, amplifier=with_m(config.amplifier, m), threshold=None)
        est = estimate_channel(cfg, jobs=jobs)
        rows.append(
            {
                "m": m,
                "ber": est.ber,
                "ci_low": est.ber_ci[0],
                "ci_high": est.ber_ci[1],
                "ber_exact": exact_ber(cfg),
                "snr": snr_formula(m),
                "snr_empirical": est.snr_empirical,
            }
        )
    slope, intercept = snr_loglog_fit([r["m"] for r in rows])
    return SweepResult(rows, slope, intercept)


def snr_loglog_fit(m_values: Sequence[float]) -> tuple[float, float]:
    """Least-squares slope and intercept of log SNR against log m (m = 0 excluded)."""
    ms = np.array([m for m in m_values if m > 0], dtype=float)
    if ms.size < 2:
        return float("nan"), float("nan")
    snr = np.array([snr_formula(m) for m in ms])
    slope, intercept = np.polyfit(np.log(ms), np.log(snr), 1)
    return float(slope), float(intercept)


@dataclass(frozen=True, eq=False)
class NoSignalingReport:
    tv_distance: float
    mi_upper: float
    js_divergence: float
    setting0_pmf: CountDistribution
    setting1_pmf: CountDistribution


def receiver_marginal(
    amplifier: AmplifierModel,
    sender_basis: PolarizationBasis,
    source: str = BELL,
    receiver_basis: PolarizationBasis = RECEIVER_BASIS,
) -> CountDistribution:
    """Receiver count pmf averaged over the sender's unobserved outcome."""
    pair = condition_on_coincidence(source_pair(source))
    branches = [b for b in outcome_branches(pair, SENDER, sender_basis) if b.probability > 0]
    # the branch weights sum to one exactly; renormalizing removes the rounding of |1/sqrt2|^2
    total = sum(b.probability for b in branches)
    grid = None
    leakage = 0.0
    for branch in branches:
        dist = receiver_count_pmf(polarization_angle(branch.collapsed_remote), amplifier, receiver_basis)
        part = (branch.probability / total) * dist.grid
        grid = part if grid is None else grid + part
        leakage = max(leakage, dist.leakage)
    return CountDistribution(dist.modes, grid, leakage=leakage, basis=receiver_basis.theta)


def no_signaling_test(
    amplifier: AmplifierModel,
    source: str = BELL,
    basis_pair: tuple[float, float] = (0.0, 45.0),
) -> NoSignalingReport:
    """Can the receiver alone tell the sender's setting? TV distance and MI bounds.

    ``mi_upper`` is the capacity of the setting -> receiver-counts channel, the
    most any single-shot decoder could extract; ``js_divergence`` is the MI for
    equiprobable settings.
    """
    p0 = receiver_marginal(amplifier, PolarizationBasis(basis_pair[0]), source)
    p1 = receiver_marginal(amplifier, PolarizationBasis(basis_pair[1]), source)
    tv = p0.total_variation(p1)
    rows = np.vstack([p0.probabilities, p1.probabilities])
    rows = rows / rows.sum(axis=1, keepdims=True)
    cap, _ = capacity_blahut_arimoto(rows, tol=1e-12)
    mix = rows.mean(axis=0)
    js = _entropy_bits(mix) - 0.5 * (_entropy_bits(rows[0]) + _entropy_bits(rows[1]))
    return NoSignalingReport(tv, cap, max(0.0, js), p0, p1)
