"""
Protocol hardware: encoder, amplifier models, receiver detectors and decoder.

Amplifier models
----------------
paper_deterministic
    An incident photon always leaves as ``2m+1`` photons at its own
    polarization and ``m`` at the perpendicular one.
emission_urn
    ``3m`` photons are added one at a time; each joins the parallel class with
    probability ``(n_par + 1) / (n_par + n_perp + 2)``. Same mean as the
    deterministic model, with fluctuations.
covariant_squeezer
    Each polarization mode is two-mode squeezed against its own vacuum idler
    with equal gain ``G``; idlers are traced out. ``G = m + 1`` reproduces the
    mean composition ``(2m+1, m)``. This amplifier acts identically in every
    polarization basis.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction
from functools import lru_cache
from typing import Union

import numpy as np
from scipy.stats import binom

from .fock import (
    DEFAULT_LEAKAGE_TOL,
    CountDistribution,
    LeakageExceeded,
    ModeLayout,
    count_distribution,
    rotate_polarization,
    two_mode_squeeze,
)
from .states import (
    SENDER,
    SPDC_UNENTANGLED,
    EventClass,
    MeasurementOutcome,
    PairState,
    PolarizationBasis,
    condition_on_coincidence,
    event_class_sample,
    measure_polarization,
)

COUNT_MODES = ("D_r", "D_r'")
MIN_COVARIANT_TRUNCATION = 16
# (n_max + 1)**4 amplitudes; beyond this the rotated-basis route is refused
MAX_DENSE_DIM = 3_000_000


class AmplifierKind(str, Enum):
    PAPER = "paper_deterministic"
    URN = "emission_urn"
    COVARIANT = "covariant_squeezer"


@dataclass(frozen=True)
class EncoderSetting:
    """Mirror position: bit 0 routes to the 0-degree prism, bit 1 to the 45-degree one."""

    bit: int

    def __post_init__(self):
        if self.bit not in (0, 1):
            raise ValueError(f"bit must be 0 or 1, got {self.bit!r}")

    @property
    def basis(self) -> PolarizationBasis:
        return PolarizationBasis(45.0 if self.bit else 0.0)


@dataclass(frozen=True)
class NonCoincidenceEvent:
    event_class: EventClass


@dataclass(frozen=True)
class AmplifierModel:
    kind: AmplifierKind
    m: float
    gain: float | None = None
    n_max: int | None = None
    leakage_tol: float = DEFAULT_LEAKAGE_TOL

    def __post_init__(self):
        object.__setattr__(self, "kind", AmplifierKind(self.kind))
        if self.kind in (AmplifierKind.PAPER, AmplifierKind.URN):
            if int(self.m) != self.m or self.m < 0:
                raise ValueError(f"m must be a non-negative integer, got {self.m}")
            object.__setattr__(self, "m", int(self.m))
        else:
            if self.gain is None or self.gain < 1:
                raise ValueError(f"covariant gain must be >= 1, got {self.gain}")
            if self.n_max is None or self.n_max < 1:
                raise ValueError("covariant model needs a truncation n_max")

    @classmethod
    def paper(cls, m: int) -> "AmplifierModel":
        return cls(AmplifierKind.PAPER, m)

    @classmethod
    def urn(cls, m: int) -> "AmplifierModel":
        return cls(AmplifierKind.URN, m)

    @classmethod
    def covariant(
        cls,
        m: float | None = None,
        *,
        gain: float | None = None,
        n_max: int | None = None,
        leakage_tol: float = DEFAULT_LEAKAGE_TOL,
        min_truncation: int = MIN_COVARIANT_TRUNCATION,
    ) -> "AmplifierModel":
        """Equal-gain squeezer; ``gain = m + 1`` when built from ``m``.

        Without ``n_max`` the smallest truncation >= ``min_truncation`` whose
        analytic leakage is below half of ``leakage_tol`` is chosen.
        """
        if (m is None) == (gain is None):
            raise ValueError("give exactly one of m or gain")
        if gain is None:
            if m < 0:
                raise ValueError(f"m must be >= 0, got {m}")
            gain = m + 1.0
        else:
            m = gain - 1.0
        if n_max is None:
            n_max = truncation_for_gain(gain, leakage_tol / 2, floor=min_truncation)
        if int(m) == m:
            m = int(m)
        return cls(AmplifierKind.COVARIANT, m, float(gain), int(n_max), leakage_tol)

    @property
    def photons_out(self) -> int | None:
        return 3 * self.m + 1 if self.kind != AmplifierKind.COVARIANT else None


@dataclass(frozen=True)
class Beam:
    """Discrete amplified-beam description: ``(angle_deg, photon_count)`` pairs."""

    components: tuple[tuple[float, int], ...]

    @property
    def total(self) -> int:
        return sum(n for _, n in self.components)

    def count_at(self, angle: float) -> int:
        return sum(n for a, n in self.components if math.isclose(a % 180.0, angle % 180.0, abs_tol=1e-9))


@dataclass(frozen=True)
class PhotonCounts:
    n_r: int
    n_r_prime: int

    @property
    def delta(self) -> int:
        return self.n_r - self.n_r_prime

    @property
    def total(self) -> int:
        return self.n_r + self.n_r_prime


def truncation_for_gain(gain: float, tol: float, floor: int = MIN_COVARIANT_TRUNCATION) -> int:
    """Smallest cap >= ``floor`` keeping single-photon-seeded amplification leakage below ``tol``.

    The seeded mode has P(n > N) = lam^N (N (1 - lam) + 1) and the unseeded
    one P(n > N) = lam^(N+1), with lam = (G - 1) / G.
    """
    lam = (gain - 1.0) / gain
    n = max(int(floor), 1)
    while True:
        seeded = lam**n * (n * (1 - lam) + 1)
        vacuum = lam ** (n + 1)
        if 1 - (1 - seeded) * (1 - vacuum) < tol:
            return n
        n += 1


_EXACT_COS2 = {0: 1.0, 1: 0.0, 2: -1.0, 3: 0.0}


def malus(delta_deg: float) -> float:
    """cos^2 of the angle between photon and analyzer.

    Written as (1 + cos 2d) / 2 with cos 2d taken exactly when 2d is a multiple
    of 90 degrees, so the 0, 1/2 and 1 cases carry no rounding error.
    """
    quarter_turns = (2.0 * delta_deg) / 90.0
    k = round(quarter_turns)
    if abs(quarter_turns - k) < 1e-13:
        return (1.0 + _EXACT_COS2[k % 4]) / 2.0
    p = (1.0 + math.cos(math.radians(2.0 * delta_deg))) / 2.0
    return min(1.0, max(0.0, p))


def polarization_angle(photon: np.ndarray) -> float:
    """Linear-polarization angle in degrees [0, 180) of a (H, V) amplitude vector."""
    photon = np.asarray(photon, dtype=complex)
    ref = photon[np.argmax(np.abs(photon))]
    real = (photon * np.conj(ref) / abs(ref)).real
    return math.degrees(math.atan2(real[1], real[0])) % 180.0


def photon_vector(angle: float) -> np.ndarray:
    t = math.radians(angle)
    return np.array([math.cos(t), math.sin(t)])


def encode(
    setting: EncoderSetting, pair: PairState, rng: np.random.Generator
) -> Union[MeasurementOutcome, NonCoincidenceEvent]:
    """Send the sender photon to channel ``setting.bit`` and measure it there."""
    if pair.kind == SPDC_UNENTANGLED:
        event = event_class_sample(pair, rng)
        if event != EventClass.COINCIDENCE:
            return NonCoincidenceEvent(event)
        pair = condition_on_coincidence(pair)
    return measure_polarization(pair, SENDER, setting.basis, rng)


def amplify_paper(input_polarization: float, model: AmplifierModel) -> Beam:
    if model.kind != AmplifierKind.PAPER:
        raise ValueError(f"expected a paper_deterministic model, got {model.kind.value}")
    angle = input_polarization % 180.0
    return Beam(((angle, 2 * model.m + 1), ((angle + 90.0) % 180.0, model.m)))


@lru_cache(maxsize=256)
def urn_pmf(m: int) -> np.ndarray:
    """P(n_par = k), k = 0..3m+1, by forward recursion over the 3m sequential emissions."""
    pmf = np.zeros(3 * m + 2)
    pmf[1] = 1.0
    for step in range(3 * m):
        total = step + 1  # photons present before this emission
        k = np.arange(3 * m + 2)
        p_par = (k + 1.0) / (total + 2.0)
        nxt = pmf * (1 - p_par)
        nxt[1:] += pmf[:-1] * p_par[:-1]
        pmf = nxt
    pmf.setflags(write=False)
    return pmf


def urn_pmf_exact(m: int) -> list[Fraction]:
    """Same recursion as :func:`urn_pmf` in rational arithmetic (small m only)."""
    pmf = [Fraction(0)] * (3 * m + 2)
    pmf[1] = Fraction(1)
    for step in range(3 * m):
        total = step + 1
        nxt = [Fraction(0)] * len(pmf)
        for k, w in enumerate(pmf):
            if w:
                p_par = Fraction(k + 1, total + 2)
                nxt[k] += w * (1 - p_par)
                nxt[k + 1] += w * p_par
        pmf = nxt
    return pmf


@lru_cache(maxsize=256)
def _urn_cdf(m: int) -> np.ndarray:
    return np.cumsum(urn_pmf(m))


def amplify_urn(input_polarization: float, model: AmplifierModel, rng: np.random.Generator) -> Beam:
    """One draw of the emission urn, sampled by inverse CDF of its exact path distribution."""
    if model.kind != AmplifierKind.URN:
        raise ValueError(f"expected an emission_urn model, got {model.kind.value}")
    cdf = _urn_cdf(model.m)
    k = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
    k = min(k, cdf.size - 1)
    angle = input_polarization % 180.0
    return Beam(((angle, k), ((angle + 90.0) % 180.0, 3 * model.m + 1 - k)))


@lru_cache(maxsize=32)
def _squeezed_pair_tensors(gain: float, n_max: int, tol: float):
    """Amplified (signal, idler) states for vacuum and single-photon seeds."""
    r = math.acosh(math.sqrt(gain))
    layout = ModeLayout(("sig", "idl"), n_max)
    vac = two_mode_squeeze(layout.vacuum(), "sig", "idl", r, leakage_tol=tol)
    one = two_mode_squeeze(layout.fock_state((1, 0)), "sig", "idl", r, leakage_tol=tol)
    return vac.tensor, one.tensor


def _as_density(input_state: np.ndarray) -> np.ndarray:
    arr = np.asarray(input_state, dtype=complex)
    if arr.shape == (2,):
        arr = np.outer(arr, arr.conj())
    if arr.shape != (2, 2):
        raise ValueError("input must be a polarization vector (2,) or density matrix (2, 2)")
    return arr / np.trace(arr).real


def _covariant_counts_hv(rho: np.ndarray, model: AmplifierModel) -> CountDistribution:
    # The two polarization channels are independent; only the seeded one carries the photon.
    vac, one = _squeezed_pair_tensors(model.gain, model.n_max, model.leakage_tol)
    seeds = {0: (one, vac), 1: (vac, one)}  # input H -> H pair seeded; input V -> V pair seeded
    grid = np.zeros((model.n_max + 1, model.n_max + 1), dtype=complex)
    for j in range(2):
        for k in range(2):
            if rho[j, k] == 0:
                continue
            h_j, v_j = seeds[j]
            h_k, v_k = seeds[k]
            g_h = np.einsum("ni,ni->n", h_j, h_k.conj())
            g_v = np.einsum("ni,ni->n", v_j, v_k.conj())
            grid += rho[j, k] * np.outer(g_h, g_v)
    grid = grid.real
    total = float(grid.sum())
    leakage = max(0.0, 1.0 - total)
    if leakage > model.leakage_tol:
        raise LeakageExceeded(
            f"covariant amplifier (G={model.gain:g}) leaks {leakage:.3e} at n_max={model.n_max}; "
            f"need n_max >= {truncation_for_gain(model.gain, model.leakage_tol / 2)}"
        )
    return CountDistribution(COUNT_MODES, np.clip(grid / total, 0, None), leakage=leakage, basis=0.0)


def _covariant_counts_dense(rho: np.ndarray, model: AmplifierModel, theta: float) -> CountDistribution:
    layout = ModeLayout(("H", "V", "iH", "iV"), model.n_max)
    if layout.dim > MAX_DENSE_DIM:
        raise ValueError(
            f"rotated-basis amplification needs a (n_max+1)^4 = {layout.dim} state; "
            f"reduce n_max or measure in the 0-degree basis"
        )
    r = math.acosh(math.sqrt(model.gain))
    weights, vecs = np.linalg.eigh(rho)
    grid = np.zeros((model.n_max + 1,) * 2)
    leakage = 0.0
    for w, vec in zip(weights, vecs.T):
        if w <= 1e-15:
            continue
        state = vec[0] * layout.fock_state((1, 0, 0, 0)) + vec[1] * layout.fock_state((0, 1, 0, 0))
        state = two_mode_squeeze(state, "H", "iH", r, leakage_tol=model.leakage_tol)
        state = two_mode_squeeze(state, "V", "iV", r, leakage_tol=model.leakage_tol)
        state = rotate_polarization(state, "H", "V", theta, leakage_tol=model.leakage_tol)
        dist = count_distribution(state, ["H", "V"])
        grid += w * dist.grid
        leakage = max(leakage, dist.leakage)
    if leakage > model.leakage_tol:
        raise LeakageExceeded(f"covariant amplifier leaks {leakage:.3e} at n_max={model.n_max}")
    return CountDistribution(COUNT_MODES, grid / grid.sum(), leakage=leakage, basis=theta)


def amplify_covariant(
    input_state: np.ndarray,
    model: AmplifierModel,
    basis: PolarizationBasis = PolarizationBasis(0.0),
    route: str = "auto",
) -> CountDistribution:
    """Exact joint count pmf (parallel, perpendicular to ``basis``) after covariant amplification.

    ``input_state`` is a single-photon polarization vector or 2x2 density matrix
    in the (H, V) basis. ``route="product"`` uses the independent-channel
    factorization (0-degree basis only, any truncation); ``route="dense"``
    evolves the full four-mode state and rotates it with the Fock engine.
    """
    if model.kind != AmplifierKind.COVARIANT:
        raise ValueError(f"expected a covariant_squeezer model, got {model.kind.value}")
    rho = _as_density(input_state)
    if route == "auto":
        route = "product" if basis.theta == 0.0 else "dense"
    if route == "product":
        if basis.theta != 0.0:
            raise ValueError("product route only measures in the 0-degree basis")
        return _covariant_counts_hv(rho, model)
    if route == "dense":
        return _covariant_counts_dense(rho, model, basis.theta)
    raise ValueError(f"unknown route {route!r}")


@lru_cache(maxsize=64)
def _covariant_pmf_cached(angle: float, model: AmplifierModel) -> CountDistribution:
    return amplify_covariant(photon_vector(angle), model)


def amplify(
    input_polarization: float, model: AmplifierModel, rng: np.random.Generator | None = None
) -> Union[Beam, CountDistribution]:
    """Dispatch on the model kind; covariant pmfs are cached per (angle, model)."""
    if model.kind == AmplifierKind.PAPER:
        return amplify_paper(input_polarization, model)
    if model.kind == AmplifierKind.URN:
        return amplify_urn(input_polarization, model, rng)
    return _covariant_pmf_cached(round(input_polarization % 180.0, 9), model)


def detect_counts(
    beam: Union[Beam, CountDistribution],
    receiver_basis: PolarizationBasis,
    rng: np.random.Generator,
) -> PhotonCounts:
    """Count photons behind the receiver prism (D_r parallel, D'_r perpendicular)."""
    if isinstance(beam, CountDistribution):
        if beam.basis is not None and not math.isclose(beam.basis, receiver_basis.theta, abs_tol=1e-12):
            raise ValueError(
                f"count pmf was computed for basis {beam.basis} deg, not {receiver_basis.theta} deg"
            )
        n_r, n_rp = beam.sample(rng)
        return PhotonCounts(n_r, n_rp)
    n_r = n_rp = 0
    for angle, count in beam.components:
        p = malus(angle - receiver_basis.theta)
        if count == 0:
            continue
        if p == 1.0:
            k = count
        elif p == 0.0:
            k = 0
        else:
            k = int(rng.binomial(count, p))
        n_r += k
        n_rp += count - k
    return PhotonCounts(n_r, n_rp)


def default_threshold(m: float) -> int:
    """Midpoint between the two signatures, ceil((m + 1) / 2), never below 1."""
    return max(1, math.ceil((m + 1) / 2))


def decode(counts: PhotonCounts, threshold: int) -> int:
    if threshold < 1:
        raise ValueError(f"threshold must be >= 1, got {threshold}")
    return 0 if abs(counts.delta) >= threshold else 1


def _binomial_pmf(n: int, p: float) -> np.ndarray:
    """Binomial pmf over 0..n; the fair case uses exact integer ratios (correctly rounded)."""
    if p == 0.5:
        return np.array([Fraction(math.comb(n, k), 1 << n) for k in range(n + 1)], dtype=float)
    return binom.pmf(np.arange(n + 1), n, p)


def receiver_count_pmf(
    input_polarization: float,
    model: AmplifierModel,
    basis: PolarizationBasis = PolarizationBasis(0.0),
) -> CountDistribution:
    """Exact pmf of (n_r, n_r') for one incident photon at ``input_polarization`` degrees."""
    if model.kind == AmplifierKind.COVARIANT:
        if basis.theta == 0.0:
            return _covariant_pmf_cached(round(input_polarization % 180.0, 9), model)
        return amplify_covariant(photon_vector(input_polarization), model, basis)

    total = 3 * model.m + 1
    p = malus(input_polarization - basis.theta)
    q = malus(input_polarization + 90.0 - basis.theta)
    if model.kind == AmplifierKind.PAPER:
        weights = {2 * model.m + 1: 1.0}
    else:
        pmf = urn_pmf(model.m)
        weights = {k: float(w) for k, w in enumerate(pmf) if w > 0}
    n_r = np.zeros(total + 1)
    ks = np.arange(total + 1)
    for n_par, w in weights.items():
        n_perp = total - n_par
        from_par = _binomial_pmf(n_par, p)
        from_perp = _binomial_pmf(n_perp, q)
        n_r += w * np.convolve(from_par, from_perp)
    grid = np.zeros((total + 1, total + 1))
    grid[ks, total - ks] = n_r
    return CountDistribution(COUNT_MODES, grid / grid.sum(), basis=basis.theta)
