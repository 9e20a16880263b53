"""
Photon-pair sources and polarization measurements.

Two sources are modelled:

* ``bell`` -- (|HH> + |VV>)/sqrt(2) over (sender, receiver) polarizations.
* ``spdc_unentangled`` -- the pair state 1/2 (b1^dag b1^dag + b2^dag b2^dag)|0>
  over two pair modes. The beam field operators split each pair mode across
  both beams::

      signal:  V-component b1/sqrt(2),  H-component -b2/sqrt(2)
      idler:   V-component b2/sqrt(2),  H-component  b1/sqrt(2)

  (the overall constant and the plane-wave phase are dropped). Mapping the
  pair modes onto the four physical modes gives
  b1^dag = (s_V^dag + i_H^dag)/sqrt(2) and b2^dag = (i_V^dag - s_H^dag)/sqrt(2).

Polarization two-photon states are stored as a 2x2 amplitude matrix
``psi[sender_pol, receiver_pol]`` with index 0 = H and 1 = V.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from typing import Sequence, Union

import numpy as np

from .errors import SimulationError
from .fock import (
    ANNIHILATION,
    CREATION,
    FockStateVector,
    ModeLayout,
    apply_ladder,
)

SENDER = "sender"
RECEIVER = "receiver"
PARALLEL = "parallel"
PERPENDICULAR = "perpendicular"

BELL = "bell"
SPDC_UNENTANGLED = "spdc_unentangled"
SPDC_COINCIDENCE = "spdc_coincidence"

SIGNAL = "signal"
IDLER = "idler"

PAIR_MODES = ("b1", "b2")
BEAM_MODES = ("s_H", "s_V", "i_H", "i_V")
_BEAM_POL_MODES = {SIGNAL: ("s_H", "s_V"), IDLER: ("i_H", "i_V")}

# Beam field components in terms of pair-mode annihilators, {pol: {mode: coef}}.
BEAM_OPERATORS = {
    SIGNAL: {"V": {"b1": 1 / math.sqrt(2)}, "H": {"b2": -1 / math.sqrt(2)}},
    IDLER: {"V": {"b2": 1 / math.sqrt(2)}, "H": {"b1": 1 / math.sqrt(2)}},
}
# Creation operators of the pair modes on the physical beam modes.
_PAIR_TO_BEAM = {
    "b1": {"s_V": 1 / math.sqrt(2), "i_H": 1 / math.sqrt(2)},
    "b2": {"i_V": 1 / math.sqrt(2), "s_H": -1 / math.sqrt(2)},
}


class EventClass(str, Enum):
    COINCIDENCE = "coincidence"
    BOTH_SIGNAL = "both_signal"
    BOTH_IDLER = "both_idler"


class NotSingularlyOccupied(SimulationError):
    """The measured side does not carry exactly one photon."""


@dataclass(frozen=True)
class PolarizationBasis:
    """Analyzer oriented at ``theta`` degrees from horizontal, kept in [0, 180)."""

    theta: float

    def __post_init__(self):
        if not math.isfinite(self.theta):
            raise ValueError(f"theta must be finite, got {self.theta}")
        object.__setattr__(self, "theta", float(self.theta) % 180.0)

    @property
    def parallel(self) -> np.ndarray:
        t = math.radians(self.theta)
        return np.array([math.cos(t), math.sin(t)])

    @property
    def perpendicular(self) -> np.ndarray:
        t = math.radians(self.theta)
        return np.array([-math.sin(t), math.cos(t)])


@dataclass(frozen=True, eq=False)
class PairState:
    kind: str
    representation: Union[np.ndarray, FockStateVector]

    def __post_init__(self):
        if self.kind in (BELL, SPDC_COINCIDENCE):
            psi = np.asarray(self.representation, dtype=complex).reshape(2, 2)
            psi.setflags(write=False)
            object.__setattr__(self, "representation", psi)
        elif self.kind != SPDC_UNENTANGLED:
            raise ValueError(f"unknown pair kind {self.kind!r}")

    def norm(self) -> float:
        if self.kind == SPDC_UNENTANGLED:
            return self.representation.norm()
        return float(np.linalg.norm(self.representation))


@dataclass(frozen=True, eq=False)
class MeasurementOutcome:
    outcome: str
    collapsed_remote: np.ndarray
    probability: float


def bell_pair() -> PairState:
    psi = np.zeros((2, 2), dtype=complex)
    psi[0, 0] = psi[1, 1] = 1 / math.sqrt(2)
    return PairState(BELL, psi)


def spdc_unentangled(n_max: int = 2) -> PairState:
    layout = ModeLayout(PAIR_MODES, n_max)
    vac = layout.vacuum()
    terms = []
    for mode in PAIR_MODES:
        terms.append(apply_ladder(apply_ladder(vac, mode, CREATION), mode, CREATION))
    return PairState(SPDC_UNENTANGLED, 0.5 * (terms[0] + terms[1]))


def _apply_combination(state: FockStateVector, coeffs: dict, kind: str) -> FockStateVector:
    out = None
    for mode, c in coeffs.items():
        term = c * apply_ladder(state, mode, kind)
        out = term if out is None else out + term
    return out


def beam_state(pair: PairState) -> FockStateVector:
    """Express an ``spdc_unentangled`` pair on the physical modes (s_H, s_V, i_H, i_V)."""
    if pair.kind != SPDC_UNENTANGLED:
        raise ValueError("beam_state needs an spdc_unentangled pair")
    src = pair.representation
    layout = ModeLayout(BEAM_MODES, src.layout.n_max)
    out = FockStateVector(layout, np.zeros(layout.dim, dtype=complex))
    for flat in np.flatnonzero(src.amplitudes):
        occ = src.layout.occupation(flat)
        term = layout.vacuum()
        for mode, n in zip(PAIR_MODES, occ):
            for _ in range(n):
                term = _apply_combination(term, _PAIR_TO_BEAM[mode], CREATION)
        scale = src.amplitudes[flat] / math.sqrt(math.prod(math.factorial(n) for n in occ))
        out = out + scale * term
    return out


def event_probabilities(pair: PairState) -> dict[EventClass, float]:
    """Exact probabilities of where the two photons end up."""
    if pair.kind != SPDC_UNENTANGLED:
        return {EventClass.COINCIDENCE: 1.0, EventClass.BOTH_SIGNAL: 0.0, EventClass.BOTH_IDLER: 0.0}
    probs = np.abs(beam_state(pair).tensor) ** 2
    probs = probs / probs.sum()
    occ = np.indices(probs.shape)
    n_signal = occ[0] + occ[1]
    n_idler = occ[2] + occ[3]
    return {
        EventClass.COINCIDENCE: float(probs[(n_signal == 1) & (n_idler == 1)].sum()),
        EventClass.BOTH_SIGNAL: float(probs[(n_signal == 2) & (n_idler == 0)].sum()),
        EventClass.BOTH_IDLER: float(probs[(n_signal == 0) & (n_idler == 2)].sum()),
    }


def event_class_sample(pair: PairState, rng: np.random.Generator) -> EventClass:
    """Sample the photon-placement class; bell pairs are always coincidences and draw nothing."""
    if pair.kind != SPDC_UNENTANGLED:
        return EventClass.COINCIDENCE
    probs = _cached_event_probabilities(pair)
    u = rng.random()
    acc = 0.0
    for cls in EventClass:
        acc += probs[cls]
        if u < acc:
            return cls
    return EventClass.BOTH_IDLER


def _cached_event_probabilities(pair: PairState) -> dict[EventClass, float]:
    cached = pair.__dict__.get("_event_probs")
    if cached is None:
        cached = event_probabilities(pair)
        object.__setattr__(pair, "_event_probs", cached)
    return cached


def condition_on_coincidence(pair: PairState) -> PairState:
    """Project onto one photon per beam; returns a polarization pair state."""
    if pair.kind != SPDC_UNENTANGLED:
        return pair
    cached = pair.__dict__.get("_coincidence")
    if cached is not None:
        return cached
    beams = beam_state(pair)
    psi = np.zeros((2, 2), dtype=complex)
    for i, s_mode in enumerate(_BEAM_POL_MODES[SIGNAL]):
        for j, i_mode in enumerate(_BEAM_POL_MODES[IDLER]):
            occ = {s_mode: 1, i_mode: 1}
            psi[i, j] = beams.amplitude([occ.get(m, 0) for m in BEAM_MODES])
    nrm = np.linalg.norm(psi)
    if nrm == 0:
        raise NotSingularlyOccupied("state has no coincidence component")
    out = PairState(SPDC_COINCIDENCE, psi / nrm)
    object.__setattr__(pair, "_coincidence", out)
    return out


def _polarization_matrix(pair: PairState, party: str) -> np.ndarray:
    if pair.kind == SPDC_UNENTANGLED:
        raise NotSingularlyOccupied(
            "the unconditioned pair state does not put exactly one photon on each side; "
            "condition on a coincidence first"
        )
    if party == SENDER:
        return pair.representation
    if party == RECEIVER:
        return pair.representation.T
    raise ValueError(f"party must be {SENDER!r} or {RECEIVER!r}, got {party!r}")


def outcome_branches(
    pair: PairState, party: str, basis: PolarizationBasis
) -> list[MeasurementOutcome]:
    """Both measurement branches with exact probabilities and collapsed remote photons."""
    psi = _polarization_matrix(pair, party)
    branches = []
    for label, vec in ((PARALLEL, basis.parallel), (PERPENDICULAR, basis.perpendicular)):
        remote = vec @ psi
        p = float(np.vdot(remote, remote).real)
        if p > 0:
            remote = remote / math.sqrt(p)
        branches.append(MeasurementOutcome(label, remote, p))
    return branches


def measure_polarization(
    pair: PairState, party: str, basis: PolarizationBasis, rng: np.random.Generator
) -> MeasurementOutcome:
    """Born-rule measurement of one photon; returns the far photon's collapsed state."""
    par, perp = outcome_branches(pair, party, basis)
    return par if rng.random() < par.probability else perp


def polarization_probability(photon: np.ndarray, basis: PolarizationBasis) -> float:
    """P(parallel) for a single photon with polarization vector ``photon`` (H, V)."""
    amp = np.vdot(basis.parallel, photon)
    return float(abs(amp) ** 2 / np.vdot(photon, photon).real)


def _double_detection_pair_modes(state: FockStateVector, beam: str) -> float:
    total = 0.0
    ops = BEAM_OPERATORS[beam]
    for first in ops.values():
        for second in ops.values():
            out = _apply_combination(
                _apply_combination(state, second, ANNIHILATION), first, ANNIHILATION
            )
            total += out.norm() ** 2
    return total


def double_detection_amplitude(pair: Union[PairState, FockStateVector], beam: str) -> float:
    """Squared norm of the beam field's annihilation part applied twice.

    Summed over both polarization components (j, k) of the beam. A
    :class:`PairState` is handled with the beam operators written on the pair
    modes; a state on :data:`BEAM_MODES` uses the physical beam modes directly.
    """
    if beam not in (SIGNAL, IDLER):
        raise ValueError(f"beam must be {SIGNAL!r} or {IDLER!r}")
    if isinstance(pair, PairState):
        if pair.kind != SPDC_UNENTANGLED:
            raise ValueError("double detection is defined for the spdc_unentangled source")
        return _double_detection_pair_modes(pair.representation, beam)
    state = pair
    if state.layout.mode_names != BEAM_MODES:
        raise ValueError(f"expected a state on {BEAM_MODES}")
    total = 0.0
    modes = _BEAM_POL_MODES[beam]
    for first in modes:
        for second in modes:
            out = apply_ladder(apply_ladder(state, second, ANNIHILATION), first, ANNIHILATION)
            total += out.norm() ** 2
    return total


def correlation(pair: PairState, theta_sender: float, theta_receiver: float) -> float:
    """E = P(same) - P(different) for analyzers at the given angles, from exact amplitudes."""
    psi = _polarization_matrix(condition_on_coincidence(pair), SENDER)
    bs, br = PolarizationBasis(theta_sender), PolarizationBasis(theta_receiver)
    e = 0.0
    for vs, sign_s in ((bs.parallel, 1), (bs.perpendicular, -1)):
        for vr, sign_r in ((br.parallel, 1), (br.perpendicular, -1)):
            e += sign_s * sign_r * abs(vs @ psi @ vr) ** 2
    return float(e)


def chsh_value(pair: PairState, angles: Sequence[float] = (0.0, 22.5, 45.0, 67.5)) -> float:
    """S = E(a,b) - E(a,b') + E(a',b) + E(a',b') with ``angles = (a, b, a', b')``.

    The unentangled SPDC source is evaluated on its coincidence branch.
    """
    a, b, a2, b2 = angles
    return (
        correlation(pair, a, b)
        - correlation(pair, a, b2)
        + correlation(pair, a2, b)
        + correlation(pair, a2, b2)
    )


def joint_outcome_distribution(pair: PairState, theta: float) -> dict[str, float]:
    """Probability that sender and receiver analyzers at a common angle agree or not."""
    same = 0.5 * (1.0 + correlation(pair, theta, theta))
    return {"same": same, "different": 1.0 - same}


@lru_cache(maxsize=None)
def source_pair(kind: str) -> PairState:
    """Shared, immutable source state for ``kind`` (``bell`` or ``spdc_unentangled``)."""
    if kind == BELL:
        return bell_pair()
    if kind == SPDC_UNENTANGLED:
        return spdc_unentangled()
    raise ValueError(f"unknown source {kind!r}")
