"""
Exact linear algebra on a truncated multi-mode Fock space.

Basis states are occupation tuples ``(n_0, ..., n_{k-1})`` with every
``n_i <= n_max``. They are enumerated in row-major (C) order of the layout's
mode list, so the flat index of ``(n_0, ..., n_{k-1})`` is
``np.ravel_multi_index(occ, (n_max + 1,) * k)``.

Nothing here silently clips. Operations that can push probability out of the
truncated space measure the lost norm, record it on the result as
``leakage`` and raise :class:`LeakageExceeded` past the configured tolerance.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Iterable, Mapping, Sequence, Union

import numpy as np
from scipy.linalg import expm
from scipy.special import gammaln

from .errors import SimulationError

DEFAULT_LEAKAGE_TOL = 1e-8

CREATION = "creation"
ANNIHILATION = "annihilation"


class FockError(SimulationError):
    pass


class TruncationOverflow(FockError):
    """A creation operator would populate an occupation above ``n_max``."""


class UnknownMode(FockError):
    pass


class LeakageExceeded(FockError):
    """Norm lost to truncation exceeds the tolerance."""


class LayoutMismatch(FockError):
    pass


@dataclass(frozen=True)
class ModeLayout:
    mode_names: tuple[str, ...]
    n_max: int

    def __post_init__(self):
        names = tuple(self.mode_names)
        object.__setattr__(self, "mode_names", names)
        if len(names) < 1:
            raise ValueError("layout needs at least one mode")
        if len(set(names)) != len(names):
            raise ValueError(f"duplicate mode names in {names}")
        if int(self.n_max) != self.n_max or self.n_max < 1:
            raise ValueError(f"n_max must be an integer >= 1, got {self.n_max}")
        object.__setattr__(self, "n_max", int(self.n_max))

    @property
    def n_modes(self) -> int:
        return len(self.mode_names)

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n_max + 1,) * self.n_modes

    @property
    def dim(self) -> int:
        return (self.n_max + 1) ** self.n_modes

    def axis(self, mode: str) -> int:
        try:
            return self.mode_names.index(mode)
        except ValueError:
            raise UnknownMode(f"mode {mode!r} not in layout {self.mode_names}") from None

    def index(self, occupation: Sequence[int]) -> int:
        occ = tuple(int(n) for n in occupation)
        if len(occ) != self.n_modes:
            raise ValueError(f"occupation {occ} does not match {self.n_modes} modes")
        if any(n < 0 for n in occ):
            raise ValueError(f"negative occupation in {occ}")
        if any(n > self.n_max for n in occ):
            raise TruncationOverflow(f"occupation {occ} exceeds n_max={self.n_max}")
        return int(np.ravel_multi_index(occ, self.shape))

    def occupation(self, index: int) -> tuple[int, ...]:
        return tuple(int(n) for n in np.unravel_index(index, self.shape))

    def basis(self) -> list[tuple[int, ...]]:
        return [tuple(occ) for occ in np.ndindex(*self.shape)]

    def vacuum(self) -> "FockStateVector":
        return self.fock_state((0,) * self.n_modes)

    def fock_state(self, occupation: Union[Sequence[int], Mapping[str, int]]) -> "FockStateVector":
        """Normalized number state; a mapping may name only the occupied modes."""
        if isinstance(occupation, Mapping):
            occ = [0] * self.n_modes
            for mode, n in occupation.items():
                occ[self.axis(mode)] = n
            occupation = occ
        amps = np.zeros(self.dim, dtype=complex)
        amps[self.index(occupation)] = 1.0
        return FockStateVector(self, amps)


@dataclass(frozen=True, eq=False)
class FockStateVector:
    layout: ModeLayout
    amplitudes: np.ndarray
    leakage: float = 0.0

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=complex).reshape(-1)
        if amps.size != self.layout.dim:
            raise ValueError(
                f"{amps.size} amplitudes for a layout of dimension {self.layout.dim}"
            )
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def tensor(self) -> np.ndarray:
        return self.amplitudes.reshape(self.layout.shape)

    def norm(self) -> float:
        return float(np.linalg.norm(self.amplitudes))

    def normalized(self) -> "FockStateVector":
        nrm = self.norm()
        if nrm == 0:
            raise ValueError("cannot normalize the zero vector")
        return FockStateVector(self.layout, self.amplitudes / nrm, self.leakage)

    def amplitude(self, occupation: Sequence[int]) -> complex:
        return complex(self.amplitudes[self.layout.index(occupation)])

    def inner(self, other: "FockStateVector") -> complex:
        _check_layout(self.layout, other.layout)
        return complex(np.vdot(self.amplitudes, other.amplitudes))

    def mean_occupation(self, mode: str) -> float:
        axis = self.layout.axis(mode)
        probs = np.abs(self.tensor) ** 2
        marginal = probs.sum(axis=tuple(i for i in range(self.layout.n_modes) if i != axis))
        return float(np.arange(self.layout.n_max + 1) @ marginal / probs.sum())

    def __add__(self, other: "FockStateVector") -> "FockStateVector":
        _check_layout(self.layout, other.layout)
        return FockStateVector(
            self.layout, self.amplitudes + other.amplitudes, self.leakage + other.leakage
        )

    def __sub__(self, other: "FockStateVector") -> "FockStateVector":
        return self + (-1.0) * other

    def __mul__(self, scalar: complex) -> "FockStateVector":
        return FockStateVector(self.layout, self.amplitudes * scalar, self.leakage)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class DensityOperator:
    layout: ModeLayout
    matrix: np.ndarray
    leakage: float = 0.0

    def __post_init__(self):
        mat = np.asarray(self.matrix, dtype=complex)
        if mat.shape != (self.layout.dim, self.layout.dim):
            raise ValueError(f"matrix shape {mat.shape} does not match dim {self.layout.dim}")
        mat.setflags(write=False)
        object.__setattr__(self, "matrix", mat)

    @classmethod
    def from_state(cls, state: FockStateVector, normalize: bool = True) -> "DensityOperator":
        vec = state.amplitudes
        if normalize:
            vec = vec / np.linalg.norm(vec)
        return cls(state.layout, np.outer(vec, vec.conj()), state.leakage)

    @classmethod
    def mixture(
        cls, weights: Iterable[float], states: Iterable[FockStateVector]
    ) -> "DensityOperator":
        weights = list(weights)
        states = list(states)
        if not states:
            raise ValueError("empty mixture")
        layout = states[0].layout
        mat = np.zeros((layout.dim, layout.dim), dtype=complex)
        for w, s in zip(weights, states, strict=True):
            _check_layout(layout, s.layout)
            v = s.amplitudes / np.linalg.norm(s.amplitudes)
            mat += w * np.outer(v, v.conj())
        return cls(layout, mat / sum(weights))

    @property
    def tensor(self) -> np.ndarray:
        return self.matrix.reshape(self.layout.shape * 2)

    def trace(self) -> float:
        return float(np.trace(self.matrix).real)

    def purity(self) -> float:
        return float(np.trace(self.matrix @ self.matrix).real)

    def eigenvalues(self) -> np.ndarray:
        return np.linalg.eigvalsh(self.matrix)

    def is_valid(self, atol: float = 1e-12, eig_tol: float = 1e-10) -> bool:
        herm = np.allclose(self.matrix, self.matrix.conj().T, atol=atol, rtol=0)
        return bool(herm and abs(self.trace() - 1) <= atol and self.eigenvalues().min() >= -eig_tol)


@dataclass(frozen=True, eq=False)
class CountDistribution:
    """Joint photon-count pmf over ``modes`` on the full occupation grid.

    ``grid[n_0, n_1, ...]`` is the probability of that count tuple. ``leakage``
    is the mass lost to truncation before renormalization; ``basis`` is the
    analyzer angle (degrees) the counts refer to, when meaningful.
    """

    modes: tuple[str, ...]
    grid: np.ndarray
    leakage: float = 0.0
    basis: float | None = None

    def __post_init__(self):
        grid = np.asarray(self.grid, dtype=float)
        if grid.ndim != len(self.modes):
            raise ValueError("grid rank must match the number of modes")
        grid.setflags(write=False)
        object.__setattr__(self, "grid", grid)
        object.__setattr__(self, "modes", tuple(self.modes))

    @property
    def support(self) -> list[tuple[int, ...]]:
        return [tuple(occ) for occ in np.ndindex(*self.grid.shape)]

    @property
    def probabilities(self) -> np.ndarray:
        return self.grid.reshape(-1)

    def as_dict(self, atol: float = 0.0) -> dict[tuple[int, ...], float]:
        idx = np.argwhere(self.grid > atol)
        return {tuple(int(i) for i in occ): float(self.grid[tuple(occ)]) for occ in idx}

    def marginal(self, mode: str) -> np.ndarray:
        axis = self.modes.index(mode)
        return self.grid.sum(axis=tuple(i for i in range(self.grid.ndim) if i != axis))

    def mean(self, mode: str) -> float:
        marg = self.marginal(mode)
        return float(np.arange(marg.size) @ marg)

    def total_variation(self, other: "CountDistribution") -> float:
        if self.grid.shape != other.grid.shape:
            raise ValueError(f"grid shapes differ: {self.grid.shape} vs {other.grid.shape}")
        return 0.5 * float(np.abs(self.grid - other.grid).sum())

    def sample(self, rng: np.random.Generator) -> tuple[int, ...]:
        """Draw one count tuple by inverse CDF (consumes exactly one uniform)."""
        cdf = self.__dict__.get("_cdf")
        if cdf is None:
            cdf = np.cumsum(self.probabilities)
            object.__setattr__(self, "_cdf", cdf)
        flat = int(np.searchsorted(cdf, rng.random() * cdf[-1], side="right"))
        flat = min(flat, cdf.size - 1)
        return tuple(int(n) for n in np.unravel_index(flat, self.grid.shape))


def _check_layout(a: ModeLayout, b: ModeLayout) -> None:
    if a != b:
        raise LayoutMismatch(f"layouts differ: {a} vs {b}")


def _ladder_tensor(tensor: np.ndarray, axis: int, kind: str) -> np.ndarray:
    n_max = tensor.shape[axis] - 1
    moved = np.moveaxis(tensor, axis, -1)
    out = np.zeros_like(moved)
    if kind == CREATION:
        top = moved[..., n_max]
        if np.any(top != 0):
            raise TruncationOverflow(
                f"creation on a state populated at n_max={n_max} would leave the space"
            )
        out[..., 1:] = moved[..., :-1] * np.sqrt(np.arange(1, n_max + 1))
    elif kind == ANNIHILATION:
        out[..., :-1] = moved[..., 1:] * np.sqrt(np.arange(1, n_max + 1))
    else:
        raise ValueError(f"kind must be {CREATION!r} or {ANNIHILATION!r}, got {kind!r}")
    return np.moveaxis(out, -1, axis)


def apply_ladder(state: FockStateVector, mode: str, kind: str) -> FockStateVector:
    """Raw (unnormalized) image of ``state`` under a_mode^dagger or a_mode."""
    axis = state.layout.axis(mode)
    out = _ladder_tensor(state.tensor, axis, kind)
    return FockStateVector(state.layout, out.reshape(-1), state.leakage)


def apply_number(state: FockStateVector, mode: str) -> FockStateVector:
    axis = state.layout.axis(mode)
    n = np.arange(state.layout.n_max + 1)
    shape = [1] * state.layout.n_modes
    shape[axis] = -1
    return FockStateVector(state.layout, (state.tensor * n.reshape(shape)).reshape(-1), state.leakage)


def two_mode_squeeze(
    state: FockStateVector,
    mode_a: str,
    mode_b: str,
    r: float,
    leakage_tol: float = DEFAULT_LEAKAGE_TOL,
) -> FockStateVector:
    """Apply exp(r (a^dag b^dag - a b)) exactly, projected onto the truncated space.

    Uses the SU(1,1) disentangled form
    ``exp(t a^dag b^dag) cosh(r)^-(n_a + n_b + 1) exp(-t a b)`` with ``t = tanh r``.
    The lowering factor stays inside the space; every term of the raising
    series that lands beyond ``n_max`` is dropped and its weight is reported as
    leakage rather than folded back by a truncated generator.
    """
    if not np.isfinite(r) or r < 0:
        raise ValueError(f"squeeze parameter must be finite and >= 0, got {r}")
    layout = state.layout
    ax_a, ax_b = layout.axis(mode_a), layout.axis(mode_b)
    if ax_a == ax_b:
        raise ValueError("two_mode_squeeze needs two distinct modes")
    if r == 0:
        return state

    n_max = layout.n_max
    t = math.tanh(r)
    log_t = math.log(t)
    T = np.moveaxis(state.tensor, (ax_a, ax_b), (-2, -1))
    lf = gammaln(np.arange(2 * n_max + 2) + 1.0)  # log n!
    n = np.arange(n_max + 1)

    # only the populated (n_a, n_b) box needs work
    top_a, top_b = _occupied_extent(T)
    lowered = np.zeros_like(T)
    for k in range(min(top_a, top_b) + 1):
        src = T[..., k : top_a + 1, k : top_b + 1]
        hi_a, hi_b = n[k : top_a + 1, None], n[None, k : top_b + 1]
        logc = k * log_t - lf[k] + 0.5 * (lf[hi_a] - lf[hi_a - k] + lf[hi_b] - lf[hi_b - k])
        lowered[..., : top_a + 1 - k, : top_b + 1 - k] += ((-1) ** k) * np.exp(logc) * src

    lowered *= np.exp(-(n[:, None] + n[None, :] + 1.0) * math.log(math.cosh(r)))

    top_a, top_b = _occupied_extent(lowered)
    raised = np.zeros_like(T)
    for k in range(n_max + 1):
        ea, eb = min(top_a, n_max - k), min(top_b, n_max - k)
        if ea < 0 or eb < 0:
            break
        src = lowered[..., : ea + 1, : eb + 1]
        lo_a, lo_b = n[: ea + 1, None], n[None, : eb + 1]
        logc = k * log_t - lf[k] + 0.5 * (lf[lo_a + k] - lf[lo_a] + lf[lo_b + k] - lf[lo_b])
        with np.errstate(over="ignore", invalid="ignore"):
            term = np.where(src != 0, np.exp(logc) * src, 0)
        raised[..., k : k + ea + 1, k : k + eb + 1] += term

    out = np.moveaxis(raised, (-2, -1), (ax_a, ax_b))
    leak = max(0.0, float(np.vdot(state.amplitudes, state.amplitudes).real - np.vdot(out, out).real))
    if leak > leakage_tol:
        raise LeakageExceeded(
            f"two-mode squeeze (r={r:.6g}) lost {leak:.3e} of norm at n_max={n_max}; "
            f"tolerance {leakage_tol:.1e}; raise the truncation"
        )
    return FockStateVector(layout, out.reshape(-1), state.leakage + leak)


def _occupied_extent(T: np.ndarray) -> tuple[int, int]:
    """Largest populated occupation along the last two axes (-1 when empty)."""
    mask = T != 0
    if T.ndim > 2:
        mask = mask.any(axis=tuple(range(T.ndim - 2)))
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        return -1, -1
    return int(rows[-1]), int(cols[-1])


@lru_cache(maxsize=512)
def _rotation_block(total: int, theta_deg: float) -> np.ndarray:
    """Rotation acting on the span of |k, total-k> (k photons in the h mode)."""
    k = np.arange(total + 1)
    gen = np.zeros((total + 1, total + 1))
    # K = a_v^dag a_h - a_h^dag a_v
    up = np.sqrt(k[1:] * (total - k[1:] + 1.0))
    gen[k[:-1], k[1:]] = up
    gen[k[1:], k[:-1]] = -up
    block = expm(-math.radians(theta_deg) * gen)
    block.setflags(write=False)
    return block


def _rotate_tensor(T: np.ndarray, ax_h: int, ax_v: int, theta: float) -> tuple[np.ndarray, float]:
    n_max = T.shape[ax_h] - 1
    moved = np.moveaxis(T, (ax_h, ax_v), (-2, -1))
    out = np.zeros_like(moved)
    dropped = 0.0
    for total in range(2 * n_max + 1):
        ks = np.arange(max(0, total - n_max), min(total, n_max) + 1)
        x = moved[..., ks, total - ks]
        if not np.any(x):
            continue
        block = _rotation_block(total, theta)
        y = x @ block[:, ks].T
        out[..., ks, total - ks] = y[..., ks]
        mask = np.ones(total + 1, dtype=bool)
        mask[ks] = False
        if mask.any():
            dropped += float(np.sum(np.abs(y[..., mask]) ** 2))
    return np.moveaxis(out, (-2, -1), (ax_h, ax_v)), dropped


def rotate_polarization(
    obj: Union[FockStateVector, DensityOperator],
    mode_h: str,
    mode_v: str,
    theta: float,
    leakage_tol: float = DEFAULT_LEAKAGE_TOL,
) -> Union[FockStateVector, DensityOperator]:
    """Re-express ``obj`` in the analyzer basis rotated by ``theta`` degrees.

    After the call ``mode_h`` holds the mode polarized at ``theta``
    (a_theta = a_h cos(theta) + a_v sin(theta)) and ``mode_v`` the one at
    ``theta + 90``. Real rotation, no phases. Sectors whose total photon
    number exceeds ``n_max`` cannot be represented after rotation; their
    spill-over is reported as leakage.
    """
    if not np.isfinite(theta):
        raise ValueError(f"theta must be finite, got {theta}")
    layout = obj.layout
    ax_h, ax_v = layout.axis(mode_h), layout.axis(mode_v)
    if ax_h == ax_v:
        raise ValueError("rotation needs two distinct modes")
    theta = float(theta)
    if theta % 360.0 == 0.0:
        return obj

    if isinstance(obj, FockStateVector):
        out, leak = _rotate_tensor(obj.tensor, ax_h, ax_v, theta)
        if leak > leakage_tol:
            raise LeakageExceeded(
                f"rotation spilled {leak:.3e} of norm beyond n_max={layout.n_max}"
            )
        return FockStateVector(layout, out.reshape(-1), obj.leakage + leak)

    k = layout.n_modes
    ket, _ = _rotate_tensor(obj.tensor, ax_h, ax_v, theta)
    both, _ = _rotate_tensor(ket, k + ax_h, k + ax_v, theta)
    mat = both.reshape(layout.dim, layout.dim)
    leak = max(0.0, obj.trace() - float(np.trace(mat).real))
    if leak > leakage_tol:
        raise LeakageExceeded(f"rotation spilled {leak:.3e} of trace beyond n_max={layout.n_max}")
    return DensityOperator(layout, mat, obj.leakage + leak)


def _einsum_letters(n: int) -> str:
    letters = "abcdefghijklmnopqrstuvwxyzABCDEFGHIJKLMNOPQRSTUVWXYZ"
    if n > len(letters):
        raise ValueError("too many modes for einsum-based partial trace")
    return letters[:n]


def partial_trace(density: DensityOperator, keep: Sequence[str]) -> DensityOperator:
    """Trace out every mode not in ``keep``; kept modes retain layout order."""
    layout = density.layout
    keep = list(keep)
    if not keep:
        raise ValueError("keep must name at least one mode")
    axes = sorted({layout.axis(m) for m in keep})
    k = layout.n_modes
    if len(axes) == k:
        return density
    letters = _einsum_letters(2 * k)
    ket = list(letters[:k])
    bra = list(letters[k:])
    for i in range(k):
        if i not in axes:
            bra[i] = ket[i]
    out = "".join(ket[i] for i in axes) + "".join(bra[i] for i in axes)
    reduced = np.einsum("".join(ket) + "".join(bra) + "->" + out, density.tensor)
    new_layout = ModeLayout(tuple(layout.mode_names[i] for i in axes), layout.n_max)
    return DensityOperator(new_layout, reduced.reshape(new_layout.dim, new_layout.dim), density.leakage)


def count_distribution(
    obj: Union[FockStateVector, DensityOperator],
    modes: Sequence[str],
    basis: float | None = None,
) -> CountDistribution:
    """Joint photon-count pmf on ``modes`` (other modes summed out), renormalized.

    Mass missing from the input (truncation leakage) is recorded on the result.
    """
    layout = obj.layout
    axes = [layout.axis(m) for m in modes]
    if len(set(axes)) != len(axes):
        raise ValueError("modes must be distinct")
    if isinstance(obj, FockStateVector):
        probs = np.abs(obj.tensor) ** 2
    else:
        probs = np.real(np.diagonal(obj.matrix)).reshape(layout.shape)
    others = tuple(i for i in range(layout.n_modes) if i not in axes)
    marg = probs.sum(axis=others) if others else probs
    # summing removes axes; restore requested order
    remaining = [i for i in range(layout.n_modes) if i not in others]
    marg = np.transpose(marg, [remaining.index(a) for a in axes])
    total = float(marg.sum())
    if total <= 0:
        raise ValueError("state has no weight")
    marg = np.clip(marg / total, 0.0, None)
    leakage = max(obj.leakage, 1.0 - total, 0.0)
    return CountDistribution(tuple(modes), marg, leakage=leakage, basis=basis)
