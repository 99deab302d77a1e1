"""Two-band Hopf insulator: Hamiltonian coefficients, ground states, datasets.

The Bloch Hamiltonian is ``H(k) = u(k) . sigma`` with

    u_x = 2 (sin kx sin kz + C sin ky)
    u_y = 2 (C sin kx - sin ky sin kz)
    u_z = sin^2 kx + sin^2 ky - sin^2 kz - C^2
    C   = cos kx + cos ky + cos kz + h

Its ground state has spin expectation ``-u/|u|``. Fields are stored as
``(n, n, n, 3)`` float64 arrays indexed ``[ix, iy, iz, component]`` so the
C-order flattening is exactly ``((ix*n + iy)*n + iz)*3 + component``.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import EmptyRange, GapClosure, PhaseBoundary

GAP_THRESHOLD = 1e-12
BOUNDARY_GUARD = 1e-6
PAPER_EXCLUSIONS = ((0.48, 0.52), (1.98, 2.02), (3.18, 3.22))
PAPER_SPLIT = (3471, 952, 521)
# Smallest seed whose 5000 uniform draws on [-5, 5] leave exactly
# sum(PAPER_SPLIT) = 4944 survivors after the three excluded h windows.
PAPER_DATASET_SEED = 24


class PhaseLabel(enum.IntEnum):
    """Hopf phase. The integer value is the classifier class index."""

    TRIVIAL = 0
    PLUS1 = 1
    MINUS2 = 2

    @property
    def chi(self) -> int:
        return (0, 1, -2)[self.value]

    @classmethod
    def from_chi(cls, chi: int) -> "PhaseLabel":
        try:
            return {0: cls.TRIVIAL, 1: cls.PLUS1, -2: cls.MINUS2}[int(chi)]
        except KeyError:
            raise ValueError(f"no Hopf phase with chi={chi}") from None


@dataclass(frozen=True)
class MomentumGrid:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"grid size must be an integer >= 2, got {self.n}")

    @property
    def axis(self) -> np.ndarray:
        return 2.0 * np.pi * np.arange(self.n) / self.n

    def mesh(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        a = self.axis
        return np.meshgrid(a, a, a, indexing="ij")


@dataclass(frozen=True, eq=False)
class BlochField:
    """Bloch vectors on an ``n^3`` momentum grid.

    ``data`` has shape ``(n, n, n, 3)``; ``h`` records the Hamiltonian
    parameter for legitimate samples and is ``None`` otherwise.
    """

    data: np.ndarray
    h: float | None = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 4 or data.shape[3] != 3 or not (data.shape[0] == data.shape[1] == data.shape[2]):
            raise ValueError(f"field data must have shape (n, n, n, 3), got {data.shape}")
        data = data.copy()
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def n(self) -> int:
        return self.data.shape[0]

    @property
    def grid(self) -> MomentumGrid:
        return MomentumGrid(self.n)

    def norms(self) -> np.ndarray:
        return np.linalg.norm(self.data, axis=-1)

    def is_pure(self, tol: float = 1e-9) -> bool:
        return bool(np.all(np.abs(self.norms() - 1.0) <= tol))

    def flat(self) -> np.ndarray:
        return self.data.reshape(-1)

    @classmethod
    def from_flat(cls, n: int, flat: Sequence[float], h: float | None = None) -> "BlochField":
        arr = np.asarray(flat, dtype=np.float64)
        if arr.size != 3 * n**3:
            raise ValueError(f"expected {3 * n**3} values for n={n}, got {arr.size}")
        return cls(arr.reshape(n, n, n, 3), h)

    def __eq__(self, other):
        if not isinstance(other, BlochField):
            return NotImplemented
        return self.h == other.h and np.array_equal(self.data, other.data)

    __hash__ = None


@dataclass(frozen=True, eq=False)
class LabeledSample:
    field: BlochField
    h: float
    label: PhaseLabel = field(default=None)

    def __post_init__(self):
        if self.label is None:
            object.__setattr__(self, "label", label_of(self.h))


def hamiltonian_coefficients(k, h: float) -> np.ndarray:
    """Return ``u(k)`` for one momentum or a stack of momenta.

    ``k`` has trailing dimension 3; the result has the same shape.
    """
    k = np.asarray(k, dtype=np.float64)
    kx, ky, kz = k[..., 0], k[..., 1], k[..., 2]
    sx, sy, sz = np.sin(kx), np.sin(ky), np.sin(kz)
    c = np.cos(kx) + np.cos(ky) + np.cos(kz) + h
    ux = 2.0 * (sx * sz + c * sy)
    uy = 2.0 * (c * sx - sy * sz)
    uz = sx**2 + sy**2 - sz**2 - c**2
    return np.stack([ux, uy, uz], axis=-1)


def ground_bloch(u, threshold: float = GAP_THRESHOLD) -> np.ndarray:
    """Spin expectation ``-u/|u|`` of the ground state of ``u . sigma``."""
    u = np.asarray(u, dtype=np.float64)
    norm = np.linalg.norm(u, axis=-1, keepdims=True)
    if np.any(norm <= threshold):
        raise GapClosure(f"|u| <= {threshold}: band touching, ground state undefined")
    return -u / norm


def sample_field(grid: MomentumGrid | int, h: float) -> BlochField:
    """Exact ground-state Bloch field for parameter ``h`` on ``grid``."""
    if not isinstance(grid, MomentumGrid):
        grid = MomentumGrid(int(grid))
    k = np.stack(grid.mesh(), axis=-1)
    u = hamiltonian_coefficients(k, h)
    norm = np.linalg.norm(u, axis=-1)
    bad = np.argwhere(norm <= GAP_THRESHOLD)
    if bad.size:
        ix, iy, iz = (int(v) for v in bad[0])
        raise GapClosure(f"gap closes at grid index ({ix}, {iy}, {iz}) for h={h}")
    return BlochField(-u / norm[..., None], float(h))


def label_of(h: float) -> PhaseLabel:
    a = abs(h)
    if a == 1.0 or a == 3.0:
        raise PhaseBoundary(f"|h|={a} is a phase boundary")
    if a < 1.0:
        return PhaseLabel.MINUS2
    if a < 3.0:
        return PhaseLabel.PLUS1
    return PhaseLabel.TRIVIAL


def _excluded(h: np.ndarray, exclusions) -> np.ndarray:
    mask = np.zeros(h.shape, dtype=bool)
    for lo, hi in exclusions:
        mask |= (h >= lo) & (h <= hi)
    for b in (1.0, 3.0):
        mask |= np.abs(np.abs(h) - b) < BOUNDARY_GUARD
    return mask


def _covered(h_range, exclusions) -> bool:
    lo, hi = h_range
    cursor = lo
    for a, b in sorted(exclusions):
        if a > cursor:
            return False
        cursor = max(cursor, b)
        if cursor >= hi:
            return True
    return cursor >= hi


def draw_h_values(count: int, h_range=(-5.0, 5.0), exclusions=PAPER_EXCLUSIONS, seed: int = 0) -> np.ndarray:
    """Uniform draws on ``h_range`` with excluded windows removed, in draw order."""
    if count <= 0:
        raise ValueError("count must be positive")
    lo, hi = h_range
    if not lo < hi:
        raise ValueError(f"empty h range {h_range}")
    if _covered(h_range, exclusions):
        raise EmptyRange(f"exclusions {list(exclusions)} cover the whole range {h_range}")
    rng = np.random.default_rng(seed)
    h = rng.uniform(lo, hi, size=count)
    return h[~_excluded(h, exclusions)]


def generate_dataset(
    count: int = 5000,
    h_range=(-5.0, 5.0),
    exclusions=PAPER_EXCLUSIONS,
    split=PAPER_SPLIT,
    seed: int = PAPER_DATASET_SEED,
    n: int = 10,
) -> tuple[list[LabeledSample], list[LabeledSample], list[LabeledSample]]:
    """Draw, filter, label and split samples.

    ``split`` is either three fractions summing to 1 or three sizes. Sizes
    must not exceed the number of survivors; any surplus is dropped after the
    seeded shuffle.
    """
    h = draw_h_values(count, h_range, exclusions, seed)
    rng = np.random.default_rng([seed, 1])
    h = h[rng.permutation(h.size)]
    sizes = _split_sizes(split, h.size)
    grid = MomentumGrid(n)
    out = []
    start = 0
    for size in sizes:
        chunk = h[start : start + size]
        out.append([LabeledSample(sample_field(grid, float(v)), float(v)) for v in chunk])
        start += size
    return out[0], out[1], out[2]


def _split_sizes(split, available: int) -> tuple[int, int, int]:
    split = tuple(split)
    if len(split) != 3:
        raise ValueError("split needs exactly three entries (train, val, test)")
    if all(isinstance(s, (int, np.integer)) for s in split):
        sizes = tuple(int(s) for s in split)
        if any(s < 0 for s in sizes):
            raise ValueError("split sizes must be non-negative")
        if sum(sizes) > available:
            raise ValueError(f"split sizes {sizes} need {sum(sizes)} samples, only {available} survive exclusion")
        return sizes
    fractions = np.asarray(split, dtype=float)
    if np.any(fractions < 0) or abs(fractions.sum() - 1.0) > 1e-9:
        raise ValueError("split fractions must be non-negative and sum to 1")
    n_train = int(round(fractions[0] * available))
    n_val = int(round(fractions[1] * available))
    return n_train, n_val, available - n_train - n_val


def stack_fields(samples: Sequence[LabeledSample]) -> tuple[np.ndarray, np.ndarray]:
    """Stack samples into ``(N, n, n, n, 3)`` inputs and ``(N,)`` class indices."""
    if not samples:
        return np.zeros((0, 0, 0, 0, 3)), np.zeros(0, dtype=np.int64)
    x = np.stack([s.field.data for s in samples])
    y = np.array([int(s.label) for s in samples], dtype=np.int64)
    return x, y
