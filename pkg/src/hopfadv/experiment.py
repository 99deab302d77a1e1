"""Software stand-in for the NV-center experiment.

State preparation by adiabatic passage, Poissonian tomography counts, and
maximum-likelihood reconstruction on the Cholesky (T-matrix) parametrization.

Units: time in ns, angular frequency in rad/ns. Qubit basis ``(|0>, |-1>)``;
Bloch ``z = +1`` is ``|0>``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq, minimize

from .errors import DegenerateAxis, NoTermination, OptimFailure
from .hopf import BlochField, hamiltonian_coefficients

TWO_PI = 2.0 * np.pi
DEGENERATE_TOL = 1e-18
Q_INFINITE = 1e300

# Tomography settings Z, +X, +Y, -X: measured Bloch axis per basis.
BASIS_AXES = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [-1.0, 0.0, 0.0]])
BASIS_NAMES = ("Z", "+X", "+Y", "-X")

PAPER_REPETITIONS = 750_000
PAPER_PHOTONS = 3.9e4
READOUT_CONTRAST = 0.3
# Per-shot bright rate such that an unpolarized setting yields PAPER_PHOTONS.
BRIGHT_RATE = PAPER_PHOTONS / (PAPER_REPETITIONS * (1.0 - READOUT_CONTRAST / 2.0))
DARK_RATE = BRIGHT_RATE * (1.0 - READOUT_CONTRAST)

SX = 0.5 * np.array([[0, 1], [1, 0]], dtype=np.complex128)
SY = 0.5 * np.array([[0, -1j], [1j, 0]], dtype=np.complex128)
SZ = np.array([[0, 0], [0, -1]], dtype=np.complex128)


@dataclass(frozen=True)
class QubitState:
    bloch: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.bloch, dtype=np.float64).reshape(3)
        if np.linalg.norm(r) > 1.0 + 1e-9:
            raise ValueError(f"Bloch vector {r} lies outside the unit ball")
        object.__setattr__(self, "bloch", r)

    @property
    def rho(self) -> np.ndarray:
        x, y, z = self.bloch
        return 0.5 * np.array([[1 + z, x - 1j * y], [x + 1j * y, 1 - z]])

    @classmethod
    def from_vector(cls, psi) -> "QubitState":
        return cls(bloch_of_spinor(psi))


def bloch_of_spinor(psi) -> np.ndarray:
    psi = np.asarray(psi, dtype=np.complex128)
    a, b = psi[..., 0], psi[..., 1]
    norm = np.abs(a) ** 2 + np.abs(b) ** 2
    cross = np.conj(a) * b
    return np.stack([2 * cross.real, 2 * cross.imag, np.abs(a) ** 2 - np.abs(b) ** 2], axis=-1) / norm[..., None]


def fidelity(a, b) -> float | np.ndarray:
    """Uhlmann fidelity of qubit states given as Bloch vectors (or QubitState).

    ``F = (1 + ra.rb + sqrt((1 - |ra|^2)(1 - |rb|^2))) / 2``; vectorized over
    leading axes.
    """
    ra = a.bloch if isinstance(a, QubitState) else np.asarray(a, dtype=np.float64)
    rb = b.bloch if isinstance(b, QubitState) else np.asarray(b, dtype=np.float64)
    pa = np.clip(1.0 - np.sum(ra * ra, axis=-1), 0.0, None)
    pb = np.clip(1.0 - np.sum(rb * rb, axis=-1), 0.0, None)
    f = 0.5 * (1.0 + np.sum(ra * rb, axis=-1) + np.sqrt(pa * pb))
    f = np.clip(f, 0.0, 1.0)
    return float(f) if np.ndim(f) == 0 else f


# ---------------------------------------------------------------- passage


@dataclass(frozen=True)
class PassageSchedule:
    """Triangular Rabi ramp and linear detuning sweep."""

    omega_max: float = TWO_PI * 7.81e-3
    delta_max: float = TWO_PI * 10e-3
    total_time: float = 1500.0
    dt: float = 0.5

    def __post_init__(self):
        if min(self.omega_max, self.delta_max, self.total_time, self.dt) <= 0:
            raise ValueError("schedule parameters must be positive")

    def omega(self, t):
        t = np.asarray(t, dtype=np.float64)
        T = self.total_time
        return np.where(t <= T / 2, 2 * self.omega_max * t / T, 2 * self.omega_max * (1 - t / T))

    def delta(self, t):
        t = np.asarray(t, dtype=np.float64)
        return self.delta_max - 2 * self.delta_max * t / self.total_time

    def omega_dot(self, t):
        t = np.asarray(t, dtype=np.float64)
        rate = 2 * self.omega_max / self.total_time
        return np.where(t <= self.total_time / 2, rate, -rate)

    def delta_dot(self, t):
        return np.full(np.shape(t), -2 * self.delta_max / self.total_time)


@dataclass(frozen=True)
class ConstantDrive:
    """Fixed Rabi frequency and detuning (no sweep); useful as a reference."""

    omega0: float
    delta0: float
    total_time: float = 1500.0
    dt: float = 0.5

    def omega(self, t):
        return np.full(np.shape(t), self.omega0)

    def delta(self, t):
        return np.full(np.shape(t), self.delta0)

    def omega_dot(self, t):
        return np.zeros(np.shape(t))

    def delta_dot(self, t):
        return np.zeros(np.shape(t))


def q_factor(schedule, t) -> tuple[np.ndarray, np.ndarray]:
    """Adiabaticity factor ``2 (dw^2 + W^2)^(3/2) / |W' dw - W dw'|``.

    Returns ``(Q, infinite)``; where the denominator vanishes ``Q`` holds the
    sentinel ``Q_INFINITE`` and ``infinite`` is True.
    """
    W, D = schedule.omega(t), schedule.delta(t)
    Wd, Dd = schedule.omega_dot(t), schedule.delta_dot(t)
    num = 2.0 * (D * D + W * W) ** 1.5
    den = np.abs(Wd * D - W * Dd)
    infinite = den == 0.0
    q = np.where(infinite, Q_INFINITE, num / np.where(infinite, 1.0, den))
    return q, infinite


def q_min(schedule, t_end: float | None = None, samples: int | None = None) -> float:
    t_end = schedule.total_time if t_end is None else t_end
    samples = samples or max(int(np.ceil(t_end / schedule.dt)) + 1, 2)
    q, _ = q_factor(schedule, np.linspace(0.0, t_end, samples))
    return float(q.min())


def target_direction(u) -> np.ndarray:
    """Bloch vector of the ground state of ``u . sigma``."""
    u = np.asarray(u, dtype=np.float64)
    return -u / np.linalg.norm(u, axis=-1, keepdims=True)


def drive_phase(d) -> np.ndarray:
    """Microwave phase steering the transverse field along ``d``."""
    d = np.asarray(d, dtype=np.float64)
    return -np.arctan2(d[..., 1], d[..., 0])


def termination_time(schedule: PassageSchedule, d) -> float:
    """First ``t`` with ``delta(t)/omega(t) = d_z / sqrt(d_x^2 + d_y^2)``."""
    rho = float(np.hypot(d[0], d[1]))
    if rho * rho <= DEGENERATE_TOL:
        raise DegenerateAxis("target direction is along z; the termination ratio is undefined")

    def g(t):
        return float(schedule.delta(t) * rho - d[2] * schedule.omega(t))

    T = schedule.total_time
    if g(0.0) == 0.0:
        return 0.0
    if np.sign(g(0.0)) == np.sign(g(T)):
        raise NoTermination(f"ratio {d[2] / rho} is never reached within {T} ns")
    return brentq(g, 0.0, T, xtol=1e-12, rtol=1e-15)


def _hamiltonian(schedule, t, phi):
    """Batched ``H(t)`` as ``(..., 2, 2)`` arrays for phases ``phi``."""
    W = schedule.omega(t)[..., None, None]
    D = schedule.delta(t)[..., None, None]
    c = np.cos(phi)[..., None, None]
    s = np.sin(phi)[..., None, None]
    return W * (SX * c - SY * s) + D * SZ


def _expm_herm(M: np.ndarray, h: np.ndarray) -> np.ndarray:
    """``exp(-i h M)`` for Hermitian 2x2 ``M`` in closed form."""
    a0 = 0.5 * (M[..., 0, 0] + M[..., 1, 1]).real
    ax = M[..., 0, 1].real
    ay = -M[..., 0, 1].imag
    az = 0.5 * (M[..., 0, 0] - M[..., 1, 1]).real
    norm = np.sqrt(ax * ax + ay * ay + az * az)
    theta = h * norm
    sinc = np.where(norm > 0, np.sin(theta) / np.where(norm > 0, norm, 1.0), h)
    cos = np.cos(theta)
    U = np.empty(M.shape, dtype=np.complex128)
    U[..., 0, 0] = cos - 1j * sinc * az
    U[..., 1, 1] = cos + 1j * sinc * az
    U[..., 0, 1] = -1j * sinc * (ax - 1j * ay)
    U[..., 1, 0] = -1j * sinc * (ax + 1j * ay)
    return U * np.exp(-1j * h * a0)[..., None, None]


_GL = np.sqrt(3.0) / 6.0


def _magnus4_step(schedule, t, h, phi):
    """Fourth-order Magnus propagator over ``[t, t + h]`` (exactly unitary)."""
    H1 = _hamiltonian(schedule, t + (0.5 - _GL) * h, phi)
    H2 = _hamiltonian(schedule, t + (0.5 + _GL) * h, phi)
    comm = H1 @ H2 - H2 @ H1
    # exp(Omega) with Omega = -i h (H1+H2)/2 + (sqrt3/12) h^2 [H1, H2]
    hh = h[..., None, None]
    M = 0.5 * (H1 + H2) + 1j * (np.sqrt(3.0) / 12.0) * hh * comm
    return _expm_herm(M, h)


def _rk4_step(schedule, t, h, phi, psi):
    def f(tt, y):
        return -1j * np.einsum("...ij,...j->...i", _hamiltonian(schedule, tt, phi), y)

    hh = h[..., None]
    k1 = f(t, psi)
    k2 = f(t + h / 2, psi + hh / 2 * k1)
    k3 = f(t + h / 2, psi + hh / 2 * k2)
    k4 = f(t + h, psi + hh * k3)
    return psi + hh / 6 * (k1 + 2 * k2 + 2 * k3 + k4)


def _evolve(schedule, t_end: np.ndarray, phi: np.ndarray, method: str = "rk4", track_norm: bool = False):
    """Evolve ``|0>`` for every site up to its own ``t_end`` on a shared step grid."""
    t_end = np.asarray(t_end, dtype=np.float64)
    phi = np.asarray(phi, dtype=np.float64)
    psi = np.zeros(t_end.shape + (2,), dtype=np.complex128)
    psi[..., 0] = 1.0
    steps = int(np.ceil(t_end.max() / schedule.dt)) if t_end.size else 0
    worst = 0.0
    for i in range(steps):
        t = i * schedule.dt
        h = np.clip(t_end - t, 0.0, schedule.dt)
        tt = np.full(t_end.shape, t)
        if method == "magnus4":
            U = _magnus4_step(schedule, tt, h, phi)
            psi = np.einsum("...ij,...j->...i", U, psi)
        elif method == "rk4":
            psi = _rk4_step(schedule, tt, h, phi, psi)
        else:
            raise ValueError(f"unknown integrator {method!r}")
        if track_norm:
            worst = max(worst, float(np.max(np.abs(np.sum(np.abs(psi) ** 2, axis=-1) - 1.0))))
    return psi, worst


@dataclass
class Preparation:
    state: QubitState
    t_c: float | None
    q_min: float | None
    exact: bool = False


def adiabatic_evolve(k, h: float, schedule: PassageSchedule = PassageSchedule(), method: str = "rk4") -> QubitState:
    """Prepare the ground state of ``u(k) . sigma`` by adiabatic passage from ``|0>``.

    Raises :class:`DegenerateAxis` when ``u_x = u_y = 0``.
    """
    return prepare(k, h, schedule, method, bypass_degenerate=False).state


def prepare(k, h: float, schedule: PassageSchedule = PassageSchedule(), method: str = "rk4",
            bypass_degenerate: bool = True) -> Preparation:
    u = hamiltonian_coefficients(k, h)
    d = target_direction(u)
    if u[0] ** 2 + u[1] ** 2 <= DEGENERATE_TOL:
        if not bypass_degenerate:
            raise DegenerateAxis(f"u_x = u_y = 0 at k={tuple(np.asarray(k))}; the passage is undefined")
        return Preparation(QubitState(np.array([0.0, 0.0, np.sign(d[2])])), None, None, exact=True)
    t_c = termination_time(schedule, d)
    psi, _ = _evolve(schedule, np.array([t_c]), np.array([drive_phase(d)]), method)
    return Preparation(QubitState(bloch_of_spinor(psi[0])), t_c, q_min(schedule, t_c))


@dataclass
class FieldPreparation:
    field: BlochField
    t_c: np.ndarray
    q_min: np.ndarray
    exact: np.ndarray
    fidelity: np.ndarray


def prepare_field(target: BlochField, schedule: PassageSchedule = PassageSchedule(), method: str = "rk4") -> FieldPreparation:
    """Prepare every site of ``target`` (unit Bloch vectors) by adiabatic passage.

    Sites whose target lies on the z axis are set exactly and flagged.
    """
    d = target.data / np.linalg.norm(target.data, axis=-1, keepdims=True)
    flat = d.reshape(-1, 3)
    exact = flat[:, 0] ** 2 + flat[:, 1] ** 2 <= DEGENERATE_TOL
    t_c = np.full(len(flat), np.nan)
    qm = np.full(len(flat), np.nan)
    for i in np.flatnonzero(~exact):
        t_c[i] = termination_time(schedule, flat[i])
        qm[i] = q_min(schedule, t_c[i])
    out = np.empty_like(flat)
    live = ~exact
    psi, _ = _evolve(schedule, t_c[live], drive_phase(flat[live]), method)
    out[live] = bloch_of_spinor(psi)
    out[exact] = np.stack([np.zeros(exact.sum()), np.zeros(exact.sum()), np.sign(flat[exact, 2])], axis=-1)
    prepared = out.reshape(d.shape)
    return FieldPreparation(BlochField(prepared, target.h), t_c.reshape(d.shape[:3]), qm.reshape(d.shape[:3]),
                            exact.reshape(d.shape[:3]), fidelity(prepared, d))


# ---------------------------------------------------------------- tomography


@dataclass(frozen=True)
class CountRecord:
    counts: np.ndarray
    n0: float
    n1: float
    repetitions: int = PAPER_REPETITIONS

    def __post_init__(self):
        if not self.n0 > self.n1 > 0:
            raise ValueError("calibration needs N0 > N-1 > 0")
        object.__setattr__(self, "counts", np.asarray(self.counts, dtype=np.float64))


def calibration(repetitions: int = PAPER_REPETITIONS) -> tuple[float, float]:
    """Default expected bright/dark counts per setting for ``repetitions`` shots."""
    return BRIGHT_RATE * repetitions, DARK_RATE * repetitions


def expected_counts(bloch, n0: float, n1: float) -> np.ndarray:
    """``N0 p0 + N1 (1 - p0)`` per basis; trailing axis of the result has length 4."""
    r = np.asarray(bloch, dtype=np.float64)
    p0 = 0.5 * (1.0 + r @ BASIS_AXES.T)
    return n0 * p0 + n1 * (1.0 - p0)


def simulate_counts(state, repetitions: int = PAPER_REPETITIONS, n0: float | None = None, n1: float | None = None,
                    seed=None, noise: bool = True) -> CountRecord:
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    r = state.bloch if isinstance(state, QubitState) else np.asarray(state, dtype=np.float64)
    d0, d1 = calibration(repetitions)
    n0 = d0 if n0 is None else n0
    n1 = d1 if n1 is None else n1
    mean = expected_counts(r, n0, n1)
    counts = np.random.default_rng(seed).poisson(mean).astype(np.float64) if noise else mean
    return CountRecord(counts, n0, n1, repetitions)


def bloch_of_t(t) -> np.ndarray:
    """Bloch vector of ``rho = T^dag T / tr`` with ``T = [[t1, 0], [t2 + i t3, t4]]``."""
    t1, t2, t3, t4 = t
    T = np.array([[t1, 0.0], [t2 + 1j * t3, t4]])
    rho = T.conj().T @ T
    rho = rho / np.trace(rho).real
    return np.array([2 * rho[0, 1].real, -2 * rho[0, 1].imag, (rho[0, 0] - rho[1, 1]).real])


def t_of_bloch(r) -> np.ndarray:
    """A T-matrix parameter vector reproducing ``r`` (used for warm starts)."""
    x, y, z = r
    # rho = T^dag T: rho11 = t4^2, rho01 = (t2 - i t3) t4, rho00 = t1^2 + t2^2 + t3^2
    r11 = max((1 - z) / 2, 1e-12)
    t4 = np.sqrt(r11)
    rho01 = (x - 1j * y) / 2
    t2, t3 = rho01.real / t4, -rho01.imag / t4
    t1 = np.sqrt(max((1 + z) / 2 - t2 * t2 - t3 * t3, 0.0))
    return np.array([t1, t2, t3, t4])


def likelihood_cost(r, counts: CountRecord) -> float:
    nbar = expected_counts(r, counts.n0, counts.n1)
    return float(np.sum((nbar - counts.counts) ** 2 / (2.0 * nbar)))


def mle_reconstruct(counts: CountRecord, starts: int = 8, seed: int = 0, tol: float = 1e-10) -> QubitState:
    """Minimize the Gaussian-likelihood cost over the T-matrix parameters.

    Nelder-Mead from ``starts`` seeded random points; the best converged
    optimum wins.
    """
    rng = np.random.default_rng(seed)
    # costs are O(1e4) counts^2; rescale so the simplex tolerance is meaningful
    scale = 1.0 / max(counts.n0 - counts.n1, 1.0)

    def cost(t):
        if not np.any(t):
            return np.inf
        return likelihood_cost(bloch_of_t(t), counts) * scale

    best = None
    for _ in range(starts):
        x0 = rng.normal(size=4)
        res = minimize(cost, x0, method="Nelder-Mead",
                       options={"xatol": tol, "fatol": tol * 1e-3, "maxiter": 20000, "maxfev": 40000})
        if res.success and (best is None or res.fun < best.fun):
            best = res
    if best is None:
        raise OptimFailure("no Nelder-Mead start converged")
    return QubitState(_clip_ball(bloch_of_t(best.x)))


def _clip_ball(r: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(r, axis=-1, keepdims=True)
    return np.where(n > 1.0, r / n, r)


def mle_reconstruct_many(counts: np.ndarray, n0: float, n1: float, iters: int = 400) -> np.ndarray:
    """Batched MLE for count arrays of shape ``(..., 4)``.

    The cost is convex in the Bloch vector and the T-matrix map covers the
    closed ball exactly, so projected gradient descent on the ball reaches
    the same optimum as :func:`mle_reconstruct`.
    """
    counts = np.asarray(counts, dtype=np.float64)
    shape = counts.shape[:-1]
    n = counts.reshape(-1, 4)
    c, d = 0.5 * (n0 + n1), 0.5 * (n0 - n1)
    # linear-inversion start
    r = np.stack([(n[:, 1] - n[:, 3]) / (4 * d), (n[:, 2] - c) / d, (n[:, 0] - c) / d], axis=-1)
    r = _clip_ball(r)
    # curvature bound of f(m) = (m - n)^2 / (2m) on m >= n1; sum_b b b^T has norm 2
    lip = 2.0 * d * d * np.max(n * n, axis=1) / n1**3
    step = (1.0 / lip)[:, None]
    for _ in range(iters):
        m = c + d * (r @ BASIS_AXES.T)
        fprime = 0.5 * (1.0 - (n / m) ** 2)
        grad = d * (fprime @ BASIS_AXES)
        r = _clip_ball(r - step * grad)
    return r.reshape(shape + (3,))


@dataclass
class Reconstruction:
    field: BlochField
    fidelity: np.ndarray
    counts: np.ndarray = field(repr=False)

    @property
    def mean_fidelity(self) -> float:
        return float(self.fidelity.mean())


def tomography_round_trip(target: BlochField, repetitions: int = PAPER_REPETITIONS, seed=0,
                          noise: bool = True) -> Reconstruction:
    """Counts with shot noise at every site, then per-site MLE."""
    n0, n1 = calibration(repetitions)
    mean = expected_counts(target.data, n0, n1)
    rng = np.random.default_rng(seed)
    counts = rng.poisson(mean).astype(np.float64) if noise else mean
    r = mle_reconstruct_many(counts, n0, n1)
    return Reconstruction(BlochField(r, target.h), fidelity(r, target.data), counts)
