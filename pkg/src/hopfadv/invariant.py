"""Lattice Hopf index of a Bloch field.

Pipeline: Bloch vectors -> gauge-fixed spinors -> U(1) links -> plaquette
Berry curvature ``F`` -> Coulomb-gauge connection ``A`` (spectral inversion
of ``curl A = F``) -> ``chi = -sum_J F(k_J) . A(k_J)``.

Lengths are measured in grid steps, so ``F`` is flux per plaquette over
``2 pi`` and the plain sum over sites replaces the Brillouin-zone integral
without any volume factor.

``F_mu`` physically lives at the centre of its plaquette, half a step along
both in-plane axes from the base point. With ``staggered=True`` (default) the
spectral solve shifts every component to its true position before taking the
curl inverse and samples ``A_mu`` back at the position of ``F_mu``; this
removes the dominant discretization error (h=0.5 on 10^3: -1.93 instead of
-1.77). ``staggered=False`` pairs everything at base points.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import BranchAmbiguity, NetFlux, OrthogonalNeighbors
from .hopf import BlochField, MomentumGrid, sample_field

OVERLAP_TOL = 1e-12
BRANCH_TOL = 1e-9
NET_FLUX_TOL = 1e-8


# Offset of F_mu (and of the matching A_mu) from its base grid point.
STAGGER = np.array([[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]])


@dataclass(frozen=True)
class CurvatureField:
    """Berry curvature per plaquette, shape ``(n, n, n, 3)``, in units of 2 pi."""

    F: np.ndarray

    @property
    def grid(self) -> MomentumGrid:
        return MomentumGrid(self.F.shape[0])

    def layer_chern_numbers(self) -> np.ndarray:
        """Flux of ``F_mu`` through every plane orthogonal to axis ``mu``.

        Returns an array of shape ``(3, n)``.
        """
        out = []
        for mu in range(3):
            axes = tuple(a for a in range(3) if a != mu)
            out.append(self.F[..., mu].sum(axis=axes))
        return np.array(out)


@dataclass(frozen=True)
class ConnectionField:
    """Coulomb-gauge connection; ``A[..., mu]`` is sampled where ``F[..., mu]`` lives
    when ``staggered`` is set, otherwise at the base points."""

    A: np.ndarray
    staggered: bool = True

    @property
    def grid(self) -> MomentumGrid:
        return MomentumGrid(self.A.shape[0])


@dataclass(frozen=True)
class HopfIndexResult:
    chi: float
    rounded: int
    residual: float

    def to_dict(self) -> dict:
        return {"chi": self.chi, "rounded": self.rounded, "residual": self.residual}


def spinor_of_bloch(s) -> np.ndarray:
    """Two-component state with spin expectation ``s``.

    Gauge: first amplitude real and non-negative; where it vanishes (south
    pole) the second amplitude is real and non-negative instead. Works on
    stacks of vectors (trailing dimension 3 -> 2).
    """
    s = np.asarray(s, dtype=np.float64)
    s = s / np.linalg.norm(s, axis=-1, keepdims=True)
    x, y, z = s[..., 0], s[..., 1], s[..., 2]
    r = np.hypot(x, y)
    # 1 + z and 1 - z both come from r^2 on the far hemisphere, avoiding cancellation near the poles
    with np.errstate(divide="ignore", invalid="ignore"):
        one_plus = np.where(z >= 0, 1.0 + z, r * r / (1.0 - z))
        one_minus = np.where(z >= 0, r * r / (1.0 + z), 1.0 - z)
        phase = np.where(r > 0, (x + 1j * y) / np.where(r > 0, r, 1.0), 1.0 + 0j)
    a = np.sqrt(one_plus / 2.0)
    south = a < OVERLAP_TOL
    b = np.where(south, 1.0 + 0j, phase * np.sqrt(one_minus / 2.0))
    a = np.where(south, 0.0, a)
    return np.stack([a.astype(np.complex128), b], axis=-1)


def _states(field) -> np.ndarray:
    if isinstance(field, BlochField):
        return spinor_of_bloch(field.data)
    arr = np.asarray(field)
    if np.iscomplexobj(arr) and arr.shape[-1] == 2:
        return arr
    return spinor_of_bloch(arr)


def link_field(field, axis: int) -> np.ndarray:
    """All U(1) links along ``axis``: ``<psi(J)|psi(J + e_axis)>`` normalized."""
    psi = _states(field)
    nxt = np.roll(psi, -1, axis=axis)
    overlap = np.sum(psi.conj() * nxt, axis=-1)
    mag = np.abs(overlap)
    if np.any(mag <= OVERLAP_TOL):
        idx = tuple(int(v) for v in np.argwhere(mag <= OVERLAP_TOL)[0])
        raise OrthogonalNeighbors(f"orthogonal neighbours at {idx} along axis {axis}; grid too coarse")
    return overlap / mag


def u1_link(field, J, axis: int) -> complex:
    psi = _states(field)
    n = psi.shape[0]
    J = tuple(int(j) % n for j in J)
    K = list(J)
    K[axis] = (K[axis] + 1) % n
    overlap = np.vdot(psi[J], psi[tuple(K)])
    if abs(overlap) <= OVERLAP_TOL:
        raise OrthogonalNeighbors(f"orthogonal neighbours at {J} along axis {axis}; grid too coarse")
    return complex(overlap / abs(overlap))


def berry_curvature(field) -> CurvatureField:
    """Gauge-invariant plaquette curvature, assigned to the plaquette base point.

    ``F_mu(J) = arg[U_nu(J) U_tau(J+nu) U_nu(J+tau)^* U_tau(J)^*] / 2 pi``
    for cyclic ``(mu, nu, tau)``.
    """
    U = [link_field(field, a) for a in range(3)]
    F = np.empty(U[0].shape + (3,))
    for mu in range(3):
        nu, tau = (mu + 1) % 3, (mu + 2) % 3
        loop = U[nu] * np.roll(U[tau], -1, axis=nu) * np.roll(U[nu], -1, axis=tau).conj() * U[tau].conj()
        phase = np.angle(loop)
        if np.any(np.pi - np.abs(phase) < BRANCH_TOL):
            idx = tuple(int(v) for v in np.argwhere(np.pi - np.abs(phase) < BRANCH_TOL)[0])
            raise BranchAmbiguity(f"plaquette phase at {idx} (mu={mu}) is within {BRANCH_TOL} of pi")
        F[..., mu] = phase / (2.0 * np.pi)
    return CurvatureField(F)


def wavevectors(n: int) -> np.ndarray:
    """Angular frequencies ``2 pi m / n`` per grid step, in FFT order, shape ``(n, n, n, 3)``."""
    q1 = 2.0 * np.pi * np.fft.fftfreq(n)
    return np.stack(np.meshgrid(q1, q1, q1, indexing="ij"), axis=-1)


def _shift_phases(q: np.ndarray, staggered: bool) -> np.ndarray:
    if not staggered:
        return np.ones(q.shape[:-1] + (3,), dtype=np.complex128)
    return np.exp(1j * np.einsum("...i,mi->...m", q, STAGGER))


def coulomb_connection(curvature: CurvatureField, staggered: bool = True, tol: float = NET_FLUX_TOL,
                       net_flux: str = "raise") -> ConnectionField:
    """Solve ``curl A = F`` with ``div A = 0`` and zero mean, spectrally.

    ``A(q) = i q x F(q) / |q|^2`` for ``q != 0`` and ``A(0) = 0``, with
    ``q = 2 pi m / n`` per grid step. A net flux has no periodic potential:
    ``net_flux="raise"`` rejects it, ``"drop"`` solves for the flux-free
    remainder (a diagnostic only; the result is then not a topological index).
    """
    if net_flux not in ("raise", "drop"):
        raise ValueError(f"net_flux must be 'raise' or 'drop', got {net_flux!r}")
    F = curvature.F
    n = F.shape[0]
    net = F.sum(axis=(0, 1, 2))
    if net_flux == "raise" and np.any(np.abs(net) > tol):
        raise NetFlux(f"curvature has net flux {net.tolist()}; no periodic connection exists "
                      "(a defect in the field, or a grid too coarse near a gap closing)")
    q = wavevectors(n)
    shift = _shift_phases(q, staggered)
    Fh = np.fft.fftn(F, axes=(0, 1, 2)) / shift
    q2 = np.sum(q * q, axis=-1)
    q2[0, 0, 0] = 1.0
    Ah = 1j * np.cross(q, Fh) / q2[..., None]
    Ah[0, 0, 0] = 0.0
    if n % 2 == 0:
        # i*q is not Hermitian-symmetric on the Nyquist planes; dropping them
        # keeps A exactly real and divergence-free (chi moves by < 1e-4).
        m = n // 2
        Ah[m], Ah[:, m], Ah[:, :, m] = 0.0, 0.0, 0.0
    A = np.fft.ifftn(Ah * shift, axes=(0, 1, 2))
    return ConnectionField(A.real.copy(), staggered)


def _true_frame(values: np.ndarray, staggered: bool) -> np.ndarray:
    q = wavevectors(values.shape[0])
    return np.fft.fftn(values, axes=(0, 1, 2)) / _shift_phases(q, staggered)


def spectral_divergence(connection: ConnectionField) -> np.ndarray:
    """``q . A(q)`` for every frequency; zero for a Coulomb-gauge connection."""
    Ah = _true_frame(connection.A, connection.staggered)
    return np.sum(wavevectors(connection.A.shape[0]) * Ah, axis=-1)


def spectral_curl(connection: ConnectionField) -> np.ndarray:
    """Curl of ``A`` sampled at the same positions as the curvature components."""
    Ah = _true_frame(connection.A, connection.staggered)
    q = wavevectors(connection.A.shape[0])
    shift = _shift_phases(q, connection.staggered)
    return np.fft.ifftn(1j * np.cross(q, Ah) * shift, axes=(0, 1, 2)).real


def hopf_index(field, staggered: bool = True, net_flux: str = "raise") -> HopfIndexResult:
    """``chi = -sum F . A``; see :func:`coulomb_connection` for ``net_flux``."""
    F = berry_curvature(field)
    A = coulomb_connection(F, staggered=staggered, net_flux=net_flux)
    chi = -float(np.sum(F.F * A.A))
    rounded = int(np.rint(chi))
    return HopfIndexResult(chi, rounded, abs(chi - rounded))


def hopf_index_of_h(h: float, n: int = 10, staggered: bool = True) -> HopfIndexResult:
    return hopf_index(sample_field(n, h), staggered=staggered)
