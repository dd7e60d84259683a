"""Extended HEOM for a spin coupled through sigma_z to a fitted bath.

Each ADO is a 2x2 block. The generator couples a label to itself (system
term and closure mixing), to labels one order below (down-couplings weighted
by occupation times phi(0)) and one order above (up-couplings weighted by the
fit coefficients). Labels above H are dropped.

The couplings are stored as three sparse ADO-by-ADO link tables, one per
superoperator acting on the linked block (identity, -i[sigma_z, .] and
{sigma_z, .}), and applied matrix-free to the block array.
"""
from __future__ import annotations

import json
import math
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .decomp import CorrelationFit
from .errors import DivergenceError, SBHeomError
from .hierarchy import HierarchySpace

SIGMA_X = np.array([[0, 1], [1, 0]], dtype=complex)
SIGMA_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
SIGMA_Z = np.array([[1, 0], [0, -1]], dtype=complex)

DENSITY = "density"
QUASI = "quasi"

# [sigma_z, b] and {sigma_z, b} act elementwise on the flattened block
# (b00, b01, b10, b11).
_COMM_Z = np.array([0.0, 2.0, -2.0, 0.0])
_ANTI_Z = np.array([2.0, 0.0, 0.0, -2.0])

STATE_FORMAT = b"SBHEOM-ADO-STATE/1\n"

# RK4 stability boundary along the imaginary axis is 2*sqrt(2).
RK4_MARGIN = 2.8


class StabilityWarning(UserWarning):
    pass


@dataclass(frozen=True)
class SystemSpec:
    """H_S = delta * sigma_x; the bath couples through sigma_z.

    ``delta = 0`` (pure dephasing) is allowed.
    """

    delta: float
    mu: float = 1.0

    def __post_init__(self):
        if not self.delta >= 0:
            raise ValueError(f"delta must be non-negative, got {self.delta}")

    @property
    def hamiltonian(self) -> np.ndarray:
        return self.delta * SIGMA_X


@dataclass
class AdoState:
    """Blocks for every ADO of ``space``; ``blocks[0]`` is the (quasi-)RDM."""

    space: HierarchySpace
    blocks: np.ndarray
    role: str = DENSITY
    time: float = 0.0

    def __post_init__(self):
        self.blocks = np.asarray(self.blocks, dtype=complex)
        if self.blocks.shape != (len(self.space), 2, 2):
            raise ValueError(f"expected blocks of shape {(len(self.space), 2, 2)}, got {self.blocks.shape}")
        if self.role not in (DENSITY, QUASI):
            raise ValueError(f"unknown role {self.role!r}")

    @classmethod
    def factorized(cls, space: HierarchySpace, rho0) -> "AdoState":
        """rho_S(0) in the zeroth ADO, every higher ADO zero."""
        blocks = np.zeros((len(space), 2, 2), dtype=complex)
        blocks[0] = np.asarray(rho0, dtype=complex)
        return cls(space, blocks, DENSITY, 0.0)

    @property
    def rdm(self) -> np.ndarray:
        return self.blocks[0]

    def copy(self) -> "AdoState":
        return AdoState(self.space, self.blocks.copy(), self.role, self.time)


def project_rdm(state: AdoState) -> np.ndarray:
    """The zeroth block: density matrix or quasi density matrix of the spin."""
    return state.blocks[0].copy()


def commute_z(state: AdoState) -> AdoState:
    """Apply [sigma_z, .] to every block; density states become quasi states."""
    out = SIGMA_Z @ state.blocks - state.blocks @ SIGMA_Z
    return AdoState(state.space, out, QUASI, state.time)


def ado_scale_logs(space: HierarchySpace, fit: CorrelationFit) -> np.ndarray:
    """log of prod_n sqrt(occ_n! |a_n|^occ_n); zero coefficients count as 1."""
    a = np.abs(np.concatenate([fit.a_R, fit.a_I]))
    la = np.log(np.where(a > 0, a, 1.0))
    occ = space.occupations.astype(float)
    return 0.5 * (gammaln(occ + 1.0).sum(axis=1) + occ @ la)


class HeomGenerator:
    """Time-independent generator d/dt sigma = G sigma for one (fit, system).

    With ``rescale=True`` the ADOs are stored divided by
    ``sqrt(occ! |a|^occ)``; the zeroth block is unaffected.
    """

    def __init__(self, space: HierarchySpace, fit: CorrelationFit, system: SystemSpec,
                 rescale: bool = False, filter_threshold: float = 0.0):
        if space.n_R != fit.n_R or space.n_I != fit.n_I:
            raise SBHeomError(
                f"hierarchy has (N_R, N_I) = ({space.n_R}, {space.n_I}) "
                f"but the fit has ({fit.n_R}, {fit.n_I})")
        self.space = space
        self.fit = fit
        self.system = system
        self.rescale = rescale
        self.filter_threshold = filter_threshold
        self._build()

    def _build(self):
        sp_ = self.space
        n = len(sp_)
        occ = sp_.occupations.astype(np.int64)
        nR = sp_.n_R
        eta = [(0, self.fit.eta_R, self.fit.phi0_R, self.fit.a_R),
               (nR, self.fit.eta_I, self.fit.phi0_I, self.fit.a_I)]
        mix, comm, anti = ([], [], []), ([], [], []), ([], [], [])

        def add(table, rows, cols, vals):
            keep = (cols >= 0) & (vals != 0)
            table[0].append(rows[keep])
            table[1].append(cols[keep])
            table[2].append(vals[keep])

        all_rows = np.arange(n)
        for g, (off, eta_x, phi0, a) in enumerate(eta):
            for k in range(eta_x.shape[0]):
                slot = off + k
                occupied = np.nonzero(occ[:, slot] > 0)[0]
                lowered = sp_.lower[occupied, slot]
                mult = occ[occupied, slot].astype(float)
                # same-order closure mixing: move one unit from k to k'
                for kp in np.nonzero(eta_x[k])[0]:
                    cols = sp_.raise_[lowered, off + kp]
                    add(mix, occupied, cols, mult * eta_x[k, kp])
                # down-coupling to order h-1
                if phi0[k] != 0:
                    add(comm if g == 0 else anti, occupied, lowered, mult * phi0[k])
                # up-coupling to order h+1, always through -i[sigma_z, .]
                if a[k] != 0:
                    cols = sp_.raise_[:, slot]
                    add(comm, all_rows, cols, np.full(n, a[k]))

        def csr(table):
            if table[0]:
                r, c, v = (np.concatenate(x) for x in table)
            else:
                r = c = np.zeros(0, dtype=np.int64)
                v = np.zeros(0)
            if self.rescale:
                logs = ado_scale_logs(sp_, self.fit)
                v = v * np.exp(logs[c] - logs[r])
            return sp.csr_matrix((v, (r, c)), shape=(n, n))

        self.mix = csr(mix)
        self.comm = csr(comm)
        self.anti = csr(anti)
        self._links = sp.vstack([self.mix, self.comm, self.anti]).tocsr()
        hs = self.system.hamiltonian
        # -i[H_S, b] on the row-major flattened block: b -> b @ A^T with
        # A = -i (H_S (x) 1 - 1 (x) H_S^T)
        eye = np.eye(2)
        self._sys = (-1j * (np.kron(hs, eye) - np.kron(eye, hs.T))).T
        self._comm_z = -1j * _COMM_Z
        self._anti_z = _ANTI_Z

    @property
    def nnz(self) -> int:
        return self._links.nnz

    def rhs(self, x: np.ndarray) -> np.ndarray:
        """Derivative of the flattened (N, 4) block array."""
        n = x.shape[0]
        y = self._links @ x
        out = x @ self._sys
        out += y[:n]
        out += y[n:2 * n] * self._comm_z
        out += y[2 * n:] * self._anti_z
        return out

    def to_internal(self, state: AdoState) -> np.ndarray:
        x = state.blocks.reshape(-1, 4).copy()
        if self.rescale:
            x /= np.exp(ado_scale_logs(self.space, self.fit))[:, None]
        return x

    def from_internal(self, x: np.ndarray, role: str, time: float) -> AdoState:
        if self.rescale:
            x = x * np.exp(ado_scale_logs(self.space, self.fit))[:, None]
        return AdoState(self.space, x.reshape(-1, 2, 2).copy(), role, time)

    def apply(self, state: AdoState) -> AdoState:
        """Time derivative of ``state`` (in the unscaled representation)."""
        if state.space is not self.space and len(state.space) != len(self.space):
            raise SBHeomError("state and generator live on different hierarchies")
        d = self.rhs(self.to_internal(state))
        return self.from_internal(d, state.role, state.time)

    def spectral_radius(self, iterations: int = 30, seed: int = 0) -> float:
        """Power-iteration estimate of the largest eigenvalue magnitude."""
        rng = np.random.default_rng(seed)
        x = rng.normal(size=(len(self.space), 4)) + 1j * rng.normal(size=(len(self.space), 4))
        x /= np.linalg.norm(x)
        est = 0.0
        for _ in range(iterations):
            y = self.rhs(x)
            nrm = np.linalg.norm(y)
            if nrm == 0:
                return 0.0
            est = nrm
            x = y / nrm
        return float(est)


def apply_generator(state: AdoState, fit: CorrelationFit, system: SystemSpec, **kw) -> AdoState:
    return HeomGenerator(state.space, fit, system, **kw).apply(state)


@dataclass
class Trajectory:
    times: np.ndarray
    records: dict = field(default_factory=dict)
    final: AdoState | None = None


def magnetization(rdm: np.ndarray) -> float:
    """M = Tr(sigma_z rho)."""
    return float((rdm[0, 0] - rdm[1, 1]).real)


def response_observable(rdm: np.ndarray) -> complex:
    """i Tr(sigma_z varrho) for a quasi density matrix."""
    return complex(1j * (rdm[0, 0] - rdm[1, 1]))


def propagate(state: AdoState, generator: HeomGenerator, t_end: float, dt: float, stride: int = 1,
              observers: dict[str, Callable[[float, np.ndarray], object]] | None = None,
              check_stability: bool = True) -> Trajectory:
    """Fixed-step classical RK4 from ``state.time`` over a span ``t_end``.

    Observers are called as ``f(t, rdm)`` at every ``stride``-th step
    (including the start). ``t_end`` must be a whole number of steps.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    n_steps = int(round(t_end / dt))
    if n_steps < 0 or abs(n_steps * dt - t_end) > 1e-9 * max(abs(t_end), 1.0):
        raise ValueError(f"t_end={t_end} is not a whole number of steps of dt={dt}")
    if check_stability:
        rho = generator.spectral_radius()
        if rho * dt > RK4_MARGIN:
            warnings.warn(f"dt*|lambda|max ~ {rho * dt:.3g} exceeds the RK4 stability margin "
                          f"{RK4_MARGIN}; reduce dt", StabilityWarning, stacklevel=2)
    observers = observers or {}
    stride = max(1, int(stride))
    n_rec = n_steps // stride + 1
    times = state.time + dt * stride * np.arange(n_rec)
    records = {k: [] for k in observers}
    x = generator.to_internal(state)
    f = generator.rhs
    thr = generator.filter_threshold
    t0 = state.time

    def record(step, x):
        t = t0 + step * dt
        rdm = x[0].reshape(2, 2)
        if not np.all(np.isfinite(x)):
            raise DivergenceError(t)
        for k, fn in observers.items():
            records[k].append(fn(t, rdm))

    record(0, x)
    half = 0.5 * dt
    sixth = dt / 6.0
    # overflow is reported as DivergenceError, so numpy's own warnings are noise
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(1, n_steps + 1):
            k1 = f(x)
            k2 = f(x + half * k1)
            k3 = f(x + half * k2)
            k4 = f(x + dt * k3)
            x = x + sixth * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
            if thr > 0:
                small = np.abs(x).max(axis=1) < thr
                small[0] = False
                x[small] = 0.0
            if step % stride == 0:
                record(step, x)
            elif not np.all(np.isfinite(x[0])):
                raise DivergenceError(t0 + step * dt)
    final = generator.from_internal(x, state.role, t0 + n_steps * dt)
    return Trajectory(times, {k: np.array(v) for k, v in records.items()}, final)


def save_state(path, state: AdoState, fit_hash: str = "") -> None:
    """Header (JSON) followed by little-endian (re, im) float64 pairs in canonical order."""
    header = {
        "n_R": state.space.n_R, "n_I": state.space.n_I, "H": state.space.H,
        "n_ado": len(state.space), "fit_hash": fit_hash, "role": state.role,
        "time": state.time, "dtype": "<c16",
    }
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(STATE_FORMAT)
        fh.write(struct.pack("<I", len(hb)))
        fh.write(hb)
        fh.write(np.ascontiguousarray(state.blocks, dtype="<c16").tobytes())


def load_state(path, space: HierarchySpace | None = None) -> tuple[AdoState, dict]:
    from .hierarchy import enumerate_space

    with open(path, "rb") as fh:
        magic = fh.read(len(STATE_FORMAT))
        if magic != STATE_FORMAT:
            raise SBHeomError(f"{path} is not an ADO state checkpoint")
        (hl,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hl))
        data = np.frombuffer(fh.read(), dtype="<c16")
    if space is None:
        space = enumerate_space(header["n_R"], header["n_I"], header["H"])
    elif (space.n_R, space.n_I, space.H) != (header["n_R"], header["n_I"], header["H"]):
        raise SBHeomError("checkpoint hierarchy does not match the requested space")
    blocks = data.reshape(header["n_ado"], 2, 2).astype(complex)
    return AdoState(space, blocks, header["role"], float(header["time"])), header
