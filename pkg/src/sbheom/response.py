"""Equilibrium relaxation, Kubo linear response and absorption spectra."""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.signal import find_peaks, peak_widths

from .decomp import CorrelationFit
from .heom import (AdoState, HeomGenerator, SystemSpec, commute_z, magnetization, propagate,
                   response_observable, DENSITY, SIGMA_X)
from .hierarchy import DEFAULT_BUDGET, enumerate_space
from .series import Spectrum, TimeSeries

SPIN_UP = np.array([[1, 0], [0, 0]], dtype=complex)


class ResolutionWarning(UserWarning):
    pass


@dataclass
class PropagationConfig:
    """Hierarchy depth and integrator settings (times in 1/omega_c)."""

    H: int = 4
    dt: float = 0.05
    stride: int = 10
    rescale: bool = False
    filter_threshold: float = 0.0
    budget: int = DEFAULT_BUDGET

    def generator(self, fit: CorrelationFit, system: SystemSpec) -> HeomGenerator:
        space = enumerate_space(fit.n_R, fit.n_I, self.H, budget=self.budget)
        return HeomGenerator(space, fit, system, rescale=self.rescale,
                             filter_threshold=self.filter_threshold)


@dataclass
class Equilibrium:
    state: AdoState
    M: TimeSeries
    drift: float
    equilibrated: bool


def ground_state(system: SystemSpec) -> np.ndarray:
    """Ground-state projector of delta * sigma_x."""
    vals, vecs = np.linalg.eigh(system.hamiltonian if system.delta > 0 else SIGMA_X)
    v = vecs[:, 0]
    return np.outer(v, v.conj())


def relax_to_equilibrium(fit: CorrelationFit, system: SystemSpec, t_eq: float,
                         config: PropagationConfig | None = None, rho0=None,
                         drift_window: float = 0.1, drift_threshold: float = 1e-2,
                         generator: HeomGenerator | None = None) -> Equilibrium:
    """Propagate a factorized state to ``t_eq`` and record M(t) = Tr(sigma_z rho_S).

    The drift diagnostic is the range of M over the final ``drift_window``
    fraction of the run; above ``drift_threshold`` the run is flagged as not
    equilibrated (closed system, localized phase or too short a run).
    """
    config = config or PropagationConfig()
    gen = generator or config.generator(fit, system)
    state = AdoState.factorized(gen.space, SPIN_UP if rho0 is None else rho0)
    traj = propagate(state, gen, t_eq, config.dt, config.stride,
                     {"M": lambda t, r: magnetization(r)})
    M = traj.records["M"]
    tail = M[int(math.floor((1 - drift_window) * (M.size - 1))):]
    drift = float(tail.max() - tail.min())
    series = TimeSeries(0.0, config.dt * config.stride, M, {"t": "1/omega_c", "value": "1"})
    return Equilibrium(traj.final, series, drift, drift <= drift_threshold)


@dataclass
class Response:
    chi: TimeSeries
    imag_residual: float


def linear_response(sigma_eq: AdoState, fit: CorrelationFit, system: SystemSpec, t_resp: float,
                    config: PropagationConfig | None = None,
                    generator: HeomGenerator | None = None) -> Response:
    """chi(t) = i mu^2 Tr(sigma_z varrho_S(t)) from quasi ADOs [sigma_z, sigma_eq].

    chi is returned as a real series; the largest imaginary magnitude
    relative to the real amplitude is kept as a health metric.
    """
    if sigma_eq.role != DENSITY:
        raise ValueError("linear response starts from a density-role equilibrium state")
    config = config or PropagationConfig()
    gen = generator or HeomGenerator(sigma_eq.space, fit, system, rescale=config.rescale,
                                     filter_threshold=config.filter_threshold)
    quasi = commute_z(sigma_eq)
    quasi.time = 0.0
    traj = propagate(quasi, gen, t_resp, config.dt, config.stride,
                     {"chi": lambda t, r: response_observable(r)})
    chi = traj.records["chi"] * system.mu**2
    amp = np.abs(chi.real).max()
    resid = float(np.abs(chi.imag).max() / amp) if amp > 0 else float(np.abs(chi.imag).max())
    series = TimeSeries(0.0, config.dt * config.stride, chi.real.copy(), {"t": "1/omega_c", "value": "1"})
    return Response(series, resid)


def window_weights(t: np.ndarray, kind: str = "cosine", tau: float | None = None,
                   fraction: float = 0.1) -> np.ndarray:
    """none, exponential exp(-t/tau), or a cosine taper over the final ``fraction``."""
    t = np.asarray(t, dtype=float)
    if kind in (None, "none"):
        return np.ones_like(t)
    if kind == "exponential":
        if not tau or tau <= 0:
            raise ValueError("exponential window needs tau > 0")
        return np.exp(-(t - t[0]) / tau)
    if kind == "cosine":
        span = t[-1] - t[0]
        start = t[0] + (1 - fraction) * span
        w = np.ones_like(t)
        m = t > start
        w[m] = 0.5 * (1 + np.cos(math.pi * (t[m] - start) / (fraction * span)))
        return w
    raise ValueError(f"unknown window kind {kind!r}")


def _window_meta(kind, tau, fraction):
    meta = {"kind": kind or "none"}
    if kind == "exponential":
        meta["tau"] = tau
    elif kind == "cosine":
        meta["fraction"] = fraction
    return meta


def _trapz_transform(t, f, omegas, kernel):
    w = np.full(t.size, t[1] - t[0])
    w[0] *= 0.5
    w[-1] *= 0.5
    fw = f * w
    return np.array([np.dot(fw, kernel(om * t)) for om in omegas])


def frequency_grid(omega_max: float, d_omega: float, omega_min: float = 0.0) -> np.ndarray:
    n = int(math.floor((omega_max - omega_min) / d_omega + 1e-9)) + 1
    return omega_min + d_omega * np.arange(n)


def absorption_spectrum(chi: TimeSeries, omega_max: float, d_omega: float, window: str = "cosine",
                        tau: float | None = None, fraction: float = 0.1,
                        omega_min: float = 0.0) -> Spectrum:
    """chi''(omega) = int_0^T chi(t) w(t) sin(omega t) dt by the trapezoid rule.

    chi is real and causal, so Im int_{-inf}^{inf} chi(t) e^{i omega t} dt
    reduces to the one-sided sine transform; the result is odd in omega.
    """
    if np.iscomplexobj(chi.values) and np.any(chi.values.imag != 0):
        raise ValueError("chi must be real")
    if abs(chi.t0) > 1e-12:
        raise ValueError("chi must start at t = 0")
    t = chi.t
    t_resp = t[-1] - t[0]
    if d_omega < 2 * math.pi / t_resp:
        warnings.warn(f"d_omega={d_omega:.4g} is below the resolution limit 2 pi / t_resp = "
                      f"{2 * math.pi / t_resp:.4g}", ResolutionWarning, stacklevel=2)
    omegas = frequency_grid(omega_max, d_omega, omega_min)
    f = np.asarray(chi.values, dtype=float) * window_weights(t, window, tau, fraction)
    vals = _trapz_transform(t, f, omegas, np.sin)
    return Spectrum(float(omegas[0]), d_omega, vals, _window_meta(window, tau, fraction))


@dataclass(frozen=True)
class Peak:
    location: float
    height: float
    half_width: float
    prominence: float


def spectrum_peaks(spectrum: Spectrum, min_prominence: float = 0.05) -> list[Peak]:
    """Local maxima whose prominence exceeds ``min_prominence`` times max|values|.

    Locations and heights are refined by a parabola through the three
    samples around each maximum; ``half_width`` is half the width at half
    prominence.
    """
    v = spectrum.values
    scale = np.abs(v).max() if v.size else 0.0
    if scale == 0:
        return []
    idx, props = find_peaks(v, prominence=min_prominence * scale)
    if idx.size == 0:
        return []
    widths = peak_widths(v, idx, rel_height=0.5, prominence_data=(props["prominences"],
                                                                    props["left_bases"],
                                                                    props["right_bases"]))[0]
    out = []
    h = spectrum.d_omega
    for i, p, w in zip(idx, props["prominences"], widths):
        y0, y1, y2 = v[i - 1], v[i], v[i + 1]
        den = y0 - 2 * y1 + y2
        shift = 0.5 * (y0 - y2) / den if den != 0 else 0.0
        loc = spectrum.omega0 + h * (i + shift)
        height = y1 - 0.25 * (y0 - y2) * shift
        out.append(Peak(float(loc), float(height), float(0.5 * w * h), float(p)))
    return out
