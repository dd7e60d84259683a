"""Spectral density and bath correlation function of the spin-boson bath.

Internally frequencies are measured in units of the cutoff ``omega_c`` and
times in ``1/omega_c``; ``BathSpec.omega_c`` is kept so that callers working
in other units get dimensionally correct results.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, asdict
from typing import Callable

import numpy as np
from scipy import integrate, special

from .errors import DomainError, QuadratureError
from .series import TimeSeries

ZERO_TEMPERATURE = 0.0

# f(x) with x = omega / omega_c
CUTOFFS: dict[str, Callable[[np.ndarray], np.ndarray]] = {
    "rational": lambda x: 1.0 / (1.0 + x * x) ** 2,
}

# Ray angle for the rotated contour omega = r exp(-i theta). The double pole
# of the rational cutoff sits at -i omega_c, outside the sector swept here.
_THETA = math.pi / 3


@dataclass(frozen=True)
class BathSpec:
    s: float
    alpha: float
    omega_c: float = 1.0
    cutoff: str = "rational"
    temperature: float = ZERO_TEMPERATURE

    def __post_init__(self):
        if not self.s > 0:
            raise DomainError(f"bath exponent s must be positive, got {self.s}")
        if not self.alpha >= 0:
            raise DomainError(f"alpha must be non-negative, got {self.alpha}")
        if not self.omega_c > 0:
            raise DomainError(f"omega_c must be positive, got {self.omega_c}")
        if not self.temperature >= 0:
            raise DomainError(f"temperature must be non-negative, got {self.temperature}")
        if self.cutoff not in CUTOFFS:
            raise DomainError(f"unknown cutoff {self.cutoff!r}; known: {sorted(CUTOFFS)}")

    @property
    def zero_temperature(self) -> bool:
        return self.temperature == ZERO_TEMPERATURE

    def to_dict(self) -> dict:
        return asdict(self)


def spectral_density(omega, spec: BathSpec):
    """J(omega) = (pi/2) alpha omega^s omega_c^(1-s) f(omega/omega_c)."""
    w = np.asarray(omega, dtype=float)
    if np.any(w < 0):
        raise DomainError("spectral density is defined for omega >= 0")
    f = CUTOFFS[spec.cutoff]
    out = 0.5 * math.pi * spec.alpha * w**spec.s * spec.omega_c ** (1 - spec.s) * f(w / spec.omega_c)
    return out if out.ndim else float(out)


def correlation_at_zero(spec: BathSpec) -> float:
    """Closed form of C(0) for the rational cutoff at zero temperature."""
    s = spec.s
    return 0.25 * spec.alpha * spec.omega_c**2 * special.beta((s + 1) / 2, (3 - s) / 2)


def ohmic_imag_closed_form(t, spec: BathSpec):
    """C_I(t) = -(pi/8) alpha omega_c^3 t exp(-omega_c t), valid for s = 1."""
    t = np.asarray(t, dtype=float)
    wc = spec.omega_c
    return -(math.pi / 8) * spec.alpha * wc**3 * t * np.exp(-wc * t)


def _quad(f, a, b, **kw):
    # QUADPACK rejects relative tolerances near machine precision; clamp them
    # and let the caller's error check report the shortfall.
    if "epsrel" in kw:
        kw["epsrel"] = max(kw["epsrel"], 1e-13)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", integrate.IntegrationWarning)
        return integrate.quad(f, a, b, limit=400, **kw)


def _contour_integral(tau: float, s: float, tol: float) -> tuple[complex, float]:
    """I(tau) = int_0^inf x^s e^{-i x tau} / (1+x^2)^2 dx on a rotated ray.

    Rotating x -> r e^{-i theta} turns the oscillatory factor into a decaying
    one; the arcs at 0 and infinity vanish for s > -1 and tau >= 0.
    """
    sin_t, cos_t = math.sin(_THETA), math.cos(_THETA)
    rot2 = complex(math.cos(2 * _THETA), -math.sin(2 * _THETA))
    phase = complex(math.cos(_THETA * (1 + s)), -math.sin(_THETA * (1 + s)))

    def g(r):
        return np.exp(-r * tau * sin_t - 1j * r * tau * cos_t) / (1 + r * r * rot2) ** 2

    split = 40.0 / (tau * sin_t) if tau * sin_t > 40.0 else 1.0
    total = 0j
    err = 0.0
    for unit, part in ((1.0, np.real), (1j, np.imag)):
        head, e1 = _quad(lambda r: part(g(r)), 0.0, split, weight="alg", wvar=(s, 0.0),
                         epsabs=0.0, epsrel=tol * 1e-2)
        tail, e2 = _quad(lambda r: part(r**s * g(r)), split, np.inf,
                         epsabs=max(abs(head), 1e-300) * tol * 1e-3, epsrel=tol * 1e-2)
        total += unit * (head + tail)
        err += e1 + e2
    return phase * total, err


def _real_axis_integrals(tau: float, spec: BathSpec, tol: float) -> tuple[complex, float]:
    """Direct real-axis route, also used for finite temperature.

    The first oscillation half-period carries the x^(s-1) or x^s endpoint
    singularity and is integrated with an algebraic weight; the rest of the
    half-line goes to QUADPACK's Fourier-tail routine.
    """
    f = CUTOFFS[spec.cutoff]
    s = spec.s
    if spec.zero_temperature:
        expo = s

        def smooth(x):
            return f(x)
    else:
        b = spec.omega_c / spec.temperature  # beta * omega_c

        def smooth(x):
            # x^s coth(bx/2) = x^(s-1) * [x coth(bx/2)]
            x = np.asarray(x, dtype=float)
            with np.errstate(invalid="ignore", divide="ignore"):
                v = np.where(x > 0, x / np.tanh(0.5 * b * np.maximum(x, 1e-300)), 2.0 / b)
            return v * f(x)

        expo = s - 1.0

    def smooth_sin(x):
        return f(x)

    if tau == 0.0:
        re, e_re = _quad(smooth, 0.0, 1.0, weight="alg", wvar=(expo, 0.0), epsabs=0.0, epsrel=tol * 1e-2)
        re2, e_re2 = _quad(lambda x: x**expo * smooth(x), 1.0, np.inf, epsabs=0.0, epsrel=tol * 1e-2)
        return complex(re + re2, 0.0), e_re + e_re2

    c = min(math.pi / tau, 1.0)
    re_h, e1 = _quad(lambda x: smooth(x) * np.cos(x * tau), 0.0, c, weight="alg",
                     wvar=(expo, 0.0), epsabs=0.0, epsrel=tol * 1e-2)
    im_h, e2 = _quad(lambda x: smooth_sin(x) * np.sin(x * tau), 0.0, c, weight="alg",
                     wvar=(s, 0.0), epsabs=0.0, epsrel=tol * 1e-2)
    scale = abs(re_h) + abs(im_h)
    re_t, e3 = _quad(lambda x: x**expo * smooth(x), c, np.inf, weight="cos", wvar=tau,
                     epsabs=scale * tol * 1e-3)
    im_t, e4 = _quad(lambda x: x**s * smooth_sin(x), c, np.inf, weight="sin", wvar=tau,
                     epsabs=scale * tol * 1e-3)
    return complex(re_h + re_t, -(im_h + im_t)), e1 + e2 + e3 + e4


def correlation_value(t: float, spec: BathSpec, tol: float = 1e-8, method: str = "auto") -> complex:
    """C(t) = C_R(t) + i C_I(t) by quadrature of the spectral integral.

    ``method`` is ``"contour"`` (zero temperature, rational cutoff),
    ``"real-axis"`` or ``"auto"``. Raises :class:`QuadratureError` when the
    error estimate exceeds ``tol`` relative to ``|C(t)|``.
    """
    if t < 0:
        raise DomainError("correlation function is evaluated for t >= 0")
    if method == "auto":
        method = "contour" if (spec.zero_temperature and spec.cutoff == "rational") else "real-axis"
    tau = float(t) * spec.omega_c
    if method == "contour":
        if not (spec.zero_temperature and spec.cutoff == "rational"):
            raise DomainError("contour route needs T = 0 and the rational cutoff")
        val, err = _contour_integral(tau, spec.s, tol)
    elif method == "real-axis":
        val, err = _real_axis_integrals(tau, spec, tol)
    else:
        raise ValueError(f"unknown method {method!r}")
    if t == 0.0:
        val = complex(val.real, 0.0)
    pref = 0.5 * spec.alpha * spec.omega_c**2
    if err > tol * max(abs(val), 1e-300):
        raise QuadratureError(
            f"quadrature at t={t} reached error {err:.3g} relative to |C|={abs(val):.3g}",
            estimate=err * pref, value=val * pref,
        )
    return complex(pref * val)


@dataclass
class SampledCorrelation:
    """C(t) sampled on a non-uniform grid; the fit target."""

    t: np.ndarray
    values: np.ndarray
    spec: BathSpec

    @property
    def real(self) -> np.ndarray:
        return self.values.real

    @property
    def imag(self) -> np.ndarray:
        return self.values.imag

    @property
    def t_max(self) -> float:
        return float(self.t[-1])

    def uniform(self, n: int, tol: float = 1e-8) -> TimeSeries:
        """Resample on a uniform grid over [0, t_max]."""
        dt = self.t_max / (n - 1)
        vals = np.array([correlation_value(k * dt, self.spec, tol) for k in range(n)])
        return TimeSeries(0.0, dt, vals, {"t": "1/omega_c", "value": "omega_c^2"})


def hybrid_grid(t_max: float, n_samples: int, t_split: float = 10.0, log_fraction: float = 0.25,
                t_min: float = 1e-3) -> np.ndarray:
    """t = 0, log-spaced points up to ``t_split``, then uniform points to ``t_max``."""
    if not t_max > 0:
        raise DomainError("t_max must be positive")
    if n_samples < 2:
        raise DomainError("need at least two samples")
    rest = n_samples - 1
    if t_max <= t_split:
        n_log, n_uni = rest, 0
        t_split = t_max
    else:
        n_log = min(rest - 1, int(round(rest * log_fraction)))
        n_uni = rest - n_log
    parts = [np.zeros(1)]
    if n_log == 1:
        parts.append(np.array([t_split]))
    elif n_log:
        parts.append(np.logspace(math.log10(min(t_min, t_split / 10)), math.log10(t_split), n_log))
    if n_uni:
        parts.append(np.linspace(t_split, t_max, n_uni + 1)[1:])
    return np.concatenate(parts)


def correlation_series(t_max: float, n_samples: int, spec: BathSpec, tol: float = 1e-8,
                       **grid_kw) -> SampledCorrelation:
    """Sample C(t) on the hybrid grid returned by :func:`hybrid_grid`."""
    t = hybrid_grid(t_max, n_samples, **grid_kw)
    vals = np.array([correlation_value(x, spec, tol) for x in t])
    return SampledCorrelation(t, vals, spec)


def tail_exponent(series, window: tuple[float, float]) -> float:
    """Least-squares slope of log|C| against log t inside ``window``.

    ``series`` is anything with ``t`` and ``values`` attributes.
    """
    t = np.asarray(series.t, dtype=float)
    y = np.asarray(series.values)
    if np.iscomplexobj(y):
        if np.any(y.imag != 0) and np.any(y.real != 0):
            raise DomainError("pass the real or imaginary part explicitly")
        y = y.real if np.any(y.real != 0) else y.imag
    lo, hi = window
    if lo <= 0 or hi <= lo or lo < t[0] or hi > t[-1]:
        raise DomainError(f"window {window} is not inside the series range [{t[0]}, {t[-1]}]")
    m = (t >= lo) & (t <= hi)
    if m.sum() < 2:
        raise DomainError("fewer than two samples inside the window")
    yw = y[m]
    if np.any(yw == 0) or not (np.all(yw > 0) or np.all(yw < 0)):
        raise DomainError("samples change sign or vanish inside the window")
    slope, _ = np.polyfit(np.log(t[m]), np.log(np.abs(yw)), 1)
    return float(slope)
