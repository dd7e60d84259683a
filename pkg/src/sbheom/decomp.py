"""Exponential-type decomposition of the bath correlation function.

C(t) is fitted as ``sum_n a_R[n] phi_R[n](t) + i sum_m a_I[m] phi_I[m](t)`` with
basis functions whose time derivatives close on the basis,
``d/dt phi[n] = sum_k eta[n, k] phi[k]``. Linear coefficients are eliminated
by variable projection so the optimizer only sees decay rates and
frequencies.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .errors import FitError, GridMismatchError, StructureError
from .series import canonical_json

DECAY = "decay"
COS = "cos-decay"
SIN = "sin-decay"
LINEAR = "linear-decay"
KINDS = (DECAY, COS, SIN, LINEAR)

FIT_FORMAT = "sbheom.correlation-fit/1"


class ExtrapolationWarning(UserWarning):
    pass


@dataclass(frozen=True)
class BasisFunction:
    """One of e^{-rate t}, cos/sin(freq t) e^{-rate t} or t e^{-rate t}."""

    kind: str
    rate: float
    freq: float = 0.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructureError(f"unknown basis kind {self.kind!r}")
        if not self.rate > 0:
            raise StructureError(f"decay rate must be positive, got {self.rate}")
        if self.kind in (DECAY, LINEAR) and self.freq != 0.0:
            raise StructureError(f"{self.kind} takes no frequency")

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        e = np.exp(-self.rate * t)
        if self.kind == DECAY:
            return e
        if self.kind == COS:
            return np.cos(self.freq * t) * e
        if self.kind == SIN:
            return np.sin(self.freq * t) * e
        return t * e

    def derivative(self, t):
        """Analytic d/dt, independent of the closure matrix."""
        t = np.asarray(t, dtype=float)
        e = np.exp(-self.rate * t)
        g, w = self.rate, self.freq
        if self.kind == DECAY:
            return -g * e
        if self.kind == COS:
            return (-g * np.cos(w * t) - w * np.sin(w * t)) * e
        if self.kind == SIN:
            return (w * np.cos(w * t) - g * np.sin(w * t)) * e
        return (1.0 - g * t) * e

    @property
    def at_zero(self) -> float:
        return 1.0 if self.kind in (DECAY, COS) else 0.0

    def to_dict(self) -> dict:
        d = {"kind": self.kind, "rate": self.rate}
        if self.kind in (COS, SIN):
            d["freq"] = self.freq
        return d

    @classmethod
    def from_dict(cls, d) -> "BasisFunction":
        return cls(d["kind"], float(d["rate"]), float(d.get("freq", 0.0)))


def build_closure(basis) -> np.ndarray:
    """Closure matrix eta with d/dt phi[n] = sum_k eta[n, k] phi[k].

    cos/sin functions must come in pairs with equal (freq, rate); a
    linear-decay needs a plain decay with the same rate.
    """
    basis = list(basis)
    n = len(basis)
    eta = np.zeros((n, n))
    for i, b in enumerate(basis):
        if b.kind == DECAY:
            eta[i, i] = -b.rate
        elif b.kind in (COS, SIN):
            want = SIN if b.kind == COS else COS
            partner = [j for j, c in enumerate(basis)
                       if c.kind == want and c.rate == b.rate and c.freq == b.freq]
            if not partner:
                raise StructureError(f"{b.kind} at (freq={b.freq}, rate={b.rate}) has no {want} partner")
            j = partner[0]
            eta[i, i] = -b.rate
            eta[i, j] = -b.freq if b.kind == COS else b.freq
        else:
            partner = [j for j, c in enumerate(basis) if c.kind == DECAY and c.rate == b.rate]
            if not partner:
                raise StructureError(f"linear-decay at rate {b.rate} has no decay partner")
            eta[i, i] = -b.rate
            eta[i, partner[0]] = 1.0
    return eta


def closure_residual(basis, t) -> float:
    """max |phi' - eta phi| / max |phi'| over the grid ``t``."""
    basis = list(basis)
    if not basis:
        return 0.0
    eta = build_closure(basis)
    phi = np.array([b(t) for b in basis])
    dphi = np.array([b.derivative(t) for b in basis])
    scale = max(np.abs(dphi).max(), np.abs(phi).max(), 1e-300)
    return float(np.abs(dphi - eta @ phi).max() / scale)


@dataclass(frozen=True)
class BasisTemplate:
    """Shape of a basis set: plain decays, oscillatory pairs, linear pairs.

    A linear pair contributes {t e^{-G t}, e^{-G t}} with one shared rate.
    """

    n_decay: int = 0
    n_osc: int = 0
    n_linear: int = 0

    @property
    def size(self) -> int:
        return self.n_decay + 2 * self.n_osc + 2 * self.n_linear

    @property
    def n_params(self) -> int:
        return self.n_decay + 2 * self.n_osc + self.n_linear

    @classmethod
    def for_size(cls, n: int, n_osc: int = 0, n_linear: int = 0) -> "BasisTemplate":
        n_decay = n - 2 * n_osc - 2 * n_linear
        if n_decay < 0:
            raise FitError(f"{n} basis functions cannot hold {n_osc} oscillatory and {n_linear} linear pairs")
        return cls(n_decay, n_osc, n_linear)

    def to_dict(self):
        return {"n_decay": self.n_decay, "n_osc": self.n_osc, "n_linear": self.n_linear}


def _basis_from_params(template: BasisTemplate, p: np.ndarray) -> list[BasisFunction]:
    v = np.exp(p)
    out = []
    k = 0
    for _ in range(template.n_osc):
        g, w = float(v[k]), float(v[k + 1])
        out += [BasisFunction(COS, g, w), BasisFunction(SIN, g, w)]
        k += 2
    for _ in range(template.n_linear):
        g = float(v[k])
        out += [BasisFunction(LINEAR, g), BasisFunction(DECAY, g)]
        k += 1
    for _ in range(template.n_decay):
        out.append(BasisFunction(DECAY, float(v[k])))
        k += 1
    return out


class _Projection:
    """Variable-projection residual and Kaufman Jacobian for one template.

    Parameters are logarithms of rates and frequencies, laid out as
    [osc (log gamma, log omega)..., linear log G..., decay log G...].
    """

    def __init__(self, t, y, template: BasisTemplate, weights=None):
        self.t = np.asarray(t, dtype=float)
        self.w = np.ones_like(self.t) if weights is None else np.asarray(weights, dtype=float)
        self.y = np.asarray(y, dtype=float) * self.w
        self.template = template
        self._key = None

    def _columns(self, p):
        t = self.t
        v = np.exp(p)
        cols = []
        dcols = []  # per parameter: list of (column index, d column / d log param)
        k = 0
        for _ in range(self.template.n_osc):
            g, w = v[k], v[k + 1]
            e = np.exp(-g * t)
            c, s = np.cos(w * t) * e, np.sin(w * t) * e
            ic = len(cols)
            cols += [c, s]
            dcols.append([(ic, -g * t * c), (ic + 1, -g * t * s)])
            dcols.append([(ic, -w * t * s), (ic + 1, w * t * c)])
            k += 2
        for _ in range(self.template.n_linear):
            g = v[k]
            e = np.exp(-g * t)
            ic = len(cols)
            cols += [t * e, e]
            dcols.append([(ic, -g * t * t * e), (ic + 1, -g * t * e)])
            k += 1
        for _ in range(self.template.n_decay):
            g = v[k]
            e = np.exp(-g * t)
            ic = len(cols)
            cols.append(e)
            dcols.append([(ic, -g * t * e)])
            k += 1
        return np.array(cols).T * self.w[:, None], dcols

    def _solve(self, p):
        key = p.tobytes()
        if key == self._key:
            return
        phi, dcols = self._columns(p)
        u, sv, vt = np.linalg.svd(phi, full_matrices=False)
        keep = sv > sv[0] * 1e-14 if sv.size and sv[0] > 0 else np.zeros(sv.size, bool)
        u, sv, vt = u[:, keep], sv[keep], vt[keep]
        a = vt.T @ ((u.T @ self.y) / sv)
        self._key = key
        self._state = (phi, dcols, u, a)

    def residual(self, p):
        self._solve(p)
        phi, _, _, a = self._state
        return phi @ a - self.y

    def jacobian(self, p):
        self._solve(p)
        phi, dcols, u, a = self._state
        jac = np.zeros((self.t.size, len(dcols)))
        for j, entries in enumerate(dcols):
            col = np.zeros(self.t.size)
            for ic, d in entries:
                col += d * self.w * a[ic]
            jac[:, j] = col - u @ (u.T @ col)
        return jac

    def coefficients(self, p):
        self._solve(p)
        return self._state[3].copy()


def initial_parameters(template: BasisTemplate, t_max: float, target_t=None, target_y=None,
                       rate_hi: float = 10.0) -> np.ndarray:
    """Deterministic starting point for the nonlinear parameters.

    Plain decay rates are log-spaced between 2 pi / t_max and ``rate_hi``;
    oscillation frequencies come from the first zero crossing of the target
    and linear pairs start at the cutoff rate.
    """
    omega0 = 1.0
    if target_y is not None and template.n_osc:
        y = np.asarray(target_y)
        sign = np.sign(y)
        idx = np.nonzero((sign[:-1] * sign[1:]) < 0)[0]
        if idx.size:
            tz = float(target_t[idx[0] + 1])
            omega0 = math.pi / (2 * tz)
    p = []
    for k in range(template.n_osc):
        p += [math.log(1.0), math.log(omega0 * (k + 1))]
    p += [math.log(1.0)] * template.n_linear
    if template.n_decay:
        lo = 2 * math.pi / t_max
        p += list(np.linspace(math.log(lo), math.log(rate_hi), template.n_decay))
    return np.array(p, dtype=float)


@dataclass
class PartFit:
    basis: list
    coeffs: np.ndarray
    max_error: float
    rms_error: float
    start: int


def _fit_one_start(proj: _Projection, p0, start, max_nfev):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        sol = least_squares(proj.residual, p0, jac=proj.jacobian, method="trf",
                            xtol=1e-13, ftol=1e-13, gtol=1e-13, max_nfev=max_nfev)
    p = sol.x
    r = proj.residual(p) / proj.w
    a = proj.coefficients(p)
    return p, a, float(np.abs(r).max()), float(np.sqrt(np.mean(r * r))), start


def fit_part(t, y, template: BasisTemplate, multistart: int = 16, seed: int = 0,
             weighting: str = "absolute", max_nfev: int = 2000, workers: int = 1,
             p0=None) -> PartFit:
    """Fit one real signal with the given basis template.

    Start 0 uses :func:`initial_parameters` (or ``p0``); the other starts
    jitter it log-normally with a generator seeded by ``(seed, start)``. The
    start with the lowest maximum absolute error wins, ties going to the
    lower start index.
    """
    t = np.asarray(t, dtype=float)
    y = np.asarray(y, dtype=float)
    if template.size == 0:
        raise FitError("zero basis functions")
    if weighting == "absolute":
        w = None
    elif weighting == "relative":
        floor = 1e-3 * np.abs(y).max() if np.any(y) else 1.0
        w = 1.0 / np.maximum(np.abs(y), floor)
    else:
        raise FitError(f"unknown weighting {weighting!r}")
    base = initial_parameters(template, float(t[-1]), t, y) if p0 is None else np.asarray(p0, float)
    starts = []
    for k in range(max(1, multistart)):
        if k == 0:
            starts.append(base.copy())
        else:
            rng = np.random.default_rng([seed, k])
            starts.append(base + rng.normal(0.0, 0.5, base.size))
    if not np.any(y):
        basis = _basis_from_params(template, base)
        return PartFit(basis, np.zeros(template.size), 0.0, 0.0, 0)

    def run(k):
        return _fit_one_start(_Projection(t, y, template, w), starts[k], k, max_nfev)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            results = list(ex.map(run, range(len(starts))))
    else:
        results = [run(k) for k in range(len(starts))]
    best = min(results, key=lambda r: (r[2], r[4]))
    p, a, mx, rms, k = best
    return PartFit(_basis_from_params(template, p), a, mx, rms, k)


@dataclass
class FitConfig:
    n_R: int = 9
    n_I: int = 10
    osc_R: int = 0
    osc_I: int = 0
    linear_R: int = 1
    linear_I: int = 1
    multistart: int = 16
    seed: int = 0
    tolerance: float = 5e-5
    weighting: str = "absolute"
    max_nfev: int = 2000
    workers: int = 1

    def templates(self) -> tuple[BasisTemplate, BasisTemplate]:
        return (BasisTemplate.for_size(self.n_R, self.osc_R, self.linear_R),
                BasisTemplate.for_size(self.n_I, self.osc_I, self.linear_I))


@dataclass
class CorrelationFit:
    basis_R: list
    basis_I: list
    a_R: np.ndarray
    a_I: np.ndarray
    t_max: float
    residual: dict = field(default_factory=dict)
    omega_c: float = 1.0
    seed: int = 0
    target_hash: str = ""
    quality_ok: bool = True
    meta: dict = field(default_factory=dict)
    errors: tuple | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.a_R = np.asarray(self.a_R, dtype=float)
        self.a_I = np.asarray(self.a_I, dtype=float)
        self.eta_R = build_closure(self.basis_R)
        self.eta_I = build_closure(self.basis_I)

    @property
    def n_R(self) -> int:
        return len(self.basis_R)

    @property
    def n_I(self) -> int:
        return len(self.basis_I)

    @property
    def phi0_R(self) -> np.ndarray:
        return np.array([b.at_zero for b in self.basis_R])

    @property
    def phi0_I(self) -> np.ndarray:
        return np.array([b.at_zero for b in self.basis_I])

    def real_part(self, t):
        t = np.asarray(t, dtype=float)
        return sum((a * b(t) for a, b in zip(self.a_R, self.basis_R)), np.zeros_like(t))

    def imag_part(self, t):
        t = np.asarray(t, dtype=float)
        return sum((a * b(t) for a, b in zip(self.a_I, self.basis_I)), np.zeros_like(t))

    def evaluate(self, t):
        return self.real_part(t) + 1j * self.imag_part(t)

    def scaled(self, factor: float) -> "CorrelationFit":
        """Same basis with coefficients times ``factor`` (C is linear in alpha)."""
        res = {k: (v * abs(factor) if k.startswith(("max", "rms")) else v)
               for k, v in self.residual.items()}
        return CorrelationFit(list(self.basis_R), list(self.basis_I), self.a_R * factor,
                              self.a_I * factor, self.t_max, res, self.omega_c, self.seed,
                              self.target_hash, self.quality_ok, dict(self.meta, scaled_by=factor))

    @classmethod
    def zero(cls, basis_R=(), basis_I=(), t_max: float = 1.0) -> "CorrelationFit":
        """Decoupled bath: all coefficients vanish."""
        return cls(list(basis_R), list(basis_I), np.zeros(len(basis_R)), np.zeros(len(basis_I)),
                   t_max, {"max_R": 0.0, "max_I": 0.0, "rms_R": 0.0, "rms_I": 0.0})

    def to_dict(self) -> dict:
        return {
            "format": FIT_FORMAT,
            "t_max": self.t_max,
            "omega_c": self.omega_c,
            "seed": self.seed,
            "target_hash": self.target_hash,
            "quality_ok": self.quality_ok,
            "real": {
                "basis": [b.to_dict() for b in self.basis_R],
                "coefficients": [float(x) for x in self.a_R],
                "eta": self.eta_R.tolist(),
            },
            "imag": {
                "basis": [b.to_dict() for b in self.basis_I],
                "coefficients": [float(x) for x in self.a_I],
                "eta": self.eta_I.tolist(),
            },
            "residual": {k: self.residual[k] for k in sorted(self.residual)},
            "meta": self.meta,
        }

    @classmethod
    def from_dict(cls, d) -> "CorrelationFit":
        if d.get("format") != FIT_FORMAT:
            raise FitError(f"not a correlation fit document (format={d.get('format')!r})")
        fit = cls(
            [BasisFunction.from_dict(b) for b in d["real"]["basis"]],
            [BasisFunction.from_dict(b) for b in d["imag"]["basis"]],
            np.array(d["real"]["coefficients"], dtype=float),
            np.array(d["imag"]["coefficients"], dtype=float),
            float(d["t_max"]), dict(d.get("residual", {})), float(d.get("omega_c", 1.0)),
            int(d.get("seed", 0)), d.get("target_hash", ""), bool(d.get("quality_ok", True)),
            dict(d.get("meta", {})),
        )
        for part, eta in (("real", fit.eta_R), ("imag", fit.eta_I)):
            stored = np.array(d[part]["eta"], dtype=float).reshape(eta.shape)
            if not np.array_equal(stored, eta):
                raise FitError(f"stored {part} closure matrix does not match its basis")
        return fit

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    @classmethod
    def loads(cls, text: str) -> "CorrelationFit":
        return cls.from_dict(json.loads(text))

    @property
    def hash(self) -> str:
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()


def target_hash(t, c_r, c_i) -> str:
    h = hashlib.sha256()
    for arr in (t, c_r, c_i):
        h.update(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return h.hexdigest()


def _unpack_target(target):
    if hasattr(target, "t") and hasattr(target, "values"):
        vals = np.asarray(target.values)
        return np.asarray(target.t, float), vals.real.astype(float), vals.imag.astype(float)
    if len(target) == 3:
        t, cr, ci = target
        return np.asarray(t, float), np.asarray(cr, float), np.asarray(ci, float)
    sr, si = target
    tr, ti = np.asarray(sr.t, float), np.asarray(si.t, float)
    if tr.shape != ti.shape or not np.array_equal(tr, ti):
        raise GridMismatchError("real and imaginary targets are sampled on different grids")
    return tr, np.asarray(sr.values, float), np.asarray(si.values, float)


def fit_correlation(target, config: FitConfig | None = None, omega_c: float = 1.0,
                    p0_R=None, p0_I=None) -> CorrelationFit:
    """Fit sampled C(t) on [0, t_max].

    ``target`` is a :class:`~sbheom.bath.SampledCorrelation`, a pair of
    series with ``t``/``values``, or a tuple ``(t, C_R, C_I)``. If the
    tolerance is missed the best fit is still returned with
    ``quality_ok=False``.
    """
    config = config or FitConfig()
    t, cr, ci = _unpack_target(target)
    if t.size != cr.size or t.size != ci.size:
        raise GridMismatchError("target arrays differ in length")
    if not (np.all(np.isfinite(cr)) and np.all(np.isfinite(ci)) and np.all(np.isfinite(t))):
        raise FitError("target contains NaN or infinite values")
    if config.n_R < 1 or config.n_I < 1:
        raise FitError("need at least one basis function per part")
    tmpl_R, tmpl_I = config.templates()
    common = dict(multistart=config.multistart, seed=config.seed, weighting=config.weighting,
                  max_nfev=config.max_nfev, workers=config.workers)
    fr = fit_part(t, cr, tmpl_R, p0=p0_R, **common)
    fi = fit_part(t, ci, tmpl_I, p0=p0_I, **common)
    fit = CorrelationFit(fr.basis, fi.basis, fr.coeffs, fi.coeffs, float(t[-1]),
                         omega_c=omega_c, seed=config.seed, target_hash=target_hash(t, cr, ci),
                         meta={"template_R": tmpl_R.to_dict(), "template_I": tmpl_I.to_dict(),
                               "best_start_R": fr.start, "best_start_I": fi.start,
                               "multistart": config.multistart, "weighting": config.weighting})
    d_r, d_i, summary = fit_error_report(fit, (t, cr, ci))
    fit.residual = summary
    fit.errors = (t, d_r, d_i)
    fit.quality_ok = bool(summary["max_R"] <= config.tolerance and summary["max_I"] <= config.tolerance)
    return fit


def evaluate_fit(fit: CorrelationFit, t, warn: bool = True):
    """C_fit(t); warns with :class:`ExtrapolationWarning` beyond ``t_max``."""
    t_arr = np.asarray(t, dtype=float)
    if warn and np.any(t_arr > fit.t_max):
        warnings.warn(f"evaluating fit beyond its horizon t_max={fit.t_max}", ExtrapolationWarning,
                      stacklevel=2)
    out = fit.evaluate(t_arr)
    return complex(out) if out.ndim == 0 else out


def fit_error_report(fit: CorrelationFit, target):
    """Instantaneous errors C_fit - C per sample plus max/rms in omega_c^2 units."""
    t, cr, ci = _unpack_target(target)
    if t.size != cr.size or t.size != ci.size:
        raise GridMismatchError("target arrays differ in length")
    d_r = fit.real_part(t) - cr
    d_i = fit.imag_part(t) - ci
    sc = fit.omega_c**2
    summary = {
        "max_R": float(np.abs(d_r).max() / sc),
        "max_I": float(np.abs(d_i).max() / sc),
        "rms_R": float(np.sqrt(np.mean(d_r**2)) / sc),
        "rms_I": float(np.sqrt(np.mean(d_i**2)) / sc),
    }
    return d_r, d_i, summary
