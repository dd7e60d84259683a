"""Rate kernels, coherence diagnostics and (s, alpha) phase-boundary scans."""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, asdict, field
from typing import Callable

import numpy as np

from .errors import DomainError, SBHeomError
from .response import _trapz_transform, _window_meta, frequency_grid, window_weights
from .series import MANIFEST_PREFIX, Spectrum, TimeSeries, canonical_json


class TailWarning(UserWarning):
    pass


def derivative4(y: np.ndarray, dt: float) -> np.ndarray:
    """First derivative by fourth-order differences (one-sided near the ends)."""
    y = np.asarray(y, dtype=float)
    n = y.size
    if n < 5:
        raise DomainError("need at least five samples for fourth-order differences")
    d = np.empty(n)
    d[2:-2] = (-y[4:] + 8 * y[3:-1] - 8 * y[1:-3] + y[:-4]) / (12 * dt)
    d[0] = (-25 * y[0] + 48 * y[1] - 36 * y[2] + 16 * y[3] - 3 * y[4]) / (12 * dt)
    d[1] = (-3 * y[0] - 10 * y[1] + 18 * y[2] - 6 * y[3] + y[4]) / (12 * dt)
    d[-1] = (25 * y[-1] - 48 * y[-2] + 36 * y[-3] - 16 * y[-4] + 3 * y[-5]) / (12 * dt)
    d[-2] = (3 * y[-1] + 10 * y[-2] - 18 * y[-3] + 6 * y[-4] - y[-5]) / (12 * dt)
    return d


def _second_derivative_at_start(y, dt):
    return (45 * y[0] - 154 * y[1] + 214 * y[2] - 156 * y[3] + 61 * y[4] - 10 * y[5]) / (12 * dt * dt)


def _forward_solve(dm, m, dt, k0):
    n = m.size
    k = np.zeros(n)
    k[0] = k0
    for i in range(1, n):
        # sum_{j=1}^{i-1} k[i-j] m[j]
        conv = np.dot(k[i - 1:0:-1], m[1:i]) if i > 1 else 0.0
        k[i] = (-dm[i] / (2 * dt) - conv - 0.5 * k[0] * m[i]) / (0.5 * m[0])
    return k


def _fourth_difference(v):
    return v[:-4] - 4 * v[1:-3] + 6 * v[2:-2] - 4 * v[3:-1] + v[4:]


def extract_rate_kernel(M: TimeSeries, tol: float = 1e-6) -> TimeSeries:
    """Solve dM/dt = -2 int_0^t k(t - tau) M(tau) dtau for k on the grid of M.

    dM/dt comes from fourth-order differences, the convolution from the
    trapezoid rule, and k is obtained by forward substitution.

    The equation at t = 0 leaves k(0) free, and any error in it persists as
    a non-decaying (-1)^n component of the solution. The solution is affine
    in k(0), so k(0) is chosen by least squares to remove that component
    (measured with fourth differences). Short records fall back to
    M''(0) = -2 k(0) M(0).
    """
    m = np.asarray(M.values, dtype=float)
    dt = M.dt
    if m.size < 6:
        raise DomainError("need at least six samples")
    if abs(m[0] - 1.0) > tol:
        raise DomainError(f"M(0) = {m[0]!r} is not 1 within {tol}")
    diag = 0.5 * dt * m[0]
    if abs(diag) < 1e-14:
        raise DomainError("diagonal weight of the Volterra solve vanishes; dt is degenerate")
    dm = derivative4(m, dt)
    base = _forward_solve(dm, m, dt, 0.0)
    unit = _forward_solve(np.zeros_like(m), m, dt, 1.0)
    du, db = _fourth_difference(unit), _fourth_difference(base)
    norm = np.dot(du, du)
    if m.size >= 12 and norm > 0:
        k0 = -np.dot(du, db) / norm
    else:
        k0 = -_second_derivative_at_start(m, dt) / (2 * m[0])
    k = base + k0 * unit
    return TimeSeries(M.t0, dt, k, {"t": M.units.get("t", ""), "value": "1/t^2"})


def forward_convolution(k: TimeSeries, M0: float = 1.0) -> TimeSeries:
    """Integrate dM/dt = -2 int k(t-tau) M(tau) dtau forward (trapezoid, implicit in M_n).

    Used to check extracted kernels; second order in dt.
    """
    kv = np.asarray(k.values, dtype=float)
    dt = k.dt
    n = kv.size
    m = np.zeros(n)
    m[0] = M0
    g = np.zeros(n)  # g[i] = int_0^{t_i} k(t_i - tau) M(tau) dtau
    for i in range(1, n):
        part = np.dot(kv[i - 1:0:-1], m[1:i]) if i > 1 else 0.0
        known = dt * (0.5 * kv[i] * m[0] + part)
        # m[i] = m[i-1] - dt * (g[i-1] + g[i]), with g[i] = known + 0.5 dt k0 m[i]
        c = 0.5 * dt * kv[0]
        m[i] = (m[i - 1] - dt * (g[i - 1] + known)) / (1 + dt * c)
        g[i] = known + c * m[i]
    return TimeSeries(k.t0, dt, m, {"t": k.units.get("t", ""), "value": "1"})


def kernel_tail_decayed(k: TimeSeries, threshold: float = 1e-3, fraction: float = 0.1) -> bool:
    """Smoothed |k| over the final ``fraction`` below ``threshold`` * max|k|."""
    v = np.asarray(k.values, dtype=float)
    smooth = 0.5 * (v[1:] + v[:-1])
    tail = smooth[int((1 - fraction) * smooth.size):]
    scale = np.abs(smooth).max()
    return bool(scale == 0 or np.abs(tail).max() <= threshold * scale)


def integrated_rate(k: TimeSeries, tail_threshold: float = 1e-3) -> float:
    """kappa_0 = int k dt over the record (trapezoid); warns if k has not decayed."""
    v = np.asarray(k.values, dtype=float)
    if not kernel_tail_decayed(k, tail_threshold):
        warnings.warn("rate kernel has not decayed by the end of the record", TailWarning, stacklevel=2)
    return float(k.dt * (v.sum() - 0.5 * (v[0] + v[-1])))


def delta_m_spectrum(M: TimeSeries, omega_max: float, d_omega: float, tail_fraction: float = 0.1,
                     window: str = "none", tau: float | None = None, fraction: float = 0.1,
                     omega_min: float = 0.0) -> Spectrum:
    """2 int (M(t) - M_inf) cos(omega t) dt with M_inf the mean over the final window."""
    m = np.asarray(M.values, dtype=float)
    start = int(math.floor((1 - tail_fraction) * (m.size - 1)))
    tail = m[start:]
    # centred on the first tail sample so a constant tail is reproduced exactly
    m_inf = float(tail[0] + (tail - tail[0]).mean())
    t = M.t
    f = (m - m_inf) * window_weights(t, window, tau, fraction)
    omegas = frequency_grid(omega_max, d_omega, omega_min)
    vals = 2.0 * _trapz_transform(t - t[0], f, omegas, np.cos)
    meta = _window_meta(window, tau, fraction)
    meta["m_inf"] = m_inf
    return Spectrum(float(omegas[0]), d_omega, vals, meta)


@dataclass(frozen=True)
class Coherence:
    coherent: bool
    prominence: float
    location: float | None


def detect_ci(delta_m: Spectrum, omega_floor: float, threshold: float = 0.05) -> Coherence:
    """Look for a finite-frequency side peak in delta M(omega).

    For every interior local maximum above ``omega_floor`` the prominence is
    its height minus the lowest value between omega = 0 and the peak,
    divided by |delta M(0)|. The run is coherent when the largest such ratio
    is >= ``threshold`` (ties count as coherent).
    """
    v = delta_m.values
    om = delta_m.omega
    i0 = int(np.argmin(np.abs(om)))
    ref = abs(v[i0])
    best, where = 0.0, None
    for i in range(max(i0, 1), v.size - 1):
        if om[i] <= omega_floor:
            continue
        if v[i] > v[i - 1] and v[i] >= v[i + 1]:
            dip = v[i0:i + 1].min()
            prom = (v[i] - dip) / ref if ref > 0 else math.inf
            if prom > best:
                best, where = prom, float(om[i])
    return Coherence(bool(best >= threshold and where is not None), float(best), where)


@dataclass
class PhaseRecord:
    s: float
    alpha: float
    kappa0: float
    coherent: bool
    drift: float
    prominence: float
    status: str
    manifest_hash: str
    H: int = 0

    def row(self) -> dict:
        return asdict(self)


CSV_FIELDS = ["s", "alpha", "kappa0", "coherent", "drift", "prominence", "status", "manifest_hash", "H"]


@dataclass
class SweepSettings:
    """Post-processing of each relaxation run (times and rates in units of 1/Delta, Delta)."""

    delta: float
    kappa_threshold: float = 0.02
    prominence_threshold: float = 0.05
    omega_floor: float = 0.2
    omega_max: float = 4.0
    d_omega: float = 0.01
    tail_fraction: float = 0.1
    window: str = "cosine"
    tau: float | None = None


def point_hash(base: dict, s: float, alpha: float) -> str:
    doc = {"base": base, "s": s, "alpha": alpha}
    return hashlib.sha256(canonical_json(doc).encode()).hexdigest()[:16]


def analyse_run(M: TimeSeries, settings: SweepSettings) -> tuple[float, Coherence]:
    """kappa_0 in units of Delta and the coherence flag of one relaxation record."""
    k = extract_rate_kernel(M)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TailWarning)
        kappa0 = integrated_rate(k) / settings.delta
    d = settings.delta
    spec = delta_m_spectrum(M, settings.omega_max * d, settings.d_omega * d,
                            settings.tail_fraction, window=settings.window, tau=settings.tau)
    return kappa0, detect_ci(spec, settings.omega_floor * d, settings.prominence_threshold)


def _run_point(args):
    runner, s, alpha, base, settings, mhash = args
    try:
        out = runner(s, alpha, base)
        kappa0, coh = analyse_run(out["M"], settings)
        return PhaseRecord(s, alpha, kappa0, coh.coherent, float(out.get("drift", math.nan)),
                           coh.prominence, "ok", mhash, int(out.get("H", 0)))
    except (SBHeomError, FloatingPointError, DomainError) as exc:
        return PhaseRecord(s, alpha, math.nan, False, math.nan, math.nan,
                           f"failed: {type(exc).__name__}", mhash, 0)


def _crossing(alphas, values, threshold, below=True):
    """First alpha where ``values`` crosses ``threshold`` going up in alpha."""
    prev = None
    for a, v in zip(alphas, values):
        if v is None or (isinstance(v, float) and math.isnan(v)):
            continue
        hit = v <= threshold if below else v < threshold
        if hit:
            if prev is None:
                return {"value": None, "interval": [None, a]}
            a0, v0 = prev
            if v0 == v:
                return {"value": a, "interval": [a0, a]}
            x = a0 + (threshold - v0) * (a - a0) / (v - v0)
            return {"value": float(x), "interval": [a0, a]}
        prev = (a, v)
    last = prev[0] if prev else None
    return {"value": None, "interval": [last, None]}


def boundaries(records: list[PhaseRecord], settings: SweepSettings) -> dict:
    """alpha_c from kappa_0 <= threshold and alpha_CI from the prominence crossing, per s."""
    out = {}
    for s in sorted({r.s for r in records}):
        rs = sorted((r for r in records if r.s == s and r.status == "ok"), key=lambda r: r.alpha)
        alphas = [r.alpha for r in rs]
        out[repr(float(s))] = {
            "alpha_c": _crossing(alphas, [r.kappa0 for r in rs], settings.kappa_threshold),
            "alpha_ci": _crossing(alphas, [r.prominence for r in rs], settings.prominence_threshold,
                                  below=False),
        }
    return out


def _read_existing(path) -> dict:
    done = {}
    if path and os.path.exists(path):
        with open(path, newline="") as fh:
            lines = (line for line in fh if not line.startswith("#"))
            for row in csv.DictReader(lines):
                rec = PhaseRecord(float(row["s"]), float(row["alpha"]), float(row["kappa0"]),
                                  row["coherent"] == "True", float(row["drift"]),
                                  float(row["prominence"]), row["status"], row["manifest_hash"],
                                  int(row["H"]))
                done[rec.manifest_hash] = rec
    return done


def _fmt_cell(v):
    return repr(float(v)) if isinstance(v, float) else str(v)


def write_records(path, records: list[PhaseRecord], manifest: dict | None = None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="") as fh:
        if manifest is not None:
            fh.write(MANIFEST_PREFIX + canonical_json(manifest) + "\n")
        fh.write(",".join(CSV_FIELDS) + "\n")
        for r in sorted(records, key=lambda r: (r.s, r.alpha)):
            fh.write(",".join(_fmt_cell(getattr(r, f)) for f in CSV_FIELDS) + "\n")
    os.replace(tmp, path)


@dataclass
class SweepResult:
    records: list
    boundaries: dict
    computed: list = field(default_factory=list)


def sweep_phase_boundary(s_list, alpha_grid, base: dict, runner: Callable, settings: SweepSettings,
                         out_csv=None, workers: int = 1, manifest: dict | None = None) -> SweepResult:
    """Relax every (s, alpha), derive kappa_0 and the coherence flag, locate boundaries.

    ``runner(s, alpha, base)`` returns ``{"M": TimeSeries, "drift": float,
    "H": int}``. Completed points found in ``out_csv`` are reused, keyed by a
    hash of (base, s, alpha); the file is rewritten after every point.
    """
    s_list = list(s_list)
    alpha_grid = list(alpha_grid)
    if s_list != sorted(s_list) or alpha_grid != sorted(alpha_grid):
        raise ValueError("s and alpha grids must be ascending")
    done = _read_existing(out_csv)
    records = {}
    todo = []
    for s in s_list:
        for a in alpha_grid:
            h = point_hash(base, s, a)
            if h in done:
                records[h] = done[h]
            else:
                todo.append((runner, s, a, base, settings, h))
    computed = []

    def collect(rec):
        records[rec.manifest_hash] = rec
        computed.append((rec.s, rec.alpha))
        if out_csv:
            write_records(out_csv, list(records.values()), manifest)

    if workers > 1 and len(todo) > 1:
        with ProcessPoolExecutor(workers) as ex:
            for rec in ex.map(_run_point, todo):
                collect(rec)
    else:
        for job in todo:
            collect(_run_point(job))
    recs = sorted(records.values(), key=lambda r: (r.s, r.alpha))
    if out_csv:
        write_records(out_csv, recs, manifest)
    return SweepResult(recs, boundaries(recs, settings), computed)


def write_boundaries(path, result: SweepResult, manifest: dict | None = None) -> None:
    doc = {"boundaries": result.boundaries}
    if manifest is not None:
        doc["manifest"] = manifest
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=1, sort_keys=True)
        fh.write("\n")
