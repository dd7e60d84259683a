"""Command-line entry point: fit-bath, relax, respond, spectrum, kernel, sweep, inspect, rerun.

User-facing times are in 1/Delta and frequencies in Delta. Internally
omega_c = 1, so Delta = 1 / (omega_c/Delta) and a time t*Delta maps to
t * (omega_c/Delta).
"""
from __future__ import annotations

import argparse
import copy
import functools
import json
import logging
import os
import sys
import tempfile
import warnings
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from .analysis import (SweepSettings, TailWarning, delta_m_spectrum, detect_ci,
                       extract_rate_kernel, integrated_rate, kernel_tail_decayed,
                       sweep_phase_boundary, write_boundaries)
from .bath import BathSpec, correlation_series
from .decomp import CorrelationFit, FitConfig, fit_correlation, fit_error_report
from .errors import BudgetExceededError, ConfigError, DivergenceError, SBHeomError
from .heom import STATE_FORMAT, SystemSpec, load_state, save_state
from .hierarchy import hierarchy_size
from .response import (PropagationConfig, absorption_spectrum, ground_state, linear_response,
                       relax_to_equilibrium, spectrum_peaks)
from .series import TimeSeries, read_manifest, write_csv

log = logging.getLogger("sbheom")

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_DIVERGENCE, EXIT_BUDGET = 0, 1, 2, 3, 4
CACHE_ENV = "SBHEOM_CACHE_DIR"


# ---------------------------------------------------------------- cache


class Cache:
    """Content-addressed files; writers rename into place so readers never see partial files."""

    def __init__(self, root=None):
        root = root or os.environ.get(CACHE_ENV) or Path.home() / ".cache" / "sbheom"
        self.root = Path(root)

    def path(self, kind: str, key: str, suffix: str) -> Path:
        return self.root / kind / f"{key}{suffix}"

    def _atomic(self, target: Path, write):
        target.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=target.parent, prefix=".tmp-")
        os.close(fd)
        try:
            write(tmp)
            os.replace(tmp, target)
        finally:
            if os.path.exists(tmp):
                os.unlink(tmp)

    def put_text(self, target: Path, text: str):
        self._atomic(target, lambda p: Path(p).write_text(text))

    def put_array(self, target: Path, arr: np.ndarray):
        def write(p):
            with open(p, "wb") as fh:
                np.save(fh, arr)
        self._atomic(target, write)

    def put_state(self, target: Path, state, fit_hash: str):
        self._atomic(target, lambda p: save_state(p, state, fit_hash))


def _atomic_write_text(path: Path, text: str):
    tmp = path.with_name(f".{path.name}.tmp")
    tmp.write_text(text)
    os.replace(tmp, path)


def _write_json(path: Path, doc: dict):
    _atomic_write_text(path, json.dumps(doc, indent=1, sort_keys=True, allow_nan=True) + "\n")


# ---------------------------------------------------------------- pipeline


def _ratio(cfg) -> float:
    return cfg["system"]["omega_c_over_delta"]


def system_of(cfg) -> SystemSpec:
    return SystemSpec(delta=1.0 / _ratio(cfg), mu=cfg["system"]["mu"])


def propagation_of(cfg) -> PropagationConfig:
    h, integ = cfg["hierarchy"], cfg["integration"]
    return PropagationConfig(H=h["H"], dt=integ["dt"] * _ratio(cfg), stride=integ["stride"],
                             rescale=h["rescale"], filter_threshold=h["filter"], budget=h["budget"])


def _fit_config(cfg) -> FitConfig:
    f = cfg["fit"]
    return FitConfig(n_R=f["NR"], n_I=f["NI"], osc_R=f["osc_R"], osc_I=f["osc_I"],
                     linear_R=f["linear_R"], linear_I=f["linear_I"], multistart=f["multistart"],
                     seed=f["seed"], tolerance=f["tolerance"], weighting=f["weighting"])


def unit_target(cfg, s: float, cache: Cache) -> tuple[str, np.ndarray]:
    """Sampled C(t) at alpha = 1 as rows (t, C_R, C_I)."""
    f = cfg["fit"]
    key = cfgmod.digest({"s": s, "t_max": f["t_max_wc"], "n": f["n_samples"], "v": __version__})
    path = cache.path("target", key, ".npy")
    if path.exists():
        log.info("cache hit: correlation target %s", key[:12])
        return key, np.load(path)
    log.info("cache miss: correlation target %s", key[:12])
    ser = correlation_series(f["t_max_wc"], f["n_samples"], BathSpec(s, 1.0))
    arr = np.vstack([ser.t, ser.values.real, ser.values.imag])
    cache.put_array(path, arr)
    return key, arr


def unit_fit(cfg, s: float, cache: Cache) -> tuple[CorrelationFit, np.ndarray]:
    """Fit at alpha = 1; C is linear in alpha so every coupling reuses it."""
    tkey, target = unit_target(cfg, s, cache)
    fparams = {k: v for k, v in cfg["fit"].items() if k not in ("file", "auto", "tolerance")}
    key = cfgmod.digest({"target": tkey, "fit": fparams, "v": __version__})
    path = cache.path("fit", key, ".json")
    if path.exists():
        log.info("cache hit: fit %s", key[:12])
        return CorrelationFit.loads(path.read_text()), target
    log.info("cache miss: fit %s", key[:12])
    fit = fit_correlation(tuple(target), _fit_config(cfg))
    cache.put_text(path, fit.dumps())
    return fit, target


def _load_fit_file(path) -> CorrelationFit:
    doc = json.loads(Path(path).read_text())
    return CorrelationFit.from_dict(doc.get("fit", doc))


def resolve_fit(cfg, cache: Cache) -> CorrelationFit:
    f = cfg["fit"]
    if f["file"]:
        try:
            fit = _load_fit_file(f["file"])
        except OSError as exc:
            raise ConfigError("fit.file", f"cannot read {f['file']}: {exc.strerror}") from exc
        log.info("using fit from %s", f["file"])
        return fit
    unit, _ = unit_fit(cfg, cfg["bath"]["s"], cache)
    return scale_fit(unit, cfg["bath"]["alpha"], f["tolerance"])


def scale_fit(unit: CorrelationFit, alpha: float, tolerance: float) -> CorrelationFit:
    fit = unit.scaled(alpha)
    fit.quality_ok = bool(fit.residual.get("max_R", 0) <= tolerance
                          and fit.residual.get("max_I", 0) <= tolerance)
    return fit


def _equilibrium_key(cfg, fit) -> str:
    h, integ = cfg["hierarchy"], cfg["integration"]
    return cfgmod.digest({"fit": fit.hash, "ratio": _ratio(cfg), "initial": cfg["system"]["initial"],
                          "H": h["H"], "rescale": h["rescale"],
                          "filter": h["filter"], "t_eq": integ["t_eq"], "dt": integ["dt"],
                          "stride": integ["stride"], "v": __version__})


def equilibrium(cfg, fit, cache: Cache):
    """sigma_eq, the relaxation record M(t) and its drift diagnostic (cached)."""
    # enforced even on a cache hit so a config never silently exceeds its own budget
    info = _hierarchy_info(cfg, fit)
    if info["n_ado"] > cfg["hierarchy"]["budget"]:
        raise BudgetExceededError(info["n_ado"], cfg["hierarchy"]["budget"])
    key = _equilibrium_key(cfg, fit)
    st_path, m_path, d_path = (cache.path("equilibrium", key, sfx) for sfx in (".ado", ".npy", ".json"))
    if st_path.exists() and m_path.exists() and d_path.exists():
        log.info("cache hit: equilibrium %s (relaxation skipped)", key[:12])
        state, _ = load_state(st_path)
        diag = json.loads(d_path.read_text())
        return key, state, np.load(m_path), diag
    log.info("cache miss: equilibrium %s; relaxing to t*Delta = %g", key[:12],
             cfg["integration"]["t_eq"])
    pc = propagation_of(cfg)
    t_eq = cfg["integration"]["t_eq"] * _ratio(cfg)
    system = system_of(cfg)
    rho0 = ground_state(system) if cfg["system"]["initial"] == "ground" else None
    eq = relax_to_equilibrium(fit, system, t_eq, pc, rho0=rho0)
    diag = {"drift": eq.drift, "equilibrated": eq.equilibrated, "n_ado": len(eq.state.space)}
    if not eq.equilibrated:
        log.warning("M(t) still drifts by %.3g over the final 10%% of the relaxation run "
                    "(closed system, localized phase or t_eq too short)", eq.drift)
    cache.put_state(st_path, eq.state, fit.hash)
    cache.put_array(m_path, eq.M.values)
    cache.put_text(d_path, json.dumps(diag, sort_keys=True))
    return key, eq.state, eq.M.values, diag


def response(cfg, fit, cache: Cache):
    eq_key, state, _, diag = equilibrium(cfg, fit, cache)
    key = cfgmod.digest({"eq": eq_key, "t_resp": cfg["integration"]["t_resp"],
                         "mu": cfg["system"]["mu"], "v": __version__})
    path = cache.path("response", key, ".npy")
    if path.exists():
        log.info("cache hit: response %s", key[:12])
        return np.load(path), diag
    log.info("cache miss: response %s", key[:12])
    pc = propagation_of(cfg)
    res = linear_response(state, fit, system_of(cfg), cfg["integration"]["t_resp"] * _ratio(cfg), pc)
    if res.imag_residual > 1e-8:
        log.warning("imaginary residual of chi is %.3g of its amplitude", res.imag_residual)
    cache.put_array(path, res.chi.values)
    return res.chi.values, dict(diag, imag_residual=res.imag_residual)


def _user_series(cfg, values) -> TimeSeries:
    dt = cfg["integration"]["dt"] * cfg["integration"]["stride"]
    return TimeSeries(0.0, dt, np.asarray(values), {"t": "1/Delta"})


def _hierarchy_info(cfg, fit) -> dict:
    return {"N_R": fit.n_R, "N_I": fit.n_I, "H": cfg["hierarchy"]["H"],
            "n_ado": hierarchy_size(fit.n_R + fit.n_I, cfg["hierarchy"]["H"])}


def _outdir(cfg) -> Path:
    out = Path(cfg["output"]["dir"])
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------- commands


def cmd_fit_bath(cfg, cache, created):
    s, alpha = cfg["bath"]["s"], cfg["bath"]["alpha"]
    unit, target = unit_fit(cfg, s, cache)
    fit = scale_fit(unit, alpha, cfg["fit"]["tolerance"])
    t, cr, ci = target[0], alpha * target[1], alpha * target[2]
    d_r, d_i, _ = fit_error_report(fit, (t, cr, ci))
    if not fit.quality_ok:
        log.warning("fit residual %s exceeds the tolerance %g", fit.residual, cfg["fit"]["tolerance"])
    manifest = cfgmod.make_manifest("fit-bath", cfg, created, fit_hash=fit.hash)
    out = _outdir(cfg)
    _write_json(out / "fit.json", {"fit": fit.to_dict(), "manifest": manifest})
    write_csv(out / "fit_errors.csv", {"t": t, "dC_R": d_r, "dC_I": d_i}, manifest)
    write_csv(out / "fit_overlay.csv", {"t": t, "C_R": cr, "C_I": ci, "fit_R": fit.real_part(t),
                                        "fit_I": fit.imag_part(t)}, manifest)
    return ["fit.json", "fit_errors.csv", "fit_overlay.csv"]


def cmd_relax(cfg, cache, created):
    fit = resolve_fit(cfg, cache)
    _, _, M, diag = equilibrium(cfg, fit, cache)
    manifest = cfgmod.make_manifest("relax", cfg, created, fit_hash=fit.hash,
                                    hierarchy=_hierarchy_info(cfg, fit))
    out = _outdir(cfg)
    ser = _user_series(cfg, M)
    write_csv(out / "relax_M.csv", {"t": ser.t, "M": M}, manifest)
    _write_json(out / "relax_summary.json", {"drift": diag["drift"],
                                             "equilibrated": diag["equilibrated"],
                                             "manifest": manifest})
    return ["relax_M.csv", "relax_summary.json"]


def cmd_respond(cfg, cache, created):
    fit = resolve_fit(cfg, cache)
    chi, _ = response(cfg, fit, cache)
    manifest = cfgmod.make_manifest("respond", cfg, created, fit_hash=fit.hash,
                                    hierarchy=_hierarchy_info(cfg, fit))
    ser = _user_series(cfg, chi)
    write_csv(_outdir(cfg) / "chi.csv", {"t": ser.t, "chi": chi}, manifest)
    return ["chi.csv"]


def cmd_spectrum(cfg, cache, created):
    fit = resolve_fit(cfg, cache)
    chi, _ = response(cfg, fit, cache)
    o = cfg["output"]
    ser = _user_series(cfg, chi)
    spec = absorption_spectrum(ser, o["omega_max"], o["d_omega"], o["window"], o["tau"])
    raw = absorption_spectrum(ser, o["omega_max"], o["d_omega"], "none")
    peaks = spectrum_peaks(spec, o["min_prominence"])
    manifest = cfgmod.make_manifest("spectrum", cfg, created, fit_hash=fit.hash,
                                    hierarchy=_hierarchy_info(cfg, fit), window=spec.window)
    out = _outdir(cfg)
    write_csv(out / "spectrum.csv", {"omega": spec.omega, "chi2": spec.values,
                                     "chi2_raw": raw.values}, manifest)
    write_csv(out / "peaks.csv", {
        "location": [p.location for p in peaks], "height": [p.height for p in peaks],
        "half_width": [p.half_width for p in peaks], "prominence": [p.prominence for p in peaks],
    }, manifest)
    return ["spectrum.csv", "peaks.csv"]


def _sweep_settings(cfg) -> SweepSettings:
    sw, o = cfg["sweep"], cfg["output"]
    return SweepSettings(delta=1.0, kappa_threshold=sw["kappa_threshold"],
                         prominence_threshold=sw["prominence_threshold"],
                         omega_floor=sw["omega_floor"], omega_max=o["omega_max"],
                         d_omega=o["d_omega"], tail_fraction=o["tail_fraction"],
                         window=o["window"], tau=o["tau"])


def cmd_kernel(cfg, cache, created):
    fit = resolve_fit(cfg, cache)
    _, _, M, diag = equilibrium(cfg, fit, cache)
    ser = _user_series(cfg, M)
    k = extract_rate_kernel(ser)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", TailWarning)
        kappa0 = integrated_rate(k)
    decayed = kernel_tail_decayed(k)
    if not decayed:
        log.warning("rate kernel has not decayed by the end of the record; kappa0 is a truncated integral")
    st = _sweep_settings(cfg)
    dm = delta_m_spectrum(ser, st.omega_max, st.d_omega, st.tail_fraction, st.window, st.tau)
    coh = detect_ci(dm, st.omega_floor, st.prominence_threshold)
    manifest = cfgmod.make_manifest("kernel", cfg, created, fit_hash=fit.hash,
                                    hierarchy=_hierarchy_info(cfg, fit))
    out = _outdir(cfg)
    write_csv(out / "kernel.csv", {"t": k.t, "k": k.values}, manifest)
    write_csv(out / "delta_m.csv", {"omega": dm.omega, "delta_m": dm.values}, manifest)
    _write_json(out / "kernel_summary.json", {
        "kappa0": kappa0, "kappa0_below_threshold": kappa0 <= st.kappa_threshold,
        "tail_decayed": decayed, "coherent": coh.coherent, "side_peak_prominence": coh.prominence,
        "side_peak_location": coh.location, "m_inf": dm.window["m_inf"], "drift": diag["drift"],
        "manifest": manifest,
    })
    return ["kernel.csv", "delta_m.csv", "kernel_summary.json"]


def _sweep_base(cfg) -> dict:
    base = cfgmod.computational(cfg)
    base.pop("bath")
    base["sweep"] = {k: v for k, v in base["sweep"].items() if k not in ("s", "alpha")}
    return base


def sweep_point(cache_root, s, alpha, base):
    """Relaxation run for one grid point (module level so worker processes can import it)."""
    cache = Cache(cache_root)
    cfg = copy.deepcopy(base)
    cfg["bath"] = {"s": s, "alpha": alpha}
    unit, _ = unit_fit(cfg, s, cache)
    fit = scale_fit(unit, alpha, cfg["fit"]["tolerance"])
    _, _, M, diag = equilibrium(cfg, fit, cache)
    return {"M": _user_series(cfg, M), "drift": diag["drift"], "H": cfg["hierarchy"]["H"]}


def cmd_sweep(cfg, cache, created):
    if cfg["fit"]["file"]:
        raise ConfigError("fit.file", "a sweep fits each s itself; remove fit.file")
    sw = cfg["sweep"]
    base = _sweep_base(cfg)
    manifest = cfgmod.make_manifest("sweep", cfg, created)
    out = _outdir(cfg)
    runner = functools.partial(sweep_point, str(cache.root))
    result = sweep_phase_boundary(sw["s"], sw["alpha"], base, runner, _sweep_settings(cfg),
                                  out_csv=out / "sweep.csv", workers=sw["workers"],
                                  manifest=manifest)
    log.info("sweep: %d points computed, %d reused", len(result.computed),
             len(result.records) - len(result.computed))
    failed = [r for r in result.records if r.status != "ok"]
    for r in failed:
        log.warning("point s=%g alpha=%g %s", r.s, r.alpha, r.status)
    write_boundaries(out / "boundary.json", result, manifest)
    return ["sweep.csv", "boundary.json"]


COMMANDS = {
    "fit-bath": cmd_fit_bath,
    "relax": cmd_relax,
    "respond": cmd_respond,
    "spectrum": cmd_spectrum,
    "kernel": cmd_kernel,
    "sweep": cmd_sweep,
}


def run(command: str, cfg: dict, created: str | None = None, cache: Cache | None = None) -> list[Path]:
    """Execute one pipeline; returns the written paths."""
    created = created or datetime.now(timezone.utc).isoformat(timespec="seconds")
    cache = cache or Cache()
    r = _ratio(cfg)
    log.info("omega_c/Delta = %g: internal units omega_c = 1, Delta = %.6g, dt = %.6g/omega_c",
             r, 1.0 / r, cfg["integration"]["dt"] * r)
    names = COMMANDS[command](cfg, cache, created)
    out = Path(cfg["output"]["dir"])
    return [out / n for n in names]


def inspect_file(path) -> dict:
    path = Path(path)
    if not path.exists():
        raise SBHeomError(f"{path} does not exist")
    with open(path, "rb") as fh:
        head = fh.read(8)
    if head == STATE_FORMAT[:8]:
        _, header = load_state(path)
        return header
    manifest = read_manifest(path)
    if manifest is None:
        raise SBHeomError(f"{path} carries no manifest")
    return manifest


def rerun(path, out_dir) -> list[Path]:
    manifest = inspect_file(path)
    if "command" not in manifest or manifest["command"] not in COMMANDS:
        raise SBHeomError(f"{path} was not written by a rerunnable command")
    cfg = cfgmod.config_from_manifest(manifest, str(out_dir))
    return run(manifest["command"], cfg, created=manifest["created"])


# ---------------------------------------------------------------- entry point


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sbheom", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"sbheom {__version__}")
    p.add_argument("-q", "--quiet", action="store_true", help="only log warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        c = sub.add_parser(name, help=f"run the {name} pipeline")
        c.add_argument("config", help="YAML or JSON config file")
        c.add_argument("--out", help="override output.dir")
        if name == "sweep":
            c.add_argument("--workers", type=int, help="override sweep.workers")
    c = sub.add_parser("inspect", help="print the manifest embedded in an output file")
    c.add_argument("file")
    c = sub.add_parser("rerun", help="regenerate an output file from its embedded manifest")
    c.add_argument("file")
    c.add_argument("--out", default="rerun", help="directory for the regenerated files")
    return p


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    logging.captureWarnings(True)
    warnings.formatwarning = lambda msg, cat, *_, **__: f"{cat.__name__}: {msg}"
    try:
        if args.command == "inspect":
            print(json.dumps(inspect_file(args.file), indent=1, sort_keys=True))
            return EXIT_OK
        if args.command == "rerun":
            written = rerun(args.file, args.out)
        else:
            cfg = cfgmod.load(args.config, args.command)
            if args.out:
                cfg["output"]["dir"] = args.out
            if getattr(args, "workers", None):
                cfg["sweep"]["workers"] = args.workers
            written = run(args.command, cfg)
        for path in written:
            log.info("wrote %s", path)
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DivergenceError as exc:
        print(f"numerical divergence: {exc}; reduce integration.dt or hierarchy.H", file=sys.stderr)
        return EXIT_DIVERGENCE
    except BudgetExceededError as exc:
        print(f"budget exceeded: {exc}; lower hierarchy.H, fit.NR/NI or raise hierarchy.budget",
              file=sys.stderr)
        return EXIT_BUDGET
    except (SBHeomError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
