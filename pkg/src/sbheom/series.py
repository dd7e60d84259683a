"""Uniformly sampled signals and their CSV representation."""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field

import numpy as np

MANIFEST_PREFIX = "# manifest: "


@dataclass
class TimeSeries:
    """Samples ``values[k]`` at ``t0 + k * dt``.

    ``units`` carries free-form tags for the abscissa and ordinate, e.g.
    ``{"t": "1/omega_c", "value": "omega_c^2"}``.
    """

    t0: float
    dt: float
    values: np.ndarray
    units: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if self.values.ndim != 1 or self.values.size < 2:
            raise ValueError("a TimeSeries needs at least two samples")

    @property
    def t(self) -> np.ndarray:
        return self.t0 + self.dt * np.arange(self.values.size)

    @property
    def real(self) -> "TimeSeries":
        return TimeSeries(self.t0, self.dt, self.values.real.copy(), dict(self.units))

    @property
    def imag(self) -> "TimeSeries":
        return TimeSeries(self.t0, self.dt, self.values.imag.copy(), dict(self.units))

    def __len__(self):
        return self.values.size


@dataclass
class Spectrum:
    """Real samples on the uniform grid ``omega0 + k * d_omega``."""

    omega0: float
    d_omega: float
    values: np.ndarray
    window: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if not self.d_omega > 0:
            raise ValueError(f"d_omega must be positive, got {self.d_omega}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("spectrum contains non-finite values")

    @property
    def omega(self) -> np.ndarray:
        return self.omega0 + self.d_omega * np.arange(self.values.size)

    def __len__(self):
        return self.values.size


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def _fmt(x) -> str:
    return repr(float(x))


def write_csv(path, columns: dict, manifest: dict | None = None) -> None:
    """Write named columns with an optional manifest comment line.

    Floats are written with ``repr`` so that reading back is lossless.
    """
    names = list(columns)
    arrays = [np.asarray(columns[n], dtype=float) for n in names]
    n = {a.size for a in arrays}
    if len(n) != 1:
        raise ValueError("columns differ in length")
    buf = io.StringIO()
    if manifest is not None:
        buf.write(MANIFEST_PREFIX + canonical_json(manifest) + "\n")
    buf.write(",".join(names) + "\n")
    for row in zip(*arrays):
        buf.write(",".join(_fmt(x) for x in row) + "\n")
    with open(path, "w", newline="\n") as fh:
        fh.write(buf.getvalue())


def read_manifest(path) -> dict | None:
    """Return the embedded manifest of a CSV or JSON output file."""
    with open(path) as fh:
        first = fh.readline()
        if first.startswith(MANIFEST_PREFIX):
            return json.loads(first[len(MANIFEST_PREFIX):])
        fh.seek(0)
        try:
            doc = json.load(fh)
        except json.JSONDecodeError:
            return None
    return doc.get("manifest") if isinstance(doc, dict) else None


def read_csv(path) -> tuple[dict | None, dict]:
    manifest = None
    rows = []
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    if lines and lines[0].startswith(MANIFEST_PREFIX):
        manifest = json.loads(lines[0][len(MANIFEST_PREFIX):])
        i = 1
    while i < len(lines) and lines[i].startswith("#"):
        i += 1
    names = lines[i].split(",")
    for line in lines[i + 1:]:
        if line:
            rows.append([float(x) for x in line.split(",")])
    data = np.array(rows, dtype=float).reshape(-1, len(names))
    return manifest, {n: data[:, k] for k, n in enumerate(names)}


def series_from_columns(t: np.ndarray, values: np.ndarray, units=None, rtol=1e-9) -> TimeSeries:
    """Rebuild a TimeSeries from a uniform abscissa column."""
    t = np.asarray(t, dtype=float)
    dt = (t[-1] - t[0]) / (t.size - 1)
    if not np.allclose(np.diff(t), dt, rtol=rtol, atol=0):
        raise ValueError("abscissa is not uniform")
    return TimeSeries(float(t[0]), float(dt), np.asarray(values), dict(units or {}))
