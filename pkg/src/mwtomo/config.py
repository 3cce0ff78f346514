"""Flat ``key = value`` configuration files.

Keys are grouped by a dotted prefix (``source.omega``, ``inverse.gamma``).
Blank lines and ``#`` comments are ignored. Unknown keys, duplicates and
unparsable values raise `ConfigError` with the offending line number.
Every key has a default; see `KEYS` for the full list.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path


class ConfigError(ValueError):
    """Malformed configuration; the message names the line."""


def _floats(n_allowed):
    def parse(text: str):
        parts = text.replace(",", " ").split()
        vals = tuple(float(p) for p in parts)
        if len(vals) not in n_allowed:
            raise ValueError(f"expected {' or '.join(map(str, n_allowed))} numbers")
        return vals
    return parse


def _optional(parse):
    def inner(text: str):
        return None if text.strip().lower() in ("", "none", "auto") else parse(text)
    return inner


def _bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise ValueError("expected true or false")


def _choice(*options):
    def parse(text: str):
        t = text.strip()
        if t not in options:
            raise ValueError(f"expected one of {', '.join(options)}")
        return t
    return parse


def _ints(text: str) -> tuple:
    return tuple(int(p) for p in text.replace(",", " ").split())


@dataclass(frozen=True)
class Key:
    default: object
    parse: object
    doc: str


_box = _floats((2, 6))
_vec = _floats((1, 3))

KEYS: dict[str, Key] = {
    "output.dir": Key("out", str, "directory for all outputs"),
    "output.vtk": Key(True, _bool, "write VTK meshes and fields"),
    "output.figures": Key(True, _bool, "write PNG figures"),
    "output.snapshots": Key((), _ints, "forward steps saved as VTK snapshots"),
    "run.seed": Key(0, int, "noise seed"),
    "run.threads": Key(1, int, "worker threads for inner loops"),
    "domain.omega": Key((-0.8840, -0.8630, -0.8945, 0.8824, 0.8648, 0.8949), _box,
                        "outer box: lo hi (cube) or lo1 lo2 lo3 hi1 hi2 hi3"),
    "domain.fem": Key((-0.7, -0.7, -0.7, 0.6984, 0.7018, 0.7004), _box, "FE box"),
    "domain.inner": Key(None, _optional(_box), "box of unknown coefficients; auto shrinks "
                        "the FE box by the overlap and mesh.out_layers"),
    "domain.h": Key((0.0368, 0.0326, 0.0389), _vec, "grid spacing, one or three values"),
    "mesh.out_layers": Key(1, int, "OUT cell layers around the default inner box"),
    "source.omega": Key(40.0, float, "angular frequency of the plane wave"),
    "source.amplitude": Key(1.0, float, "plane-wave amplitude"),
    "time.T": Key(3.0, float, "final time"),
    "time.tau": Key(0.006, _optional(float), "time step; auto takes the CFL step"),
    "time.cfl_safety": Key(0.9, float, "safety factor of the automatic time step"),
    "truth.kind": Key("phantom", _choice("phantom", "inclusion", "uniform", "none"),
                      "true medium for forward runs and error reporting"),
    "truth.inclusion": Key((-0.25, -0.25, -0.25, 0.125, 0.125, 0.125), _box,
                           "inclusion box for truth.kind = inclusion"),
    "truth.contrast": Key(2.0, float, "inclusion permittivity"),
    "truth.sigma": Key(0.0, float, "conductivity inside the inclusion"),
    "phantom.media": Key(None, _optional(str), "phantom raster file"),
    "phantom.table": Key("builtin:test1", str, "media table file or builtin:test1/test2"),
    "phantom.stride": Key(8, int, "subsampling stride"),
    "phantom.weight": Key(1.0, float, "divide eps_r by this factor (clamped at 1)"),
    "phantom.fit": Key(True, _bool, "stretch the raster over the FE box"),
    "data.file": Key("observations.txt", str, "observation file, relative to output.dir "
                     "unless absolute"),
    "data.refine": Key(3, int, "bisection rounds of the data mesh"),
    "data.substeps": Key(1, int, "time substeps of the data run"),
    "data.delta": Key(0.10, float, "relative noise level"),
    "data.smooth": Key(True, _bool, "smooth noisy data"),
    "data.window": Key(5, int, "temporal smoothing window in steps"),
    "data.radius": Key(1, int, "spatial smoothing radius in nodes"),
    "inverse.gamma": Key(1e-5, float, "Tikhonov regularization weight"),
    "inverse.eps0": Key(1.0, float, "initial guess and reference permittivity"),
    "inverse.theta": Key(1e-5, float, "gradient norm tolerance"),
    "inverse.norm_tol": Key(1e-4, float, "relative eps-norm change tolerance"),
    "inverse.max_iter": Key(20, int, "CGM iterations on the first level"),
    "inverse.alpha": Key(0.1, float, "largest pointwise change of the first trial step"),
    "inverse.restart": Key(10, int, "CG restart period"),
    "adapt.indicator": Key("first", _choice("first", "second"), "refinement indicator"),
    "adapt.beta": Key(0.8, float, "marking fraction"),
    "adapt.tol1": Key(1e-6, float, "stop when eps changes less than this between levels"),
    "adapt.tol2": Key(1e-7, float, "stop when the gradient norm is below this"),
    "adapt.max_levels": Key(2, int, "number of refinements"),
    "adapt.max_marks": Key(3, _optional(int), "refinements allowed per element lineage"),
    "adapt.level_iterations": Key(None, _optional(int),
                                  "CGM iterations on refined levels; auto uses inverse.max_iter"),
    "adapt.cfl_safety": Key(0.9, float, "safety factor of the step check after refinement"),
}


class Config(dict):
    """Parsed values keyed by full dotted name, defaults filled in."""

    source: str = "<defaults>"

    def box(self, key: str):
        v = self[key]
        if v is None:
            return None
        return (v[:1] * 3, v[1:] * 3) if len(v) == 2 else (v[:3], v[3:])

    def spacing(self) -> tuple:
        h = self["domain.h"]
        return h * 3 if len(h) == 1 else h


def defaults() -> Config:
    return Config({k: spec.default for k, spec in KEYS.items()})


def parse_text(text: str, source: str = "<string>") -> Config:
    cfg = defaults()
    cfg.source = source
    seen = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key '{key}'")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key '{key}' "
                              f"(first set on line {seen[key]})")
        seen[key] = lineno
        try:
            cfg[key] = KEYS[key].parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for '{key}': {exc}") from None
    return cfg


def load(path) -> Config:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def dump(cfg: Config) -> str:
    """Render every key, with its description as a comment."""
    out = []
    for key, spec in KEYS.items():
        v = cfg[key]
        if v is None:
            text = "auto"
        elif isinstance(v, bool):
            text = "true" if v else "false"
        elif isinstance(v, tuple):
            text = " ".join(f"{x:g}" if isinstance(x, float) else str(x) for x in v)
        else:
            text = str(v)
        out.append(f"# {spec.doc}")
        out.append(f"{key} = {text}")
    return "\n".join(out) + "\n"
