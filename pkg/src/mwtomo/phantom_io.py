"""Voxel phantoms: reading, subsampling and tissue weighting.

A phantom file is an ASCII raster. The first non-comment line holds
``nx ny nz dx dy dz ox oy oz``; the remaining tokens are ``nx*ny*nz`` media
codes in x-fastest order. A media table file lists one entry per line as
``code eps_r sigma label``. Lines starting with ``#`` are comments in both.

Media codes may be fractional (``1.1``, ``3.2``). They are normalised as
decimal strings, never floats, so lookups are exact.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from decimal import Decimal, InvalidOperation
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

#: Voxel count of the original breast phantom raster.
ORIGINAL_PHANTOM_NODES = 34_036_992


class PhantomFormatError(ValueError):
    """Raised for malformed phantom or media table files."""


def normalize_code(code) -> str:
    """Return the canonical decimal string of a media code.

    ``"-1"``, ``"-1.0"`` and ``-1`` all map to ``"-1"``; ``"1.10"`` maps
    to ``"1.1"``.
    """
    try:
        d = Decimal(str(code).strip())
    except InvalidOperation as exc:
        raise PhantomFormatError(f"invalid media code {code!r}") from exc
    if not d.is_finite():
        raise PhantomFormatError(f"invalid media code {code!r}")
    d = d.normalize()
    if d == 0:
        return "0"
    text = format(d, "f")
    return text


@dataclass(frozen=True)
class Medium:
    eps_r: float
    sigma: float
    label: str = ""


@dataclass(frozen=True)
class MediaTable:
    """Mapping from normalised media code to material parameters.

    Parameters
    ----------
    entries : dict
        ``code -> Medium``. Codes are normalised on construction.
    d1, d2 : float
        Upper bounds for ``eps_r`` and ``sigma``.
    """

    entries: dict
    d1: float = 10.0
    d2: float = 10.0

    def __post_init__(self):
        if not self.d1 > 1 or not self.d2 > 0:
            raise ValueError("bounds must satisfy d1 > 1 and d2 > 0")
        norm = {}
        for code, med in dict(self.entries).items():
            if not isinstance(med, Medium):
                med = Medium(*med)
            if not 1.0 <= med.eps_r <= self.d1:
                raise ValueError(
                    f"eps_r={med.eps_r} of media {code} outside [1, {self.d1}]")
            if not 0.0 <= med.sigma <= self.d2:
                raise ValueError(
                    f"sigma={med.sigma} of media {code} outside [0, {self.d2}]")
            norm[normalize_code(code)] = med
        object.__setattr__(self, "entries", norm)

    def __contains__(self, code) -> bool:
        return normalize_code(code) in self.entries

    def __getitem__(self, code) -> Medium:
        key = normalize_code(code)
        try:
            return self.entries[key]
        except KeyError:
            raise KeyError(f"unknown media code {key}") from None

    def codes(self) -> list[str]:
        return list(self.entries)


@dataclass(frozen=True, eq=False)
class VoxelPhantom:
    """Raster of media codes.

    The raster is held as an integer array ``index`` of shape
    ``(nx, ny, nz)`` into the list ``codes``; this keeps large rasters
    compact while lookups stay keyed on exact decimal strings.

    Parameters
    ----------
    dims : tuple of int
    spacing : tuple of float
    origin : tuple of float
    codes : tuple of str
        Distinct normalised codes.
    index : ndarray of int
        Code index per voxel, shape ``dims``.
    """

    dims: tuple
    spacing: tuple
    origin: tuple
    codes: tuple
    index: np.ndarray = field(repr=False)

    def __post_init__(self):
        if any(s <= 0 for s in self.spacing):
            raise ValueError("phantom spacing must be strictly positive")
        if tuple(self.index.shape) != tuple(self.dims):
            raise ValueError(
                f"media count mismatch: raster {self.index.shape} vs dims {self.dims}")

    @property
    def n_voxels(self) -> int:
        return int(np.prod(self.dims))

    def media(self) -> list[str]:
        """Media codes as a flat x-fastest list."""
        flat = self.index.ravel(order="F")
        return [self.codes[i] for i in flat]

    def field(self, table: MediaTable) -> tuple[np.ndarray, np.ndarray]:
        """Return ``(eps_r, sigma)`` rasters of shape ``dims``."""
        eps = np.array([table[c].eps_r for c in self.codes])
        sig = np.array([table[c].sigma for c in self.codes])
        return eps[self.index], sig[self.index]

    def sample(self, table: MediaTable, points, background=(1.0, 0.0)):
        """``(eps_r, sigma)`` of the voxels containing ``points``.

        Points outside the raster get ``background``.
        """
        x = np.atleast_2d(np.asarray(points, dtype=float))
        ijk = np.floor((x - np.array(self.origin)) / np.array(self.spacing)).astype(np.int64)
        ok = np.all((ijk >= 0) & (ijk < np.array(self.dims)), axis=1)
        eps_c = np.array([table[c].eps_r for c in self.codes])
        sig_c = np.array([table[c].sigma for c in self.codes])
        eps = np.full(len(x), float(background[0]))
        sig = np.full(len(x), float(background[1]))
        idx = self.index[tuple(ijk[ok].T)]
        eps[ok], sig[ok] = eps_c[idx], sig_c[idx]
        return eps, sig

    def validate(self, table: MediaTable) -> None:
        used = np.unique(self.index)
        for i in used:
            if self.codes[i] not in table.entries:
                raise KeyError(f"unknown media code {self.codes[i]}")

    @classmethod
    def uniform(cls, dims, code, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        """Phantom filled with a single media code."""
        dims = tuple(int(d) for d in dims)
        return cls(dims, tuple(map(float, spacing)), tuple(map(float, origin)),
                   (normalize_code(code),), np.zeros(dims, dtype=np.int32))

    @classmethod
    def from_codes(cls, codes, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
        """Build from a 3D array-like of codes indexed ``[i, j, k]``."""
        arr = np.asarray(codes, dtype=object)
        if arr.ndim != 3:
            raise ValueError("codes must be a 3D array")
        flat = [normalize_code(c) for c in arr.ravel()]
        uniq = sorted(set(flat), key=lambda s: Decimal(s))
        lookup = {c: i for i, c in enumerate(uniq)}
        index = np.array([lookup[c] for c in flat], dtype=np.int32).reshape(arr.shape)
        return cls(tuple(arr.shape), tuple(map(float, spacing)),
                   tuple(map(float, origin)), tuple(uniq), index)


def _data_lines(path: Path):
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.split("#", 1)[0].strip()
            if stripped:
                yield lineno, stripped


def load_media_table(path, d1: float = 10.0, d2: float = 10.0) -> MediaTable:
    """Read a media table file."""
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"file not found: {path}")
    entries = {}
    for lineno, line in _data_lines(path):
        parts = line.split(None, 3)
        if len(parts) < 3:
            raise PhantomFormatError(f"{path}:{lineno}: expected 'code eps_r sigma label'")
        try:
            eps, sig = float(parts[1]), float(parts[2])
        except ValueError as exc:
            raise PhantomFormatError(f"{path}:{lineno}: non-numeric value") from exc
        code = normalize_code(parts[0])
        if code in entries:
            raise PhantomFormatError(f"{path}:{lineno}: duplicate media code {code}")
        entries[code] = Medium(eps, sig, parts[3] if len(parts) > 3 else "")
    if not entries:
        raise PhantomFormatError(f"{path}: empty media table")
    return MediaTable(entries, d1=d1, d2=d2)


def load_phantom(media_file, table_file, d1: float = 10.0, d2: float = 10.0):
    """Read and validate a phantom raster and its media table.

    ``table_file`` may also be a `MediaTable` already in memory.

    Returns
    -------
    phantom : VoxelPhantom
    table : MediaTable

    Raises
    ------
    FileNotFoundError
        If either file is missing.
    PhantomFormatError
        Malformed header or media count mismatch.
    KeyError
        A media code is absent from the table.
    """
    media_file = Path(media_file)
    if not media_file.is_file():
        raise FileNotFoundError(f"file not found: {media_file}")
    if isinstance(table_file, MediaTable):
        table = table_file
    else:
        table = load_media_table(table_file, d1=d1, d2=d2)

    lines = _data_lines(media_file)
    try:
        lineno, header = next(lines)
    except StopIteration:
        raise PhantomFormatError(f"{media_file}: empty file") from None
    parts = header.split()
    if len(parts) != 9:
        raise PhantomFormatError(
            f"{media_file}:{lineno}: header needs 'nx ny nz dx dy dz ox oy oz'")
    try:
        dims = tuple(int(p) for p in parts[:3])
        spacing = tuple(float(p) for p in parts[3:6])
        origin = tuple(float(p) for p in parts[6:9])
    except ValueError as exc:
        raise PhantomFormatError(f"{media_file}:{lineno}: malformed header") from exc
    if min(dims) < 1:
        raise PhantomFormatError(f"{media_file}:{lineno}: dims must be positive")

    n = dims[0] * dims[1] * dims[2]
    lookup: dict[str, int] = {}
    raw_lookup: dict[str, int] = {}

    def register(tok: str) -> int:
        code = normalize_code(tok)
        if code not in table.entries:
            raise KeyError(f"unknown media code {code}")
        j = lookup.setdefault(code, len(lookup))
        raw_lookup[tok] = j
        return j

    flat = np.empty(n, dtype=np.int32)
    pos = 0
    for _, line in lines:
        toks = line.split()
        end = pos + len(toks)
        if end <= n:
            try:
                flat[pos:end] = [raw_lookup[t] for t in toks]
            except KeyError:
                flat[pos:end] = [raw_lookup[t] if t in raw_lookup else register(t)
                                 for t in toks]
        pos = end
    if pos != n:
        raise PhantomFormatError(
            f"{media_file}: media count mismatch, expected {n}, found {pos}")
    codes = tuple(sorted(lookup, key=lookup.get))
    index = flat.reshape(dims, order="F")
    phantom = VoxelPhantom(dims, spacing, origin, codes, index)
    return phantom, table


def save_phantom(path, phantom: VoxelPhantom) -> None:
    """Write a phantom raster in the ASCII format read by `load_phantom`."""
    header = " ".join(str(d) for d in phantom.dims)
    header += " " + " ".join(repr(float(s)) for s in phantom.spacing)
    header += " " + " ".join(repr(float(o)) for o in phantom.origin)
    flat = phantom.index.ravel(order="F")
    codes = np.array(phantom.codes, dtype=object)[flat]
    with open(path, "w", encoding="ascii") as fh:
        fh.write(header + "\n")
        per_line = max(1, phantom.dims[0])
        for start in range(0, len(codes), per_line):
            fh.write(" ".join(codes[start:start + per_line]) + "\n")


def save_media_table(path, table: MediaTable) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# code eps_r sigma label\n")
        for code, med in table.entries.items():
            fh.write(f"{code} {med.eps_r!r} {med.sigma!r} {med.label}\n".rstrip() + "\n")


def subsample(phantom: VoxelPhantom, stride: int) -> VoxelPhantom:
    """Point-sample every ``stride``-th voxel along each axis.

    Output dims are ``ceil(dim / stride)``, spacing grows by ``stride``,
    and output voxel ``(i, j, k)`` carries the input code at
    ``(stride*i, stride*j, stride*k)``.
    """
    stride = int(stride)
    if stride < 1:
        raise ValueError("stride must be a positive integer")
    if stride > 1 and any(stride >= d for d in phantom.dims):
        raise ValueError(f"stride {stride} not smaller than every dimension {phantom.dims}")
    if stride == 1:
        return phantom
    index = np.ascontiguousarray(phantom.index[::stride, ::stride, ::stride])
    dims = tuple(int(math.ceil(d / stride)) for d in phantom.dims)
    assert dims == index.shape
    spacing = tuple(stride * s for s in phantom.spacing)
    return VoxelPhantom(dims, spacing, phantom.origin, phantom.codes, index)


def weight_media(table: MediaTable, factor: float, rule=None, clamp: bool = True) -> MediaTable:
    """Scale permittivities, ``eps_r -> max(1, eps_r / factor)`` by default.

    Parameters
    ----------
    table : MediaTable
    factor : float
        Positive divisor.
    rule : callable, optional
        ``rule(code, medium, factor) -> Medium`` overriding the default.
    clamp : bool
        If False, a weighted value below 1 raises instead of being clamped.
    """
    if not factor > 0:
        raise ValueError("factor must be positive")
    out = {}
    for code, med in table.entries.items():
        if rule is not None:
            new = rule(code, med, factor)
        else:
            eps = med.eps_r / factor
            if eps < 1.0:
                if not clamp:
                    raise ValueError(f"weighted eps_r={eps} of media {code} below 1")
                logger.info("media %s: weighted eps_r %.4g clamped to 1", code, eps)
                eps = 1.0
            new = Medium(eps, med.sigma, med.label)
        out[code] = new
    return MediaTable(out, d1=table.d1, d2=table.d2)


_TABLE1_LABELS = {
    "-1": "immersion medium",
    "-2": "skin",
    "-4": "muscle",
    "1.1": "fibroconnective/glandular-1",
    "1.2": "fibroconnective/glandular-2",
    "1.3": "fibroconnective/glandular-3",
    "2": "transitional",
    "3.1": "fatty-1",
    "3.2": "fatty-2",
    "3.3": "fatty-3",
}

_TEST1 = {"-1": (1, 0), "-2": (1, 0), "-4": (1, 0), "1.1": (9, 1.2),
          "1.2": (8, 1), "1.3": (8, 1), "2": (1, 0), "3.1": (1, 0),
          "3.2": (1, 0), "3.3": (1, 0)}
_TEST2 = {code: (1, 0) for code in _TEST1}
_TEST2["1.1"] = (9, 1.2)


def builtin_table(name: str) -> MediaTable:
    """Weighted tissue tables ``"test1"`` and ``"test2"``."""
    key = name.lower().replace("-", "").replace("_", "")
    if key == "test1":
        src = _TEST1
    elif key == "test2":
        src = _TEST2
    else:
        raise ValueError(f"unknown builtin table {name!r}")
    return MediaTable({c: Medium(float(e), float(s), _TABLE1_LABELS[c])
                       for c, (e, s) in src.items()})
