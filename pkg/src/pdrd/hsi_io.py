"""Hyperspectral cube containers, file formats and the synthetic scene generator.

Cubes are stored band-first, ``data[band, row, col]``; pixels are enumerated
row-major everywhere in the package (pixel ``i`` is ``(i // width, i % width)``).
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple

import numpy as np

__all__ = [
    "CubeFormatError",
    "HsiCube",
    "GroundTruth",
    "BackgroundClass",
    "SceneSpec",
    "load_cube",
    "save_cube",
    "normalize_bands",
    "flatten",
    "unflatten",
    "synth_scene",
    "default_scene_spec",
    "write_pgm",
    "read_pgm",
    "save_mask",
    "load_mask",
    "FORMATS",
    "read_flat_array",
    "write_flat_array",
]

FORMATS = ("flat-binary", "csv", "envi-raw")
FLAT_MAGIC = b"HSI1"
_PREAMBLE = struct.Struct("<III4s")

# ENVI data type codes that can be read; only float32 (4) is written.
_ENVI_DTYPES = {1: "u1", 2: "i2", 3: "i4", 4: "f4", 5: "f8", 12: "u2", 13: "u4"}


class CubeFormatError(ValueError):
    """Raised when a cube file or array does not describe a valid cube."""


def _first_nonfinite(arr: np.ndarray) -> Optional[Tuple[int, ...]]:
    bad = ~np.isfinite(arr)
    if not bad.any():
        return None
    return tuple(int(i) for i in np.argwhere(bad)[0])


@dataclass(frozen=True)
class HsiCube:
    """Immutable B x H x W hyperspectral image.

    ``data`` keeps its floating dtype (float32 cubes read from disk stay
    float32 so binary round trips are bit exact).
    """

    data: np.ndarray
    band_names: Optional[Tuple[str, ...]] = None

    def __post_init__(self):
        arr = np.asarray(self.data)
        if arr.ndim != 3:
            raise CubeFormatError(f"cube data must be 3-D (bands, rows, cols), got shape {arr.shape}")
        if min(arr.shape) < 1:
            raise CubeFormatError(f"cube dimensions must be >= 1, got {arr.shape}")
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        bad = _first_nonfinite(arr)
        if bad is not None:
            raise CubeFormatError(f"non-finite value at (band, row, col) = {bad}")
        arr = np.array(arr, copy=True)
        arr.setflags(write=False)
        object.__setattr__(self, "data", arr)
        if self.band_names is not None:
            names = tuple(str(n) for n in self.band_names)
            if len(names) != arr.shape[0]:
                raise CubeFormatError(f"{len(names)} band names for {arr.shape[0]} bands")
            object.__setattr__(self, "band_names", names)

    @property
    def bands(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]

    @property
    def n_pixels(self) -> int:
        return self.height * self.width

    def pixel(self, row: int, col: int) -> np.ndarray:
        return self.data[:, row, col]

    def equals(self, other: "HsiCube") -> bool:
        return self.data.shape == other.data.shape and bool(np.array_equal(self.data, other.data))


@dataclass(frozen=True)
class GroundTruth:
    """Boolean anomaly mask over the H x W grid (True = anomaly)."""

    mask: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.mask)
        if m.ndim != 2:
            raise ValueError(f"ground-truth mask must be 2-D, got shape {m.shape}")
        m = np.array(m, dtype=bool, copy=True)
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)

    @property
    def height(self) -> int:
        return self.mask.shape[0]

    @property
    def width(self) -> int:
        return self.mask.shape[1]

    @property
    def n_anomaly(self) -> int:
        return int(self.mask.sum())

    @property
    def n_background(self) -> int:
        return int(self.mask.size - self.mask.sum())


# --------------------------------------------------------------------------
# File formats
# --------------------------------------------------------------------------


def _infer_format(path: Path) -> str:
    suffix = path.suffix.lower()
    if suffix == ".csv":
        return "csv"
    if suffix in (".hdr", ".img", ".raw", ".dat"):
        return "envi-raw"
    return "flat-binary"


def _envi_paths(path: Path) -> Tuple[Path, Path]:
    """Return (header, raw) for an ENVI pair given either member."""
    if path.suffix.lower() == ".hdr":
        header = path
        for ext in ("", ".img", ".raw", ".dat"):
            cand = path.with_suffix(ext)
            if cand.exists():
                return header, cand
        return header, path.with_suffix("")
    candidates = [Path(str(path) + ".hdr"), path.with_suffix(".hdr")]
    for cand in candidates:
        if cand.exists():
            return cand, path
    return candidates[0], path


def load_cube(path, format: Optional[str] = None) -> HsiCube:
    """Read a cube from ``path``.

    ``format`` is one of ``FORMATS``; when omitted it is inferred from the
    file extension (``.csv``, ``.hdr``/``.img``/``.raw``/``.dat`` for ENVI,
    anything else flat-binary).
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "flat-binary":
        return _load_flat(path)
    if fmt == "csv":
        return _load_csv(path)
    if fmt == "envi-raw":
        return _load_envi(path)
    raise CubeFormatError(f"unknown cube format {fmt!r}; expected one of {FORMATS}")


def save_cube(cube: HsiCube, path, format: Optional[str] = None, interleave: str = "bsq") -> None:
    """Write ``cube`` to ``path``.

    flat-binary and envi-raw store little-endian float32, so float64 cubes
    are rounded on the way out. ``interleave`` only applies to envi-raw.
    """
    path = Path(path)
    fmt = format or _infer_format(path)
    if fmt == "flat-binary":
        write_flat_array(cube.data, path)
    elif fmt == "csv":
        _save_csv(cube, path)
    elif fmt == "envi-raw":
        _save_envi(cube, path, interleave)
    else:
        raise CubeFormatError(f"unknown cube format {fmt!r}; expected one of {FORMATS}")


def write_flat_array(data: np.ndarray, path: Path) -> None:
    bands, height, width = data.shape
    with open(path, "wb") as fh:
        fh.write(_PREAMBLE.pack(height, width, bands, FLAT_MAGIC))
        fh.write(np.ascontiguousarray(data, dtype="<f4").tobytes())


def read_flat_array(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _PREAMBLE.size:
        raise CubeFormatError(f"{path}: file shorter than the 16-byte preamble")
    height, width, bands, magic = _PREAMBLE.unpack_from(raw)
    if magic != FLAT_MAGIC:
        raise CubeFormatError(f"{path}: bad magic {magic!r}, expected {FLAT_MAGIC!r}")
    expected = height * width * bands * 4
    payload = len(raw) - _PREAMBLE.size
    if payload != expected:
        raise CubeFormatError(
            f"{path}: header declares {height}x{width}x{bands} ({expected} bytes) but payload has {payload} bytes"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_PREAMBLE.size).astype(np.float32)
    return data.reshape(bands, height, width)


def _load_flat(path: Path) -> HsiCube:
    return HsiCube(read_flat_array(path))


def _save_csv(cube: HsiCube, path: Path) -> None:
    samples, _ = flatten(cube)
    with open(path, "w") as fh:
        fh.write(f"{cube.height} {cube.width} {cube.bands}\n")
        np.savetxt(fh, samples, delimiter=",", fmt="%.17g")


def _load_csv(path: Path) -> HsiCube:
    with open(path) as fh:
        first = fh.readline()
        try:
            height, width, bands = (int(t) for t in first.split())
        except ValueError:
            raise CubeFormatError(f"{path}: first line must be 'height width bands', got {first.strip()!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            try:
                rows.append([float(t) for t in line.split(",")])
            except ValueError:
                raise CubeFormatError(f"{path}:{lineno}: unparsable value")
            if len(rows[-1]) != bands:
                raise CubeFormatError(f"{path}:{lineno}: expected {bands} values, got {len(rows[-1])}")
    if len(rows) != height * width:
        raise CubeFormatError(f"{path}: expected {height * width} pixel rows, got {len(rows)}")
    samples = np.array(rows, dtype=np.float64).reshape(height * width, bands)
    bad = _first_nonfinite(samples)
    if bad is not None:
        r, c = divmod(bad[0], width)
        raise CubeFormatError(f"non-finite value at (band, row, col) = ({bad[1]}, {r}, {c})")
    return unflatten(samples, height, width)


def _parse_envi_header(text: str) -> dict:
    lines = text.splitlines()
    if not lines or lines[0].strip().upper() != "ENVI":
        raise CubeFormatError("ENVI header must start with 'ENVI'")
    body = "\n".join(lines[1:])
    out = {}
    # key = value, where value may be a {...} block spanning lines
    for m in re.finditer(r"^\s*([^=\n]+?)\s*=\s*(\{[^}]*\}|[^\n]*)", body, flags=re.M):
        out[m.group(1).strip().lower()] = m.group(2).strip()
    return out


def _load_envi(path: Path) -> HsiCube:
    header_path, raw_path = _envi_paths(path)
    if not header_path.exists():
        raise CubeFormatError(f"missing ENVI header for {path}")
    hdr = _parse_envi_header(header_path.read_text())
    try:
        samples = int(hdr["samples"])
        lines = int(hdr["lines"])
        bands = int(hdr["bands"])
        interleave = hdr.get("interleave", "bsq").lower()
        dtype_code = int(hdr.get("data type", "4"))
        byte_order = int(hdr.get("byte order", "0"))
        offset = int(hdr.get("header offset", "0"))
    except (KeyError, ValueError) as exc:
        raise CubeFormatError(f"{header_path}: malformed header ({exc})")
    if interleave not in ("bsq", "bil", "bip"):
        raise CubeFormatError(f"{header_path}: unsupported interleave {interleave!r}")
    if dtype_code not in _ENVI_DTYPES:
        raise CubeFormatError(f"{header_path}: unsupported data type {dtype_code}")
    if byte_order not in (0, 1):
        raise CubeFormatError(f"{header_path}: byte order must be 0 or 1")
    dtype = np.dtype(_ENVI_DTYPES[dtype_code]).newbyteorder("<" if byte_order == 0 else ">")
    raw = raw_path.read_bytes()
    count = samples * lines * bands
    if len(raw) - offset != count * dtype.itemsize:
        raise CubeFormatError(
            f"{raw_path}: header declares {lines}x{samples}x{bands} but file holds {len(raw) - offset} bytes"
        )
    flat = np.frombuffer(raw, dtype=dtype, count=count, offset=offset)
    if interleave == "bsq":
        data = flat.reshape(bands, lines, samples)
    elif interleave == "bil":
        data = flat.reshape(lines, bands, samples).transpose(1, 0, 2)
    else:
        data = flat.reshape(lines, samples, bands).transpose(2, 0, 1)
    out_dtype = np.float64 if dtype_code == 5 else np.float32
    names = None
    if "band names" in hdr:
        names = tuple(s.strip() for s in hdr["band names"].strip("{}").split(","))
        if len(names) != bands:
            names = None
    return HsiCube(np.ascontiguousarray(data, dtype=out_dtype), band_names=names)


def _save_envi(cube: HsiCube, path: Path, interleave: str) -> None:
    interleave = interleave.lower()
    if interleave not in ("bsq", "bil", "bip"):
        raise CubeFormatError(f"unsupported interleave {interleave!r}")
    data = cube.data.astype("<f4")
    if interleave == "bil":
        data = data.transpose(1, 0, 2)
    elif interleave == "bip":
        data = data.transpose(1, 2, 0)
    header_path, raw_path = _envi_paths(path)
    raw_path.write_bytes(np.ascontiguousarray(data).tobytes())
    lines = [
        "ENVI",
        f"samples = {cube.width}",
        f"lines = {cube.height}",
        f"bands = {cube.bands}",
        "header offset = 0",
        "file type = ENVI Standard",
        "data type = 4",
        f"interleave = {interleave}",
        "byte order = 0",
    ]
    if cube.band_names:
        lines.append("band names = {" + ", ".join(cube.band_names) + "}")
    header_path.write_text("\n".join(lines) + "\n")


# --------------------------------------------------------------------------
# Transforms
# --------------------------------------------------------------------------


def normalize_bands(cube: HsiCube) -> HsiCube:
    """Min-max scale every band independently to [0, 1].

    Constant bands become all zeros.
    """
    data = cube.data.astype(np.float64)
    lo = data.min(axis=(1, 2), keepdims=True)
    hi = data.max(axis=(1, 2), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = np.where(span > 0, (data - lo) / safe, 0.0)
    return HsiCube(out, band_names=cube.band_names)


def flatten(cube: HsiCube) -> Tuple[np.ndarray, np.ndarray]:
    """Return the N x B sample matrix and the N x 2 (row, col) index."""
    samples = cube.data.reshape(cube.bands, -1).T.copy()
    rows, cols = np.divmod(np.arange(cube.n_pixels), cube.width)
    return samples, np.stack([rows, cols], axis=1)


def unflatten(samples: np.ndarray, height: int, width: int, band_names=None) -> HsiCube:
    samples = np.asarray(samples)
    if samples.ndim != 2 or samples.shape[0] != height * width:
        raise CubeFormatError(f"sample matrix {samples.shape} does not fit a {height}x{width} grid")
    return HsiCube(samples.T.reshape(samples.shape[1], height, width), band_names=band_names)


# --------------------------------------------------------------------------
# Synthetic scenes
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class BackgroundClass:
    """One background material occupying the rectangle rows [r0, r1) x cols [c0, c1)."""

    mean: Sequence[float]
    std: Sequence[float]
    region: Tuple[int, int, int, int]


@dataclass(frozen=True)
class SceneSpec:
    height: int
    width: int
    bands: int
    background_classes: Tuple[BackgroundClass, ...]
    anomaly_count: int
    anomaly_size: int
    anomaly_spectrum: Sequence[float]
    noise_std: float
    seed: int
    max_retries: int = 1000

    def validate(self) -> None:
        if min(self.height, self.width, self.bands) < 1:
            raise ValueError("scene dimensions must be >= 1")
        if self.anomaly_count < 0 or self.anomaly_size < 1:
            raise ValueError("anomaly_count must be >= 0 and anomaly_size >= 1")
        side = int(round(np.sqrt(self.anomaly_size)))
        if side * side != self.anomaly_size:
            raise ValueError(f"anomaly_size must be a perfect square (square blocks), got {self.anomaly_size}")
        if self.anomaly_count * self.anomaly_size > 0.05 * self.height * self.width:
            raise ValueError("anomalies would cover more than 5% of the scene")
        if len(self.anomaly_spectrum) != self.bands:
            raise ValueError("anomaly_spectrum length must equal bands")
        if self.noise_std < 0:
            raise ValueError("noise_std must be >= 0")
        if not self.background_classes:
            raise ValueError("at least one background class is required")
        cover = np.zeros((self.height, self.width), dtype=np.int64)
        for cls in self.background_classes:
            if len(cls.mean) != self.bands or len(cls.std) != self.bands:
                raise ValueError("background class spectra must have length bands")
            r0, r1, c0, c1 = cls.region
            if not (0 <= r0 < r1 <= self.height and 0 <= c0 < c1 <= self.width):
                raise ValueError(f"background region {cls.region} outside the grid")
            cover[r0:r1, c0:c1] += 1
        if not np.all(cover == 1):
            raise ValueError("background regions must tile the grid without overlap")


def _smooth_spectrum(rng: np.random.Generator, bands: int, lo: float, hi: float) -> np.ndarray:
    # a few random Gaussian bumps on a baseline, resembling a reflectance curve
    x = np.linspace(0.0, 1.0, bands)
    curve = np.full(bands, rng.uniform(lo, hi))
    for _ in range(3):
        centre, width, height = rng.uniform(0, 1), rng.uniform(0.08, 0.3), rng.uniform(-0.25, 0.25)
        curve += height * np.exp(-0.5 * ((x - centre) / width) ** 2)
    return np.clip(curve, 0.02, 1.0)


def default_scene_spec(
    height: int = 64,
    width: int = 64,
    bands: int = 30,
    anomaly_count: int = 10,
    anomaly_size: int = 4,
    seed: int = 7,
    n_classes: int = 2,
    background_std: float = 0.02,
    noise_std: float = 0.02,
) -> SceneSpec:
    """Build the standard benchmark scene description.

    Background classes occupy vertical strips; their spectra and the anomaly
    spectrum are smooth curves drawn from ``seed``.
    """
    rng = np.random.default_rng([seed, 0x5CE7E])
    edges = np.linspace(0, width, n_classes + 1).round().astype(int)
    classes = []
    for i in range(n_classes):
        mean = _smooth_spectrum(rng, bands, 0.2, 0.6)
        classes.append(
            BackgroundClass(
                mean=tuple(mean.tolist()),
                std=tuple(np.full(bands, background_std).tolist()),
                region=(0, height, int(edges[i]), int(edges[i + 1])),
            )
        )
    anomaly = _smooth_spectrum(rng, bands, 0.3, 0.7)
    return SceneSpec(
        height=height,
        width=width,
        bands=bands,
        background_classes=tuple(classes),
        anomaly_count=anomaly_count,
        anomaly_size=anomaly_size,
        anomaly_spectrum=tuple(anomaly.tolist()),
        noise_std=noise_std,
        seed=seed,
    )


def synth_scene(spec: SceneSpec) -> Tuple[HsiCube, GroundTruth]:
    """Render ``spec`` into a cube and its anomaly mask (pure function of spec)."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    data = np.empty((spec.bands, spec.height, spec.width))
    for cls in spec.background_classes:
        r0, r1, c0, c1 = cls.region
        shape = (spec.bands, r1 - r0, c1 - c0)
        mean = np.asarray(cls.mean, dtype=np.float64)[:, None, None]
        std = np.asarray(cls.std, dtype=np.float64)[:, None, None]
        data[:, r0:r1, c0:c1] = mean + std * rng.standard_normal(shape)

    mask = np.zeros((spec.height, spec.width), dtype=bool)
    side = int(round(np.sqrt(spec.anomaly_size)))
    anomaly = np.asarray(spec.anomaly_spectrum, dtype=np.float64)[:, None, None]
    placed = 0
    for _ in range(spec.max_retries):
        if placed == spec.anomaly_count:
            break
        r = int(rng.integers(0, spec.height - side + 1))
        c = int(rng.integers(0, spec.width - side + 1))
        if mask[r : r + side, c : c + side].any():
            continue
        mask[r : r + side, c : c + side] = True
        data[:, r : r + side, c : c + side] = anomaly + spec.noise_std * rng.standard_normal(
            (spec.bands, side, side)
        )
        placed += 1
    if placed < spec.anomaly_count:
        raise RuntimeError(
            f"could only place {placed} of {spec.anomaly_count} anomalies after {spec.max_retries} attempts"
        )
    return HsiCube(data), GroundTruth(mask)


# --------------------------------------------------------------------------
# PGM images (masks and heatmaps)
# --------------------------------------------------------------------------


def write_pgm(path, image: np.ndarray) -> None:
    """Write an 8-bit binary (P5) PGM from a uint8 H x W array."""
    image = np.asarray(image)
    if image.ndim != 2 or image.dtype != np.uint8:
        raise ValueError("PGM image must be a 2-D uint8 array")
    h, w = image.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(image).tobytes())


def read_pgm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise CubeFormatError(f"{path}: only binary P5 PGM is supported")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval > 255:
        raise CubeFormatError(f"{path}: 16-bit PGM is not supported")
    pos += 1
    pixels = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return pixels.reshape(h, w).copy()


def save_mask(gt: GroundTruth, path) -> None:
    write_pgm(path, np.where(gt.mask, 255, 0).astype(np.uint8))


def load_mask(path) -> GroundTruth:
    return GroundTruth(read_pgm(path) > 0)
