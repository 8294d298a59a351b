"""Dual-polarization chip ingestion and synthesis.

A chip is a co-registered pair of complex images (VH and VV). Three real
guidance channels are derived per chip:

    i1 = |S_VH|,  i2 = |S_VV|,  i3 = |S_VV * conj(S_VH)|

so i3 equals i1 * i2 pointwise, a free invariant used as a cross-check.
Channels are max-normalized to [0,1] per chip and bilinearly resized to
the network input size.

Chip files use the ``SARC`` layout: magic, version u32, H u32, W u32,
then the VH plane followed by the VV plane, each stored row-major as
little-endian (float32 real, float32 imag) pairs. Datasets are described
by a JSON-lines manifest ({"path": ..., "label": int} per chip) plus a
JSON sidecar naming the classes.

For desk-scale training there is a deterministic synthetic generator:
speckled sea clutter with one bright elongated blob whose geometry
depends on the class index, and a brighter VV than VH return.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ShapeError
from .seeding import derive_seed
from .tensor import default_dtype, resize_plane_stack

CHIP_MAGIC = b"SARC"
CHIP_VERSION = 1
MAX_CHIP_EXTENT = 1 << 15  # guards against absurd header dims before allocating

DEFAULT_CLASS_NAMES = ("cargo", "tanker", "fishing", "container", "bulk-carrier", "passenger")


def class_names(k: int) -> list[str]:
    if k <= len(DEFAULT_CLASS_NAMES):
        return list(DEFAULT_CLASS_NAMES[:k])
    return list(DEFAULT_CLASS_NAMES) + [f"class{i}" for i in range(len(DEFAULT_CLASS_NAMES), k)]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass
class ComplexChipPair:
    """Co-registered complex VH/VV planes of one chip."""

    svh: np.ndarray
    svv: np.ndarray
    label: int | None = None
    id: str = ""

    def __post_init__(self):
        self.svh = np.ascontiguousarray(self.svh, dtype=np.complex64)
        self.svv = np.ascontiguousarray(self.svv, dtype=np.complex64)
        if self.svh.ndim != 2 or self.svh.shape != self.svv.shape:
            raise ShapeError(f"chip planes must be co-registered 2D images, "
                             f"got {self.svh.shape} and {self.svv.shape}")
        if not (np.isfinite(self.svh.view(np.float32)).all()
                and np.isfinite(self.svv.view(np.float32)).all()):
            raise ValueError("chip contains non-finite samples")

    @property
    def height(self) -> int:
        return self.svh.shape[0]

    @property
    def width(self) -> int:
        return self.svh.shape[1]


@dataclass
class GuidedTriple:
    """The three normalized, resized guidance channels of one chip."""

    i1: np.ndarray
    i2: np.ndarray
    i3: np.ndarray
    label: int | None = None
    id: str = ""

    def stacked(self) -> np.ndarray:
        return np.stack([self.i1, self.i2, self.i3])


@dataclass
class DatasetManifest:
    """Ordered (chip path, class index) records plus the class-name table."""

    records: list[tuple[str, int]]
    classes: list[str]
    split: str = "train"

    def __len__(self) -> int:
        return len(self.records)

    def per_class_counts(self) -> np.ndarray:
        counts = np.zeros(len(self.classes), dtype=np.int64)
        for _, label in self.records:
            counts[label] += 1
        return counts


# ---------------------------------------------------------------------------
# channel derivation
# ---------------------------------------------------------------------------


def derive_channels(pair: ComplexChipPair) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Raw guidance channels (|VH|, |VV|, |VV * conj(VH)|) as float64 images."""
    svh = pair.svh.astype(np.complex128)
    svv = pair.svv.astype(np.complex128)
    if svh.shape != svv.shape:
        raise ShapeError(f"plane shapes {svh.shape} and {svv.shape} differ")
    i1 = np.abs(svh)
    i2 = np.abs(svv)
    i3 = np.abs(svv * np.conj(svh))
    return i1, i2, i3


def _norm01(plane: np.ndarray) -> np.ndarray:
    m = plane.max()
    return plane / m if m > 0 else np.zeros_like(plane)


def normalize_and_resize(raw: tuple, target: int, label: int | None = None,
                         id: str = "") -> GuidedTriple:
    """Max-normalize each channel to [0,1], then resize to target x target."""
    if target < 1:
        raise ShapeError(f"target size must be positive, got {target}")
    stack = np.stack([_norm01(np.asarray(p, dtype=np.float64)) for p in raw])
    out = resize_plane_stack(stack, target, target).astype(default_dtype())
    return GuidedTriple(out[0], out[1], out[2], label=label, id=id)


# ---------------------------------------------------------------------------
# chip file IO
# ---------------------------------------------------------------------------


def write_chip(pair: ComplexChipPair, path: str) -> None:
    h, w = pair.svh.shape
    blob = CHIP_MAGIC + struct.pack("<III", CHIP_VERSION, h, w)
    blob += pair.svh.astype("<c8").tobytes()
    blob += pair.svv.astype("<c8").tobytes()
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


def read_chip_planes(path: str, need_vh: bool = True, need_vv: bool = True):
    """Read one or both planes; a skipped plane is seeked over, never parsed.

    Returns (svh, svv) with None for planes not requested.
    """
    size = os.path.getsize(path)
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise FormatError(f"{path}: truncated header ({len(header)} of 16 bytes)")
        if header[:4] != CHIP_MAGIC:
            raise FormatError(f"{path}: bad magic {header[:4]!r}, expected {CHIP_MAGIC!r}")
        version, h, w = struct.unpack("<III", header[4:])
        if version != CHIP_VERSION:
            raise FormatError(f"{path}: unsupported chip version {version}")
        if not (0 < h <= MAX_CHIP_EXTENT and 0 < w <= MAX_CHIP_EXTENT):
            raise FormatError(f"{path}: chip dimensions {h}x{w} overflow the supported range")
        plane_bytes = h * w * 8
        if size != 16 + 2 * plane_bytes:
            raise FormatError(f"{path}: truncated payload (file is {size} bytes, "
                              f"header declares {16 + 2 * plane_bytes})")

        def plane(wanted: bool):
            if not wanted:
                fh.seek(plane_bytes, 1)
                return None
            raw = fh.read(plane_bytes)
            return np.frombuffer(raw, dtype="<c8").reshape(h, w).copy()

        return plane(need_vh), plane(need_vv)


def read_chip(path: str, label: int | None = None, id: str = "") -> ComplexChipPair:
    svh, svv = read_chip_planes(path)
    return ComplexChipPair(svh, svv, label=label, id=id or os.path.basename(path))


# ---------------------------------------------------------------------------
# synthetic chips
# ---------------------------------------------------------------------------

_SEA_VV = 0.08
_SEA_VH = 0.05
_BLOB_VV = 1.0
_BLOB_VH = 0.45


def synth_chip(class_id: int, seed: int, size: int = 64) -> ComplexChipPair:
    """Deterministic synthetic chip: speckled sea plus one class-shaped blob.

    The blob's length grows with class_id (the separable cue), width and
    orientation have class-dependent distributions, and the VV return is
    uniformly brighter than VH inside the blob. Both channels share one
    single-look exponential speckle field so the VV > VH amplitude
    ordering holds pointwise, not just in expectation.
    """
    if class_id < 0:
        raise ValueError(f"class_id must be non-negative, got {class_id}")
    if size < 16:
        raise ValueError(f"chip size must be >= 16, got {size}")
    rng = np.random.default_rng(derive_seed(seed, f"synth.class{class_id}"))
    scale = size / 64.0

    length = (12.0 + 8.0 * class_id + rng.uniform(-1.5, 1.5)) * scale
    width = (3.0 + 0.5 * class_id + rng.uniform(-0.5, 0.5)) * scale
    theta = rng.normal(0.55 * class_id, 0.35)
    margin = length / 2.0 + 2.0
    lo, hi = margin, size - margin
    if lo >= hi:
        cy = cx = size / 2.0
    else:
        cy, cx = rng.uniform(lo, hi, size=2)

    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    dy, dx = yy - cy, xx - cx
    u = (dx * np.cos(theta) + dy * np.sin(theta)) / (length / 2.0)
    v = (-dx * np.sin(theta) + dy * np.cos(theta)) / (width / 2.0)
    blob = (u * u + v * v <= 1.0).astype(np.float64)

    mean_vv = _SEA_VV ** 2 + blob * _BLOB_VV ** 2
    mean_vh = _SEA_VH ** 2 + blob * _BLOB_VH ** 2
    speckle = rng.exponential(1.0, size=(size, size))
    phase_vh = rng.uniform(0.0, 2.0 * np.pi, size=(size, size))
    phase_vv = rng.uniform(0.0, 2.0 * np.pi, size=(size, size))
    svh = np.sqrt(mean_vh * speckle) * np.exp(1j * phase_vh)
    svv = np.sqrt(mean_vv * speckle) * np.exp(1j * phase_vv)
    return ComplexChipPair(svh, svv, label=class_id, id=f"synth-c{class_id}-s{seed}")


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------


def write_manifest(manifest: DatasetManifest, path: str, classes_path: str | None = None) -> None:
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        for rec_path, label in manifest.records:
            fh.write(json.dumps({"path": rec_path, "label": int(label)}) + "\n")
    os.replace(tmp, path)
    if classes_path:
        tmp = f"{classes_path}.tmp.{os.getpid()}"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump({"classes": manifest.classes}, fh, indent=2)
            fh.write("\n")
        os.replace(tmp, classes_path)


def load_manifest(path: str, classes_path: str, split: str = "train",
                  check_paths: bool = True) -> DatasetManifest:
    """Parse a JSON-lines manifest; order-stable, strict about labels."""
    with open(classes_path, "r", encoding="utf-8") as fh:
        doc = json.load(fh)
    classes = doc.get("classes")
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes) or not classes:
        raise FormatError(f"{classes_path}: expected a non-empty {{\"classes\": [...]}} table")
    base = os.path.dirname(os.path.abspath(path))
    records: list[tuple[str, int]] = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise FormatError(f"{path}:{lineno}: invalid JSON record: {exc}") from None
            if not isinstance(rec, dict) or "path" not in rec or "label" not in rec:
                raise FormatError(f"{path}:{lineno}: record needs 'path' and 'label'")
            label = rec["label"]
            if not isinstance(label, int) or not 0 <= label < len(classes):
                raise FormatError(f"{path}:{lineno}: unknown class index {label!r} "
                                  f"(class table has {len(classes)} entries)")
            chip = rec["path"]
            if not os.path.isabs(chip):
                chip = os.path.join(base, chip)
            if check_paths and not os.path.isfile(chip):
                raise FormatError(f"{path}:{lineno}: chip file not found: {chip}")
            records.append((chip, label))
    return DatasetManifest(records, classes, split=split)


def load_triple(path: str, target: int, label: int | None = None,
                enabled: tuple[bool, bool, bool] = (True, True, True)) -> GuidedTriple:
    """Load one chip and derive only the enabled channels.

    Planes that no enabled channel needs are never parsed from the file
    (i1 needs VH, i2 needs VV, i3 needs both); disabled channels come
    back as zeros.
    """
    e1, e2, e3 = enabled
    if not (e1 or e2 or e3):
        raise ValueError("at least one channel must be enabled")
    need_vh = e1 or e3
    need_vv = e2 or e3
    svh, svv = read_chip_planes(path, need_vh=need_vh, need_vv=need_vv)
    shape = (svh if svh is not None else svv).shape
    zero = np.zeros(shape)
    raw = (np.abs(svh.astype(np.complex128)) if e1 else zero,
           np.abs(svv.astype(np.complex128)) if e2 else zero,
           np.abs(svv.astype(np.complex128) * np.conj(svh.astype(np.complex128))) if e3 else zero)
    return normalize_and_resize(raw, target, label=label, id=os.path.basename(path))
