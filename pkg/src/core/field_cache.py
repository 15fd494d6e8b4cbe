"""
Binary field cache (MTF1) with a JSON sidecar.

Layout, all little-endian:
    b"MTF1", version u16, n u16
    per axis: min f64, max f64, cells u32
    T (row-major f64), winner chart coords (d per node, f64)
    bitsets: cut, two-arrival, gradient-jump, singular mask, covered
    coverage (u32 per node), winner covectors (n per node, f64)
    near-target block: count u32, points count*n f64, covectors count*n f64
    geometry block: spacing f64, terminal radius f64, target n*f64,
        dilation weights n*f64

The sidecar carries every knob and the config hash. Nothing time-dependent
is written, so identical inputs give identical bytes.
"""

import json
import logging
import struct
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union

import numpy as np
import xxhash

from .errors import ArtifactsMissing, QmtError
from .synthesis import GridSpec, MinimalTimeField, TWO_PI

logger = logging.getLogger(__name__)

MAGIC = b"MTF1"
FORMAT_VERSION = 2
SIDECAR_SUFFIX = ".json"

PathLike = Union[str, Path]


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def unpack(self, fmt: str) -> Tuple[Any, ...]:
        size = struct.calcsize(fmt)
        if self.offset + size > len(self.data):
            raise QmtError("field cache is truncated", offset=self.offset)
        values = struct.unpack_from(fmt, self.data, self.offset)
        self.offset += size
        return values

    def array(self, dtype: str, count: int) -> np.ndarray:
        size = np.dtype(dtype).itemsize * count
        if self.offset + size > len(self.data):
            raise QmtError("field cache is truncated", offset=self.offset)
        out = np.frombuffer(self.data, dtype=dtype, count=count, offset=self.offset).copy()
        self.offset += size
        return out

    def bits(self, count: int) -> np.ndarray:
        packed = self.array("u1", (count + 7) // 8)
        return np.unpackbits(packed, count=count, bitorder="little").astype(bool)


def _bits(flags: np.ndarray) -> bytes:
    return np.packbits(flags.reshape(-1).astype(np.uint8), bitorder="little").tobytes()


def encode_field(field_: MinimalTimeField) -> bytes:
    grid = field_.grid
    n = grid.n
    shape = grid.shape
    parts = [MAGIC, struct.pack("<HH", FORMAT_VERSION, n)]
    for k in range(n):
        top = grid.lower[k] + (shape[k] - 1) * grid.spacing
        parts.append(struct.pack("<ddI", grid.lower[k], top, shape[k]))
    parts.append(np.ascontiguousarray(field_.T, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(field_.winner_coords, dtype="<f8").tobytes())
    for flags in (field_.cut_flag, field_.two_arrival, field_.gradient_jump, field_.singular_mask, field_.covered):
        parts.append(_bits(flags))
    parts.append(np.ascontiguousarray(field_.coverage, dtype="<u4").tobytes())
    parts.append(np.ascontiguousarray(field_.winner_covector, dtype="<f8").tobytes())
    count = field_.near_target_points.shape[0]
    parts.append(struct.pack("<I", count))
    parts.append(np.ascontiguousarray(field_.near_target_points, dtype="<f8").tobytes())
    parts.append(np.ascontiguousarray(field_.near_target_covectors, dtype="<f8").tobytes())
    parts.append(struct.pack("<dd", grid.spacing, field_.terminal_radius))
    parts.append(np.asarray(field_.target, dtype="<f8").tobytes())
    parts.append(np.asarray(field_.weights, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_field(data: bytes, knobs: Optional[Dict[str, Any]] = None) -> MinimalTimeField:
    reader = _Reader(data)
    (magic,) = reader.unpack("<4s")
    if magic != MAGIC:
        raise QmtError(f"not a field cache (magic {magic!r})")
    version, n = reader.unpack("<HH")
    if version != FORMAT_VERSION:
        raise QmtError(f"unsupported field cache version {version}", version=version)
    lower = np.empty(n)
    upper = np.empty(n)
    cells = []
    for k in range(n):
        lower[k], upper[k], count = reader.unpack("<ddI")
        cells.append(int(count))
    shape = tuple(cells)
    size = int(np.prod(shape))
    d = n - 1
    T = reader.array("<f8", size).reshape(shape)
    winner_coords = reader.array("<f8", size * d).reshape(shape + (d,))
    cut, two, jump, mask, covered = (reader.bits(size).reshape(shape) for _ in range(5))
    coverage = reader.array("<u4", size).astype(np.int64).reshape(shape)
    winner_covector = reader.array("<f8", size * n).reshape(shape + (n,))
    (count,) = reader.unpack("<I")
    near_points = reader.array("<f8", count * n).reshape(count, n)
    near_covectors = reader.array("<f8", count * n).reshape(count, n)
    spacing, terminal_radius = reader.unpack("<dd")
    target = reader.array("<f8", n)
    weights = reader.array("<f8", n)
    if reader.offset != len(reader.data):
        raise QmtError("field cache has trailing bytes", offset=reader.offset)
    if np.any(covered != (coverage > 0)):
        raise QmtError("field cache coverage bitset disagrees with coverage counts")

    knobs = dict(knobs or {})
    periods = tuple(knobs.pop("periods", [TWO_PI] + [None] * (d - 1)))
    knobs.setdefault("spacing", spacing)
    return MinimalTimeField(
        grid=GridSpec(lower, upper, spacing),
        target=target,
        weights=weights,
        T=T,
        winner_coords=winner_coords,
        winner_covector=winner_covector,
        coverage=coverage,
        cut_flag=cut,
        two_arrival=two,
        gradient_jump=jump,
        singular_mask=mask,
        near_target_points=near_points,
        near_target_covectors=near_covectors,
        terminal_radius=terminal_radius,
        periods=periods,
        knobs=knobs,
    )


def sidecar_path(path: PathLike) -> Path:
    path = Path(path)
    return path.with_name(path.name + SIDECAR_SUFFIX)


def save_field(field_: MinimalTimeField, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """Write the cache and its sidecar; returns the cache path."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    data = encode_field(field_)
    path.write_bytes(data)
    sidecar = {
        "format": MAGIC.decode(),
        "version": FORMAT_VERSION,
        "digest": xxhash.xxh3_64(data).hexdigest(),
        "grid": field_.grid.to_dict(),
        "knobs": {**field_.knobs, "periods": list(field_.periods)},
        "stats": field_.stats(),
        **(metadata or {}),
    }
    sidecar_path(path).write_text(json.dumps(sidecar, indent=2, sort_keys=True, default=to_jsonable) + "\n")
    logger.info(f"field cache written to {path} ({len(data)} bytes)")
    return path


def load_field(path: PathLike) -> MinimalTimeField:
    path = Path(path)
    if not path.exists():
        raise ArtifactsMissing(f"field cache not found: {path}", path=str(path))
    data = path.read_bytes()
    knobs: Dict[str, Any] = {}
    meta = sidecar_path(path)
    if meta.exists():
        sidecar = json.loads(meta.read_text())
        digest = sidecar.get("digest")
        if digest and digest != xxhash.xxh3_64(data).hexdigest():
            raise QmtError(f"field cache {path} does not match its sidecar digest")
        knobs = dict(sidecar.get("knobs", {}))
    else:
        logger.warning(f"no sidecar next to {path}, using default knobs")
    return decode_field(data, knobs)


def file_digest(path: PathLike) -> str:
    return xxhash.xxh3_64(Path(path).read_bytes()).hexdigest()


def to_jsonable(value: Any) -> Any:
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON serializable: {type(value).__name__}")
