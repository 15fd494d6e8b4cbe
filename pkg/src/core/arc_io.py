"""
Exports: arc and jump CSVs, certificate text, msgpack arc store, plot data.

Floats are written with %.17g so a CSV reloads to the same doubles and
reruns produce identical bytes. Every CSV gets a JSON sidecar carrying the
caller's metadata (config hash and knobs).
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Sequence, Union

import msgpack
import numpy as np

from .errors import ArtifactsMissing, QmtError
from .field_cache import to_jsonable
from .hybrid import KIND_NAMES, CertificateReport, HybridArc, JumpRecord, label_name
from .synthesis import FrontSamples, SingularSetModel

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

ARC_STORE_VERSION = 1
DEFAULT_FRONT_TIMES = (0.5, 1.0, 1.5, 2.0, 2.5, 3.0)


def _fmt(value: Any) -> str:
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, (int, np.integer)):
        return str(int(value))
    if isinstance(value, (float, np.floating)):
        return "%.17g" % float(value)
    return str(value)


def write_csv(path: PathLike, headers: Sequence[str], rows: Iterable[Sequence[Any]]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(headers)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_csv(path: PathLike) -> List[Dict[str, str]]:
    with open(path, newline="", encoding="utf-8") as f:
        return list(csv.DictReader(f))


def write_sidecar(path: PathLike, metadata: Dict[str, Any]) -> Path:
    """<file>.json next to an output file."""
    path = Path(path)
    sidecar = path.with_name(path.name + ".json")
    sidecar.write_text(json.dumps(metadata, indent=2, sort_keys=True, default=to_jsonable) + "\n")
    return sidecar


def write_json(path: PathLike, payload: Dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=to_jsonable) + "\n")
    return path


def read_json(path: PathLike) -> Dict[str, Any]:
    path = Path(path)
    if not path.exists():
        raise ArtifactsMissing(f"manifest not found: {path}", path=str(path))
    return json.loads(path.read_text())


# ----- arcs -----

def arc_headers(n: int, m: int) -> List[str]:
    return (
        ["t", "j"]
        + [f"x{i + 1}" for i in range(n)]
        + ["s_label"]
        + [f"u{i + 1}" for i in range(m)]
        + ["e_norm", "d_norm", "in_C", "in_D"]
    )


def write_arc_csv(arc: HybridArc, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    n, m = arc.x.shape[1], arc.u.shape[1]
    e_norm = np.linalg.norm(arc.e, axis=1)
    d_norm = np.linalg.norm(arc.d, axis=1)
    rows = (
        [arc.t[i], arc.j[i], *arc.x[i], label_name(int(arc.s[i])), *arc.u[i], e_norm[i], d_norm[i],
         arc.in_C[i], arc.in_D[i]]
        for i in range(len(arc))
    )
    path = write_csv(path, arc_headers(n, m), rows)
    if metadata is not None:
        write_sidecar(path, metadata)
    return path


def write_jumps_csv(arc: HybridArc, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    headers = ["time", "j", "from_label", "to_label", "chain_length", "chain"]
    rows = (
        [r.time, r.j, label_name(r.from_label), label_name(r.to_label), r.chain_length,
         " ".join(label_name(c) for c in r.chain)]
        for r in arc.jumps
    )
    path = write_csv(path, headers, rows)
    if metadata is not None:
        write_sidecar(path, metadata)
    return path


def write_certificate(report: CertificateReport, path: PathLike, summary: Optional[Dict[str, Any]] = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    lines = [f"{key}: {_fmt(value)}" for key, value in sorted((summary or {}).items())]
    path.write_text(report.to_text() + ("\n".join(lines) + "\n" if lines else ""))
    return path


def _pack_array(a: np.ndarray) -> Dict[str, Any]:
    a = np.ascontiguousarray(a)
    return {"dtype": a.dtype.str, "shape": list(a.shape), "data": a.tobytes()}


def _unpack_array(d: Dict[str, Any]) -> np.ndarray:
    return np.frombuffer(d["data"], dtype=np.dtype(d["dtype"])).reshape(d["shape"]).copy()


_ARRAYS = ("t", "j", "x", "s", "u", "e", "d", "xdot", "in_C", "in_D", "kind")


def save_arc(arc: HybridArc, path: PathLike, metadata: Optional[Dict[str, Any]] = None) -> Path:
    """The full arc with its noise log; reloads bit-identically."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "version": ARC_STORE_VERSION,
        "arrays": {name: _pack_array(getattr(arc, name)) for name in _ARRAYS},
        "target": _pack_array(arc.target),
        "jumps": [
            {**r.to_dict(), "x": _pack_array(r.x), "e": _pack_array(r.e)} for r in arc.jumps
        ],
        "status": arc.status,
        "arrival_time": arc.arrival_time,
        "meta": json.loads(json.dumps(arc.meta, default=to_jsonable)),
        "metadata": json.loads(json.dumps(metadata or {}, default=to_jsonable)),
    }
    path.write_bytes(msgpack.packb(payload, use_bin_type=True))
    return path


def load_arc(path: PathLike) -> HybridArc:
    path = Path(path)
    if not path.exists():
        raise ArtifactsMissing(f"stored arc not found: {path}", path=str(path))
    payload = msgpack.unpackb(path.read_bytes(), raw=False)
    if payload.get("version") != ARC_STORE_VERSION:
        raise QmtError(f"unsupported arc store version {payload.get('version')}", path=str(path))
    arrays = {name: _unpack_array(payload["arrays"][name]) for name in _ARRAYS}
    jumps = []
    for r in payload["jumps"]:
        record = JumpRecord.from_dict({**r, "x": [], "e": []})
        record.x = _unpack_array(r["x"])
        record.e = _unpack_array(r["e"])
        jumps.append(record)
    return HybridArc(
        **arrays,
        jumps=jumps,
        status=payload["status"],
        arrival_time=payload["arrival_time"],
        target=_unpack_array(payload["target"]),
        meta=dict(payload.get("meta", {})),
    )


def arc_summary(arc: HybridArc) -> Dict[str, Any]:
    return {
        "status": arc.status,
        "arrival_time": arc.arrival_time,
        "final_time": arc.final_time,
        "samples": len(arc),
        "jumps": len(arc.jumps),
        "positive_jump_times": len(arc.positive_jump_times),
        "max_chain_length": arc.max_chain_length,
        "max_excursion": arc.max_excursion,
        "jump_log": [
            f"t={r.time:.6f}: {' -> '.join(label_name(c) for c in r.chain)}" for r in arc.jumps
        ],
        "sample_kinds": {name: int(np.sum(arc.kind == k)) for k, name in KIND_NAMES.items()},
    }


# ----- plot data -----

def write_front_csv(
    samples: FrontSamples,
    path: PathLike,
    times: Sequence[float] = DEFAULT_FRONT_TIMES,
    metadata: Optional[Dict[str, Any]] = None,
) -> Path:
    """Front slices: every sample whose time matches one of the chosen times."""
    n = samples.endpoints.shape[1]
    rows = []
    for t in times:
        hits = np.nonzero(np.abs(samples.times - t) <= 1e-9)[0]
        for i in hits:
            rows.append([t, samples.arc_ids[i], *samples.endpoints[i], samples.conjugate_passed[i]])
    headers = ["t", "arc"] + [f"x{i + 1}" for i in range(n)] + ["conjugate_passed"]
    path = write_csv(path, headers, rows)
    if metadata is not None:
        write_sidecar(path, metadata)
    return path


def write_cutlocus_csv(
    model: SingularSetModel, path: PathLike, n: int, metadata: Optional[Dict[str, Any]] = None
) -> Path:
    """Flagged cell centres with their component and the estimators that fired."""
    two = model.two_arrival if model.two_arrival is not None else np.zeros(len(model), dtype=bool)
    jump = model.gradient_jump if model.gradient_jump is not None else np.zeros(len(model), dtype=bool)
    rows = (
        [*model.points[i], model.labels[i], two[i], jump[i]] for i in range(len(model))
    )
    headers = [f"x{i + 1}" for i in range(n)] + ["component", "two_arrival", "gradient_jump"]
    path = write_csv(path, headers, rows)
    if metadata is not None:
        write_sidecar(path, metadata)
    return path
