"""Persistence for trajectories, events and reports.

Binary trajectory format (all little-endian)::

    magic      4 bytes  b"RKFL"
    version    u16      1
    flags      u16      bit 0: X present, bit 1: local time present, bit 2: metadata trailer
    replicas   u32
    frames     u32
    width      u32      number of recorded ranks
    first_rank i64
    times      f64[frames]
    names      i64[width]                      (only if X present)
    then for each replica, for each frame:
        Y f64[width], Z f64[width - 1], X f64[width] (if present), L f64[width - 1] (if present)
    meta length u32, then that many bytes of UTF-8 JSON   (only if bit 2 is set)

Text artifacts carry the same metadata as a leading ``# key=value ...`` line.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import struct
from pathlib import Path

import numpy as np

from .errors import PreconditionError
from .simulate import TrajectoryBatch

__all__ = [
    "config_hash",
    "dumps_json",
    "write_json",
    "batch_to_csv",
    "batch_to_bytes",
    "batch_from_bytes",
    "events_to_jsonl",
    "report_csv",
    "meta_comment",
]

MAGIC = b"RKFL"
VERSION = 1
_HEADER = struct.Struct("<4sHHIIIq")
_META_LEN = struct.Struct("<I")


def meta_comment(meta) -> str:
    """``# k=v ...`` line for text artifacts, or nothing when there is no metadata."""
    if not meta:
        return ""
    return "# " + " ".join(f"{k}={meta[k]}" for k in sorted(meta)) + "\n"


def config_hash(config: dict) -> str:
    """SHA-256 of the canonical JSON form of a config."""
    return hashlib.sha256(json.dumps(config, sort_keys=True, separators=(",", ":")).encode()).hexdigest()


def _plain(obj):
    if isinstance(obj, dict):
        return {str(k): _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _plain(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def dumps_json(obj) -> str:
    return json.dumps(_plain(obj), sort_keys=True, indent=2) + "\n"


def write_json(path, obj):
    Path(path).write_text(dumps_json(obj))


def batch_to_csv(batch: TrajectoryBatch, meta=None) -> str:
    """Long format: replica, t, series, index, value."""
    out = io.StringIO()
    out.write(meta_comment(meta))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(["replica", "t", "series", "index", "value"])
    width = batch.Y.shape[2]
    ranks = batch.first_rank + np.arange(width)
    for r in range(batch.replicas):
        for f, t in enumerate(batch.times):
            for i in range(width):
                w.writerow([r, repr(float(t)), "Y", int(ranks[i]), repr(float(batch.Y[r, f, i]))])
            for i in range(width - 1):
                w.writerow([r, repr(float(t)), "Z", int(ranks[i]), repr(float(batch.Z[r, f, i]))])
            if batch.X is not None:
                for i, name in enumerate(batch.names):
                    w.writerow([r, repr(float(t)), "X", int(name), repr(float(batch.X[r, f, i]))])
            if batch.local_time is not None:
                for i in range(width - 1):
                    w.writerow([r, repr(float(t)), "L", int(ranks[i]),
                                repr(float(batch.local_time[r, f, i]))])
    return out.getvalue()


def batch_to_bytes(batch: TrajectoryBatch, meta=None) -> bytes:
    has_x = batch.X is not None
    has_l = batch.local_time is not None
    R, F, W = batch.Y.shape
    flags = int(has_x) | (int(has_l) << 1) | (int(bool(meta)) << 2)
    parts = [_HEADER.pack(MAGIC, VERSION, flags, R, F, W, batch.first_rank),
             np.asarray(batch.times, "<f8").tobytes()]
    if has_x:
        parts.append(np.asarray(batch.names, "<i8").tobytes())
    blocks = [batch.Y, batch.Z] + ([batch.X] if has_x else []) + ([batch.local_time] if has_l else [])
    frames = np.concatenate([np.asarray(b, "<f8") for b in blocks], axis=2)
    parts.append(frames.tobytes())
    if meta:
        blob = json.dumps(_plain(meta), sort_keys=True).encode()
        parts += [_META_LEN.pack(len(blob)), blob]
    return b"".join(parts)


def batch_from_bytes(data: bytes) -> TrajectoryBatch:
    if len(data) < _HEADER.size:
        raise PreconditionError("truncated trajectory file")
    magic, version, flags, R, F, W, first = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PreconditionError("not a trajectory file (bad magic)")
    if version != VERSION:
        raise PreconditionError(f"unsupported trajectory format version {version}")
    has_x, has_l = bool(flags & 1), bool(flags & 2)
    pos = _HEADER.size
    times = np.frombuffer(data, "<f8", F, pos).copy()
    pos += 8 * F
    names = None
    if has_x:
        names = np.frombuffer(data, "<i8", W, pos).copy()
        pos += 8 * W
    per = 2 * W - 1 + (W if has_x else 0) + (W - 1 if has_l else 0)
    end = pos + 8 * R * F * per
    meta = None
    if flags & 4 and len(data) >= end + _META_LEN.size:
        (size,) = _META_LEN.unpack_from(data, end)
        if len(data) == end + _META_LEN.size + size:
            meta = json.loads(data[end + _META_LEN.size:].decode())
            data = data[:end]
    if len(data) != end or (flags & 4 and meta is None):
        raise PreconditionError("trajectory file size does not match its header")
    frames = np.frombuffer(data, "<f8", R * F * per, pos).reshape(R, F, per)
    cuts = np.cumsum([W, W - 1] + ([W] if has_x else []))
    pieces = np.split(frames, cuts, axis=2)
    Y, Z = pieces[0].copy(), pieces[1].copy()
    X = pieces[2].copy() if has_x else None
    L = pieces[-1].copy() if has_l else None
    batch = TrajectoryBatch(times, int(first), Y, Z, X, names, local_time=L)
    if meta is not None:
        batch.diagnostics["meta"] = meta
    return batch


def events_to_jsonl(events, meta=None) -> str:
    head = json.dumps({"meta": _plain(meta)}, sort_keys=True) + "\n" if meta else ""
    return head + "".join(json.dumps(e.to_json(), sort_keys=True) + "\n" for e in events)


def report_csv(rows, header=("index", "n", "rate_mle", "target_rate", "ks_stat", "ks_p"),
               meta=None) -> str:
    out = io.StringIO()
    out.write(meta_comment(meta))
    w = csv.writer(out, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([repr(float(v)) if isinstance(v, (float, np.floating)) else v for v in row])
    return out.getvalue()
