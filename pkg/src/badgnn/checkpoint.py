"""Versioned binary container for parameters and memory snapshots.

Layout: 8-byte magic, 8-byte little-endian header length, then a JSON header
(sorted keys) describing each array's name/dtype/shape/offset, then the raw
array bytes back to back (C order, little-endian). Writing the same arrays
and metadata twice produces byte-identical files, which the determinism
checks rely on.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .exceptions import ParseError, StateError

MAGIC = b"BADGNN\x00\x01"
FORMAT_VERSION = 1

_DTYPES = {"<f8": np.dtype("<f8"), "<i8": np.dtype("<i8")}


def save_arrays(path, arrays: dict, meta: dict | None = None) -> None:
    """Write named arrays plus JSON-serializable metadata to ``path``."""
    entries = []
    blobs = []
    offset = 0
    for name in sorted(arrays):
        arr = np.ascontiguousarray(arrays[name])
        if arr.dtype.kind == "f":
            arr = arr.astype("<f8", copy=False)
        elif arr.dtype.kind in "iu":
            arr = arr.astype("<i8", copy=False)
        else:
            raise StateError(f"unsupported dtype {arr.dtype} for array {name!r}")
        blob = arr.tobytes(order="C")
        entries.append(
            {
                "name": name,
                "dtype": arr.dtype.str,
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(blob),
            }
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps(
        {"version": FORMAT_VERSION, "meta": meta or {}, "arrays": entries},
        sort_keys=True,
        separators=(",", ":"),
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_arrays(path):
    """Read back ``(arrays, meta)`` written by :func:`save_arrays`."""
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ParseError(f"not a checkpoint file (bad magic): {path}")
        (header_len,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(header_len).decode("utf-8"))
        if header.get("version") != FORMAT_VERSION:
            raise ParseError(
                f"unsupported checkpoint version {header.get('version')!r}"
            )
        data = fh.read()
    arrays = {}
    for entry in header["arrays"]:
        dtype = _DTYPES.get(entry["dtype"])
        if dtype is None:
            raise ParseError(f"unsupported dtype {entry['dtype']!r} in {path}")
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype=dtype).reshape(
            entry["shape"]
        ).copy()
    return arrays, header["meta"]


def save_model(path, params, mem, cfg, extra_meta: dict | None = None) -> None:
    """Persist trainable matrices, the memory snapshot, and the config echo."""
    arrays = dict(params.flatten())
    arrays.update(mem.arrays())
    meta = {"config": cfg.to_dict(), "n_nodes": mem.n_nodes}
    if extra_meta:
        meta.update(extra_meta)
    save_arrays(path, arrays, meta)


def load_model(path):
    """Rebuild ``(params, mem, cfg, meta)`` from a model checkpoint."""
    from .attention import AttentionParams
    from .memory import GruParams, NodeMemory
    from .training import DecoderParams, ModelParams, TrainConfig

    arrays, meta = load_arrays(path)
    cfg = TrainConfig.from_dict(meta["config"])
    attention = AttentionParams(
        mq=arrays["att.mq"], mk=arrays["att.mk"], mv=arrays["att.mv"],
        w0=arrays["att.w0"], time_omega=arrays["att.time_omega"],
        time_bias=arrays["att.time_bias"], dropout_rate=cfg.dropout_rate,
    )
    gru = GruParams(**{k: arrays[f"gru.{k}"] for k in (
        "w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h")})
    decoder = DecoderParams(
        w1=arrays["dec.w1"], b1=arrays["dec.b1"],
        w2=arrays["dec.w2"], b2=arrays["dec.b2"].reshape(()),
    )
    params = ModelParams(attention, gru, decoder)
    mem = NodeMemory.from_arrays(arrays["memory_state"], arrays["memory_last_update"])
    return params, mem, cfg, meta
