"""Deterministic JSON serialization for arrays, checkpoints and reports.

Arrays are stored as base64 of their raw little-endian bytes, so a
save/load cycle is bitwise exact and identical inputs always produce
byte-identical files (sorted keys, fixed separators, trailing newline).
"""

import base64
import json

import numpy as np


def encode_array(arr):
    a = np.ascontiguousarray(arr)
    if a.dtype.byteorder == ">":
        a = a.astype(a.dtype.newbyteorder("<"))
    return {
        "dtype": a.dtype.str,
        "shape": list(a.shape),
        "data": base64.b64encode(a.tobytes()).decode("ascii"),
    }


def decode_array(obj):
    raw = base64.b64decode(obj["data"])
    return np.frombuffer(raw, dtype=np.dtype(obj["dtype"])).reshape(obj["shape"]).copy()


def dumps(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":")) + "\n"


def dump_json(obj, path):
    with open(path, "w") as fh:
        fh.write(dumps(obj))


def load_json(path):
    with open(path) as fh:
        return json.load(fh)
