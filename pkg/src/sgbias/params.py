"""Named trainable tensors and the text checkpoint format.

A checkpoint is a single JSON document mapping each parameter name to its
shape and flat row-major value list. Floats are written with full decimal
round-trip precision, keys are sorted, so save→load→save is byte-identical.
The convention for files is the ``.ckpt.json`` extension.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .errors import DataError

CKPT_SCHEMA = "sgbias.ckpt.v1"


def write_array_doc(path, arrays: dict, schema: str = CKPT_SCHEMA):
    """Write named float64 arrays as a checkpoint-style text document."""
    doc = {
        "schema": schema,
        "params": {
            name: {
                "shape": [int(s) for s in np.asarray(a).shape],
                "data": [float(v) for v in np.asarray(a, dtype=np.float64).reshape(-1)],
            }
            for name, a in arrays.items()
        },
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":")) + "\n"
    Path(path).write_text(text)


def read_array_doc(path, schema: str = CKPT_SCHEMA) -> dict:
    """Read a checkpoint-style document back into {name: float64 array}."""
    p = Path(path)
    if not p.exists():
        raise DataError(f"no such file: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{p}: not a valid checkpoint document ({exc})") from None
    if not isinstance(doc, dict) or doc.get("schema") != schema:
        raise DataError(
            f"{p}: schema mismatch, expected {schema!r}, got {doc.get('schema')!r}"
        )
    arrays = {}
    for name, entry in doc["params"].items():
        shape = tuple(int(s) for s in entry["shape"])
        data = np.array(entry["data"], dtype=np.float64)
        if data.size != int(np.prod(shape, dtype=np.int64)):
            raise DataError(f"{p}: entry {name!r} has {data.size} values for shape {shape}")
        arrays[name] = data.reshape(shape)
    return arrays


class ParamStore:
    """Map from dotted parameter name to a trainable tensor.

    Names are unique; iteration follows insertion order while serialization
    sorts by name.
    """

    def __init__(self):
        self._params: dict[str, Tensor] = {}

    def create(self, name: str, data) -> Tensor:
        if name in self._params:
            raise ValueError(f"parameter {name!r} already exists")
        t = Tensor(np.array(data, dtype=np.float64), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def tensors(self):
        return list(self._params.values())

    def zero_grads(self):
        for t in self._params.values():
            t.zero_grad()

    def save(self, path):
        write_array_doc(path, {n: t.data for n, t in self._params.items()})

    @classmethod
    def load(cls, path) -> "ParamStore":
        store = cls()
        for name in sorted(arrays := read_array_doc(path)):
            store.create(name, arrays[name])
        return store
