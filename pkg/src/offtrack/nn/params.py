"""Named parameter storage and the JSON checkpoint format.

Checkpoint layout (one JSON document)::

    {
      "schema_version": 1,
      "metadata": {...},                  # config hash, epoch, ...
      "params": {name: {"shape": [...], "dtype": "float32", "data": [...]}},
      "optimizer": {"step": int, "m": {name: [...]}, "v": {name: [...]}}
    }

Floats are written with ``repr`` precision so a save/load/save cycle is
byte-identical.
"""

import json
import math
from pathlib import Path

import numpy as np

from .tensor import Tensor

CHECKPOINT_SCHEMA = 1


class ParamStore:
    """Ordered name -> Tensor map plus AdamW moments and step count."""

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self.params: dict[str, Tensor] = {}
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}
        self.step = 0

    def add(self, name, shape, rng, fan_in=None, init="uniform"):
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        shape = tuple(int(s) for s in shape)
        if init == "zeros":
            data = np.zeros(shape)
        else:
            fan_in = fan_in or shape[0]
            bound = 1.0 / math.sqrt(fan_in)
            data = rng.uniform(-bound, bound, size=shape)
        t = Tensor(data.astype(self.dtype), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name):
        return self.params[name]

    def __contains__(self, name):
        return name in self.params

    def __len__(self):
        return len(self.params)

    def items(self):
        return self.params.items()

    def names(self):
        return list(self.params)

    def zero_grad(self):
        for t in self.params.values():
            t.grad = None

    def num_parameters(self):
        return int(sum(t.data.size for t in self.params.values()))

    def astype(self, dtype):
        """Cast parameters (and moments) in place to ``dtype``."""
        self.dtype = np.dtype(dtype)
        for t in self.params.values():
            t.data = t.data.astype(self.dtype)
        self.m = {k: a.astype(self.dtype) for k, a in self.m.items()}
        self.v = {k: a.astype(self.dtype) for k, a in self.v.items()}
        return self

    # -- state ----------------------------------------------------------
    def state_dict(self):
        return {k: t.data.copy() for k, t in self.params.items()}

    def load_state_dict(self, state):
        missing = set(self.params) - set(state)
        extra = set(state) - set(self.params)
        if missing or extra:
            raise KeyError(f"parameter mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for k, arr in state.items():
            if tuple(arr.shape) != self.params[k].shape:
                raise ValueError(f"shape mismatch for {k}: {arr.shape} vs {self.params[k].shape}")
            self.params[k].data = np.asarray(arr, dtype=self.dtype).copy()

    def to_json(self, metadata=None) -> str:
        doc = {
            "schema_version": CHECKPOINT_SCHEMA,
            "metadata": metadata or {},
            "params": {
                k: {"shape": list(t.shape), "dtype": str(t.dtype),
                    "data": [float(x) for x in t.data.ravel()]}
                for k, t in self.params.items()
            },
            "optimizer": {
                "step": int(self.step),
                "m": {k: [float(x) for x in a.ravel()] for k, a in self.m.items()},
                "v": {k: [float(x) for x in a.ravel()] for k, a in self.v.items()},
            },
        }
        return json.dumps(doc, sort_keys=True)

    def save(self, path, metadata=None):
        Path(path).write_text(self.to_json(metadata) + "\n")

    def load_json(self, text):
        doc = json.loads(text)
        if doc.get("schema_version") != CHECKPOINT_SCHEMA:
            raise ValueError(f"unsupported checkpoint schema {doc.get('schema_version')!r}")
        state = {}
        for k, rec in doc["params"].items():
            state[k] = np.asarray(rec["data"], dtype=rec["dtype"]).reshape(rec["shape"])
        self.dtype = np.dtype(next(iter(doc["params"].values()))["dtype"]) if doc["params"] else self.dtype
        self.load_state_dict(state)
        opt = doc.get("optimizer", {})
        self.step = int(opt.get("step", 0))
        self.m = {k: np.asarray(a, dtype=self.dtype).reshape(self.params[k].shape)
                  for k, a in opt.get("m", {}).items()}
        self.v = {k: np.asarray(a, dtype=self.dtype).reshape(self.params[k].shape)
                  for k, a in opt.get("v", {}).items()}
        return doc.get("metadata", {})

    def load(self, path):
        return self.load_json(Path(path).read_text())


def update_checkpoint_metadata(path, **meta):
    """Merge ``meta`` into a checkpoint's metadata in place."""
    p = Path(path)
    doc = json.loads(p.read_text())
    doc.setdefault("metadata", {}).update(meta)
    p.write_text(json.dumps(doc, sort_keys=True) + "\n")


def read_checkpoint_metadata(path):
    return json.loads(Path(path).read_text()).get("metadata", {})
