"""Named parameter storage and the versioned checkpoint container.

A checkpoint is a single file: one JSON header line (format tag, seed,
metadata, tensor directory) followed by the raw little-endian bytes of
each tensor in directory order. Writing the same store twice yields
byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .autodiff import Tensor

FORMAT_TAG = "onboardsim-params-v1"


class ParamStore:
    """Ordered, uniquely named tensors plus the RNG seed used to create them.

    Trainable entries participate in gradients; buffers (priors, frozen
    tables) are carried through save/load untouched.
    """

    def __init__(self, seed: int):
        self.seed = int(seed)
        self._entries: dict[str, Tensor] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        return self._insert(name, values, trainable=True)

    def add_buffer(self, name: str, values: np.ndarray) -> Tensor:
        return self._insert(name, values, trainable=False)

    def _insert(self, name, values, trainable):
        if name in self._entries:
            raise ValueError(f"duplicate parameter name: {name!r}")
        t = Tensor(np.array(values, dtype=np.float64), requires_grad=trainable)
        self._entries[name] = t
        self._trainable[name] = trainable
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def names(self) -> list[str]:
        return list(self._entries)

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._entries.items() if self._trainable[n]]

    def zero_grad(self) -> None:
        for t in self._entries.values():
            t.grad = None

    def n_params(self) -> int:
        return sum(t.data.size for _, t in self.trainable())

    # -- checkpoint io ---------------------------------------------------

    def save(self, path, meta: dict | None = None) -> None:
        directory = [
            {
                "name": n,
                "shape": list(t.data.shape),
                "trainable": self._trainable[n],
            }
            for n, t in self._entries.items()
        ]
        header = {
            "format": FORMAT_TAG,
            "seed": self.seed,
            "meta": meta or {},
            "tensors": directory,
        }
        with open(path, "wb") as fh:
            fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
            for _, t in self._entries.items():
                fh.write(np.ascontiguousarray(t.data, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> tuple["ParamStore", dict]:
        with open(Path(path), "rb") as fh:
            header = json.loads(fh.readline().decode())
            if header.get("format") != FORMAT_TAG:
                raise ValueError(f"not a parameter checkpoint: {path}")
            store = cls(header["seed"])
            for entry in header["tensors"]:
                shape = tuple(entry["shape"])
                n = int(np.prod(shape)) if shape else 1
                raw = fh.read(n * 8)
                arr = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()
                store._insert(entry["name"], arr, trainable=entry["trainable"])
        return store, header["meta"]

    def load_values_from(self, other: "ParamStore") -> None:
        """Copy matching tensors in place (checkpoint restore into a built model)."""
        for name, t in self._entries.items():
            src = other[name]
            if src.data.shape != t.data.shape:
                raise ValueError(f"shape mismatch for {name!r}")
            t.data = src.data.copy()
