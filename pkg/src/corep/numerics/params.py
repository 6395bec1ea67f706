"""Named parameter groups with exact text serialization."""
from __future__ import annotations

from typing import Iterator, Mapping

import numpy as np

FORMAT_TAG = "paramgroup-v1"


class ParamGroup(Mapping[str, np.ndarray]):
    """Ordered map from unique names to float64 arrays, with trainable flags.

    Iteration follows insertion order, so anything derived from a group
    (updates, serialization) is deterministic.
    """

    def __init__(self):
        self._values: dict[str, np.ndarray] = {}
        self._trainable: dict[str, bool] = {}

    def add(self, name: str, value, trainable: bool = True) -> None:
        if name in self._values:
            raise ValueError(f"parameter '{name}' already present")
        if any(c.isspace() for c in name):
            raise ValueError(f"parameter name may not contain whitespace: {name!r}")
        self._values[name] = np.asarray(value, dtype=np.float64)
        self._trainable[name] = bool(trainable)

    def set(self, name: str, value) -> None:
        if name not in self._values:
            raise KeyError(name)
        arr = np.asarray(value, dtype=np.float64)
        if arr.shape != self._values[name].shape:
            raise ValueError(f"shape mismatch for '{name}': "
                             f"{arr.shape} != {self._values[name].shape}")
        self._values[name] = arr

    def trainable(self, name: str) -> bool:
        return self._trainable[name]

    def trainable_names(self) -> list[str]:
        return [n for n, t in self._trainable.items() if t]

    def copy(self) -> "ParamGroup":
        out = ParamGroup()
        for name, value in self._values.items():
            out.add(name, value.copy(), self._trainable[name])
        return out

    def __getitem__(self, name: str) -> np.ndarray:
        return self._values[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._values)

    def __len__(self) -> int:
        return len(self._values)

    def __repr__(self):
        return f"ParamGroup({list(self._values)})"

    # -- text round-trip ----------------------------------------------------

    def dumps(self) -> str:
        """Serialize to text; floats use shortest-repr so loads() is exact."""
        lines = [FORMAT_TAG]
        for name, value in self._values.items():
            flag = 1 if self._trainable[name] else 0
            dims = " ".join(str(d) for d in value.shape)
            lines.append(f"param {name} {flag} {value.ndim} {dims}".rstrip())
            lines.append(" ".join(repr(float(x)) for x in value.reshape(-1)))
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ParamGroup":
        lines = text.splitlines()
        if not lines or lines[0].strip() != FORMAT_TAG:
            raise ValueError(f"not a {FORMAT_TAG} document")
        out = cls()
        i = 1
        while i < len(lines):
            line = lines[i].strip()
            i += 1
            if not line:
                continue
            parts = line.split()
            if parts[0] != "param":
                raise ValueError(f"expected 'param' line, got: {line!r}")
            name, flag, ndim = parts[1], int(parts[2]), int(parts[3])
            dims = tuple(int(d) for d in parts[4:4 + ndim])
            if len(dims) != ndim:
                raise ValueError(f"param {name}: expected {ndim} dims, got {dims}")
            values = np.array([float(t) for t in lines[i].split()], dtype=np.float64)
            i += 1
            expected = int(np.prod(dims)) if dims else 1
            if values.size != expected:
                raise ValueError(f"param {name}: expected {expected} values, got {values.size}")
            out.add(name, values.reshape(dims), trainable=bool(flag))
        return out

    def save(self, path) -> None:
        with open(path, "w") as f:
            f.write(self.dumps())

    @classmethod
    def load(cls, path) -> "ParamGroup":
        with open(path) as f:
            return cls.loads(f.read())


def merge_bindings(*groups: Mapping[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Flatten several groups into one bindings dict; duplicate names are errors."""
    out: dict[str, np.ndarray] = {}
    for g in groups:
        for name in g:
            if name in out:
                raise ValueError(f"duplicate parameter name across groups: '{name}'")
            out[name] = g[name]
    return out
