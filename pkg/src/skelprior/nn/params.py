"""Named parameter storage and the manifest + float32 blob checkpoint format."""

from __future__ import annotations

import json
import os
import tempfile
from pathlib import Path
from typing import Iterator, Mapping, Optional

import numpy as np

from .autodiff import Tensor

BLOB_SUFFIX = ".bin"
FORMAT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParamStore:
    """Trainable tensors plus non-trainable buffers (e.g. batchnorm running stats).

    Every parameter carries a gradient buffer of its own shape from creation.
    """

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=self.dtype), requires_grad=True, name=name)
        t.zero_grad()
        self._params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self._params or name in self._buffers:
            raise KeyError(f"duplicate buffer name {name!r}")
        arr = np.array(value, dtype=self.dtype)
        self._buffers[name] = arr
        return arr

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._params.items())

    def __len__(self) -> int:
        return len(self._params)

    def buffer(self, name: str) -> np.ndarray:
        return self._buffers[name]

    @property
    def names(self) -> list[str]:
        return list(self._params)

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self._params.values())

    def zero_grad(self):
        for t in self._params.values():
            if t.grad is None:
                t.zero_grad()
            else:
                t.grad.fill(0)

    def requires_grad_(self, flag: bool) -> "ParamStore":
        for t in self._params.values():
            t.requires_grad = flag
        return self

    def astype(self, dtype) -> "ParamStore":
        """Cast every parameter and buffer in place (used for double-precision checks)."""
        self.dtype = np.dtype(dtype)
        for t in self._params.values():
            t.data = t.data.astype(self.dtype)
            t.zero_grad()
        for name in list(self._buffers):
            self._buffers[name] = self._buffers[name].astype(self.dtype)
        return self

    def state_dict(self) -> dict[str, np.ndarray]:
        state = {name: t.data for name, t in self._params.items()}
        state.update({f"buffer:{name}": arr for name, arr in self._buffers.items()})
        return state

    def load_state_dict(self, state: Mapping[str, np.ndarray], strict: bool = True):
        expected = set(self.state_dict())
        missing = expected - set(state)
        if strict and missing:
            raise CheckpointError(f"checkpoint is missing entries: {sorted(missing)}")
        for name, t in self._params.items():
            if name in state:
                _assign(t.data, state[name], name)
        for name, arr in self._buffers.items():
            key = f"buffer:{name}"
            if key in state:
                _assign(arr, state[key], key)


def _assign(dst: np.ndarray, src: np.ndarray, name: str):
    src = np.asarray(src)
    if src.shape != dst.shape:
        raise CheckpointError(f"{name}: checkpoint shape {src.shape} != model shape {dst.shape}")
    dst[...] = src


def atomic_write_bytes(path: Path, payload: bytes):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path: Path, text: str):
    atomic_write_bytes(path, text.encode("utf-8"))


def save_arrays(path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None) -> Path:
    """Write ``<path>`` (JSON manifest) and ``<path minus .json>.bin`` (float32 LE blob).

    Returns the manifest path. Arrays are stored in insertion order.
    """
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    blob_path = path.with_suffix(BLOB_SUFFIX)
    entries, chunks, offset = [], [], 0
    for name, value in arrays.items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": arr.nbytes})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    manifest = {
        "format": "skelprior-checkpoint",
        "version": FORMAT_VERSION,
        "dtype": "float32",
        "byteorder": "little",
        "blob": blob_path.name,
        "total_bytes": offset,
        "entries": entries,
        "meta": meta or {},
    }
    atomic_write_bytes(blob_path, b"".join(chunks))
    atomic_write_text(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    path = Path(path)
    if path.suffix != ".json":
        path = path.with_suffix(".json")
    try:
        manifest = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"{path}: manifest is not valid JSON ({exc})") from exc
    if manifest.get("format") != "skelprior-checkpoint":
        raise CheckpointError(f"{path}: not a skelprior checkpoint manifest")
    blob = (path.parent / manifest["blob"]).read_bytes()
    if len(blob) != manifest["total_bytes"]:
        raise CheckpointError(f"{path}: blob has {len(blob)} bytes, manifest says {manifest['total_bytes']}")
    arrays = {}
    for entry in manifest["entries"]:
        start = entry["offset"]
        raw = blob[start : start + entry["nbytes"]]
        arrays[entry["name"]] = np.frombuffer(raw, dtype="<f4").reshape(entry["shape"]).copy()
    return arrays, manifest["meta"]
