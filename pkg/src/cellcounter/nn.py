"""Parameter registry, initialization, and checkpoint serialization.

Both networks register every learnable tensor and batch-norm buffer under a
hierarchical dotted name ("fpn.down.0.conv.weight"). The registry owns
iteration order (insertion order), the trainable/buffer split, and the
state-dict view that checkpoints serialize.

Checkpoint wire format, version 1, all integers little-endian:

    magic "CCKP" | u32 version | u32 tensor count
    per tensor: u16 name length | name UTF-8 | u8 ndim | ndim x u32 dims
                | u8 dtype tag (0 = f32, 1 = f64) | row-major payload
    optional optimizer trailer:
    magic "OPT1" | u64 step | u32 tensor count | tensors as above

The format is self-describing and endianness-pinned so files port across
machines bit-exactly. Files use the extension ".cckp".
"""

from __future__ import annotations

import math
import struct
from typing import Iterator

import numpy as np

from ._rng import CounterRng
from .tensor import Tensor

__all__ = [
    "ParamRegistry",
    "CheckpointError",
    "init_params",
    "save_checkpoint",
    "load_checkpoint",
    "CHECKPOINT_MAGIC",
    "CHECKPOINT_VERSION",
    "CHECKPOINT_EXTENSION",
]

CHECKPOINT_MAGIC = b"CCKP"
OPTIMIZER_MAGIC = b"OPT1"
CHECKPOINT_VERSION = 1
CHECKPOINT_EXTENSION = ".cckp"

_DTYPE_TAGS = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_TAG_FOR_KIND = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


class ParamRegistry:
    """Ordered name -> Tensor map with a trainable/buffer distinction.

    Buffers (batch-norm running stats) persist in checkpoints but are
    excluded from the trainable set the optimizer updates.
    """

    def __init__(self):
        self._tensors: dict[str, Tensor] = {}
        self._buffers: set[str] = set()

    def add_param(self, name: str, tensor: Tensor) -> Tensor:
        self._insert(name, tensor)
        tensor.requires_grad = True
        return tensor

    def add_buffer(self, name: str, tensor: Tensor) -> Tensor:
        self._insert(name, tensor)
        tensor.requires_grad = False
        self._buffers.add(name)
        return tensor

    def _insert(self, name: str, tensor: Tensor) -> None:
        if name in self._tensors:
            raise ValueError(f"duplicate parameter name {name!r}")
        self._tensors[name] = tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __len__(self) -> int:
        return len(self._tensors)

    def names(self) -> list[str]:
        return list(self._tensors)

    def items(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self._tensors.items())

    def is_buffer(self, name: str) -> bool:
        return name in self._buffers

    def trainable(self) -> list[tuple[str, Tensor]]:
        return [(n, t) for n, t in self._tensors.items() if n not in self._buffers]

    def zero_grad(self) -> None:
        for _, t in self.trainable():
            t.grad = None

    def num_scalars(self, trainable_only: bool = True) -> int:
        pairs = self.trainable() if trainable_only else list(self.items())
        return sum(t.size for _, t in pairs)

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self._tensors.items()}

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Copy arrays into registered tensors, validating coverage and shapes."""
        for name, t in self._tensors.items():
            if name not in state:
                raise CheckpointError(f"checkpoint is missing parameter {name!r}")
            arr = state[name]
            if tuple(arr.shape) != t.data.shape:
                raise CheckpointError(
                    f"shape mismatch for parameter {name!r}: "
                    f"checkpoint has {tuple(arr.shape)}, model expects {t.data.shape}"
                )
            t.data = np.ascontiguousarray(arr, dtype=t.data.dtype)


def init_params(registry: ParamRegistry, seed: int) -> None:
    """He-style initialization, deterministic in (shapes, seed).

    Weights of conv (4-d) and linear (2-d) layers draw from a normal with
    std = sqrt(2 / fan_in); biases and batch-norm offsets start at 0,
    batch-norm scales and running variances at 1. Each parameter uses its
    own counter-based stream so values depend only on (seed, position,
    shape), never on other tensors' sizes.
    """
    for index, (name, t) in enumerate(registry.items()):
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "weight":
            if t.data.ndim == 4:
                fan_in = int(np.prod(t.data.shape[1:]))
            elif t.data.ndim == 2:
                fan_in = int(t.data.shape[0])
            else:
                raise ValueError(f"weight {name!r} has unsupported rank {t.data.ndim}")
            std = math.sqrt(2.0 / fan_in)
            rng = CounterRng(seed, stream=index)
            t.data = (rng.normal(t.size).reshape(t.data.shape) * std).astype(t.data.dtype)
        elif leaf in ("bias", "beta", "running_mean"):
            t.data = np.zeros_like(t.data)
        elif leaf in ("gamma", "running_var"):
            t.data = np.ones_like(t.data)
        else:
            raise ValueError(f"no initialization rule for parameter {name!r}")


class CheckpointError(ValueError):
    """Malformed, truncated, or incompatible checkpoint file."""


class _Reader:
    """Byte cursor that reports its offset in every failure."""

    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.path = path
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.blob):
            raise CheckpointError(
                f"{self.path}: truncated checkpoint, needed {n} bytes for {what} "
                f"at offset {self.pos} but file ends at {len(self.blob)}"
            )
        chunk = self.blob[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def u8(self, what: str) -> int:
        return self.take(1, what)[0]

    def u16(self, what: str) -> int:
        return struct.unpack("<H", self.take(2, what))[0]

    def u32(self, what: str) -> int:
        return struct.unpack("<I", self.take(4, what))[0]

    def u64(self, what: str) -> int:
        return struct.unpack("<Q", self.take(8, what))[0]


def _encode_tensor(name: str, arr: np.ndarray) -> bytes:
    nb = name.encode("utf-8")
    if len(nb) > 0xFFFF:
        raise ValueError(f"parameter name too long: {name!r}")
    dt = np.dtype(arr.dtype)
    if dt not in _TAG_FOR_KIND:
        raise ValueError(f"cannot serialize dtype {dt} for {name!r}")
    tag = _TAG_FOR_KIND[dt]
    parts = [struct.pack("<H", len(nb)), nb, struct.pack("<B", arr.ndim)]
    parts += [struct.pack("<I", d) for d in arr.shape]
    parts.append(struct.pack("<B", tag))
    parts.append(np.ascontiguousarray(arr, dtype=_DTYPE_TAGS[tag]).tobytes())
    return b"".join(parts)


def _decode_tensor(r: _Reader) -> tuple[str, np.ndarray]:
    nlen = r.u16("name length")
    at = r.pos
    try:
        name = r.take(nlen, "name").decode("utf-8")
    except UnicodeDecodeError:
        raise CheckpointError(f"{r.path}: invalid UTF-8 in name at offset {at}") from None
    ndim = r.u8(f"ndim of {name!r}")
    dims = tuple(r.u32(f"dim {i} of {name!r}") for i in range(ndim))
    at = r.pos
    tag = r.u8(f"dtype tag of {name!r}")
    if tag not in _DTYPE_TAGS:
        raise CheckpointError(f"{r.path}: unknown dtype tag {tag} at offset {at}")
    dt = _DTYPE_TAGS[tag]
    count = int(np.prod(dims)) if dims else 1
    raw = r.take(count * dt.itemsize, f"payload of {name!r}")
    return name, np.frombuffer(raw, dtype=dt).reshape(dims).copy()


def save_checkpoint(registry: ParamRegistry, optimizer_state: dict | None, path: str) -> None:
    """Write all registry tensors (and optional optimizer state) to ``path``.

    ``optimizer_state``, when given, is {"step": int, "moments": {name: array}}.
    """
    state = registry.state_dict() if isinstance(registry, ParamRegistry) else dict(registry)
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", CHECKPOINT_VERSION), struct.pack("<I", len(state))]
    for name, arr in state.items():
        parts.append(_encode_tensor(name, arr))
    if optimizer_state is not None:
        moments = optimizer_state["moments"]
        parts.append(OPTIMIZER_MAGIC)
        parts.append(struct.pack("<Q", int(optimizer_state["step"])))
        parts.append(struct.pack("<I", len(moments)))
        for name, arr in moments.items():
            parts.append(_encode_tensor(name, np.asarray(arr)))
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def load_checkpoint(path: str) -> tuple[dict[str, np.ndarray], dict | None]:
    """Read a checkpoint; returns (tensors by name, optimizer state or None)."""
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    magic = r.take(4, "magic")
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: bad magic {magic!r} at offset 0, expected {CHECKPOINT_MAGIC!r}")
    at = r.pos
    version = r.u32("version")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: unsupported checkpoint version {version} at offset {at}, "
            f"expected {CHECKPOINT_VERSION}"
        )
    count = r.u32("tensor count")
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        name, arr = _decode_tensor(r)
        if name in tensors:
            raise CheckpointError(f"{path}: duplicate tensor name {name!r}")
        tensors[name] = arr

    optimizer_state = None
    if r.pos < len(blob):
        at = r.pos
        tag = r.take(4, "optimizer trailer magic")
        if tag != OPTIMIZER_MAGIC:
            raise CheckpointError(
                f"{path}: unexpected trailing bytes at offset {at}, "
                f"expected {OPTIMIZER_MAGIC!r} trailer, found {tag!r}"
            )
        step = r.u64("optimizer step")
        mcount = r.u32("optimizer tensor count")
        moments: dict[str, np.ndarray] = {}
        for _ in range(mcount):
            name, arr = _decode_tensor(r)
            moments[name] = arr
        optimizer_state = {"step": step, "moments": moments}
    if r.pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.pos} unparsed bytes at offset {r.pos}")
    return tensors, optimizer_state
