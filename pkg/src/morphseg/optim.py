"""Named parameter store, Adam updates, and MPCK checkpoint files.

MPCK byte layout (little endian):

    4 bytes  magic ``MPCK``
    u32      entry count
    per entry:
        u16    name length
        bytes  utf-8 name
        bytes  the value as a complete embedded MTK1 tensor

Adam moments are not serialized; a reloaded optimizer restarts cold.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

from .io import MAGIC as MTK1_MAGIC, FormatError

CHECKPOINT_MAGIC = b"MPCK"


@dataclass
class Slot:
    value: np.ndarray
    grad: np.ndarray = field(init=False)
    m: np.ndarray = field(init=False)
    v: np.ndarray = field(init=False)

    def __post_init__(self):
        self.grad = np.zeros_like(self.value)
        self.m = np.zeros_like(self.value)
        self.v = np.zeros_like(self.value)


class ParamStore:
    """Ordered map of named learnable tensors with gradient/moment slots.

    Value arrays are shared with the caller (updates happen in place), so a
    parameter tree used by forward code sees every optimizer step.
    Iteration order is insertion order and therefore deterministic.
    """

    def __init__(self, values: dict | None = None):
        self._slots: dict[str, Slot] = {}
        self.step_count = 0
        for name, arr in (values or {}).items():
            self.add(name, arr)

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self._slots:
            raise KeyError(f"duplicate parameter {name!r}")
        self._slots[name] = Slot(np.asarray(value, dtype=np.float64))

    def names(self) -> list[str]:
        return list(self._slots)

    def value(self, name: str) -> np.ndarray:
        return self._slots[name].value

    def grad(self, name: str) -> np.ndarray:
        return self._slots[name].grad

    def n_parameters(self) -> int:
        return sum(s.value.size for s in self._slots.values())

    def zero_grads(self) -> None:
        for s in self._slots.values():
            s.grad[...] = 0.0

    def accumulate(self, grads: dict, scale: float = 1.0) -> None:
        """Add ``scale * grads[name]`` into each gradient slot."""
        for name, g in grads.items():
            self._slots[name].grad += scale * g

    def adam_step(self, lr: float, beta1: float = 0.9, beta2: float = 0.999,
                  eps: float = 1e-8) -> None:
        """Bias-corrected Adam update; gradients are zeroed afterwards."""
        self.step_count += 1
        t = self.step_count
        c1 = 1.0 - beta1 ** t
        c2 = 1.0 - beta2 ** t
        for s in self._slots.values():
            s.m[...] = beta1 * s.m + (1.0 - beta1) * s.grad
            s.v[...] = beta2 * s.v + (1.0 - beta2) * s.grad ** 2
            s.value[...] -= lr * (s.m / c1) / (np.sqrt(s.v / c2) + eps)
            s.grad[...] = 0.0


def _embed_mtk1(arr: np.ndarray) -> bytes:
    arr = np.ascontiguousarray(arr, dtype=np.float64)
    parts = [MTK1_MAGIC, struct.pack("<I", arr.ndim)]
    parts += [struct.pack("<I", e) for e in arr.shape]
    parts.append(arr.astype("<f8").tobytes(order="C"))
    return b"".join(parts)


def save_checkpoint(path, values: dict) -> None:
    """Write named tensors (insertion order) as an MPCK file."""
    with open(path, "wb") as f:
        f.write(CHECKPOINT_MAGIC)
        f.write(struct.pack("<I", len(values)))
        for name, arr in values.items():
            encoded = name.encode("utf-8")
            f.write(struct.pack("<H", len(encoded)))
            f.write(encoded)
            f.write(_embed_mtk1(arr))


def load_checkpoint(path) -> dict:
    """Read an MPCK file back into an ordered name -> array map."""
    from pathlib import Path

    raw = Path(path).read_bytes()
    if len(raw) < 8 or raw[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an MPCK checkpoint")
    (count,) = struct.unpack_from("<I", raw, 4)
    pos = 8
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        if pos + 2 > len(raw):
            raise FormatError(f"{path}: truncated entry header")
        (nlen,) = struct.unpack_from("<H", raw, pos)
        pos += 2
        name = raw[pos:pos + nlen].decode("utf-8")
        pos += nlen
        if raw[pos:pos + 4] != MTK1_MAGIC:
            raise FormatError(f"{path}: entry {name!r} lacks MTK1 payload")
        (rank,) = struct.unpack_from("<I", raw, pos + 4)
        header = 8 + 4 * rank
        extents = struct.unpack_from(f"<{rank}I", raw, pos + 8) if rank else ()
        n_vals = int(np.prod(extents, dtype=np.int64)) if rank else 1
        end = pos + header + 8 * n_vals
        if end > len(raw):
            raise FormatError(f"{path}: truncated tensor for {name!r}")
        values = np.frombuffer(raw, dtype="<f8", offset=pos + header,
                               count=n_vals)
        out[name] = values.astype(np.float64).reshape(extents)
        pos = end
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def load_into(flat_params: dict, loaded: dict) -> None:
    """Copy checkpoint values into an existing flat parameter view."""
    missing = set(flat_params) - set(loaded)
    extra = set(loaded) - set(flat_params)
    if missing or extra:
        raise KeyError(f"checkpoint mismatch: missing {sorted(missing)}, "
                       f"unexpected {sorted(extra)}")
    for name, arr in loaded.items():
        target = flat_params[name]
        if target.shape != arr.shape:
            raise FormatError(f"shape mismatch for {name!r}: "
                              f"{target.shape} vs {arr.shape}")
        target[...] = arr
