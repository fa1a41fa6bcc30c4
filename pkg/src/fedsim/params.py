"""Flat parameter vectors with named layouts, plus binary checkpoint IO.

A ParamVector is the unit of aggregation, regularization and checkpointing:
one contiguous float64 array together with an ordered layout describing the
weight matrices / bias vectors packed into it.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigurationError, FormatError, NumericError

Layout = tuple[tuple[str, tuple[int, ...]], ...]

_MAGIC = b"FSPV1\n"


def layout_size(layout: Layout) -> int:
    return int(sum(int(np.prod(shape)) for _, shape in layout))


@dataclass(eq=False)
class ParamVector:
    values: np.ndarray
    layout: Layout = field(default_factory=tuple)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ConfigurationError("ParamVector values must be 1-D")
        self.layout = tuple((str(n), tuple(int(s) for s in shape)) for n, shape in self.layout)
        if layout_size(self.layout) != self.values.size:
            raise ConfigurationError(
                f"layout describes {layout_size(self.layout)} values, "
                f"array has {self.values.size}"
            )

    @classmethod
    def zeros(cls, layout: Layout) -> "ParamVector":
        return cls(np.zeros(layout_size(layout)), layout)

    def zeros_like(self) -> "ParamVector":
        return ParamVector(np.zeros_like(self.values), self.layout)

    def copy(self) -> "ParamVector":
        return ParamVector(self.values.copy(), self.layout)

    def view(self, name: str) -> np.ndarray:
        """Return the named block as a reshaped view into the flat array."""
        offset = 0
        for n, shape in self.layout:
            size = int(np.prod(shape))
            if n == name:
                return self.values[offset:offset + size].reshape(shape)
            offset += size
        raise ConfigurationError(f"no layout entry named {name!r}")

    def blocks(self):
        """Yield (name, view) pairs in layout order."""
        offset = 0
        for n, shape in self.layout:
            size = int(np.prod(shape))
            yield n, self.values[offset:offset + size].reshape(shape)
            offset += size

    def check_finite(self, context: str = "ParamVector") -> None:
        if not np.all(np.isfinite(self.values)):
            for name, block in self.blocks():
                if not np.all(np.isfinite(block)):
                    raise NumericError(f"{context}: non-finite values in {name!r}")
        return None

    def same_layout(self, other: "ParamVector") -> bool:
        return self.layout == other.layout


def save_params(pv: ParamVector, path) -> None:
    """Write a self-describing checkpoint: layout header + little-endian float64."""
    header = json.dumps([[n, list(s)] for n, s in pv.layout]).encode()
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<I", len(header)))
        f.write(header)
        f.write(pv.values.astype("<f8").tobytes())


def load_params(path) -> ParamVector:
    with open(path, "rb") as f:
        raw = f.read()
    if raw[: len(_MAGIC)] != _MAGIC:
        raise FormatError(f"{path}: bad magic at offset 0")
    pos = len(_MAGIC)
    if len(raw) < pos + 4:
        raise FormatError(f"{path}: truncated header length at offset {pos}")
    (hlen,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    if len(raw) < pos + hlen:
        raise FormatError(f"{path}: truncated layout header at offset {pos}")
    try:
        layout = tuple((n, tuple(s)) for n, s in json.loads(raw[pos:pos + hlen]))
    except (ValueError, TypeError) as exc:
        raise FormatError(f"{path}: bad layout header: {exc}") from exc
    pos += hlen
    n = layout_size(layout)
    if len(raw) != pos + 8 * n:
        raise FormatError(
            f"{path}: expected {8 * n} payload bytes at offset {pos}, got {len(raw) - pos}"
        )
    values = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64)
    return ParamVector(values, layout)
