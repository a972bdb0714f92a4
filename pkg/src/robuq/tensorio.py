"""Bit-exact matrix files and sensitivity-table CSVs.

Matrices travel in a fixed little-endian binary layout (magic ``RBQ1``,
uint32 rows, uint32 cols, float32 row-major payload) so fixtures round-trip
bitwise across platforms. Sensitivity tables are small and meant to be
human-auditable, so they travel as CSV.
"""

from __future__ import annotations

import csv
import struct
from dataclasses import dataclass, field

import numpy as np

from .errors import FormatError, ValidationError

MATRIX_MAGIC = b"RBQ1"
_HEADER = struct.Struct("<4sII")


def save_matrix(m: np.ndarray, path) -> None:
    """Write a 2-D float32 matrix to ``path`` in RBQ1 layout.

    The file is exactly ``12 + 4 * rows * cols`` bytes. Values are stored as
    little-endian IEEE-754 float32 regardless of the input dtype.
    """
    arr = np.ascontiguousarray(m, dtype=np.float32)
    if arr.ndim != 2 or arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValidationError(f"expected a nonempty 2-D matrix, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("matrix contains NaN or Inf")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MATRIX_MAGIC, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes())


def load_matrix(path) -> np.ndarray:
    """Read an RBQ1 file back into a float32 array, validating the layout."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < _HEADER.size:
        raise FormatError(f"{path}: file shorter than the 12-byte header")
    magic, rows, cols = _HEADER.unpack_from(raw)
    if magic != MATRIX_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {MATRIX_MAGIC!r}")
    if rows < 1 or cols < 1:
        raise FormatError(f"{path}: non-positive dims {rows}x{cols}")
    expected = _HEADER.size + 4 * rows * cols
    if len(raw) != expected:
        raise FormatError(
            f"{path}: payload is {len(raw) - _HEADER.size} bytes, "
            f"expected {expected - _HEADER.size} for {rows}x{cols}"
        )
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size).reshape(rows, cols)
    if not np.all(np.isfinite(data)):
        raise ValidationError(f"{path}: matrix contains NaN or Inf")
    return data.copy()


@dataclass
class LayerSpec:
    """Static description of one linear layer for allocation purposes.

    ``flops_weight`` is the layer's relative FLOPs share (w_l); layers with
    ``fixed_bits`` set are excluded from bit allocation and keep that width.
    """

    name: str
    in_dim: int = 0
    out_dim: int = 0
    flops_weight: float = 1.0
    fixed_bits: int | None = None

    def __post_init__(self):
        if self.flops_weight < 0:
            raise ValidationError(f"layer {self.name}: flops_weight must be >= 0")
        if self.fixed_bits is not None and not (1 <= self.fixed_bits <= 8 or self.fixed_bits == 32):
            raise ValidationError(f"layer {self.name}: fixed_bits must be in 1..8 or 32")


@dataclass
class SensitivityTable:
    """Per-layer, per-bit-width validation loss gaps.

    ``delta_loss[i, j]`` is the loss gap of ``layers[i]`` quantized to
    ``bits[j]`` activation bits. Every cell must be populated.
    """

    layers: list[LayerSpec]
    bits: list[int]
    delta_loss: np.ndarray = field(repr=False)

    def __post_init__(self):
        self.delta_loss = np.asarray(self.delta_loss, dtype=np.float64)
        if not self.bits:
            raise ValidationError("bit set must be nonempty")
        if any(b2 <= b1 for b1, b2 in zip(self.bits, self.bits[1:])):
            raise ValidationError(f"bit set must be strictly increasing, got {self.bits}")
        if self.delta_loss.shape != (len(self.layers), len(self.bits)):
            raise ValidationError(
                f"delta_loss shape {self.delta_loss.shape} does not match "
                f"{len(self.layers)} layers x {len(self.bits)} bits"
            )
        if not np.all(np.isfinite(self.delta_loss)):
            raise ValidationError("delta_loss contains NaN or Inf")

    def gap(self, layer_name: str, bits: int) -> float:
        i = next(i for i, l in enumerate(self.layers) if l.name == layer_name)
        return float(self.delta_loss[i, self.bits.index(bits)])


def save_sensitivity(table: SensitivityTable, path) -> None:
    """Write a sensitivity table as CSV, one row per layer in table order."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["layer", "flops_weight", "fixed_bits"] + [f"dL@{b}" for b in table.bits])
        for i, layer in enumerate(table.layers):
            fixed = "" if layer.fixed_bits is None else str(layer.fixed_bits)
            writer.writerow(
                [layer.name, repr(layer.flops_weight), fixed]
                + [repr(float(v)) for v in table.delta_loss[i]]
            )


def load_sensitivity(path) -> SensitivityTable:
    """Parse a sensitivity CSV, preserving row order.

    Raises FormatError naming the offending layer and bit when a cell is
    missing or unparsable.
    """
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise FormatError(f"{path}: empty file")
    header = rows[0]
    if header[:3] != ["layer", "flops_weight", "fixed_bits"]:
        raise FormatError(f"{path}: bad header {header[:3]}, expected layer,flops_weight,fixed_bits")
    bit_cols = []
    for j, name in enumerate(header[3:], start=3):
        if not name.startswith("dL@"):
            raise FormatError(f"{path}: column {name!r} is not of the form dL@<bits>")
        bit_cols.append((int(name[3:]), j))
    if not bit_cols:
        raise FormatError(f"{path}: no dL@<bits> columns")
    bit_cols.sort()
    bits = [b for b, _ in bit_cols]

    layers, gaps = [], []
    for row in rows[1:]:
        if not row:
            continue
        name = row[0]
        fixed = None if len(row) < 3 or row[2].strip() == "" else int(row[2])
        layers.append(LayerSpec(name=name, flops_weight=float(row[1]), fixed_bits=fixed))
        cells = []
        for b, j in bit_cols:
            if j >= len(row) or row[j].strip() == "":
                raise FormatError(f"{path}: layer {name!r} is missing dL@{b}")
            try:
                cells.append(float(row[j]))
            except ValueError as exc:
                raise FormatError(f"{path}: layer {name!r} has unparsable dL@{b}: {row[j]!r}") from exc
        gaps.append(cells)
    return SensitivityTable(layers=layers, bits=bits, delta_loss=np.array(gaps, dtype=np.float64))
