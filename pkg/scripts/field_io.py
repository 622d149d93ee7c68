"""
Binary snapshots of grid fields.

Layout (little-endian): 16-byte magic, u32 version, u32 n, u32 components,
n x u64 shape, f64 spacing, then f64 samples row-major with the component
index fastest.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Dict, Optional, Tuple
import os
import struct
import sys

import numpy as np
import pandas as pd

SCRIPT_DIR = os.path.dirname(os.path.abspath(__file__))
if SCRIPT_DIR not in sys.path:
    sys.path.insert(0, SCRIPT_DIR)

from constants import FIELD_MAGIC, FIELD_VERSION
from errors import FormatError, InvalidInput, MissingInput
from subsolution_factory import PressureLaw, SubsolutionField

HEADER = struct.Struct("<III")
SNAPSHOT_PARTS = ("rho", "q", "m", "U", "domain")


@dataclass(frozen=True)
class GridField:
    shape: Tuple[int, ...]
    spacing: float
    components: int
    samples: np.ndarray
    periodic: bool = True

    def __post_init__(self) -> None:
        shape = tuple(int(s) for s in self.shape)
        n = len(shape)
        if self.components not in (1, n, n * (n + 1) // 2):
            raise ValueError(f"component count {self.components} does not fit dimension {n}")
        samples = np.ascontiguousarray(self.samples, dtype="<f8").reshape(shape + (self.components,))
        if not np.all(np.isfinite(samples)):
            raise InvalidInput("grid field contains non-finite samples")
        object.__setattr__(self, "shape", shape)
        object.__setattr__(self, "samples", samples)

    @property
    def n(self) -> int:
        return len(self.shape)

    @classmethod
    def scalar(cls, values: np.ndarray, spacing: float) -> "GridField":
        values = np.asarray(values, dtype=float)
        return cls(values.shape, spacing, 1, values[..., None])

    @classmethod
    def vector(cls, values: np.ndarray, spacing: float) -> "GridField":
        values = np.asarray(values, dtype=float)
        return cls(values.shape[:-1], spacing, values.shape[-1], values)

    @classmethod
    def symmetric(cls, values: np.ndarray, spacing: float) -> "GridField":
        """Upper triangle, diagonal included, row by row."""
        values = np.asarray(values, dtype=float)
        n = values.shape[-1]
        rows, cols = np.triu_indices(n)
        return cls(values.shape[:-2], spacing, n * (n + 1) // 2, values[..., rows, cols])

    def as_scalar(self) -> np.ndarray:
        return self.samples[..., 0]

    def as_symmetric(self) -> np.ndarray:
        n = self.n
        if self.components != n * (n + 1) // 2:
            raise ValueError("field does not hold a symmetric matrix")
        rows, cols = np.triu_indices(n)
        out = np.zeros(self.shape + (n, n))
        out[..., rows, cols] = self.samples
        out[..., cols, rows] = self.samples
        return out


def encode_field(field: GridField) -> bytes:
    header = FIELD_MAGIC + HEADER.pack(FIELD_VERSION, field.n, field.components)
    header += np.asarray(field.shape, dtype="<u8").tobytes()
    header += np.asarray([field.spacing], dtype="<f8").tobytes()
    return header + field.samples.tobytes(order="C")


def decode_field(data: bytes) -> GridField:
    magic_len = len(FIELD_MAGIC)
    if data[:magic_len] != FIELD_MAGIC:
        raise FormatError("not a wildflow field: bad magic")
    offset = magic_len
    if len(data) < offset + HEADER.size:
        raise FormatError("truncated header")
    version, n, components = HEADER.unpack_from(data, offset)
    if version != FIELD_VERSION:
        raise FormatError(f"unsupported field version {version}")
    offset += HEADER.size
    if len(data) < offset + 8 * n + 8:
        raise FormatError("truncated header")
    shape = tuple(int(s) for s in np.frombuffer(data, dtype="<u8", count=n, offset=offset))
    offset += 8 * n
    spacing = float(np.frombuffer(data, dtype="<f8", count=1, offset=offset)[0])
    offset += 8
    count = int(np.prod(shape)) * components
    if len(data) - offset != 8 * count:
        raise FormatError(f"expected {count} samples, found {(len(data) - offset) / 8:g}")
    samples = np.frombuffer(data, dtype="<f8", count=count, offset=offset).copy()
    try:
        return GridField(shape, spacing, components, samples)
    except (ValueError, InvalidInput) as exc:
        raise FormatError(str(exc)) from exc


def write_field(path: str, field: GridField) -> None:
    directory = os.path.dirname(path)
    if directory:
        os.makedirs(directory, exist_ok=True)
    with open(path, "wb") as handle:
        handle.write(encode_field(field))


def read_field(path: str) -> GridField:
    if not os.path.exists(path):
        raise MissingInput(f"field file not found: {path}")
    with open(path, "rb") as handle:
        return decode_field(handle.read())


def snapshot_paths(directory: str, tag: str) -> Dict[str, str]:
    return {part: os.path.join(directory, f"{tag}_{part}.wf") for part in SNAPSHOT_PARTS}


def save_subsolution(directory: str, tag: str, s: SubsolutionField) -> Dict[str, str]:
    paths = snapshot_paths(directory, tag)
    write_field(paths["rho"], GridField.scalar(s.rho, s.spacing))
    write_field(paths["q"], GridField.scalar(s.q, s.spacing))
    write_field(paths["m"], GridField.vector(s.m, s.spacing))
    write_field(paths["U"], GridField.symmetric(s.U, s.spacing))
    write_field(paths["domain"], GridField.scalar(s.domain.astype(float), s.spacing))
    return paths


def load_subsolution(
    directory: str,
    tag: str,
    B: np.ndarray,
    pressure: Optional[PressureLaw] = None,
    operator: str = "spectral",
) -> SubsolutionField:
    paths = snapshot_paths(directory, tag)
    fields = {part: read_field(path) for part, path in paths.items()}
    shapes = {f.shape for f in fields.values()}
    if len(shapes) != 1:
        raise FormatError(f"snapshot {tag} mixes grid shapes {sorted(shapes)}")
    return SubsolutionField(
        rho=fields["rho"].as_scalar(),
        q=fields["q"].as_scalar(),
        m=fields["m"].samples.copy(),
        U=fields["U"].as_symmetric(),
        domain=fields["domain"].as_scalar() > 0.5,
        spacing=fields["rho"].spacing,
        B=np.asarray(B, dtype=float),
        pressure=pressure or PressureLaw(),
        label=tag,
        operator=operator,
    )


def field_to_csv(path: str, output_path: str) -> pd.DataFrame:
    """Flatten a binary field to one row per sample with index and component columns."""
    field = read_field(path)
    index = np.indices(field.shape).reshape(field.n, -1).T
    data = {f"i{axis}": index[:, axis] for axis in range(field.n)}
    flat = field.samples.reshape(-1, field.components)
    for c in range(field.components):
        data[f"c{c}"] = flat[:, c]
    df = pd.DataFrame(data)
    df.to_csv(output_path, index=False, lineterminator="\n")
    return df
