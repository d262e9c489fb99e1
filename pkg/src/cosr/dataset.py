"""Named-column sample matrices with attached dimension vectors."""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass, field, replace

import numpy as np

from .dims import DimVector
from .errors import SchemaMismatch


@dataclass(frozen=True)
class Dataset:
    """A sample matrix with named, dimension-tagged columns and one target column."""

    names: tuple[str, ...]
    samples: np.ndarray  # (rows, columns) float64
    dims: tuple[DimVector, ...]
    target: str | None = None
    provenance: str = "unspecified"

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "dims", tuple(self.dims))
        arr = np.asarray(self.samples, dtype=np.float64)
        if arr.ndim != 2:
            raise ValueError("samples must be a 2-D matrix")
        if arr.shape[1] != len(self.names):
            raise ValueError(f"{arr.shape[1]} columns vs {len(self.names)} names")
        if len(self.dims) != len(self.names):
            raise ValueError("one DimVector required per column")
        if self.target is not None and self.target not in self.names:
            raise ValueError(f"target {self.target!r} not among columns {self.names}")
        arr = arr.copy()
        arr.setflags(write=False)
        object.__setattr__(self, "samples", arr)

    @property
    def n_rows(self) -> int:
        return self.samples.shape[0]

    @property
    def n_cols(self) -> int:
        return self.samples.shape[1]

    def index(self, name: str) -> int:
        try:
            return self.names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def column(self, name: str) -> np.ndarray:
        return self.samples[:, self.index(name)]

    def dim_of(self, name: str) -> DimVector:
        return self.dims[self.index(name)]

    def dim_map(self) -> dict[str, DimVector]:
        return dict(zip(self.names, self.dims))

    @property
    def input_names(self) -> tuple[str, ...]:
        return tuple(n for n in self.names if n != self.target)

    @property
    def target_index(self) -> int:
        if self.target is None:
            raise ValueError("dataset has no designated target")
        return self.index(self.target)

    @property
    def target_values(self) -> np.ndarray:
        return self.samples[:, self.target_index]

    def input_matrix(self) -> np.ndarray:
        keep = [i for i, n in enumerate(self.names) if n != self.target]
        return self.samples[:, keep]

    def select(self, names, target: str | None = None) -> "Dataset":
        idx = [self.index(n) for n in names]
        return Dataset(
            names=tuple(names),
            samples=self.samples[:, idx],
            dims=tuple(self.dims[i] for i in idx),
            target=target if target is not None else (self.target if self.target in names else None),
            provenance=self.provenance,
        )

    def with_columns(self, new_names, new_columns, new_dims=None) -> "Dataset":
        """Append columns (e.g. discovered intermediates); dimensionless by default."""
        cols = [np.asarray(c, dtype=np.float64).reshape(-1) for c in new_columns]
        for c in cols:
            if c.shape[0] != self.n_rows:
                raise ValueError("appended column length mismatch")
        k = len(self.dims[0]) if self.dims else 0
        if new_dims is None:
            new_dims = [DimVector.zero(k)] * len(cols)
        return Dataset(
            names=self.names + tuple(new_names),
            samples=np.column_stack([self.samples] + cols),
            dims=self.dims + tuple(new_dims),
            target=self.target,
            provenance=self.provenance,
        )

    def take_rows(self, indices) -> "Dataset":
        return replace(self, samples=self.samples[np.asarray(indices)])

    def sha256(self) -> str:
        h = hashlib.sha256()
        h.update(",".join(self.names).encode())
        h.update(b"|")
        h.update((self.target or "").encode())
        h.update(self.samples.tobytes())
        return h.hexdigest()

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(self.names) + "\n")
        for row in self.samples:
            buf.write(",".join(repr(float(v)) for v in row) + "\n")
        return buf.getvalue()


def parse_csv_text(text: str, expected_names=None) -> tuple[list[str], np.ndarray, int]:
    """Parse a plain CSV (one header row, '.' decimals) into (names, matrix, dropped).

    Rows containing missing or non-finite entries are dropped and counted.
    """
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise SchemaMismatch("empty file")
    names = [c.strip() for c in lines[0].split(",")]
    if expected_names is not None:
        missing = [n for n in expected_names if n not in names]
        extra = [n for n in names if n not in expected_names]
        if missing or extra:
            raise SchemaMismatch(
                f"header mismatch: missing {missing}, unexpected {extra}",
                missing=missing,
                extra=extra,
            )
    rows = []
    dropped = 0
    for ln in lines[1:]:
        parts = [p.strip() for p in ln.split(",")]
        if len(parts) != len(names):
            dropped += 1
            continue
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            dropped += 1
            continue
        if not all(np.isfinite(v) for v in vals):
            dropped += 1
            continue
        rows.append(vals)
    matrix = np.array(rows, dtype=np.float64) if rows else np.empty((0, len(names)))
    return names, matrix, dropped
