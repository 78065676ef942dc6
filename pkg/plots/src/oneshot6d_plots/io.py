"""CSV loading and schema validation for plot inputs."""

from __future__ import annotations

import csv
from pathlib import Path


class SchemaError(ValueError):
    """Input file does not match the expected CSV schema."""


class EmptyInput(ValueError):
    """Input file has a valid header but no data rows."""


CURVE_COLUMNS = ("threshold_frac", "recall")
PRUNING_COLUMNS = ("keep_fraction", "recall_01d", "median_rot_deg", "matching_seconds")
TEMPLATES_COLUMNS = ("fraction", "n_template_views", "recall_01d", "median_rot_deg")
MATCHES_COLUMNS = ("u", "v", "x", "y", "z", "confidence")


def load_csv(path: str | Path, columns: tuple[str, ...]) -> dict[str, list[float]]:
    """Load a CSV with the exact expected header into per-column float lists.

    Raises SchemaError when the header or a cell does not conform, and
    EmptyInput when the file holds no data rows.
    """
    path = Path(path)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(f"{path}: empty file, expected header {','.join(columns)}")
        if tuple(header) != columns:
            raise SchemaError(
                f"{path}: header {','.join(header)!r} does not match "
                f"expected {','.join(columns)!r}"
            )
        data: dict[str, list[float]] = {c: [] for c in columns}
        for i, row in enumerate(reader, start=2):
            if len(row) != len(columns):
                raise SchemaError(f"{path}:{i}: expected {len(columns)} fields, got {len(row)}")
            for col, cell in zip(columns, row):
                try:
                    data[col].append(float(cell))
                except ValueError:
                    raise SchemaError(f"{path}:{i}: non-numeric value {cell!r} in column {col}")
    if not data[columns[0]]:
        raise EmptyInput(f"{path}: no data rows")
    return data
