"""CSV dataset reading and writing.

Datasets are UTF-8 CSV with a header matching the schema's feature names
plus the target column, '.' as decimal separator.
"""

from __future__ import annotations

import csv
import io
from typing import Optional, Sequence

import numpy as np

from .schema import DatasetSchema, SchemaError, atomic_write_text


def _parse_cell(spec, cell: str):
    tag = spec.kind.tag
    if tag in ("categorical", "ordinal"):
        return cell
    if tag == "binary":
        return int(cell)
    if tag == "discrete":
        return int(float(cell))
    if tag == "mixed" and cell in spec.kind.levels:
        return cell
    return float(cell)


def read_dataset_csv(path: str, schema: DatasetSchema) -> tuple[list[list], np.ndarray]:
    """Rows in schema order plus the integer target column."""
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty dataset") from None
        expected = [f.name for f in schema.features] + [schema.target_name]
        if header != expected:
            raise SchemaError(f"CSV header {header} does not match schema columns {expected}")
        rows: list[list] = []
        labels: list[int] = []
        for line_no, record in enumerate(reader, start=2):
            if not record:
                continue
            if len(record) != len(expected):
                raise SchemaError(f"line {line_no}: expected {len(expected)} cells")
            try:
                rows.append(
                    [_parse_cell(spec, cell) for spec, cell in zip(schema.features, record)]
                )
                labels.append(int(float(record[-1])))
            except ValueError as exc:
                raise SchemaError(f"line {line_no}: {exc}") from exc
    if not rows:
        raise SchemaError("empty dataset")
    return rows, np.asarray(labels, dtype=int)


def _format_cell(value) -> str:
    if isinstance(value, float):
        return format(value, ".10g")
    return str(value)


def write_dataset_csv(
    path: str, schema: DatasetSchema, rows: Sequence[Sequence], labels: Optional[Sequence[int]]
) -> None:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow([f.name for f in schema.features] + [schema.target_name])
    for i, row in enumerate(rows):
        label = [int(labels[i])] if labels is not None else [""]
        writer.writerow([_format_cell(v) for v in row] + label)
    atomic_write_text(path, buffer.getvalue())
