"""CSV ingestion and JSON serialization helpers."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import (
    ClusteredDataset,
    ThreeLevelDataset,
    WeightAssignment,
    build_dataset_indexed,
    build_three_level_indexed,
)
from .errors import EmptyFile, InvalidSpec, MissingColumn, NonFiniteValue


@dataclass(frozen=True)
class ColumnMapping:
    """Which CSV columns hold the cluster id, optional level-2 id, value and weight."""

    cluster: str = "cluster"
    value: str = "value"
    subcluster: str | None = None
    weight: str | None = None

    def __post_init__(self):
        names = [c for c in (self.cluster, self.subcluster, self.value, self.weight) if c is not None]
        if len(set(names)) != len(names):
            raise InvalidSpec(f"column names must be distinct, got {names}", "columns")

    @property
    def levels(self) -> int:
        return 3 if self.subcluster is not None else 2


@dataclass(frozen=True, eq=False)
class ParsedInput:
    data: ClusteredDataset | ThreeLevelDataset
    weights: WeightAssignment | None
    rows: int


def _finite(text: str, line: int, column: str) -> float:
    try:
        x = float(text)
    except ValueError:
        raise NonFiniteValue(f"line {line}: column {column!r} holds {text!r}", row=line) from None
    if not math.isfinite(x):
        raise NonFiniteValue(f"line {line}: column {column!r} holds {text!r}", row=line)
    return x


def parse_csv(path: str | Path, mapping: ColumnMapping, singleton_policy: str = "error") -> ParsedInput:
    """Read a comma-separated file with a header row.

    Values must parse as finite decimals; ids are kept as strings.  A weight
    column, when mapped, must be positive and is normalized to sum to one
    after singleton handling.  Row numbers in errors are file line numbers
    (the header is line 1).

    Raises
    ------
    EmptyFile, MissingColumn, NonFiniteValue
    """
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or not any(h.strip() for h in header):
            raise EmptyFile(f"{path}: no header row")
        header = [h.strip() for h in header]
        wanted = [mapping.cluster, mapping.value] + [
            c for c in (mapping.subcluster, mapping.weight) if c is not None
        ]
        for col in wanted:
            if col not in header:
                raise MissingColumn(f"{path}: column {col!r} not in header {header}")
        pos = {c: header.index(c) for c in wanted}
        records, raw_w = [], []
        for fields in reader:
            line = reader.line_num
            if not fields or all(not f.strip() for f in fields):
                continue
            if len(fields) < len(header):
                raise MissingColumn(f"line {line}: expected {len(header)} fields, got {len(fields)}")
            value = _finite(fields[pos[mapping.value]].strip(), line, mapping.value)
            cid = fields[pos[mapping.cluster]].strip()
            if mapping.subcluster is not None:
                records.append((cid, fields[pos[mapping.subcluster]].strip(), value))
            else:
                records.append((cid, value))
            if mapping.weight is not None:
                wv = _finite(fields[pos[mapping.weight]].strip(), line, mapping.weight)
                if wv <= 0:
                    raise NonFiniteValue(f"line {line}: weight must be positive, got {wv!r}", row=line)
                raw_w.append(wv)
    if not records:
        raise EmptyFile(f"{path}: no data rows")
    if mapping.levels == 3:
        data, index = build_three_level_indexed(records, singleton_policy)
    else:
        data, index = build_dataset_indexed(records, singleton_policy)
    weights = None
    if mapping.weight is not None:
        weights = WeightAssignment.normalized(np.asarray(raw_w)[index], "custom")
    return ParsedInput(data, weights, len(records))


def write_csv(data: ClusteredDataset | ThreeLevelDataset, path: str | Path) -> None:
    """Write a dataset in the layout :func:`parse_csv` reads with the default mapping
    (plus a ``subcluster`` column for three-level data)."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if isinstance(data, ThreeLevelDataset):
            w.writerow(["cluster", "subcluster", "value"])
            for o, x in enumerate(data.values):
                s = data.sub_index[o]
                w.writerow([data.unit_ids[data.unit_index[o]], data.sub_ids[s], repr(float(x))])
        else:
            w.writerow(["cluster", "value"])
            for o, x in enumerate(data.values):
                w.writerow([data.ids[data.cluster_index[o]], repr(float(x))])


def _plain(obj):
    if isinstance(obj, dict):
        return {k: _plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    if isinstance(obj, np.generic):
        obj = obj.item()
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    return obj


def dump_json(doc: dict) -> str:
    """Deterministic JSON; floats use the shortest repr that round-trips exactly."""
    return json.dumps(_plain(doc), indent=2, allow_nan=False) + "\n"
