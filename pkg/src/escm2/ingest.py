"""Load flat impression logs (one categorical column per feature) into datasets.

Raw feature codes are remapped to a dense index space shared by all feature
columns. Index 0 is reserved for codes unseen when the vocabulary was built.
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .data import Dataset, split  # noqa: F401  (split is part of this module's interface)

log = logging.getLogger(__name__)

OOV_INDEX = 0
MAX_BAD_FRACTION = 0.01


class IngestError(ValueError):
    """The file cannot be ingested as a whole."""


@dataclass
class IngestSchema:
    feature_columns: Tuple[str, ...]
    click_column: str = "click"
    conversion_column: str = "conversion"
    delimiter: str = ","
    id_column: Optional[str] = None

    def __post_init__(self):
        self.feature_columns = tuple(self.feature_columns)
        if not self.feature_columns:
            raise ValueError("at least one feature column is required")
        names = list(self.feature_columns) + [self.click_column, self.conversion_column]
        if self.id_column is not None:
            names.append(self.id_column)
        if len(set(names)) != len(names):
            raise ValueError("schema column names must be distinct")
        if len(self.delimiter) != 1:
            raise ValueError("delimiter must be a single character")


@dataclass
class Vocabulary:
    """Per-column map from raw code to dense index (0 is out-of-vocabulary)."""

    columns: Dict[str, Dict[int, int]] = field(default_factory=dict)

    @property
    def size(self) -> int:
        """Number of embedding rows needed, OOV row included."""
        return 1 + sum(len(m) for m in self.columns.values())

    @classmethod
    def fit(cls, schema: IngestSchema, raw: np.ndarray) -> "Vocabulary":
        vocab, nxt = {}, 1
        for j, name in enumerate(schema.feature_columns):
            codes = np.unique(raw[:, j]) if raw.size else np.empty(0, dtype=np.int64)
            vocab[name] = {int(c): nxt + i for i, c in enumerate(codes)}
            nxt += codes.size
        return cls(vocab)

    def encode(self, schema: IngestSchema, raw: np.ndarray) -> np.ndarray:
        out = np.full(raw.shape, OOV_INDEX, dtype=np.int64)
        for j, name in enumerate(schema.feature_columns):
            mapping = self.columns.get(name, {})
            out[:, j] = [mapping.get(int(c), OOV_INDEX) for c in raw[:, j]]
        return out

    def to_json(self, path) -> None:
        payload = {name: {str(k): v for k, v in m.items()} for name, m in self.columns.items()}
        with open(path, "w") as fh:
            json.dump(payload, fh, indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, path) -> "Vocabulary":
        with open(path) as fh:
            payload = json.load(fh)
        columns = {name: {int(k): int(v) for k, v in m.items()} for name, m in payload.items()}
        indices = [v for m in columns.values() for v in m.values()]
        if len(set(indices)) != len(indices) or OOV_INDEX in indices:
            raise IngestError(f"{path}: vocabulary indices must be distinct and nonzero")
        return cls(columns)


@dataclass
class RowError:
    line: int
    reason: str


@dataclass
class IngestReport:
    rows_read: int = 0
    rows_loaded: int = 0
    malformed: List[RowError] = field(default_factory=list)
    rejected_conversion_without_click: int = 0
    oov_codes: int = 0


def _parse_binary(text: str, what: str) -> int:
    v = int(text)
    if v not in (0, 1):
        raise ValueError(f"{what} must be 0 or 1, got {v}")
    return v


def load_csv_report(path, schema: IngestSchema,
                    vocabulary: Optional[Vocabulary] = None) -> Tuple[Dataset, Vocabulary, IngestReport]:
    """Parse ``path`` and return ``(dataset, vocabulary, report)``.

    A vocabulary is built from the file unless one is given, in which case
    unseen codes map to the OOV index. Malformed rows are skipped and recorded;
    if they exceed 1% of the data rows the whole file is rejected. Rows with a
    conversion but no click are dropped and counted separately.
    """
    report = IngestReport()
    with open(path, newline="") as fh:
        reader = csv.reader(fh, delimiter=schema.delimiter)
        header = next(reader, None)
        if header is None:
            raise IngestError(f"{path}: missing header")
        header = [h.strip() for h in header]
        wanted = list(schema.feature_columns) + [schema.click_column, schema.conversion_column]
        if schema.id_column is not None:
            wanted.append(schema.id_column)
        missing = [c for c in wanted if c not in header]
        if missing:
            raise IngestError(f"{path}: header lacks columns {missing}")
        pos = {name: header.index(name) for name in wanted}
        feat_pos = [pos[c] for c in schema.feature_columns]

        ids, feats, clicks, convs = [], [], [], []
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            report.rows_read += 1
            try:
                if len(row) != len(header):
                    raise ValueError(f"expected {len(header)} fields, found {len(row)}")
                codes = [int(row[p]) for p in feat_pos]
                if any(c < 0 for c in codes):
                    raise ValueError("feature codes must be nonnegative")
                o = _parse_binary(row[pos[schema.click_column]], "click")
                r = _parse_binary(row[pos[schema.conversion_column]], "conversion")
                pid = int(row[pos[schema.id_column]]) if schema.id_column else line_no - 2
            except ValueError as exc:
                report.malformed.append(RowError(line_no, str(exc)))
                continue
            if r == 1 and o == 0:
                report.rejected_conversion_without_click += 1
                continue
            ids.append(pid)
            feats.append(codes)
            clicks.append(o)
            convs.append(r)

    if report.rows_read and len(report.malformed) > MAX_BAD_FRACTION * report.rows_read:
        first = report.malformed[0]
        raise IngestError(
            f"{path}: {len(report.malformed)} of {report.rows_read} rows malformed "
            f"(limit {MAX_BAD_FRACTION:.0%}); first at line {first.line}: {first.reason}"
        )
    for err in report.malformed:
        log.warning("%s:%d skipped: %s", path, err.line, err.reason)
    if report.rejected_conversion_without_click:
        log.warning("%s: %d rows with conversion but no click rejected",
                    path, report.rejected_conversion_without_click)

    raw = np.asarray(feats, dtype=np.int64).reshape(len(ids), len(schema.feature_columns))
    if vocabulary is None:
        vocabulary = Vocabulary.fit(schema, raw)
    encoded = vocabulary.encode(schema, raw)
    report.oov_codes = int((encoded == OOV_INDEX).sum())
    report.rows_loaded = len(ids)
    dataset = Dataset(pair_id=np.asarray(ids, dtype=np.int64), feature_ids=encoded,
                      click=np.asarray(clicks, dtype=np.int8),
                      conversion=np.asarray(convs, dtype=np.int8), provenance="ingested")
    return dataset, vocabulary, report


def load_csv(path, schema: IngestSchema, vocabulary: Optional[Vocabulary] = None) -> Dataset:
    return load_csv_report(path, schema, vocabulary)[0]


def schema_from_dict(d: dict) -> IngestSchema:
    allowed = {"feature_columns", "click_column", "conversion_column", "delimiter", "id_column"}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ValueError(f"unknown ingest schema key {unknown[0]!r}")
    return IngestSchema(**d)


def write_ingest_csv(path, schema: IngestSchema, rows: Sequence[Sequence]) -> None:
    """Write rows of ``(*feature_codes, click, conversion)`` in ``schema`` layout."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, delimiter=schema.delimiter)
        w.writerow(list(schema.feature_columns) + [schema.click_column, schema.conversion_column])
        for row in rows:
            w.writerow(row)
