"""CSV loading, schema fitting and one-hot encoding of transaction records.

Every attribute becomes a block of binary columns. Categorical attributes get
one column per vocabulary entry plus a reserved trailing "unknown" slot;
numeric attributes get a reserved leading slot for non-positive / missing
values plus equal-frequency bins fitted on the positive values.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, IoError, ShapeError

SCHEMA_FORMAT = "vqaudit-schema-1"
UNKNOWN_TOKEN = "<unknown>"


@dataclass
class JournalEntry:
    """One raw transaction row: identifier, attribute values, optional amount."""

    row_id: int
    values: dict[str, str]
    amount: float | None = None


@dataclass
class AttributeSpec:
    """Encoding spec for one attribute.

    Categorical: ``vocabulary`` is the sorted list of distinct training
    values; block width is ``len(vocabulary) + 1`` (trailing unknown slot).
    Numeric: ``bin_edges`` are interior quantile edges over the positive
    training values; block width is ``len(bin_edges) + 2`` (bin 0 is the
    reserved slot for non-positive or unparseable values).
    """

    name: str
    kind: str  # "categorical" | "numeric"
    vocabulary: list[str] | None = None
    bin_edges: list[float] | None = None

    def __post_init__(self):
        if self.kind not in ("categorical", "numeric"):
            raise ValueError(f"unknown attribute kind {self.kind!r}")
        if self.kind == "categorical":
            if self.vocabulary is None:
                raise ValueError(f"categorical attribute {self.name!r} needs a vocabulary")
            if len(set(self.vocabulary)) != len(self.vocabulary):
                raise ValueError(f"duplicate vocabulary values in {self.name!r}")
        elif self.bin_edges is None:
            raise ValueError(f"numeric attribute {self.name!r} needs bin edges")

    @property
    def width(self) -> int:
        if self.kind == "categorical":
            return len(self.vocabulary) + 1
        return len(self.bin_edges) + 2

    def slot(self, raw: str) -> int:
        """Index of the hot column for a raw value, within this block."""
        if self.kind == "categorical":
            idx = self._index().get(raw)
            return idx if idx is not None else len(self.vocabulary)
        value = _parse_number(raw)
        if value is None or not np.isfinite(value) or value <= 0.0:
            return 0
        return 1 + int(np.searchsorted(self.bin_edges, value, side="left"))

    def slot_label(self, slot: int) -> str:
        """Human-readable label of a block column (used for round-trips)."""
        if self.kind == "categorical":
            if slot == len(self.vocabulary):
                return UNKNOWN_TOKEN
            return self.vocabulary[slot]
        if slot == 0:
            return "<=0"
        edges = [-np.inf] + list(self.bin_edges) + [np.inf]
        return f"({edges[slot - 1]:g}, {edges[slot]:g}]"

    def _index(self) -> dict[str, int]:
        cached = getattr(self, "_vocab_index", None)
        if cached is None:
            cached = {v: i for i, v in enumerate(self.vocabulary)}
            self._vocab_index = cached
        return cached


@dataclass
class AttributeSchema:
    """Ordered list of attribute specs; total width is the sum of block widths."""

    attributes: list[AttributeSpec]

    @property
    def width(self) -> int:
        return sum(a.width for a in self.attributes)

    @property
    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def block_slices(self) -> dict[str, slice]:
        out = {}
        offset = 0
        for a in self.attributes:
            out[a.name] = slice(offset, offset + a.width)
            offset += a.width
        return out

    def to_json(self) -> str:
        doc = {"format": SCHEMA_FORMAT, "attributes": []}
        for a in self.attributes:
            entry: dict = {"name": a.name, "kind": a.kind}
            if a.kind == "categorical":
                entry["vocabulary"] = a.vocabulary
            else:
                entry["bin_edges"] = a.bin_edges
            doc["attributes"].append(entry)
        return json.dumps(doc, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "AttributeSchema":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise FormatError(f"invalid schema JSON: {exc}") from exc
        if not isinstance(doc, dict) or doc.get("format") != SCHEMA_FORMAT:
            raise FormatError("not a recognised schema document")
        attrs = [
            AttributeSpec(
                name=e["name"],
                kind=e["kind"],
                vocabulary=e.get("vocabulary"),
                bin_edges=e.get("bin_edges"),
            )
            for e in doc["attributes"]
        ]
        return cls(attributes=attrs)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path: str | Path) -> "AttributeSchema":
        return cls.from_json(Path(path).read_text())

    def hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]


@dataclass
class EncodedDataset:
    """One-hot matrix plus back-references to the raw records."""

    matrix: np.ndarray
    schema: AttributeSchema
    row_ids: list
    raw_rows: list[dict[str, str]]
    amounts: np.ndarray | None = None

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2:
            raise ShapeError("encoded matrix must be 2-D")
        if self.matrix.shape[0] == 0:
            raise ValueError("encoded dataset must contain at least one row")
        if self.matrix.shape[1] != self.schema.width:
            raise ShapeError(
                f"matrix width {self.matrix.shape[1]} != schema width {self.schema.width}"
            )
        if len(self.row_ids) != self.matrix.shape[0] or len(self.raw_rows) != self.matrix.shape[0]:
            raise ShapeError("row_ids/raw_rows length must match matrix rows")

    @property
    def n_rows(self) -> int:
        return self.matrix.shape[0]

    @property
    def width(self) -> int:
        return self.matrix.shape[1]

    def labels(self, column: str) -> np.ndarray:
        if column not in self.raw_rows[0]:
            raise KeyError(f"unknown label column {column!r}")
        return np.array([r[column] for r in self.raw_rows], dtype=object)

    def save(self, path: str | Path) -> None:
        names = list(self.raw_rows[0])  # schema columns plus any extra labels
        raw = np.array(
            [[r.get(n, "") for n in names] for r in self.raw_rows], dtype=object
        ).astype(str)
        amounts = self.amounts if self.amounts is not None else np.full(self.n_rows, np.nan)
        np.savez_compressed(
            path,
            matrix=self.matrix,
            row_ids=np.array(self.row_ids),
            raw_values=raw,
            column_names=np.array(names, dtype=str),
            amounts=np.asarray(amounts, dtype=np.float64),
            schema_json=np.array(self.schema.to_json()),
        )

    @classmethod
    def load(cls, path: str | Path) -> "EncodedDataset":
        try:
            with np.load(path, allow_pickle=False) as z:
                schema = AttributeSchema.from_json(str(z["schema_json"]))
                names = [str(n) for n in z["column_names"]]
                raw_values = z["raw_values"]
                raw_rows = [
                    {n: str(v) for n, v in zip(names, row)} for row in raw_values
                ]
                amounts = z["amounts"]
                return cls(
                    matrix=z["matrix"],
                    schema=schema,
                    row_ids=list(z["row_ids"]),
                    raw_rows=raw_rows,
                    amounts=None if np.all(np.isnan(amounts)) else amounts,
                )
        except (OSError, KeyError, ValueError) as exc:
            raise FormatError(f"unreadable dataset file {path}: {exc}") from exc


def _parse_number(raw: str) -> float | None:
    s = raw.strip().replace(",", "")
    if not s:
        return None
    try:
        return float(s)
    except ValueError:
        return None


def load_csv(
    path: str | Path,
    schema_hint: dict[str, str] | None = None,
    amount_column: str | None = None,
    retained_columns: list[str] | None = None,
) -> list[JournalEntry]:
    """Read a UTF-8 CSV with a header row into journal entries.

    Attribute kinds are inferred later by ``fit_schema`` (numeric when every
    non-empty value parses as a number) unless overridden via ``schema_hint``;
    the hint is attached to the returned entries for ``fit_schema`` to pick up.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise FormatError(f"{path}: empty file, header row required") from None
        header = [h.strip() for h in header]
        if retained_columns is not None:
            missing = [c for c in retained_columns if c not in header]
            if missing:
                raise FormatError(f"{path}: retained columns not in header: {missing}")
            keep = retained_columns
        else:
            keep = header
        col_idx = {c: header.index(c) for c in keep}
        if amount_column is not None and amount_column not in header:
            raise FormatError(f"{path}: amount column {amount_column!r} not in header")
        amount_idx = header.index(amount_column) if amount_column else None

        entries: list[JournalEntry] = []
        for row_number, row in enumerate(reader):
            if len(row) != len(header):
                raise FormatError(
                    f"{path}: row {row_number + 2} has {len(row)} fields, expected {len(header)}"
                )
            values = {c: row[i].strip() for c, i in col_idx.items()}
            amount = _parse_number(row[amount_idx]) if amount_idx is not None else None
            entries.append(JournalEntry(row_id=row_number, values=values, amount=amount))
    if schema_hint:
        for e in entries:
            e.__dict__.setdefault("_kind_hint", schema_hint)
    return entries


def infer_kinds(
    entries: list[JournalEntry], schema_hint: dict[str, str] | None = None
) -> dict[str, str]:
    """Column kind per attribute: numeric iff all non-empty values parse."""
    hint = dict(schema_hint or {})
    if not hint and entries:
        hint = dict(getattr(entries[0], "_kind_hint", {}) or {})
    kinds: dict[str, str] = {}
    for name in entries[0].values:
        if name in hint:
            if hint[name] not in ("categorical", "numeric"):
                raise ConfigError(f"schema hint for {name!r} must be categorical|numeric")
            kinds[name] = hint[name]
            continue
        non_empty = [e.values[name] for e in entries if e.values[name] != ""]
        numeric = bool(non_empty) and all(_parse_number(v) is not None for v in non_empty)
        kinds[name] = "numeric" if numeric else "categorical"
    return kinds


def fit_schema(
    entries: list[JournalEntry],
    numeric_bins: int = 10,
    schema_hint: dict[str, str] | None = None,
) -> AttributeSchema:
    """Fit vocabularies / quantile bin edges over the given entries.

    Categorical vocabularies are the sorted distinct values. Numeric edges are
    the interior ``numeric_bins``-quantile points of the positive values;
    duplicate edges (heavily tied data) collapse, down to a single bin for a
    constant column.
    """
    if not entries:
        raise ValueError("cannot fit a schema on zero entries")
    if numeric_bins < 2:
        raise ValueError("numeric_bins must be >= 2")
    kinds = infer_kinds(entries, schema_hint)
    attrs: list[AttributeSpec] = []
    for name in entries[0].values:
        if kinds[name] == "categorical":
            vocab = sorted({e.values[name] for e in entries})
            attrs.append(AttributeSpec(name=name, kind="categorical", vocabulary=vocab))
            continue
        values = np.array(
            [v for e in entries if (v := _parse_number(e.values[name])) is not None]
        )
        positive = values[values > 0.0]
        if positive.size == 0:
            edges: list[float] = []
        else:
            qs = np.arange(1, numeric_bins) / numeric_bins
            edges = sorted(set(np.quantile(positive, qs).tolist()))
            if positive.min() == positive.max():
                edges = []
        if not edges and positive.size > 0:
            warnings.warn(
                f"numeric column {name!r} has degenerate quantiles; using a single bin",
                stacklevel=2,
            )
        attrs.append(AttributeSpec(name=name, kind="numeric", bin_edges=edges))
    return AttributeSchema(attributes=attrs)


def encode(entries: list[JournalEntry], schema: AttributeSchema) -> EncodedDataset:
    """One-hot encode entries against a fitted schema.

    Unseen categorical values land in the reserved unknown slot; each block of
    every row has exactly one hot column.
    """
    if not entries:
        raise ValueError("cannot encode zero entries")
    n = len(entries)
    matrix = np.zeros((n, schema.width), dtype=np.float64)
    offset = 0
    for attr in schema.attributes:
        for i, e in enumerate(entries):
            if attr.name not in e.values:
                raise FormatError(f"entry {e.row_id} is missing attribute {attr.name!r}")
            matrix[i, offset + attr.slot(e.values[attr.name])] = 1.0
        offset += attr.width
    amounts = np.array(
        [e.amount if e.amount is not None else np.nan for e in entries], dtype=np.float64
    )
    return EncodedDataset(
        matrix=matrix,
        schema=schema,
        row_ids=[e.row_id for e in entries],
        raw_rows=[dict(e.values) for e in entries],
        amounts=None if np.all(np.isnan(amounts)) else amounts,
    )


def decode_row(schema: AttributeSchema, row: np.ndarray) -> dict[str, str]:
    """Argmax of each block, mapped back to the vocabulary / bin label."""
    row = np.asarray(row)
    if row.shape != (schema.width,):
        raise ShapeError(f"row width {row.shape} != schema width {schema.width}")
    out = {}
    offset = 0
    for attr in schema.attributes:
        block = row[offset : offset + attr.width]
        out[attr.name] = attr.slot_label(int(np.argmax(block)))
        offset += attr.width
    return out


@dataclass
class DatasetConfig:
    """CLI-facing dataset description: which CSV and how to encode it."""

    csv_path: str
    retained_columns: list[str] | None = None
    amount_column: str | None = None
    numeric_bins: int = 10
    schema_hint: dict[str, str] = field(default_factory=dict)

    _FIELDS = ("csv_path", "retained_columns", "amount_column", "numeric_bins", "schema_hint")

    @classmethod
    def from_json(cls, text: str) -> "DatasetConfig":
        try:
            doc = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"invalid dataset config JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise ConfigError("dataset config must be a JSON object")
        unknown = set(doc) - set(cls._FIELDS)
        if unknown:
            raise ConfigError(f"unknown dataset config keys: {sorted(unknown)}")
        if "csv_path" not in doc:
            raise ConfigError("dataset config requires csv_path")
        return cls(**doc)

    @classmethod
    def load(cls, path: str | Path) -> "DatasetConfig":
        try:
            return cls.from_json(Path(path).read_text())
        except OSError as exc:
            raise ConfigError(f"cannot read dataset config {path}: {exc}") from exc

    def resolve_csv(self) -> Path:
        """Resolve csv_path, honouring $VQAUDIT_DATA_DIR for relative paths."""
        p = Path(self.csv_path)
        if not p.is_absolute():
            base = os.environ.get("VQAUDIT_DATA_DIR")
            if base and not p.exists():
                p = Path(base) / p
        return p


def load_dataset(config: DatasetConfig) -> EncodedDataset:
    """Full ingest pipeline: load CSV, fit schema, encode."""
    entries = load_csv(
        config.resolve_csv(),
        schema_hint=config.schema_hint or None,
        amount_column=config.amount_column,
        retained_columns=config.retained_columns,
    )
    schema = fit_schema(entries, numeric_bins=config.numeric_bins,
                        schema_hint=config.schema_hint or None)
    return encode(entries, schema)
