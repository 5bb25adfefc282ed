"""On-disk schemas and in-memory tables for spots, embeddings, and abundances.

Everything is ingested from plain CSV (UTF-8, comma separated, one header
row).  Numbers are serialized with 17 significant digits so that a
save -> load -> save round trip is byte identical.

spots CSV      header: spot_id,sample_id,patient_id,x,y,e0,...,e{D-1}
abundance CSV  header: spot_id,<cell_type_1>,...,<cell_type_C>
embedding CSV  header: spot_id,e0,...,e{D-1}   (one file per source)

Embeddings may live inline in the spots CSV or in separate per-source
files joined by spot_id; `assemble_embeddings` concatenates inline columns
(first) and any extra sources into the final feature vector.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "SchemaError",
    "Finding",
    "SpotTable",
    "EmbeddingBlock",
    "AbundanceMatrix",
    "SampleSplit",
    "fmt_float",
    "load_spot_table",
    "save_spot_table",
    "load_abundance_table",
    "save_abundance_table",
    "load_embedding_block",
    "concat_embeddings",
    "assemble_embeddings",
    "make_splits",
    "scan_spots_csv",
    "scan_abundance_csv",
]

SPOT_FIXED_COLUMNS = ("spot_id", "sample_id", "patient_id", "x", "y")


class SchemaError(ValueError):
    """A file violates the CSV schema or a table invariant."""


@dataclass
class Finding:
    """One validation problem, anchored to a file line (0 = whole file)."""

    file: str
    line: int
    message: str

    def __str__(self) -> str:
        return f"{self.file}:{self.line}: {self.message}"


def fmt_float(x: float) -> str:
    """Canonical decimal serialization: 17 significant digits."""
    return format(float(x), ".17g")


def _parse_finite(text: str) -> float:
    value = float(text)
    if not math.isfinite(value):
        raise ValueError("non-finite")
    return value


# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------

@dataclass
class SpotTable:
    """Per-spot identity, membership, coordinates, and embedding vectors.

    `embeddings` may have zero columns while separate embedding sources are
    still pending attachment; training and prediction require D >= 1.
    """

    spot_ids: tuple[str, ...]
    sample_ids: tuple[str, ...]
    patient_ids: tuple[str, ...]
    coords: np.ndarray      # (n, 2) float64
    embeddings: np.ndarray  # (n, D) float64

    def __post_init__(self) -> None:
        self.spot_ids = tuple(self.spot_ids)
        self.sample_ids = tuple(self.sample_ids)
        self.patient_ids = tuple(self.patient_ids)
        self.coords = np.asarray(self.coords, dtype=np.float64).reshape(len(self.spot_ids), 2)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.embeddings.ndim != 2 or self.embeddings.shape[0] != len(self.spot_ids):
            raise SchemaError("embeddings must be an (n, D) matrix aligned with spot_ids")
        if len(self.sample_ids) != len(self.spot_ids) or len(self.patient_ids) != len(self.spot_ids):
            raise SchemaError("sample_ids and patient_ids must align with spot_ids")
        if len(set(self.spot_ids)) != len(self.spot_ids):
            raise SchemaError("duplicate spot_id")
        if self.coords.size and not np.isfinite(self.coords).all():
            raise SchemaError("non-finite coordinate")
        if self.embeddings.size and not np.isfinite(self.embeddings).all():
            raise SchemaError("non-finite embedding value")
        owners: dict[str, str] = {}
        for sample, patient in zip(self.sample_ids, self.patient_ids):
            if owners.setdefault(sample, patient) != patient:
                raise SchemaError(f"sample {sample!r} maps to more than one patient")

    @property
    def n(self) -> int:
        return len(self.spot_ids)

    @property
    def dim(self) -> int:
        return int(self.embeddings.shape[1])

    def row_index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.spot_ids)}

    def patients(self) -> list[str]:
        return sorted(set(self.patient_ids))

    def samples(self) -> list[str]:
        return sorted(set(self.sample_ids))

    def subset(self, spot_ids) -> "SpotTable":
        """Rows whose id is in `spot_ids`, in this table's order."""
        wanted = set(spot_ids)
        missing = wanted - set(self.spot_ids)
        if missing:
            raise SchemaError(f"unknown spot ids: {sorted(missing)[:10]}")
        keep = [i for i, sid in enumerate(self.spot_ids) if sid in wanted]
        return SpotTable(
            spot_ids=tuple(self.spot_ids[i] for i in keep),
            sample_ids=tuple(self.sample_ids[i] for i in keep),
            patient_ids=tuple(self.patient_ids[i] for i in keep),
            coords=self.coords[keep],
            embeddings=self.embeddings[keep],
        )

    def with_embeddings(self, embeddings: np.ndarray) -> "SpotTable":
        return SpotTable(
            spot_ids=self.spot_ids,
            sample_ids=self.sample_ids,
            patient_ids=self.patient_ids,
            coords=self.coords,
            embeddings=embeddings,
        )


@dataclass
class EmbeddingBlock:
    """One embedding source: per-spot vectors keyed by spot_id."""

    source_name: str
    spot_ids: tuple[str, ...]
    matrix: np.ndarray  # (n, dim) float64

    def __post_init__(self) -> None:
        self.spot_ids = tuple(self.spot_ids)
        self.matrix = np.asarray(self.matrix, dtype=np.float64)
        if self.matrix.ndim != 2 or self.matrix.shape[0] != len(self.spot_ids):
            raise SchemaError("embedding matrix must be (n, dim) aligned with spot_ids")
        if self.matrix.shape[1] < 1:
            raise SchemaError("embedding dim must be >= 1")
        if len(set(self.spot_ids)) != len(self.spot_ids):
            raise SchemaError(f"duplicate spot_id in embedding block {self.source_name!r}")
        if not np.isfinite(self.matrix).all():
            raise SchemaError(f"non-finite value in embedding block {self.source_name!r}")

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def row_index(self) -> dict[str, int]:
        return {sid: i for i, sid in enumerate(self.spot_ids)}


@dataclass
class AbundanceMatrix:
    """Per-spot abundance for each cell type (ground truth or predictions)."""

    spot_ids: tuple[str, ...]
    cell_types: tuple[str, ...]
    values: np.ndarray  # (n, C) float64

    def __post_init__(self) -> None:
        self.spot_ids = tuple(self.spot_ids)
        self.cell_types = tuple(self.cell_types)
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (len(self.spot_ids), len(self.cell_types)):
            raise SchemaError("values must be (n, C) aligned with spot_ids and cell_types")
        if len(self.cell_types) < 2:
            raise SchemaError("need at least 2 cell types")
        if len(set(self.cell_types)) != len(self.cell_types):
            raise SchemaError("duplicate cell type name")
        if len(set(self.spot_ids)) != len(self.spot_ids):
            raise SchemaError("duplicate spot_id")
        if self.values.size and not np.isfinite(self.values).all():
            raise SchemaError("non-finite abundance value")

    @property
    def n(self) -> int:
        return len(self.spot_ids)

    def subset(self, spot_ids) -> "AbundanceMatrix":
        wanted = set(spot_ids)
        keep = [i for i, sid in enumerate(self.spot_ids) if sid in wanted]
        missing = wanted - {self.spot_ids[i] for i in keep}
        if missing:
            raise SchemaError(f"unknown spot ids: {sorted(missing)[:10]}")
        return AbundanceMatrix(
            spot_ids=tuple(self.spot_ids[i] for i in keep),
            cell_types=self.cell_types,
            values=self.values[keep],
        )

    def reorder_cell_types(self, cell_types) -> "AbundanceMatrix":
        cell_types = tuple(cell_types)
        if set(cell_types) != set(self.cell_types):
            raise SchemaError("cell type sets differ")
        order = [self.cell_types.index(ct) for ct in cell_types]
        return AbundanceMatrix(self.spot_ids, cell_types, self.values[:, order])


@dataclass(frozen=True)
class SampleSplit:
    """One train/test partition of spot ids."""

    name: str
    train_spot_ids: frozenset[str]
    test_spot_ids: frozenset[str]

    def __post_init__(self) -> None:
        object.__setattr__(self, "train_spot_ids", frozenset(self.train_spot_ids))
        object.__setattr__(self, "test_spot_ids", frozenset(self.test_spot_ids))
        if not self.train_spot_ids or not self.test_spot_ids:
            raise ValueError(f"split {self.name!r}: train and test must both be nonempty")
        if self.train_spot_ids & self.test_spot_ids:
            raise ValueError(f"split {self.name!r}: train and test overlap")


# ---------------------------------------------------------------------------
# CSV parsing (one parser backs both the strict loaders and `validate`)
# ---------------------------------------------------------------------------

def _read_rows(path) -> tuple[list[str] | None, list[tuple[int, list[str]]]]:
    with open(path, newline="", encoding="utf-8") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        rows = [(lineno, row) for lineno, row in enumerate(reader, start=2) if row]
    return header, rows

def _parse_spots(path) -> tuple[list[Finding], SpotTable | None]:
    fname = str(path)
    findings: list[Finding] = []
    try:
        header, rows = _read_rows(path)
    except OSError:
        raise
    except (csv.Error, UnicodeDecodeError) as exc:
        return [Finding(fname, 0, f"unreadable CSV: {exc}")], None

    if header is None:
        return [Finding(fname, 0, "empty file (no header)")], None
    if len(set(header)) != len(header):
        dupes = sorted({c for c in header if header.count(c) > 1})
        return [Finding(fname, 1, f"duplicate header columns: {dupes}")], None
    if tuple(header[: len(SPOT_FIXED_COLUMNS)]) != SPOT_FIXED_COLUMNS:
        return [Finding(fname, 1, f"header must start with {','.join(SPOT_FIXED_COLUMNS)}")], None
    emb_cols = header[len(SPOT_FIXED_COLUMNS):]
    expected = [f"e{i}" for i in range(len(emb_cols))]
    if emb_cols != expected:
        return [Finding(fname, 1, "embedding columns must be e0..e{D-1} in order")], None
    dim = len(emb_cols)

    if not rows:
        return [Finding(fname, 0, "no spots (header only)")], None

    spot_ids: list[str] = []
    sample_ids: list[str] = []
    patient_ids: list[str] = []
    coords: list[tuple[float, float]] = []
    vectors: list[list[float]] = []
    seen: set[str] = set()
    owners: dict[str, tuple[str, int]] = {}

    for lineno, row in rows:
        if len(row) != len(header):
            findings.append(Finding(fname, lineno, f"expected {len(header)} fields, got {len(row)}"))
            continue
        sid, sample, patient = row[0], row[1], row[2]
        bad = False
        if not sid:
            findings.append(Finding(fname, lineno, "empty spot_id"))
            bad = True
        elif sid in seen:
            findings.append(Finding(fname, lineno, f"duplicate spot_id {sid!r}"))
            bad = True
        if not sample or not patient:
            findings.append(Finding(fname, lineno, "empty sample_id or patient_id"))
            bad = True
        elif sample in owners and owners[sample][0] != patient:
            findings.append(Finding(
                fname, lineno,
                f"sample {sample!r} mapped to patient {patient!r} but line "
                f"{owners[sample][1]} maps it to {owners[sample][0]!r}"))
            bad = True
        numbers: list[float] = []
        for col, text in zip(header[3:], row[3:]):
            try:
                numbers.append(_parse_finite(text))
            except ValueError:
                findings.append(Finding(fname, lineno, f"column {col!r}: invalid number {text!r}"))
                bad = True
                break
        if bad:
            continue
        seen.add(sid)
        owners.setdefault(sample, (patient, lineno))
        spot_ids.append(sid)
        sample_ids.append(sample)
        patient_ids.append(patient)
        coords.append((numbers[0], numbers[1]))
        vectors.append(numbers[2:])

    if findings:
        return findings, None
    table = SpotTable(
        spot_ids=tuple(spot_ids),
        sample_ids=tuple(sample_ids),
        patient_ids=tuple(patient_ids),
        coords=np.array(coords, dtype=np.float64).reshape(len(spot_ids), 2),
        embeddings=np.array(vectors, dtype=np.float64).reshape(len(spot_ids), dim),
    )
    return [], table


def _parse_abundance(path, allow_negative: bool) -> tuple[list[Finding], AbundanceMatrix | None]:
    fname = str(path)
    findings: list[Finding] = []
    try:
        header, rows = _read_rows(path)
    except OSError:
        raise
    except (csv.Error, UnicodeDecodeError) as exc:
        return [Finding(fname, 0, f"unreadable CSV: {exc}")], None

    if header is None:
        return [Finding(fname, 0, "empty file (no header)")], None
    if not header or header[0] != "spot_id":
        return [Finding(fname, 1, "first column must be spot_id")], None
    cell_types = header[1:]
    if len(cell_types) < 2:
        return [Finding(fname, 1, f"need at least 2 cell types, got {len(cell_types)}")], None
    if len(set(cell_types)) != len(cell_types) or any(not ct for ct in cell_types):
        return [Finding(fname, 1, "cell type names must be unique and nonempty")], None
    if not rows:
        return [Finding(fname, 0, "no spots (header only)")], None

    spot_ids: list[str] = []
    values: list[list[float]] = []
    seen: set[str] = set()
    for lineno, row in rows:
        if len(row) != len(header):
            findings.append(Finding(fname, lineno, f"expected {len(header)} fields, got {len(row)}"))
            continue
        sid = row[0]
        bad = False
        if not sid:
            findings.append(Finding(fname, lineno, "empty spot_id"))
            bad = True
        elif sid in seen:
            findings.append(Finding(fname, lineno, f"duplicate spot_id {sid!r}"))
            bad = True
        numbers: list[float] = []
        for col, text in zip(cell_types, row[1:]):
            try:
                value = _parse_finite(text)
            except ValueError:
                findings.append(Finding(fname, lineno, f"cell type {col!r}: invalid number {text!r}"))
                bad = True
                break
            if value < 0.0 and not allow_negative:
                findings.append(Finding(fname, lineno, f"cell type {col!r}: negative abundance {text}"))
                bad = True
                break
            numbers.append(value)
        if bad:
            continue
        seen.add(sid)
        spot_ids.append(sid)
        values.append(numbers)

    if findings:
        return findings, None
    matrix = AbundanceMatrix(
        spot_ids=tuple(spot_ids),
        cell_types=tuple(cell_types),
        values=np.array(values, dtype=np.float64).reshape(len(spot_ids), len(cell_types)),
    )
    return [], matrix


def scan_spots_csv(path) -> list[Finding]:
    """All schema findings for a spots CSV (empty list = clean)."""
    findings, _ = _parse_spots(path)
    return findings


def scan_abundance_csv(path, spot_ids=None, allow_negative: bool = False) -> list[Finding]:
    """All schema findings for an abundance CSV; with `spot_ids` given,
    also checks that the file covers every listed spot."""
    findings, matrix = _parse_abundance(path, allow_negative)
    if matrix is not None and spot_ids is not None:
        missing = sorted(set(spot_ids) - set(matrix.spot_ids))
        for sid in missing[:10]:
            findings.append(Finding(str(path), 0, f"missing spot {sid!r}"))
        if len(missing) > 10:
            findings.append(Finding(str(path), 0, f"... and {len(missing) - 10} more missing spots"))
    return findings


# ---------------------------------------------------------------------------
# Loaders / savers
# ---------------------------------------------------------------------------

def load_spot_table(path) -> SpotTable:
    """Parse and validate a spots CSV; raises SchemaError naming the first
    offending line."""
    findings, table = _parse_spots(path)
    if findings:
        raise SchemaError(str(findings[0]))
    assert table is not None
    return table


def save_spot_table(table: SpotTable, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(list(SPOT_FIXED_COLUMNS) + [f"e{i}" for i in range(table.dim)])
        for i, sid in enumerate(table.spot_ids):
            row = [sid, table.sample_ids[i], table.patient_ids[i],
                   fmt_float(table.coords[i, 0]), fmt_float(table.coords[i, 1])]
            row.extend(fmt_float(v) for v in table.embeddings[i])
            writer.writerow(row)


def load_abundance_table(path, spots: SpotTable, allow_negative: bool = False) -> AbundanceMatrix:
    """Load abundances and reorder rows to match `spots`.

    Every spot in `spots` must appear exactly once in the file; extra rows
    (e.g. spots dropped by background filtering) are ignored.  Ground truth
    must be nonnegative unless `allow_negative` is set (predictions saved
    without clamping may dip below zero).
    """
    findings, matrix = _parse_abundance(path, allow_negative)
    if findings:
        raise SchemaError(str(findings[0]))
    assert matrix is not None
    index = {sid: i for i, sid in enumerate(matrix.spot_ids)}
    missing = [sid for sid in spots.spot_ids if sid not in index]
    if missing:
        raise SchemaError(f"{path}: missing spot {missing[0]!r}"
                          + (f" (and {len(missing) - 1} more)" if len(missing) > 1 else ""))
    order = [index[sid] for sid in spots.spot_ids]
    return AbundanceMatrix(
        spot_ids=spots.spot_ids,
        cell_types=matrix.cell_types,
        values=matrix.values[order],
    )


def save_abundance_table(matrix: AbundanceMatrix, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle, lineterminator="\n")
        writer.writerow(["spot_id"] + list(matrix.cell_types))
        for i, sid in enumerate(matrix.spot_ids):
            writer.writerow([sid] + [fmt_float(v) for v in matrix.values[i]])


def load_embedding_block(path, source_name: str | None = None) -> EmbeddingBlock:
    """Load one per-source embedding CSV (header spot_id,e0,...)."""
    fname = str(path)
    header, rows = _read_rows(path)
    if header is None:
        raise SchemaError(f"{fname}:0: empty file (no header)")
    if not header or header[0] != "spot_id":
        raise SchemaError(f"{fname}:1: first column must be spot_id")
    expected = [f"e{i}" for i in range(len(header) - 1)]
    if header[1:] != expected or not expected:
        raise SchemaError(f"{fname}:1: embedding columns must be e0..e{{D-1}} in order")
    if not rows:
        raise SchemaError(f"{fname}:0: no spots (header only)")
    spot_ids: list[str] = []
    vectors: list[list[float]] = []
    seen: set[str] = set()
    for lineno, row in rows:
        if len(row) != len(header):
            raise SchemaError(f"{fname}:{lineno}: expected {len(header)} fields, got {len(row)}")
        sid = row[0]
        if not sid or sid in seen:
            raise SchemaError(f"{fname}:{lineno}: empty or duplicate spot_id {sid!r}")
        try:
            vectors.append([_parse_finite(text) for text in row[1:]])
        except ValueError:
            raise SchemaError(f"{fname}:{lineno}: invalid number") from None
        seen.add(sid)
        spot_ids.append(sid)
    name = source_name if source_name is not None else Path(path).stem
    return EmbeddingBlock(source_name=name, spot_ids=tuple(spot_ids), matrix=np.array(vectors))


# ---------------------------------------------------------------------------
# Embedding concatenation and splits
# ---------------------------------------------------------------------------

def concat_embeddings(blocks) -> EmbeddingBlock:
    """Join embedding sources (in the given order) into one block.

    Row order follows the first block; all blocks must cover exactly the
    same spot ids.  Output dim is the sum of input dims and the source name
    joins the input names with '+'.
    """
    blocks = list(blocks)
    if not blocks:
        raise ValueError("concat_embeddings: no blocks given")
    if len(blocks) == 1:
        return blocks[0]
    base = set(blocks[0].spot_ids)
    for block in blocks[1:]:
        diff = base.symmetric_difference(block.spot_ids)
        if diff:
            listed = sorted(diff)[:10]
            raise SchemaError(
                f"embedding blocks {blocks[0].source_name!r} and {block.source_name!r} "
                f"cover different spots; symmetric difference (first 10): {listed}")
    order = blocks[0].spot_ids
    parts = [blocks[0].matrix]
    for block in blocks[1:]:
        index = block.row_index()
        parts.append(block.matrix[[index[sid] for sid in order]])
    return EmbeddingBlock(
        source_name="+".join(block.source_name for block in blocks),
        spot_ids=order,
        matrix=np.hstack(parts),
    )


def assemble_embeddings(spots: SpotTable, blocks=()) -> SpotTable:
    """Final feature table: inline embeddings (if any) followed by `blocks`.

    Each block must cover every spot in `spots`; extra rows in a block are
    ignored.  Raises if no embedding source is available at all.
    """
    items: list[EmbeddingBlock] = []
    if spots.dim >= 1:
        items.append(EmbeddingBlock("inline", spots.spot_ids, spots.embeddings))
    for block in blocks:
        index = block.row_index()
        missing = [sid for sid in spots.spot_ids if sid not in index]
        if missing:
            raise SchemaError(
                f"embedding block {block.source_name!r} missing spots (first 10): {missing[:10]}")
        items.append(EmbeddingBlock(
            block.source_name,
            spots.spot_ids,
            block.matrix[[index[sid] for sid in spots.spot_ids]],
        ))
    if not items:
        raise SchemaError("no embedding source: spots CSV has no e-columns and no blocks were given")
    combined = concat_embeddings(items)
    if combined.matrix is spots.embeddings:
        return spots
    return spots.with_embeddings(combined.matrix)


def make_splits(spots: SpotTable, mode: str, train_ids=None, test_ids=None,
                name: str = "fixed") -> list[SampleSplit]:
    """Experiment splits: 'loo' (one split per patient, ordered by
    patient_id) or 'fixed' (explicit id sets)."""
    if mode == "loo":
        patients = spots.patients()
        if len(patients) < 2:
            raise ValueError(f"leave-one-patient-out needs >= 2 patients, got {len(patients)}")
        splits = []
        for patient in patients:
            test = frozenset(sid for sid, pid in zip(spots.spot_ids, spots.patient_ids)
                             if pid == patient)
            train = frozenset(spots.spot_ids) - test
            splits.append(SampleSplit(name=patient, train_spot_ids=train, test_spot_ids=test))
        return splits
    if mode == "fixed":
        if not train_ids or not test_ids:
            raise ValueError("fixed mode needs nonempty train_ids and test_ids")
        universe = set(spots.spot_ids)
        stray = (set(train_ids) | set(test_ids)) - universe
        if stray:
            raise ValueError(f"split ids not in spot table: {sorted(stray)[:10]}")
        return [SampleSplit(name=name, train_spot_ids=frozenset(train_ids),
                            test_spot_ids=frozenset(test_ids))]
    raise ValueError(f"unknown split mode {mode!r}")
