"""
Dataset ingestion: CSV loading, cleaning (unparsable structures, conflicting
labels, replicates) and reference library construction.
"""
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd
from django.conf import settings

from ..exceptions import (
    EmptyDataset,
    FormatError,
    InvariantViolation,
    MissingExternalFingerprint,
    SchemeMismatch,
    UnknownScheme,
    UnparsableMolecule,
)
from .fingerprints import SchemeSet, default_scheme_set, fingerprint_rows
from .library import LabelKind, LibraryMetadata, ReferenceLibrary
from .smiles import graph_invariant_key, parse_smiles

logger = logging.getLogger(__name__)

FEW_NUMERIC_LEVELS = 10


@dataclass(frozen=True)
class SchemaConfig:
    """Column names and label handling for an input CSV."""
    smiles_column: str = 'smiles'
    label_column: str = 'label'
    key_column: str | None = None
    label_kind: LabelKind | None = None
    positive_tokens: tuple = None
    negative_tokens: tuple = None

    def __post_init__(self):
        if self.positive_tokens is None:
            tokens = getattr(settings, 'POEM_POSITIVE_TOKENS', ['1', 'pos'])
            object.__setattr__(self, 'positive_tokens', tuple(token.lower() for token in tokens))
        if self.negative_tokens is None:
            tokens = getattr(settings, 'POEM_NEGATIVE_TOKENS', ['0', 'neg'])
            object.__setattr__(self, 'negative_tokens', tuple(token.lower() for token in tokens))
        if isinstance(self.label_kind, str):
            object.__setattr__(self, 'label_kind', LabelKind(self.label_kind))

    def binary_label(self, text):
        """'1' or '0' for a recognised token, else None."""
        token = text.strip().lower()
        if token in self.positive_tokens:
            return '1'
        if token in self.negative_tokens:
            return '0'
        return None


@dataclass(frozen=True)
class RawRow:
    key: str
    smiles: str
    label_text: str
    label: object
    line: int


@dataclass(frozen=True)
class RawDataset:
    rows: tuple
    label_kind: LabelKind
    source_path: Path | None = None

    def __len__(self):
        return len(self.rows)

    @property
    def keys(self):
        return [row.key for row in self.rows]


@dataclass(frozen=True)
class CleanRow:
    key: str
    smiles: str
    label: object
    graph_key: int | None
    line: int | None = None


def _is_float(text):
    try:
        float(text)
    except ValueError:
        return False
    return True


def detect_label_kind(label_texts, schema):
    """
    Binary when every label is a known token, continuous when every label is
    a number, multi-class otherwise. Whole-number labels with few distinct
    values are still read as continuous, with a warning pointing at
    ``--label-kind``.
    """
    if all(schema.binary_label(text) is not None for text in label_texts):
        return LabelKind.BINARY_CLASS
    if all(_is_float(text) for text in label_texts):
        values = {float(text) for text in label_texts}
        if len(values) <= FEW_NUMERIC_LEVELS and all(value.is_integer() for value in values):
            levels = ', '.join(f"{value:g}" for value in sorted(values))
            logger.warning(f"Numeric labels take only {len(values)} whole values ({levels}); treating them as "
                           f"continuous, pass --label-kind multi_class if they are classes")
        return LabelKind.CONTINUOUS
    return LabelKind.MULTI_CLASS


def _normalise_label(text, kind, schema, path, line):
    if kind is LabelKind.BINARY_CLASS:
        label = schema.binary_label(text)
        if label is None:
            raise FormatError(f"Label {text!r} is not a recognised binary token", path=path, line=line)
        return label
    if kind is LabelKind.CONTINUOUS:
        try:
            return float(text)
        except ValueError:
            raise FormatError(f"Label {text!r} is not a number", path=path, line=line) from None
    return text.strip()


def load_csv(path, schema=None):
    """
    Load a labeled molecule CSV.

    Args:
        path (str or Path): UTF-8 CSV with a header row.
        schema (SchemaConfig, optional): Column names and label handling.

    Returns:
        RawDataset: One row per data line; keys default to the 0-based row
        index when no key column is configured.

    Raises:
        FormatError: Missing columns, ragged rows, empty labels or duplicate keys.
    """
    path = Path(path)
    schema = schema or SchemaConfig()
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8-sig',
                            skipinitialspace=True)
    except FileNotFoundError:
        raise FormatError("File not found", path=path) from None
    except pd.errors.EmptyDataError:
        raise FormatError("File is empty; a header row is required", path=path) from None
    except pd.errors.ParserError as exc:
        raise FormatError(f"Ragged or malformed CSV: {exc}", path=path) from None

    frame.columns = [str(column).strip() for column in frame.columns]
    required = [schema.smiles_column, schema.label_column]
    if schema.key_column:
        required.append(schema.key_column)
    missing = [column for column in required if column not in frame.columns]
    if missing:
        raise FormatError(f"Missing column(s) {', '.join(missing)}; found {', '.join(frame.columns)}",
                          path=path, line=1)

    ragged = frame[required].isna().any(axis=1)
    if ragged.any():
        line = int(np.flatnonzero(ragged.to_numpy())[0]) + 2
        raise FormatError("Row has fewer fields than the header", path=path, line=line)

    label_texts = [text.strip() for text in frame[schema.label_column]]
    for offset, text in enumerate(label_texts):
        if not text:
            raise FormatError("Empty label", path=path, line=offset + 2)

    kind = schema.label_kind or detect_label_kind(label_texts, schema)
    if schema.key_column:
        keys = [str(key).strip() for key in frame[schema.key_column]]
    else:
        keys = [str(index) for index in range(len(frame))]

    rows = []
    seen = set()
    for offset, (key, smiles, text) in enumerate(zip(keys, frame[schema.smiles_column], label_texts)):
        line = offset + 2
        if not key:
            raise FormatError("Empty molecule key", path=path, line=line)
        if key in seen:
            raise FormatError(f"Duplicate molecule key {key!r}", path=path, line=line)
        seen.add(key)
        rows.append(RawRow(
            key=key,
            smiles=smiles.strip(),
            label_text=text,
            label=_normalise_label(text, kind, schema, path, line),
            line=line,
        ))

    logger.info(f"Loaded {len(rows)} rows ({kind}) from {path}")
    return RawDataset(rows=tuple(rows), label_kind=kind, source_path=path)


@dataclass
class CleaningReport:
    n_input: int = 0
    n_unparsable: int = 0
    n_conflicting: int = 0
    n_replicates_removed: int = 0
    n_final: int = 0
    excluded: list = field(default_factory=list)

    def check(self):
        """Raise InvariantViolation unless the counts reconcile."""
        accounted = self.n_final + self.n_unparsable + self.n_conflicting + self.n_replicates_removed
        if accounted != self.n_input:
            raise InvariantViolation(
                f"Cleaning counts do not reconcile: {self.n_input} input, {accounted} accounted for"
            )

    def as_dict(self):
        return {
            'n_input': self.n_input,
            'n_unparsable': self.n_unparsable,
            'n_conflicting': self.n_conflicting,
            'n_replicates_removed': self.n_replicates_removed,
            'n_final': self.n_final,
        }

    def to_key_values(self):
        lines = [f"{name}={value}" for name, value in self.as_dict().items()]
        lines.append('excluded=' + ';'.join(f"{key}:{reason}" for key, reason in self.excluded))
        return '\n'.join(lines) + '\n'

    def to_text(self):
        lines = [
            f"Input rows:            {self.n_input}",
            f"Unparsable:            {self.n_unparsable}",
            f"Conflicting labels:    {self.n_conflicting}",
            f"Replicates removed:    {self.n_replicates_removed}",
            f"Final molecules:       {self.n_final}",
        ]
        for key, reason in self.excluded:
            lines.append(f"  excluded {key}: {reason}")
        return '\n'.join(lines)


def clean(raw, scheme_set=None, min_rows=2):
    """
    Apply the cleaning rules.

    Rows that cannot be parsed are dropped. The rest are grouped by graph
    invariant key; a classification group with more than one distinct label
    is dropped entirely, any other group collapses to its first row
    (continuous labels are averaged). Rows without SMILES are only kept when
    every scheme is external; they are grouped by key alone.

    Args:
        raw (RawDataset): Loaded dataset.
        scheme_set (SchemeSet, optional): Schemes the library will use; the
            default native set when omitted.
        min_rows (int): Fewest surviving molecules accepted.

    Returns:
        tuple: (list[CleanRow], CleaningReport)

    Raises:
        EmptyDataset: Fewer than ``min_rows`` molecules survive.
    """
    needs_structure = scheme_set is None or scheme_set.has_native
    report = CleaningReport(n_input=len(raw.rows))
    groups = {}
    for row in raw.rows:
        if not row.smiles:
            if needs_structure:
                report.n_unparsable += 1
                report.excluded.append((row.key, 'missing SMILES'))
                logger.warning(f"Excluding {row.key!r} (line {row.line}): missing SMILES")
                continue
            groups.setdefault(('key', row.key), []).append((row, None))
            continue
        try:
            mol = parse_smiles(row.smiles)
        except UnparsableMolecule as exc:
            report.n_unparsable += 1
            report.excluded.append((row.key, 'unparsable'))
            logger.warning(f"Excluding {row.key!r} (line {row.line}): {exc.message}")
            continue
        graph_key = graph_invariant_key(mol)
        groups.setdefault(('graph', graph_key), []).append((row, graph_key))

    cleaned = []
    for members in groups.values():
        first, graph_key = members[0]
        if raw.label_kind.is_classification:
            labels = {row.label for row, _ in members}
            if len(labels) > 1:
                report.n_conflicting += len(members)
                for row, _ in members:
                    report.excluded.append((row.key, 'conflicting label'))
                logger.warning(f"Excluding {len(members)} rows with conflicting labels "
                               f"{sorted(labels)}: {', '.join(row.key for row, _ in members)}")
                continue
            label = first.label
        else:
            label = float(np.mean([row.label for row, _ in members]))
        for row, _ in members[1:]:
            report.n_replicates_removed += 1
            report.excluded.append((row.key, f"replicate of {first.key}"))
        cleaned.append(CleanRow(key=first.key, smiles=first.smiles, label=label, graph_key=graph_key,
                                line=first.line))

    report.n_final = len(cleaned)
    report.check()
    logger.info(f"Cleaning: {report.n_input} in, {report.n_unparsable} unparsable, "
                f"{report.n_conflicting} conflicting, {report.n_replicates_removed} replicates, "
                f"{report.n_final} kept")
    if report.n_final < min_rows:
        raise EmptyDataset(f"Only {report.n_final} molecules survived cleaning; at least {min_rows} required",
                           path=raw.source_path)
    return cleaned, report


def compose_scheme_set(scheme_ids=None, length=None, external_sets=()):
    """
    Native default schemes (optionally restricted to ``scheme_ids``) followed
    by the schemes of any external fingerprint files. An external scheme
    replaces the native scheme with the same id.

    Args:
        scheme_ids (Sequence[str], optional): Schemes to keep; every id must be
            a native default or an external scheme.
        length (int, optional): Native fingerprint length.
        external_sets (Sequence[SchemeSet]): Schemes read from external files.
    """
    external = [scheme for scheme_set in external_sets for scheme in scheme_set]
    external_ids = {scheme.scheme_id for scheme in external}
    native = [scheme for scheme in default_scheme_set(length) if scheme.scheme_id not in external_ids]
    native_ids = [scheme.scheme_id for scheme in native]
    if scheme_ids is None:
        return SchemeSet(tuple(native + external))
    wanted = list(scheme_ids)
    unknown = [scheme_id for scheme_id in wanted if scheme_id not in native_ids and scheme_id not in external_ids]
    if unknown:
        raise UnknownScheme(f"Unknown scheme(s) {', '.join(unknown)}; native schemes: {', '.join(native_ids)}")
    schemes = [scheme for scheme in native if scheme.scheme_id in wanted]
    schemes += [scheme for scheme in external if scheme.scheme_id in wanted]
    return SchemeSet(tuple(schemes))


def fingerprint_clean_rows(rows, scheme_set, external=None, workers=1):
    """
    Fingerprint rows for every scheme, in scheme order.

    Args:
        rows (list[CleanRow]): Cleaned molecules.
        scheme_set (SchemeSet): Native and external schemes.
        external (dict, optional): ``{scheme_id: {molecule_key: Fingerprint}}``
            for every external scheme in ``scheme_set``.
        workers (int): Processes for native fingerprinting.

    Returns:
        list[list]: ``cells[i][k]`` is packed bytes (native) or a Fingerprint
        (external) for row i under scheme k.

    Raises:
        MissingExternalFingerprint: A row lacks an external fingerprint.
    """
    external = external or {}
    for scheme in scheme_set.external:
        if scheme.scheme_id not in external:
            raise SchemeMismatch(f"No fingerprint file supplied for external scheme {scheme.scheme_id}")
        table = external[scheme.scheme_id]
        missing = [row.key for row in rows if row.key not in table]
        if missing:
            raise MissingExternalFingerprint(
                f"{len(missing)} molecules have no {scheme.scheme_id} fingerprint (first: {missing[0]!r})"
            )

    native = [scheme for scheme in scheme_set if scheme.is_native]
    native_rows = fingerprint_rows([row.smiles for row in rows], native, workers=workers) if native else None
    cells = []
    for index, row in enumerate(rows):
        computed = iter(native_rows[index]) if native_rows is not None else iter(())
        cells.append([
            next(computed) if scheme.is_native else external[scheme.scheme_id][row.key]
            for scheme in scheme_set
        ])
    return cells


def build_library(rows, scheme_set, label_kind, external=None, name='library', notes='', workers=1):
    """
    Fingerprint cleaned rows and assemble a ReferenceLibrary.

    Args:
        rows (list[CleanRow]): Output of ``clean``.
        scheme_set (SchemeSet): Native and external schemes, in library order.
        label_kind (LabelKind): Label kind.
        external (dict, optional): External fingerprints, see
            ``fingerprint_clean_rows``.
        name (str): Library name.
        notes (str): Free-form notes stored with the library.
        workers (int): Processes for native fingerprinting.

    Returns:
        ReferenceLibrary: Label space sorted lexicographically.

    Raises:
        MissingExternalFingerprint: A row lacks an external fingerprint.
        MissingClass: A class is absent (binary) or fewer than two classes exist.
    """
    if len(rows) < 2:
        raise EmptyDataset(f"A library needs at least 2 molecules, got {len(rows)}")
    library = ReferenceLibrary.from_fingerprints(
        keys=[row.key for row in rows],
        labels=[row.label for row in rows],
        label_kind=label_kind,
        scheme_set=scheme_set,
        rows=fingerprint_clean_rows(rows, scheme_set, external, workers),
        graph_keys=[row.graph_key for row in rows] if any(row.graph_key is not None for row in rows) else None,
        metadata=LibraryMetadata(name=name, version=1, notes=notes),
    )
    logger.info(f"Built library {name!r}: M={library.size}, N={library.scheme_count}, "
                f"Np={library.class_count if library.is_classification else 'continuous'}")
    return library


@dataclass(frozen=True)
class QueryRow:
    key: str
    smiles: str
    line: int


def read_molecule_table(path, smiles_column='smiles', key_column=None, require_smiles=True):
    """
    Read an unlabeled molecule CSV (queries, fingerprinting input).

    The key column defaults to ``key`` when present, else the row index. A
    file without any content yields no rows.

    Raises:
        FormatError: Missing columns or duplicate keys.
    """
    path = Path(path)
    try:
        frame = pd.read_csv(path, dtype=str, keep_default_na=False, encoding='utf-8-sig',
                            skipinitialspace=True)
    except FileNotFoundError:
        raise FormatError("File not found", path=path) from None
    except pd.errors.EmptyDataError:
        logger.info(f"{path} is empty")
        return []
    except pd.errors.ParserError as exc:
        raise FormatError(f"Ragged or malformed CSV: {exc}", path=path) from None

    frame.columns = [str(column).strip() for column in frame.columns]
    if key_column is None and 'key' in frame.columns:
        key_column = 'key'
    if key_column and key_column not in frame.columns:
        raise FormatError(f"Missing key column {key_column!r}", path=path, line=1)
    has_smiles = smiles_column in frame.columns
    if require_smiles and not has_smiles:
        raise FormatError(f"Missing SMILES column {smiles_column!r}", path=path, line=1)

    rows = []
    seen = set()
    for offset in range(len(frame)):
        line = offset + 2
        key = str(frame[key_column].iloc[offset]).strip() if key_column else str(offset)
        smiles = frame[smiles_column].iloc[offset] if has_smiles else ''
        if not isinstance(smiles, str):
            raise FormatError("Row has fewer fields than the header", path=path, line=line)
        if key in seen:
            raise FormatError(f"Duplicate molecule key {key!r}", path=path, line=line)
        seen.add(key)
        rows.append(QueryRow(key=key, smiles=smiles.strip(), line=line))
    logger.info(f"Read {len(rows)} molecules from {path}")
    return rows
