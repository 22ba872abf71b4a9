"""
The reference library: labeled molecules with their fingerprints under every
scheme. A library is the whole model; there are no trained parameters.

File format (``POEM1``)::

    b'POEM1'
    uint32 LE   header length H
    H bytes     UTF-8 JSON header (sorted keys, compact separators)
    M records:
        uint16 LE   key length, then the UTF-8 key
        label       uint32 LE class index (classification) or float64 LE value
        uint8       1 if a graph key follows, else 0
        uint64 LE   graph key (present only when the flag is 1)
        N blocks    packed fingerprint bytes, scheme order, ceil(length/8) each

Fingerprint bytes are MSB-first: bit 0 is the high bit of the first byte.
"""
import enum
import io
import json
import logging
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path

import numpy as np

from ..exceptions import ConflictingLabel, DuplicateKey, EmptyDataset, FormatError, MissingClass, SchemeMismatch
from .fingerprints import Fingerprint, FingerprintScheme, SchemeSet, popcounts

logger = logging.getLogger(__name__)

MAGIC = b'POEM1'
FORMAT_VERSION = 1
MAX_KEY_BYTES = 0xFFFF


class LabelKind(enum.Enum):
    BINARY_CLASS = 'binary_class'
    MULTI_CLASS = 'multi_class'
    CONTINUOUS = 'continuous'

    def __str__(self):
        return self.value

    @property
    def is_classification(self):
        return self is not LabelKind.CONTINUOUS


BINARY_LABEL_SPACE = ('0', '1')


@dataclass(frozen=True)
class LibraryMetadata:
    name: str = 'library'
    version: int = 1
    notes: str = ''


@dataclass(frozen=True, eq=False)
class ReferenceLibrary:
    """
    Immutable reference library.

    ``fp_matrix`` is scheme-major: ``fp_matrix[k]`` is a read-only ``uint8``
    array of shape ``(M, ceil(length_k / 8))``. For classification libraries
    ``targets`` holds class indices into ``label_space``; for regression it
    holds the float values and ``label_space`` is empty.
    """
    keys: tuple
    label_kind: LabelKind
    label_space: tuple
    targets: np.ndarray
    scheme_set: SchemeSet
    fp_matrix: tuple
    graph_keys: tuple | None = None
    metadata: LibraryMetadata = field(default_factory=LibraryMetadata)

    def __post_init__(self):
        size = len(self.keys)
        if size < 2:
            raise EmptyDataset(f"A library needs at least 2 molecules, got {size}")
        if len(set(self.keys)) != size:
            raise DuplicateKey("Library molecule keys must be unique")
        for key in self.keys:
            if len(key.encode('utf-8')) > MAX_KEY_BYTES:
                raise FormatError(f"Molecule key {key[:32]!r}... is longer than {MAX_KEY_BYTES} bytes")
        if len(self.targets) != size:
            raise FormatError(f"{len(self.targets)} labels for {size} molecules")
        if len(self.fp_matrix) != len(self.scheme_set):
            raise SchemeMismatch(f"{len(self.fp_matrix)} fingerprint blocks for {len(self.scheme_set)} schemes")
        for scheme, block in zip(self.scheme_set, self.fp_matrix):
            if block.shape != (size, scheme.byte_length):
                raise SchemeMismatch(f"Fingerprint block for {scheme.scheme_id} has shape {block.shape}")
        if self.graph_keys is not None and len(self.graph_keys) != size:
            raise FormatError(f"{len(self.graph_keys)} graph keys for {size} molecules")

        if self.label_kind.is_classification:
            if len(self.label_space) < 2:
                raise MissingClass(f"Classification needs at least 2 classes, got {list(self.label_space)}")
            if list(self.label_space) != sorted(set(self.label_space)):
                raise FormatError("Label space must be sorted and unique")
            codes = np.asarray(self.targets)
            if codes.min() < 0 or codes.max() >= len(self.label_space):
                raise FormatError("Class index outside the label space")
        elif self.label_space:
            raise FormatError("Continuous libraries carry no label space")

        for block in self.fp_matrix:
            block.flags.writeable = False
        self.targets.flags.writeable = False

    @classmethod
    def from_fingerprints(cls, keys, labels, label_kind, scheme_set, rows, graph_keys=None,
                          label_space=None, metadata=None):
        """
        Assemble a library from per-molecule fingerprint rows.

        Args:
            keys (list[str]): Molecule keys.
            labels (list): Label strings (classification) or floats (regression).
            label_kind (LabelKind): Label kind.
            scheme_set (SchemeSet): Schemes, in fingerprint order.
            rows (list[list[bytes | Fingerprint]]): ``rows[i][k]`` is molecule
                i under scheme k.
            graph_keys (list[int | None], optional): Per-molecule graph keys.
            label_space (tuple[str], optional): Class labels; defaults to the
                sorted distinct labels.
            metadata (LibraryMetadata, optional): Name, version and notes.
        """
        size = len(keys)
        blocks = []
        for position, scheme in enumerate(scheme_set):
            block = np.zeros((size, scheme.byte_length), dtype=np.uint8)
            for index, row in enumerate(rows):
                cell = row[position]
                if isinstance(cell, Fingerprint):
                    if cell.scheme_id != scheme.scheme_id or cell.length != scheme.length:
                        raise SchemeMismatch(
                            f"Molecule {keys[index]!r}: got {cell.scheme_id} fingerprint for {scheme.scheme_id}"
                        )
                    cell = cell.packed
                block[index] = np.frombuffer(cell, dtype=np.uint8)
            blocks.append(block)

        if label_kind.is_classification:
            labels = [str(label) for label in labels]
            if label_space is None:
                label_space = tuple(sorted(set(labels)))
            if label_kind is LabelKind.BINARY_CLASS:
                missing = [label for label in BINARY_LABEL_SPACE if label not in labels]
                if missing:
                    raise MissingClass(f"Binary classification library has no molecules of class {missing[0]!r}")
            lookup = {label: code for code, label in enumerate(label_space)}
            targets = np.array([lookup[label] for label in labels], dtype=np.int64)
        else:
            label_space = ()
            targets = np.array([float(label) for label in labels], dtype=np.float64)

        return cls(
            keys=tuple(keys),
            label_kind=label_kind,
            label_space=tuple(label_space),
            targets=targets,
            scheme_set=scheme_set,
            fp_matrix=tuple(blocks),
            graph_keys=tuple(graph_keys) if graph_keys is not None else None,
            metadata=metadata or LibraryMetadata(),
        )

    @property
    def size(self):
        return len(self.keys)

    @property
    def scheme_count(self):
        return len(self.scheme_set)

    @property
    def class_count(self):
        return len(self.label_space)

    @property
    def is_classification(self):
        return self.label_kind.is_classification

    @cached_property
    def popcounts(self):
        """Per-scheme row popcounts, shape ``(N, M)``."""
        counts = np.stack([popcounts(block) for block in self.fp_matrix])
        counts.flags.writeable = False
        return counts

    @cached_property
    def key_index(self):
        return {key: index for index, key in enumerate(self.keys)}

    def label(self, index):
        """Label of molecule ``index`` as text (classification) or float."""
        if self.is_classification:
            return self.label_space[int(self.targets[index])]
        return float(self.targets[index])

    def labels(self, indices=None):
        if indices is None:
            indices = range(self.size)
        return [self.label(index) for index in indices]

    def fingerprint(self, index, position):
        scheme = self.scheme_set[position]
        return Fingerprint(scheme.scheme_id, scheme.length, self.fp_matrix[position][index].tobytes())

    def fingerprint_row(self, index):
        return tuple(self.fingerprint(index, position) for position in range(self.scheme_count))

    def class_counts(self, indices=None):
        codes = self.targets if indices is None else self.targets[np.asarray(indices, dtype=np.int64)]
        return np.bincount(codes, minlength=self.class_count)

    def subset(self, indices):
        """A new library with the molecules at ``indices`` (in that order)."""
        indices = np.asarray(indices, dtype=np.int64)
        return ReferenceLibrary(
            keys=tuple(self.keys[index] for index in indices),
            label_kind=self.label_kind,
            label_space=self.label_space,
            targets=self.targets[indices].copy(),
            scheme_set=self.scheme_set,
            fp_matrix=tuple(block[indices].copy() for block in self.fp_matrix),
            graph_keys=tuple(self.graph_keys[index] for index in indices) if self.graph_keys is not None else None,
            metadata=self.metadata,
        )

    def restrict_schemes(self, scheme_ids):
        """A new library keeping only ``scheme_ids`` (in library order)."""
        restricted = self.scheme_set.restrict(scheme_ids)
        blocks = tuple(self.fp_matrix[self.scheme_set.index(scheme.scheme_id)] for scheme in restricted)
        return replace(self, scheme_set=restricted, fp_matrix=blocks)

    def summary(self):
        kind = str(self.label_kind)
        lines = [
            f"name: {self.metadata.name}",
            f"version: {self.metadata.version}",
            f"label_kind: {kind}",
            f"M: {self.size}",
            f"N: {self.scheme_count}",
            f"Np: {self.class_count if self.is_classification else 'continuous'}",
        ]
        if self.is_classification:
            counts = self.class_counts()
            lines.append('classes: ' + ', '.join(f"{label}={count}" for label, count in zip(self.label_space, counts)))
        lines.append('schemes: ' + ', '.join(self.scheme_set.ids))
        return '\n'.join(lines)


# Serialisation

def _header(library):
    return {
        'format_version': FORMAT_VERSION,
        'name': library.metadata.name,
        'version': library.metadata.version,
        'notes': library.metadata.notes,
        'label_kind': library.label_kind.value,
        'label_space': list(library.label_space),
        'schemes': [scheme.to_dict() for scheme in library.scheme_set],
        'M': library.size,
        'N': library.scheme_count,
        'Np': library.class_count,
    }


def dump_library(library):
    """Serialise ``library`` to ``POEM1`` bytes."""
    buffer = io.BytesIO()
    header = json.dumps(_header(library), sort_keys=True, separators=(',', ':')).encode('utf-8')
    buffer.write(MAGIC)
    buffer.write(struct.pack('<I', len(header)))
    buffer.write(header)
    for index, key in enumerate(library.keys):
        encoded = key.encode('utf-8')
        buffer.write(struct.pack('<H', len(encoded)))
        buffer.write(encoded)
        if library.is_classification:
            buffer.write(struct.pack('<I', int(library.targets[index])))
        else:
            buffer.write(struct.pack('<d', float(library.targets[index])))
        graph_key = library.graph_keys[index] if library.graph_keys is not None else None
        if graph_key is None:
            buffer.write(b'\x00')
        else:
            buffer.write(b'\x01' + struct.pack('<Q', graph_key))
        for block in library.fp_matrix:
            buffer.write(block[index].tobytes())
    return buffer.getvalue()


def save_library(library, path):
    path = Path(path)
    payload = dump_library(library)
    path.write_bytes(payload)
    logger.info(f"Saved library {library.metadata.name!r} v{library.metadata.version} "
                f"({library.size} molecules, {library.scheme_count} schemes) to {path}")
    return path


class _Reader:
    def __init__(self, stream, path):
        self.stream = stream
        self.path = path

    def take(self, count):
        data = self.stream.read(count)
        if len(data) != count:
            raise FormatError("Truncated library file", path=self.path)
        return data

    def unpack(self, fmt):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))[0]


def _read_header(reader):
    if reader.take(len(MAGIC)) != MAGIC:
        raise FormatError("Not a POEM1 library file", path=reader.path)
    length = reader.unpack('<I')
    try:
        header = json.loads(reader.take(length).decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"Corrupt library header: {exc}", path=reader.path) from None
    if header.get('format_version') != FORMAT_VERSION:
        raise FormatError(f"Unsupported library format version {header.get('format_version')}", path=reader.path)
    return header


def read_library_header(path):
    """
    Read only the self-describing header of a library file.

    Returns:
        dict: Header fields (format_version, name, version, label_kind,
        label_space, schemes, M, N, Np).
    """
    path = Path(path)
    with open(path, 'rb') as stream:
        return _read_header(_Reader(stream, path))


def load_library(path):
    """
    Load a ``POEM1`` library file.

    Raises:
        FormatError: Bad magic, unsupported version, truncation or trailing bytes.
    """
    path = Path(path)
    with open(path, 'rb') as stream:
        reader = _Reader(stream, path)
        header = _read_header(reader)
        try:
            scheme_set = SchemeSet(tuple(FingerprintScheme.from_dict(entry) for entry in header['schemes']))
            label_kind = LabelKind(header['label_kind'])
            size = int(header['M'])
        except (KeyError, ValueError, TypeError) as exc:
            raise FormatError(f"Invalid library header: {exc}", path=path) from None

        keys = []
        targets = []
        graph_keys = []
        blocks = [np.zeros((size, scheme.byte_length), dtype=np.uint8) for scheme in scheme_set]
        for index in range(size):
            keys.append(reader.take(reader.unpack('<H')).decode('utf-8'))
            if label_kind.is_classification:
                targets.append(reader.unpack('<I'))
            else:
                targets.append(reader.unpack('<d'))
            flag = reader.take(1)
            graph_keys.append(reader.unpack('<Q') if flag == b'\x01' else None)
            for position, scheme in enumerate(scheme_set):
                blocks[position][index] = np.frombuffer(reader.take(scheme.byte_length), dtype=np.uint8)
        if stream.read(1):
            raise FormatError("Trailing bytes after the last record", path=path)

    library = ReferenceLibrary(
        keys=tuple(keys),
        label_kind=label_kind,
        label_space=tuple(header.get('label_space', ())),
        targets=np.array(targets, dtype=np.int64 if label_kind.is_classification else np.float64),
        scheme_set=scheme_set,
        fp_matrix=tuple(blocks),
        graph_keys=None if all(key is None for key in graph_keys) else tuple(graph_keys),
        metadata=LibraryMetadata(
            name=header.get('name', 'library'),
            version=int(header.get('version', 1)),
            notes=header.get('notes', ''),
        ),
    )
    logger.info(f"Loaded library {library.metadata.name!r} v{library.metadata.version} from {path}: "
                f"M={library.size}, N={library.scheme_count}")
    return library


def _merged_label(library, keys, labels):
    if library.is_classification:
        distinct = sorted({str(label) for label in labels})
        if len(distinct) > 1:
            raise ConflictingLabel(
                f"Molecules {', '.join(repr(key) for key in keys)} share a structure but carry labels {distinct}"
            )
        return labels[0]
    return float(np.mean([float(label) for label in labels]))


def _same_label(library, label, current):
    if library.is_classification:
        return str(label) == current
    return bool(np.isclose(float(label), current))


def extend_library(library, keys, labels, rows, graph_keys=None, notes=None):
    """
    Append cleaned molecules to a library, producing a new version.

    Existing fingerprint rows are copied unchanged; only the new rows' fingerprints
    are needed. New rows sharing a graph key are merged into the first of them:
    class labels must agree, continuous labels are averaged.

    Args:
        library (ReferenceLibrary): Library to extend.
        keys (list[str]): New molecule keys.
        labels (list): New labels, same convention as ``from_fingerprints``.
        rows (list[list[bytes | Fingerprint]]): New fingerprint rows in
            library scheme order.
        graph_keys (list[int | None], optional): Graph keys of the new rows.
        notes (str, optional): Notes for the new version.

    Returns:
        ReferenceLibrary: The extended library (version + 1). Rows whose graph
        key and label match an existing molecule are skipped; continuous
        labels match within ``numpy.isclose`` tolerance.

    Raises:
        ConflictingLabel: New rows of one structure disagree on the class, or
            a new structure matches an existing one with a different label.
        DuplicateKey: A new row reuses an existing molecule key.
    """
    if graph_keys is None:
        graph_keys = [None] * len(keys)
    existing = {}
    if library.graph_keys is not None:
        existing = {graph_key: index for index, graph_key in enumerate(library.graph_keys) if graph_key is not None}
    groups = {}
    for position, graph_key in enumerate(graph_keys):
        if graph_key is not None:
            groups.setdefault(graph_key, []).append(position)

    kept = []
    merged = {}
    seen_keys = set(library.keys)
    for position, (key, graph_key) in enumerate(zip(keys, graph_keys)):
        members = groups[graph_key] if graph_key is not None else [position]
        if position != members[0]:
            logger.info(f"Skipping {key!r}: replicate of {keys[members[0]]!r}")
            continue
        label = _merged_label(library, [keys[member] for member in members],
                              [labels[member] for member in members])
        if graph_key is not None and graph_key in existing:
            current = library.label(existing[graph_key])
            if not _same_label(library, label, current):
                raise ConflictingLabel(
                    f"Molecule {key!r} duplicates {library.keys[existing[graph_key]]!r} "
                    f"with label {label!r} instead of {current!r}"
                )
            logger.info(f"Skipping {key!r}: already present as {library.keys[existing[graph_key]]!r}")
            continue
        if key in seen_keys:
            raise DuplicateKey(f"Molecule key {key!r} is already in the library")
        seen_keys.add(key)
        kept.append(position)
        merged[position] = label

    all_labels = library.labels() + [merged[position] for position in kept]
    label_space = None
    if library.is_classification:
        label_space = tuple(sorted(set(library.label_space) | {str(merged[position]) for position in kept}))

    old_rows = [[library.fp_matrix[k][index].tobytes() for k in range(library.scheme_count)]
                for index in range(library.size)]
    old_graph_keys = library.graph_keys if library.graph_keys is not None else (None,) * library.size
    extended = ReferenceLibrary.from_fingerprints(
        keys=list(library.keys) + [keys[position] for position in kept],
        labels=all_labels,
        label_kind=library.label_kind,
        scheme_set=library.scheme_set,
        rows=old_rows + [rows[position] for position in kept],
        graph_keys=list(old_graph_keys) + [graph_keys[position] for position in kept],
        label_space=label_space,
        metadata=LibraryMetadata(
            name=library.metadata.name,
            version=library.metadata.version + 1,
            notes=library.metadata.notes if notes is None else notes,
        ),
    )
    if extended.graph_keys is not None and all(key is None for key in extended.graph_keys):
        extended = replace(extended, graph_keys=None)
    logger.info(f"Extended library {library.metadata.name!r} to v{extended.metadata.version}: "
                f"{len(kept)} added, {len(keys) - len(kept)} skipped")
    return extended
