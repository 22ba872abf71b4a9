"""
Binary molecular fingerprints and Tanimoto distances.

Fingerprints are stored packed, most-significant bit first: bit 0 is the high
bit of byte 0. The same ordering is used by the external fingerprint file
format, where bit 0 is the high bit of the first hex digit.
"""
import enum
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import networkx as nx
import numpy as np
import pandas as pd
from django.conf import settings

from ..exceptions import FormatError, KeyMismatch, SchemeMismatch, UnknownScheme
from .hashing import hash_ints
from .smiles import BondOrder, parse_smiles

logger = logging.getLogger(__name__)

DEFAULT_LENGTH = 2048
DEFAULT_MAX_PATH_LENGTH = 7

# Distinct salts keep the schemes' hash spaces apart
_MORGAN_SALT = 11
_ATOM_PAIR_SALT = 13
_PATH_SALT = 17

HALOGENS = ('F', 'Cl', 'Br', 'I')


class SchemeKind(enum.Enum):
    MORGAN = 'morgan'
    ATOM_PAIR = 'atom_pair'
    PATH = 'path'
    EXTERNAL = 'external'

    def __str__(self):
        return self.value


def _is_power_of_two(value):
    return value > 0 and value & (value - 1) == 0


@dataclass(frozen=True)
class FingerprintScheme:
    """How one fingerprint is generated; ``length`` is the folded bit count."""
    scheme_id: str
    kind: SchemeKind
    length: int = DEFAULT_LENGTH
    radius: int | None = None
    use_chirality: bool = False
    use_features: bool = False
    max_path_len: int | None = None

    def __post_init__(self):
        if not self.scheme_id or ',' in self.scheme_id:
            raise ValueError(f"Invalid scheme id {self.scheme_id!r}")
        if self.length <= 0:
            raise ValueError(f"Scheme {self.scheme_id}: length must be positive")
        if self.kind is not SchemeKind.EXTERNAL and not _is_power_of_two(self.length):
            raise ValueError(f"Scheme {self.scheme_id}: length {self.length} is not a power of two")
        if self.kind is SchemeKind.MORGAN and (self.radius is None or self.radius < 0):
            raise ValueError(f"Scheme {self.scheme_id}: Morgan schemes need a radius >= 0")
        if self.kind is SchemeKind.PATH and (self.max_path_len is None or self.max_path_len < 1):
            raise ValueError(f"Scheme {self.scheme_id}: path schemes need max_path_len >= 1")

    @property
    def is_native(self):
        return self.kind is not SchemeKind.EXTERNAL

    @property
    def byte_length(self):
        return (self.length + 7) // 8

    def to_dict(self):
        return {
            'scheme_id': self.scheme_id,
            'kind': self.kind.value,
            'length': self.length,
            'radius': self.radius,
            'use_chirality': self.use_chirality,
            'use_features': self.use_features,
            'max_path_len': self.max_path_len,
        }

    @classmethod
    def from_dict(cls, data):
        return cls(
            scheme_id=data['scheme_id'],
            kind=SchemeKind(data['kind']),
            length=int(data['length']),
            radius=data.get('radius'),
            use_chirality=bool(data.get('use_chirality', False)),
            use_features=bool(data.get('use_features', False)),
            max_path_len=data.get('max_path_len'),
        )

    def describe(self):
        if self.kind is SchemeKind.MORGAN:
            extra = f"radius={self.radius} chirality={self.use_chirality} features={self.use_features}"
        elif self.kind is SchemeKind.PATH:
            extra = f"max_path_len={self.max_path_len}"
        else:
            extra = ''
        return f"{self.scheme_id} ({self.kind}, {self.length} bits{', ' + extra if extra else ''})"


@dataclass(frozen=True)
class SchemeSet:
    """Ordered schemes; dominance compares fingerprints position by position."""
    schemes: tuple = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'schemes', tuple(self.schemes))
        if not self.schemes:
            raise ValueError("A scheme set needs at least one scheme")
        ids = [scheme.scheme_id for scheme in self.schemes]
        if len(set(ids)) != len(ids):
            raise ValueError(f"Duplicate scheme ids in {ids}")

    def __len__(self):
        return len(self.schemes)

    def __iter__(self):
        return iter(self.schemes)

    def __getitem__(self, position):
        return self.schemes[position]

    @property
    def ids(self):
        return tuple(scheme.scheme_id for scheme in self.schemes)

    @property
    def has_native(self):
        return any(scheme.is_native for scheme in self.schemes)

    @property
    def external(self):
        return tuple(scheme for scheme in self.schemes if not scheme.is_native)

    def index(self, scheme_id):
        try:
            return self.ids.index(scheme_id)
        except ValueError:
            raise UnknownScheme(f"Unknown scheme {scheme_id!r}; available: {', '.join(self.ids)}") from None

    def get(self, scheme_id):
        return self.schemes[self.index(scheme_id)]

    def restrict(self, scheme_ids):
        """Return the sub-set with ``scheme_ids``, keeping this set's order."""
        wanted = set(scheme_ids)
        for scheme_id in wanted:
            self.index(scheme_id)
        return SchemeSet(tuple(scheme for scheme in self.schemes if scheme.scheme_id in wanted))


def default_scheme_set(length=None, max_path_len=None):
    """
    The native six-scheme roster: Morgan r2/r4 with and without feature
    invariants, atom pairs and linear paths.
    """
    if length is None:
        length = getattr(settings, 'POEM_FINGERPRINT_LENGTH', DEFAULT_LENGTH)
    if max_path_len is None:
        max_path_len = getattr(settings, 'POEM_PATH_MAX_LENGTH', DEFAULT_MAX_PATH_LENGTH)
    return SchemeSet((
        FingerprintScheme('morgan2', SchemeKind.MORGAN, length, radius=2, use_chirality=True),
        FingerprintScheme('morgan4', SchemeKind.MORGAN, length, radius=4, use_chirality=True),
        FingerprintScheme('morgan2_features', SchemeKind.MORGAN, length, radius=2,
                          use_chirality=True, use_features=True),
        FingerprintScheme('morgan4_features', SchemeKind.MORGAN, length, radius=4,
                          use_chirality=True, use_features=True),
        FingerprintScheme('atom_pair', SchemeKind.ATOM_PAIR, length),
        FingerprintScheme('path', SchemeKind.PATH, length, max_path_len=max_path_len),
    ))


@dataclass(frozen=True)
class Fingerprint:
    scheme_id: str
    length: int
    packed: bytes

    def __post_init__(self):
        if len(self.packed) != (self.length + 7) // 8:
            raise ValueError(f"Fingerprint of {self.length} bits needs {(self.length + 7) // 8} bytes")

    @classmethod
    def from_bits(cls, scheme_id, length, on_bits):
        """Build a fingerprint from an iterable of set bit positions."""
        dense = np.zeros(length, dtype=np.uint8)
        positions = np.fromiter(on_bits, dtype=np.int64)
        if positions.size:
            if positions.min() < 0 or positions.max() >= length:
                raise ValueError(f"Bit position outside 0..{length - 1}")
            dense[positions] = 1
        return cls(scheme_id, length, np.packbits(dense, bitorder='big').tobytes())

    @classmethod
    def from_hex(cls, scheme_id, length, hex_bits):
        """
        Decode ``ceil(length/4)`` hex digits, MSB of the first digit = bit 0.

        Raises:
            FormatError: Wrong digit count, non-hex characters, or bits set
                beyond ``length``.
        """
        width = (length + 3) // 4
        hex_bits = hex_bits.strip()
        if hex_bits.lower().startswith('0x'):
            hex_bits = hex_bits[2:]
        if len(hex_bits) != width:
            raise FormatError(f"Expected {width} hex digits for {length} bits, got {len(hex_bits)}")
        try:
            raw = bytes.fromhex(hex_bits + ('0' if width % 2 else ''))
        except ValueError:
            raise FormatError(f"Invalid hex digits {hex_bits!r}") from None
        dense = np.unpackbits(np.frombuffer(raw, dtype=np.uint8), bitorder='big')
        if dense[length:].any():
            raise FormatError(f"Bits set beyond declared length {length}")
        return cls(scheme_id, length, np.packbits(dense[:length], bitorder='big').tobytes())

    @cached_property
    def array(self):
        """Packed bytes as a read-only ``uint8`` array."""
        return np.frombuffer(self.packed, dtype=np.uint8)

    @property
    def popcount(self):
        return int(np.bitwise_count(self.array).sum())

    @property
    def on_bits(self):
        dense = np.unpackbits(self.array, bitorder='big')[:self.length]
        return tuple(int(bit) for bit in np.flatnonzero(dense))

    def to_hex(self):
        return self.packed.hex()[:(self.length + 3) // 4]


def fold_fingerprint(fp, length):
    """OR-fold ``fp`` down to ``length`` bits (a power of two dividing fp.length)."""
    if not _is_power_of_two(length) or fp.length % length:
        raise ValueError(f"Cannot fold {fp.length} bits to {length}")
    dense = np.unpackbits(fp.array, bitorder='big')[:fp.length]
    folded = dense.reshape(-1, length).any(axis=0).astype(np.uint8)
    return Fingerprint(fp.scheme_id, length, np.packbits(folded, bitorder='big').tobytes())


# Atom invariants

def _atom_invariant(mol, index, use_chirality):
    atom = mol.atoms[index]
    invariant = [
        mol.degree(index),
        atom.atomic_number,
        atom.hydrogen_count,
        atom.formal_charge,
        atom.isotope or 0,
        int(index in mol.ring_atoms),
    ]
    if use_chirality:
        invariant.append(atom.chirality.value)
    return hash_ints(_MORGAN_SALT, 0, *invariant)


def feature_classes(mol, index):
    """
    Coarse pharmacophoric class bitmask of an atom: donor, acceptor,
    aromatic, halogen, positive, negative.
    """
    atom = mol.atoms[index]
    classes = 0
    if atom.element in ('N', 'O') and atom.hydrogen_count > 0:
        classes |= 1
    if atom.element == 'O' and atom.formal_charge <= 0:
        classes |= 2
    elif atom.element == 'N' and atom.formal_charge <= 0 and not (atom.aromatic and atom.hydrogen_count):
        classes |= 2
    if atom.aromatic:
        classes |= 4
    if atom.element in HALOGENS:
        classes |= 8
    if atom.formal_charge > 0:
        classes |= 16
    if atom.formal_charge < 0:
        classes |= 32
    return classes


def _feature_invariant(mol, index, use_chirality):
    invariant = [feature_classes(mol, index)]
    if use_chirality:
        invariant.append(mol.atoms[index].chirality.value)
    return hash_ints(_MORGAN_SALT, 1, *invariant)


def morgan_environments(mol, radius, use_chirality=True, use_features=False):
    """
    Environment hashes of every atom for layers ``0..radius``.

    Returns:
        list[set[int]]: One set of hashes per layer.
    """
    invariant = _feature_invariant if use_features else _atom_invariant
    current = [invariant(mol, index, use_chirality) for index in range(mol.atom_count)]
    layers = [set(current)]
    for layer in range(1, radius + 1):
        updated = []
        for index, neighbors in enumerate(mol.neighbors):
            environment = sorted((int(order), current[j]) for j, order in neighbors)
            flat = [value for pair in environment for value in pair]
            updated.append(hash_ints(_MORGAN_SALT, 2, layer, current[index], *flat))
        current = updated
        layers.append(set(current))
    return layers


def morgan_fingerprint(mol, radius, use_chirality=True, length=DEFAULT_LENGTH,
                       use_features=False, scheme_id=None):
    """
    Circular (ECFP-style) fingerprint.

    Args:
        mol (MolGraph): Parsed molecule.
        radius (int): Number of neighbourhood iterations.
        use_chirality (bool): Include the chirality tag in atom invariants.
        length (int): Folded length in bits (power of two).
        use_features (bool): Use coarse feature classes as atom invariants.
        scheme_id (str, optional): Id stamped on the result.

    Returns:
        Fingerprint: Folded fingerprint.
    """
    if scheme_id is None:
        scheme_id = f"morgan{radius}{'_features' if use_features else ''}"
    layers = morgan_environments(mol, radius, use_chirality, use_features)
    on_bits = {value % length for layer in layers for value in layer}
    return Fingerprint.from_bits(scheme_id, length, on_bits)


def _atom_pair_type(mol, index):
    atom = mol.atoms[index]
    pi_bonds = sum(
        1 if order is BondOrder.AROMATIC else int(order) - 1
        for _, order in mol.neighbors[index]
        if order is not BondOrder.SINGLE
    )
    return (atom.atomic_number, min(mol.degree(index), 7), int(atom.aromatic), pi_bonds)


def atom_pair_fingerprint(mol, length=DEFAULT_LENGTH, scheme_id='atom_pair'):
    """
    Atom-pair fingerprint over every unordered pair of atoms in the same
    fragment, keyed by both atom types and their topological distance.
    """
    types = [_atom_pair_type(mol, index) for index in range(mol.atom_count)]
    on_bits = set()
    for source, distances in nx.all_pairs_shortest_path_length(mol.graph):
        for target, distance in distances.items():
            if target <= source:
                continue
            first, second = sorted((types[source], types[target]))
            on_bits.add(hash_ints(_ATOM_PAIR_SALT, *first, *second, distance) % length)
    return Fingerprint.from_bits(scheme_id, length, on_bits)


def _path_code(mol, path):
    """Element/bond-order sequence of a path, independent of direction."""
    codes = []
    for position, index in enumerate(path):
        atom = mol.atoms[index]
        if position:
            codes.append(int(mol.bond_between(path[position - 1], index)))
        codes.append(atom.atomic_number * 2 + int(atom.aromatic))
    return min(tuple(codes), tuple(reversed(codes)))


def linear_paths(mol, max_path_len):
    """Yield every simple path of 1..max_path_len bonds exactly once."""
    def extend(path, visited):
        if len(path) > 1 and path[0] < path[-1]:
            yield tuple(path)
        if len(path) - 1 == max_path_len:
            return
        for neighbor, _ in mol.neighbors[path[-1]]:
            if neighbor not in visited:
                visited.add(neighbor)
                path.append(neighbor)
                yield from extend(path, visited)
                path.pop()
                visited.discard(neighbor)

    for start in range(mol.atom_count):
        yield from extend([start], {start})


def path_fingerprint(mol, max_path_len=DEFAULT_MAX_PATH_LENGTH, length=DEFAULT_LENGTH, scheme_id='path'):
    """Daylight-style fingerprint of linear bond paths up to ``max_path_len`` bonds."""
    on_bits = {
        hash_ints(_PATH_SALT, *_path_code(mol, path)) % length
        for path in linear_paths(mol, max_path_len)
    }
    return Fingerprint.from_bits(scheme_id, length, on_bits)


def compute_fingerprint(mol, scheme):
    """Fingerprint ``mol`` under one native scheme."""
    if scheme.kind is SchemeKind.MORGAN:
        return morgan_fingerprint(mol, scheme.radius, scheme.use_chirality, scheme.length,
                                  use_features=scheme.use_features, scheme_id=scheme.scheme_id)
    if scheme.kind is SchemeKind.ATOM_PAIR:
        return atom_pair_fingerprint(mol, scheme.length, scheme_id=scheme.scheme_id)
    if scheme.kind is SchemeKind.PATH:
        return path_fingerprint(mol, scheme.max_path_len, scheme.length, scheme_id=scheme.scheme_id)
    raise SchemeMismatch(f"Scheme {scheme.scheme_id} is external and cannot be computed from a structure")


def native_fingerprints(mol, scheme_set):
    """Fingerprints for every native scheme in ``scheme_set``, keyed by scheme id."""
    return {scheme.scheme_id: compute_fingerprint(mol, scheme) for scheme in scheme_set if scheme.is_native}


def _fingerprint_smiles(args):
    smiles, schemes = args
    mol = parse_smiles(smiles)
    return [compute_fingerprint(mol, scheme).packed for scheme in schemes]


def fingerprint_rows(smiles_list, schemes, workers=1):
    """
    Packed native fingerprints for many SMILES, in input order.

    Large batches are spread over a process pool; small ones run in-process.

    Returns:
        list[list[bytes]]: ``rows[i][k]`` is molecule i under ``schemes[k]``.
    """
    schemes = tuple(schemes)
    jobs = [(smiles, schemes) for smiles in smiles_list]
    min_rows = getattr(settings, 'POEM_PARALLEL_MIN_ROWS', 64)
    if workers <= 1 or len(jobs) < min_rows:
        return [_fingerprint_smiles(job) for job in jobs]
    logger.info(f"Fingerprinting {len(jobs)} molecules with {workers} worker processes")
    chunksize = max(1, len(jobs) // (workers * 8))
    with ProcessPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(_fingerprint_smiles, jobs, chunksize=chunksize))


# Tanimoto distances

def _check_same_scheme(a, b):
    if a.scheme_id != b.scheme_id or a.length != b.length:
        raise SchemeMismatch(
            f"Cannot compare {a.scheme_id} ({a.length} bits) with {b.scheme_id} ({b.length} bits)"
        )


def distance_from_counts(intersection, union):
    """1 - |a&b|/|a|b| elementwise; an empty union is distance 0."""
    intersection = np.asarray(intersection, dtype=np.int64)
    union = np.asarray(union, dtype=np.int64)
    safe_union = np.where(union == 0, 1, union)
    return np.where(union == 0, 0.0, 1.0 - intersection / safe_union)


def tanimoto_distance(a, b):
    """
    Tanimoto distance between two fingerprints of the same scheme.

    Raises:
        SchemeMismatch: If scheme ids or lengths differ.
    """
    _check_same_scheme(a, b)
    intersection = int(np.bitwise_count(a.array & b.array).sum())
    union = a.popcount + b.popcount - intersection
    return float(distance_from_counts(intersection, union))


def popcounts(matrix):
    """Row popcounts of a packed ``(M, bytes)`` matrix."""
    return np.bitwise_count(matrix).sum(axis=1, dtype=np.int64)


def tanimoto_distances(query, matrix, matrix_popcounts=None):
    """
    Distances from one packed query row to every row of a packed matrix.

    Args:
        query (np.ndarray): ``uint8`` array of shape ``(bytes,)``.
        matrix (np.ndarray): ``uint8`` array of shape ``(M, bytes)``.
        matrix_popcounts (np.ndarray, optional): Precomputed row popcounts.

    Returns:
        np.ndarray: ``float64`` distances of shape ``(M,)``.
    """
    if matrix_popcounts is None:
        matrix_popcounts = popcounts(matrix)
    intersection = np.bitwise_count(matrix & query).sum(axis=1, dtype=np.int64)
    union = matrix_popcounts + int(np.bitwise_count(query).sum()) - intersection
    return distance_from_counts(intersection, union)


def pairwise_distances(matrix, block_rows=32):
    """Full ``(M, M)`` Tanimoto distance matrix of a packed matrix."""
    counts = popcounts(matrix)
    size = matrix.shape[0]
    result = np.empty((size, size), dtype=np.float64)
    for start in range(0, size, block_rows):
        stop = min(start + block_rows, size)
        block = matrix[start:stop]
        intersection = np.bitwise_count(block[:, None, :] & matrix[None, :, :]).sum(axis=2, dtype=np.int64)
        union = counts[start:stop, None] + counts[None, :] - intersection
        result[start:stop] = distance_from_counts(intersection, union)
    return result


# External fingerprint files

def load_external_fingerprints(path, expected_keys=None):
    """
    Load an external fingerprint file.

    The first line is ``scheme_id,length``; every following line is
    ``molecule_key,hex_bits`` with exactly ``ceil(length/4)`` hex digits.

    Args:
        path (str or Path): File to read.
        expected_keys (iterable, optional): Dataset keys; when given, every
            key in the file must belong to the dataset.

    Returns:
        tuple: (SchemeSet with the single external scheme, dict mapping
        molecule key to Fingerprint).

    Raises:
        FormatError: Bad header, bad hex, duplicate keys or width mismatch.
        KeyMismatch: File rows that are not dataset rows.
    """
    path = Path(path)
    with open(path, 'r', encoding='utf-8', newline='') as handle:
        header = handle.readline().strip()
        parts = [part.strip() for part in header.split(',')]
        if len(parts) != 2 or not parts[0]:
            raise FormatError("Header must be 'scheme_id,length'", path=path, line=1)
        try:
            length = int(parts[1])
        except ValueError:
            raise FormatError(f"Invalid length {parts[1]!r}", path=path, line=1) from None
        if length <= 0:
            raise FormatError("Length must be positive", path=path, line=1)
        try:
            scheme = FingerprintScheme(parts[0], SchemeKind.EXTERNAL, length)
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=1) from None

        try:
            frame = pd.read_csv(handle, header=None, index_col=False, dtype=str, keep_default_na=False,
                                skip_blank_lines=True)
        except pd.errors.EmptyDataError:
            frame = pd.DataFrame(columns=[0, 1])
        except pd.errors.ParserError as exc:
            raise FormatError(f"Malformed fingerprint rows: {exc}", path=path) from None

    if frame.shape[1] != 2:
        raise FormatError(f"Rows need exactly 2 fields 'molecule_key,hex_bits', got {frame.shape[1]}", path=path,
                          line=2)
    frame.columns = ['key', 'hex_bits']

    fingerprints = {}
    for offset, (key, hex_bits) in enumerate(zip(frame['key'], frame['hex_bits'])):
        line = offset + 2
        key = key.strip()
        if not key or not isinstance(hex_bits, str) or not hex_bits.strip():
            raise FormatError("Row needs 'molecule_key,hex_bits'", path=path, line=line)
        if key in fingerprints:
            raise FormatError(f"Duplicate molecule key {key!r}", path=path, line=line)
        try:
            fingerprints[key] = Fingerprint.from_hex(scheme.scheme_id, length, hex_bits)
        except FormatError as exc:
            raise FormatError(exc.message, path=path, line=line) from None

    if expected_keys is not None:
        unknown = sorted(set(fingerprints) - set(expected_keys))
        if unknown:
            raise KeyMismatch(
                f"{len(unknown)} fingerprint rows have no dataset row (first: {unknown[0]!r})",
                path=path,
            )

    logger.info(f"Loaded {len(fingerprints)} external fingerprints for scheme {scheme.scheme_id} from {path}")
    return SchemeSet((scheme,)), fingerprints


def write_external_fingerprints(path, scheme_id, length, fingerprints):
    """
    Write fingerprints in the external format.

    Args:
        path (str or Path): Output file.
        scheme_id (str): Header scheme id.
        length (int): Header bit length; every fingerprint must match it.
        fingerprints (iterable): ``(molecule_key, Fingerprint)`` pairs in
            output order.
    """
    rows = []
    for key, fp in fingerprints:
        if fp.length != length:
            raise SchemeMismatch(f"Fingerprint for {key!r} has {fp.length} bits, expected {length}")
        rows.append((key, fp.to_hex()))
    frame = pd.DataFrame(rows, columns=['key', 'hex_bits'])
    with open(path, 'w', encoding='utf-8', newline='') as handle:
        handle.write(f"{scheme_id},{length}\n")
        frame.to_csv(handle, header=False, index=False, lineterminator='\n')
    logger.info(f"Wrote {len(rows)} fingerprints for scheme {scheme_id} to {path}")

