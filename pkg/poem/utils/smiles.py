"""
Parsing of a practical SMILES subset into molecular graphs.

Supported: organic-subset atoms, bracket atoms with isotope, chirality tag,
hydrogen count and charge, ring closures (0-9 and %nn), branches, the bond
symbols ``- = # : / \\``, lowercase aromatic atoms and dot-disconnected
fragments. Aromaticity is taken from the notation as written; no kekulization
or perception is attempted.
"""
import enum
import logging
import re
from dataclasses import dataclass
from functools import cached_property

import networkx as nx

from ..exceptions import UnparsableMolecule
from .hashing import hash_ints

logger = logging.getLogger(__name__)

# symbol: (atomic number, valences used for implicit hydrogens)
ELEMENTS = {
    'H': (1, (1,)),
    'Li': (3, ()),
    'Be': (4, ()),
    'B': (5, (3,)),
    'C': (6, (4,)),
    'N': (7, (3, 5)),
    'O': (8, (2,)),
    'F': (9, (1,)),
    'Na': (11, ()),
    'Mg': (12, ()),
    'Al': (13, ()),
    'Si': (14, (4,)),
    'P': (15, (3, 5)),
    'S': (16, (2, 4, 6)),
    'Cl': (17, (1,)),
    'K': (19, ()),
    'Ca': (20, ()),
    'Ti': (22, ()),
    'Cr': (24, ()),
    'Mn': (25, ()),
    'Fe': (26, ()),
    'Co': (27, ()),
    'Ni': (28, ()),
    'Cu': (29, ()),
    'Zn': (30, ()),
    'Ga': (31, ()),
    'Ge': (32, ()),
    'As': (33, (3, 5)),
    'Se': (34, (2, 4, 6)),
    'Br': (35, (1,)),
    'Sr': (38, ()),
    'Zr': (40, ()),
    'Mo': (42, ()),
    'Ru': (44, ()),
    'Rh': (45, ()),
    'Pd': (46, ()),
    'Ag': (47, ()),
    'Cd': (48, ()),
    'In': (49, ()),
    'Sn': (50, ()),
    'Sb': (51, ()),
    'Te': (52, (2, 4, 6)),
    'I': (53, (1,)),
    'Ba': (56, ()),
    'Gd': (64, ()),
    'W': (74, ()),
    'Pt': (78, ()),
    'Au': (79, ()),
    'Hg': (80, ()),
    'Tl': (81, ()),
    'Pb': (82, ()),
    'Bi': (83, ()),
}

ORGANIC_SUBSET = ('B', 'C', 'N', 'O', 'P', 'S', 'F', 'Cl', 'Br', 'I')

# lowercase spellings allowed for aromatic atoms
AROMATIC_SYMBOLS = {
    'b': 'B', 'c': 'C', 'n': 'N', 'o': 'O', 'p': 'P', 's': 'S',
    'se': 'Se', 'as': 'As', 'te': 'Te',
}

# Aromatic atoms of these elements contribute one extra valence unit
PI_CONTRIBUTORS = ('B', 'C', 'N', 'P')

_TOKEN_RE = re.compile(r"""
      (?P<bracket>\[[^\[\]]*\])
    | (?P<organic>Br|Cl|B|C|N|O|P|S|F|I|b|c|n|o|p|s)
    | (?P<ring>%\d\d|\d)
    | (?P<bond>[-=\#:/\\])
    | (?P<open>\()
    | (?P<close>\))
    | (?P<dot>\.)
""", re.VERBOSE)

_BRACKET_RE = re.compile(r"""
    ^\[
    (?P<isotope>\d+)?
    (?P<symbol>[A-Z][a-z]?|se|as|te|[bcnops])
    (?P<chirality>@@|@)?
    (?P<hcount>H\d*)?
    (?P<charge>\+\+|--|[+-]\d*)?
    (?::\d+)?
    \]$
""", re.VERBOSE)


class Chirality(enum.Enum):
    """Tetrahedral chirality tag as written; geometry is not interpreted."""
    NONE = 0
    CLOCKWISE = 1          # '@@'
    COUNTERCLOCKWISE = 2   # '@'

    def __str__(self):
        return self.name.lower()


class BondOrder(enum.IntEnum):
    SINGLE = 1
    DOUBLE = 2
    TRIPLE = 3
    AROMATIC = 4

    @property
    def valence(self):
        """Valence units consumed on each endpoint (aromatic bonds count 1)."""
        return 1 if self is BondOrder.AROMATIC else int(self)


BOND_SYMBOLS = {
    '-': BondOrder.SINGLE,
    '=': BondOrder.DOUBLE,
    '#': BondOrder.TRIPLE,
    ':': BondOrder.AROMATIC,
    '/': BondOrder.SINGLE,
    '\\': BondOrder.SINGLE,
}


@dataclass(frozen=True)
class Atom:
    element: str
    aromatic: bool = False
    formal_charge: int = 0
    # None for organic-subset atoms; brackets always state it (default 0)
    explicit_h_count: int | None = None
    isotope: int | None = None
    chirality: Chirality = Chirality.NONE
    implicit_h_count: int = 0

    @property
    def atomic_number(self):
        return ELEMENTS[self.element][0]

    @property
    def hydrogen_count(self):
        """Total attached hydrogens, whether written or implied."""
        if self.explicit_h_count is not None:
            return self.explicit_h_count
        return self.implicit_h_count


@dataclass(frozen=True)
class Bond:
    begin: int
    end: int
    order: BondOrder = BondOrder.SINGLE
    # '/' or '\\' when written with a directional single bond
    direction: str | None = None


@dataclass(frozen=True)
class MolGraph:
    """An immutable molecular graph parsed from a SMILES string."""
    atoms: tuple
    bonds: tuple
    source: str = ''

    @property
    def atom_count(self):
        return len(self.atoms)

    @property
    def bond_count(self):
        return len(self.bonds)

    @cached_property
    def neighbors(self):
        """Per atom, a sorted tuple of ``(neighbor index, BondOrder)`` pairs."""
        adjacency = [[] for _ in self.atoms]
        for bond in self.bonds:
            adjacency[bond.begin].append((bond.end, bond.order))
            adjacency[bond.end].append((bond.begin, bond.order))
        return tuple(tuple(sorted(entries)) for entries in adjacency)

    @cached_property
    def graph(self):
        """The molecule as a ``networkx.Graph`` (nodes are atom indices)."""
        graph = nx.Graph()
        for index, atom in enumerate(self.atoms):
            graph.add_node(index, element=atom.element, aromatic=atom.aromatic)
        for bond in self.bonds:
            graph.add_edge(bond.begin, bond.end, order=bond.order)
        return graph

    @cached_property
    def fragment_count(self):
        return nx.number_connected_components(self.graph)

    @property
    def is_multi_fragment(self):
        return self.fragment_count > 1

    @cached_property
    def rings(self):
        """Smallest set of cycles spanning the ring system, as sorted atom tuples."""
        cycles = (tuple(sorted(cycle)) for cycle in nx.cycle_basis(self.graph))
        return tuple(sorted(cycles, key=lambda ring: (len(ring), ring)))

    @cached_property
    def ring_atoms(self):
        return frozenset(index for ring in self.rings for index in ring)

    def degree(self, index):
        return len(self.neighbors[index])

    def bond_between(self, a, b):
        for neighbor, order in self.neighbors[a]:
            if neighbor == b:
                return order
        return None


def _parse_bracket(token, smiles, position):
    match = _BRACKET_RE.match(token)
    if not match:
        raise UnparsableMolecule(f"Malformed bracket atom {token}", smiles=smiles, position=position)

    symbol = match.group('symbol')
    aromatic = symbol in AROMATIC_SYMBOLS
    element = AROMATIC_SYMBOLS.get(symbol, symbol)
    if element not in ELEMENTS:
        raise UnparsableMolecule(f"Unknown element symbol {symbol!r}", smiles=smiles, position=position)

    hcount = match.group('hcount')
    if hcount is None:
        explicit_h = 0
    else:
        explicit_h = int(hcount[1:]) if len(hcount) > 1 else 1

    charge_text = match.group('charge')
    if not charge_text:
        charge = 0
    elif charge_text in ('++', '--'):
        charge = 2 if charge_text == '++' else -2
    else:
        magnitude = int(charge_text[1:]) if len(charge_text) > 1 else 1
        charge = magnitude if charge_text[0] == '+' else -magnitude

    chirality = {
        None: Chirality.NONE,
        '@': Chirality.COUNTERCLOCKWISE,
        '@@': Chirality.CLOCKWISE,
    }[match.group('chirality')]

    isotope = match.group('isotope')
    return {
        'element': element,
        'aromatic': aromatic,
        'formal_charge': charge,
        'explicit_h_count': explicit_h,
        'isotope': int(isotope) if isotope else None,
        'chirality': chirality,
    }


def _parse_organic(token):
    aromatic = token.islower()
    return {
        'element': AROMATIC_SYMBOLS.get(token, token),
        'aromatic': aromatic,
    }


def _implicit_hydrogens(fields, used, smiles, index):
    """Fill the lowest standard valence that accommodates the bonds."""
    element = fields['element']
    valences = ELEMENTS[element][1]
    if fields['aromatic'] and element in PI_CONTRIBUTORS and used + 1 <= valences[0]:
        used += 1
    for valence in valences:
        if valence >= used:
            return valence - used
    raise UnparsableMolecule(
        f"Valence of {element} atom {index} cannot be satisfied ({used} bonds)",
        smiles=smiles,
    )


def parse_smiles(smiles):
    """
    Parse a SMILES string into a MolGraph.

    Args:
        smiles (str): SMILES text from the supported subset.

    Returns:
        MolGraph: Graph with ring closures resolved and implicit hydrogens
        filled in for organic-subset atoms.

    Raises:
        UnparsableMolecule: On unknown symbols, unclosed rings or branches,
            unmatched brackets or impossible valences.
    """
    if smiles is None or not str(smiles).strip():
        raise UnparsableMolecule("Empty SMILES string")
    smiles = str(smiles).strip()

    atoms = []
    bonds = []
    bonded_pairs = set()
    anchor = None
    pending = None
    branch_stack = []
    open_rings = {}
    previous_kind = None

    def add_bond(a, b, symbol, position):
        if a == b:
            raise UnparsableMolecule("Ring closure bonds an atom to itself", smiles=smiles, position=position)
        pair = (min(a, b), max(a, b))
        if pair in bonded_pairs:
            raise UnparsableMolecule(f"Duplicate bond between atoms {a} and {b}", smiles=smiles, position=position)
        if symbol is None:
            both_aromatic = atoms[a]['aromatic'] and atoms[b]['aromatic']
            order = BondOrder.AROMATIC if both_aromatic else BondOrder.SINGLE
            direction = None
        else:
            order = BOND_SYMBOLS[symbol]
            direction = symbol if symbol in '/\\' else None
        bonded_pairs.add(pair)
        bonds.append(Bond(begin=a, end=b, order=order, direction=direction))

    position = 0
    while position < len(smiles):
        match = _TOKEN_RE.match(smiles, position)
        if match is None:
            char = smiles[position]
            if char == '[':
                raise UnparsableMolecule("Unmatched '['", smiles=smiles, position=position)
            raise UnparsableMolecule(f"Unknown symbol {char!r}", smiles=smiles, position=position)
        kind = match.lastgroup
        token = match.group()

        if kind in ('bracket', 'organic'):
            if kind == 'bracket':
                fields = _parse_bracket(token, smiles, position)
            else:
                fields = _parse_organic(token)
            atoms.append(fields)
            index = len(atoms) - 1
            if anchor is not None:
                add_bond(anchor, index, pending, position)
            elif pending is not None:
                raise UnparsableMolecule("Bond symbol without a preceding atom", smiles=smiles, position=position)
            pending = None
            anchor = index
        elif kind == 'ring':
            if anchor is None:
                raise UnparsableMolecule("Ring closure before any atom", smiles=smiles, position=position)
            number = int(token.lstrip('%'))
            if number in open_rings:
                other, opening_symbol = open_rings.pop(number)
                symbol = pending if pending is not None else opening_symbol
                if pending is not None and opening_symbol is not None:
                    if BOND_SYMBOLS[pending] != BOND_SYMBOLS[opening_symbol]:
                        raise UnparsableMolecule(
                            f"Conflicting bond orders for ring closure {number}",
                            smiles=smiles, position=position,
                        )
                add_bond(anchor, other, symbol, position)
            else:
                open_rings[number] = (anchor, pending)
            pending = None
        elif kind == 'bond':
            if anchor is None or pending is not None:
                raise UnparsableMolecule(f"Misplaced bond symbol {token!r}", smiles=smiles, position=position)
            pending = token
        elif kind == 'open':
            if anchor is None or pending is not None:
                raise UnparsableMolecule("Misplaced '('", smiles=smiles, position=position)
            branch_stack.append(anchor)
        elif kind == 'close':
            if not branch_stack:
                raise UnparsableMolecule("Unmatched ')'", smiles=smiles, position=position)
            if pending is not None or previous_kind == 'open':
                raise UnparsableMolecule("Empty or dangling branch", smiles=smiles, position=position)
            anchor = branch_stack.pop()
        elif kind == 'dot':
            if anchor is None or pending is not None or branch_stack:
                raise UnparsableMolecule("Misplaced '.'", smiles=smiles, position=position)
            anchor = None

        previous_kind = kind
        position = match.end()

    if pending is not None:
        raise UnparsableMolecule("SMILES ends with a bond symbol", smiles=smiles)
    if branch_stack:
        raise UnparsableMolecule("Unclosed '('", smiles=smiles)
    if open_rings:
        digits = ', '.join(str(number) for number in sorted(open_rings))
        raise UnparsableMolecule(f"Unclosed ring closure {digits}", smiles=smiles)
    if anchor is None:
        raise UnparsableMolecule("SMILES ends with '.'", smiles=smiles)

    used = [0] * len(atoms)
    for bond in bonds:
        used[bond.begin] += bond.order.valence
        used[bond.end] += bond.order.valence

    finished = []
    for index, fields in enumerate(atoms):
        if fields.get('explicit_h_count') is None:
            fields['implicit_h_count'] = _implicit_hydrogens(fields, used[index], smiles, index)
        finished.append(Atom(**fields))

    mol = MolGraph(atoms=tuple(finished), bonds=tuple(bonds), source=smiles)
    logger.debug(f"Parsed {smiles!r}: {mol.atom_count} atoms, {mol.bond_count} bonds")
    return mol


def graph_invariant_key(mol):
    """
    Compute an atom-order independent 64-bit key for de-duplication.

    Atom labels start from (element, charge, aromaticity) and are refined from
    the sorted (bond order, neighbor label) multisets until the number of
    distinct labels stops growing. The key hashes the final label multiset
    with the atom, bond and fragment counts and the ring sizes of a minimum
    cycle basis, which separates ring systems that refinement alone merges
    (decalin and bicyclopentyl). Stereo tags are not part of the key, and
    regular graphs with matching ring sizes can still share a key.

    Args:
        mol (MolGraph): Parsed molecule.

    Returns:
        int: Unsigned 64-bit key.
    """
    labels = [
        hash_ints(1, atom.atomic_number, atom.formal_charge, int(atom.aromatic))
        for atom in mol.atoms
    ]
    class_count = len(set(labels))

    for _ in range(mol.atom_count):
        refined = []
        for index, neighbors in enumerate(mol.neighbors):
            environment = sorted((int(order), labels[j]) for j, order in neighbors)
            flat = [value for pair in environment for value in pair]
            refined.append(hash_ints(2, labels[index], *flat))
        labels = refined
        refined_count = len(set(labels))
        if refined_count == class_count:
            break
        class_count = refined_count

    ring_sizes = sorted(len(cycle) for cycle in nx.minimum_cycle_basis(mol.graph))
    rings = hash_ints(4, mol.fragment_count, len(ring_sizes), *ring_sizes)
    return hash_ints(3, mol.atom_count, mol.bond_count, rings, *sorted(labels))
