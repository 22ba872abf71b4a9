import re

import numpy as np
from django.test import SimpleTestCase

from ..exceptions import UnparsableMolecule
from ..utils.hashing import hash_ints
from ..utils.smiles import BondOrder, Chirality, graph_invariant_key, parse_smiles

# SMILES for the same molecule written with different atom orders
PERMUTATION_CLASSES = [
    ['CCO', 'OCC', 'C(O)C'],
    ['CC(=O)O', 'OC(C)=O', 'O=C(O)C', 'C(C)(=O)O'],
    ['c1ccccc1O', 'Oc1ccccc1', 'c1cc(O)ccc1'],
    ['CC(C)N', 'NC(C)C', 'C(C)(C)N'],
    ['C1CCNCC1', 'N1CCCCC1', 'C1CNCCC1'],
    ['CCN(CC)CC', 'N(CC)(CC)CC', 'C(C)N(CC)CC'],
    ['c1ccncc1', 'n1ccccc1', 'c1cnccc1'],
    ['ClCCBr', 'BrCCCl', 'C(Cl)CBr'],
]

CORPUS = [
    'C', 'CC', 'CCO', 'CCN', 'C=C', 'C#N', 'CC(=O)O', 'c1ccccc1', 'c1ccncc1', 'c1cc[nH]c1',
    'C1CC1', 'C1CCCCC1', 'CC(C)(C)O', 'O=C1CCCCC1', 'c1ccc2ccccc2c1', 'CC[C@H](N)C(=O)O',
    'C[C@@H](O)c1ccccc1', '[Na+].[Cl-]', 'C/C=C/C', 'F/C=C\\F', 'CC(=O)Nc1ccc(O)cc1',
    'CN1CCC[C@H]1c1cccnc1', 'OC(=O)c1ccccc1OC(C)=O', '[13CH4]', 'C%10CCCCC%10', 'S(=O)(=O)(O)O',
    'P(=O)(O)(O)O', 'c1ccsc1', 'c1ccoc1', 'ClC(Cl)(Cl)Cl', 'BrC1=CC=CC=C1', '[NH4+]', 'C[N+](C)(C)C',
    'OCC(O)CO', 'CC(C)Cc1ccc(cc1)C(C)C(=O)O',
]

_ATOM_TOKEN = re.compile(r'\[[^\]]*\]|Br|Cl|[BCNOPSFI]|[bcnops]')


class ParseSmilesTestCase(SimpleTestCase):
    """Parsing of the supported SMILES subset."""

    def test_ethanol(self):
        mol = parse_smiles('CCO')
        self.assertEqual([atom.element for atom in mol.atoms], ['C', 'C', 'O'])
        self.assertEqual(mol.bond_count, 2)
        self.assertTrue(all(bond.order is BondOrder.SINGLE for bond in mol.bonds))
        self.assertEqual([atom.hydrogen_count for atom in mol.atoms], [3, 2, 1])

    def test_benzene(self):
        mol = parse_smiles('c1ccccc1')
        self.assertEqual(mol.atom_count, 6)
        self.assertTrue(all(atom.aromatic for atom in mol.atoms))
        self.assertEqual(mol.bond_count, 6)
        self.assertTrue(all(bond.order is BondOrder.AROMATIC for bond in mol.bonds))
        self.assertEqual(len(mol.rings), 1)
        self.assertEqual([atom.hydrogen_count for atom in mol.atoms], [1] * 6)

    def test_rejected_inputs(self):
        """Malformed strings raise UnparsableMolecule."""
        for smiles in ['', '   ', 'C1CC', 'C(C', 'CC)', '[CH3', 'C[Xx]C', 'CQ', 'C=', 'C(=)C', '.C',
                       'C..C', 'C1CC1C1', 'C(C)(C)(C)(C)C']:
            with self.subTest(smiles=smiles):
                with self.assertRaises(UnparsableMolecule):
                    parse_smiles(smiles)

    def test_unclosed_ring_message(self):
        with self.assertRaisesRegex(UnparsableMolecule, 'Unclosed ring closure 1'):
            parse_smiles('C1CC')

    def test_bracket_atoms(self):
        mol = parse_smiles('[13CH4]')
        self.assertEqual(mol.atoms[0].isotope, 13)
        self.assertEqual(mol.atoms[0].hydrogen_count, 4)

        mol = parse_smiles('C[N+](C)(C)C')
        self.assertEqual(mol.atoms[1].formal_charge, 1)
        self.assertEqual(mol.atoms[1].hydrogen_count, 0)

        mol = parse_smiles('[O-]C')
        self.assertEqual(mol.atoms[0].formal_charge, -1)

        mol = parse_smiles('c1cc[nH]c1')
        self.assertTrue(mol.atoms[3].aromatic)
        self.assertEqual(mol.atoms[3].hydrogen_count, 1)

    def test_chirality_and_directional_bonds(self):
        mol = parse_smiles('C[C@H](N)O')
        self.assertIs(mol.atoms[1].chirality, Chirality.COUNTERCLOCKWISE)
        mol = parse_smiles('C[C@@H](N)O')
        self.assertIs(mol.atoms[1].chirality, Chirality.CLOCKWISE)

        mol = parse_smiles('F/C=C\\F')
        self.assertEqual([bond.direction for bond in mol.bonds], ['/', None, '\\'])
        self.assertEqual(mol.bonds[1].order, BondOrder.DOUBLE)

    def test_fragments(self):
        mol = parse_smiles('[Na+].[Cl-]')
        self.assertEqual(mol.atom_count, 2)
        self.assertEqual(mol.bond_count, 0)
        self.assertTrue(mol.is_multi_fragment)
        self.assertFalse(parse_smiles('CCO').is_multi_fragment)

    def test_two_digit_ring_closure(self):
        mol = parse_smiles('C%10CCCCC%10')
        self.assertEqual(mol.bond_count, 6)
        self.assertEqual(len(mol.rings), 1)

    def test_hypervalent_atoms(self):
        self.assertEqual(parse_smiles('S(=O)(=O)(O)O').atoms[0].hydrogen_count, 0)
        self.assertEqual(parse_smiles('P(=O)(O)(O)O').atoms[0].hydrogen_count, 0)

    def test_deterministic(self):
        for smiles in CORPUS:
            with self.subTest(smiles=smiles):
                self.assertEqual(parse_smiles(smiles), parse_smiles(smiles))

    def test_atom_and_bond_counts(self):
        """Heavy atoms equal atom tokens; bonds equal tokens - 1 + ring closures."""
        for smiles in CORPUS:
            if '.' in smiles:
                continue
            with self.subTest(smiles=smiles):
                mol = parse_smiles(smiles)
                tokens = _ATOM_TOKEN.findall(smiles)
                closures = len(re.findall(r'%\d\d|(?<![\[\d%])\d', re.sub(r'\[[^\]]*\]', '', smiles))) // 2
                self.assertEqual(mol.atom_count, len(tokens))
                self.assertEqual(mol.bond_count, len(tokens) - 1 + closures)


class GraphInvariantKeyTestCase(SimpleTestCase):

    def test_reverse_order_equal(self):
        self.assertEqual(graph_invariant_key(parse_smiles('CCO')), graph_invariant_key(parse_smiles('OCC')))

    def test_different_element_differs(self):
        self.assertNotEqual(graph_invariant_key(parse_smiles('CCO')), graph_invariant_key(parse_smiles('CCN')))

    def test_permutation_classes(self):
        """Every spelling in a class gets one key; different classes get different keys."""
        class_keys = []
        for spellings in PERMUTATION_CLASSES:
            keys = {graph_invariant_key(parse_smiles(smiles)) for smiles in spellings}
            with self.subTest(spellings=spellings):
                self.assertEqual(len(keys), 1)
            class_keys.append(keys.pop())
        self.assertEqual(len(set(class_keys)), len(PERMUTATION_CLASSES))

    def test_ignores_stereo_tags(self):
        self.assertEqual(graph_invariant_key(parse_smiles('C[C@H](N)O')),
                         graph_invariant_key(parse_smiles('C[C@@H](N)O')))

    def test_key_is_64_bit(self):
        for smiles in CORPUS:
            key = graph_invariant_key(parse_smiles(smiles))
            self.assertTrue(0 <= key < 2 ** 64)

    def test_ring_systems_with_equal_refinement_differ(self):
        pairs = [
            ('C1CCC2CCCCC2C1', 'C1CCC(C1)C1CCCC1'),
            ('C1CCCCC1', 'C1CC1.C1CC1'),
        ]
        for first, second in pairs:
            with self.subTest(first=first, second=second):
                self.assertNotEqual(graph_invariant_key(parse_smiles(first)),
                                    graph_invariant_key(parse_smiles(second)))

    def test_fused_rings_in_any_order(self):
        keys = {graph_invariant_key(parse_smiles(smiles))
                for smiles in ('C1CCC2CCCCC2C1', 'C1CC2CCCCC2CC1', 'C12CCCCC1CCCC2')}
        self.assertEqual(len(keys), 1)

    def test_corpus_has_no_collisions(self):
        keys = [graph_invariant_key(parse_smiles(smiles)) for smiles in CORPUS]
        self.assertEqual(len(set(keys)), len(CORPUS))


class HashIntsTestCase(SimpleTestCase):

    def test_stable_and_sensitive(self):
        self.assertEqual(hash_ints(1, 2, 3), hash_ints(1, 2, 3))
        self.assertNotEqual(hash_ints(1, 2, 3), hash_ints(3, 2, 1))
        self.assertNotEqual(hash_ints(1), hash_ints(1, 0))

    def test_accepts_previous_hashes(self):
        """Unsigned 64-bit outputs can be fed back in."""
        rng = np.random.default_rng(7)
        for value in rng.integers(0, 2 ** 63, size=20, dtype=np.int64):
            first = hash_ints(int(value))
            self.assertTrue(0 <= hash_ints(first, first) < 2 ** 64)
