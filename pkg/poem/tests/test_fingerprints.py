import tempfile
from pathlib import Path

import numpy as np
from django.test import SimpleTestCase, override_settings

from ..exceptions import FormatError, KeyMismatch, SchemeMismatch, UnknownScheme
from ..utils.fingerprints import (
    Fingerprint,
    FingerprintScheme,
    SchemeKind,
    atom_pair_fingerprint,
    compute_fingerprint,
    default_scheme_set,
    fingerprint_rows,
    fold_fingerprint,
    linear_paths,
    load_external_fingerprints,
    morgan_fingerprint,
    pairwise_distances,
    path_fingerprint,
    popcounts,
    tanimoto_distance,
    tanimoto_distances,
    write_external_fingerprints,
)
from ..utils.smiles import parse_smiles
from .test_smiles import CORPUS


def random_fingerprint(rng, length=64, scheme_id='x', density=0.3):
    dense = (rng.random(length) < density).astype(np.uint8)
    return Fingerprint(scheme_id, length, np.packbits(dense, bitorder='big').tobytes())


class FingerprintSchemeTestCase(SimpleTestCase):

    def test_native_length_must_be_power_of_two(self):
        with self.assertRaises(ValueError):
            FingerprintScheme('m', SchemeKind.MORGAN, 1000, radius=2)
        FingerprintScheme('ext', SchemeKind.EXTERNAL, 1000)

    def test_default_roster(self):
        schemes = default_scheme_set(length=1024)
        self.assertEqual(schemes.ids, ('morgan2', 'morgan4', 'morgan2_features', 'morgan4_features',
                                       'atom_pair', 'path'))
        self.assertTrue(all(scheme.length == 1024 for scheme in schemes))
        self.assertTrue(schemes.has_native)
        self.assertEqual(schemes.external, ())

    def test_dict_roundtrip(self):
        for scheme in default_scheme_set():
            self.assertEqual(FingerprintScheme.from_dict(scheme.to_dict()), scheme)

    def test_unknown_scheme(self):
        with self.assertRaises(UnknownScheme):
            default_scheme_set().index('maccs')

    def test_restrict_keeps_set_order(self):
        restricted = default_scheme_set().restrict(['path', 'morgan2'])
        self.assertEqual(restricted.ids, ('morgan2', 'path'))


class NativeFingerprintTestCase(SimpleTestCase):

    def test_methane_has_bits(self):
        self.assertGreaterEqual(morgan_fingerprint(parse_smiles('C'), 2).popcount, 1)

    def test_larger_radius_is_superset(self):
        for smiles in CORPUS:
            mol = parse_smiles(smiles)
            with self.subTest(smiles=smiles):
                small = set(morgan_fingerprint(mol, 2).on_bits)
                large = set(morgan_fingerprint(mol, 4).on_bits)
                self.assertLessEqual(small, large)

    def test_chirality_sensitivity(self):
        left, right = parse_smiles('C[C@H](N)O'), parse_smiles('C[C@@H](N)O')
        self.assertNotEqual(morgan_fingerprint(left, 2, use_chirality=True),
                            morgan_fingerprint(right, 2, use_chirality=True))
        self.assertEqual(morgan_fingerprint(left, 2, use_chirality=False),
                         morgan_fingerprint(right, 2, use_chirality=False))

    def test_feature_invariants_merge_similar_atoms(self):
        """Chlorine and bromine share a feature class, so feature fingerprints agree."""
        chloro, bromo = parse_smiles('CCCl'), parse_smiles('CCBr')
        self.assertEqual(morgan_fingerprint(chloro, 2, use_features=True).packed,
                         morgan_fingerprint(bromo, 2, use_features=True).packed)
        self.assertNotEqual(morgan_fingerprint(chloro, 2).packed, morgan_fingerprint(bromo, 2).packed)

    def test_atom_pair_counts(self):
        self.assertEqual(atom_pair_fingerprint(parse_smiles('CC')).popcount, 1)
        self.assertLessEqual(atom_pair_fingerprint(parse_smiles('CCO')).popcount, 3)
        self.assertEqual(atom_pair_fingerprint(parse_smiles('C')).popcount, 0)

    def test_atom_pairs_skip_other_fragments(self):
        self.assertEqual(atom_pair_fingerprint(parse_smiles('[Na+].[Cl-]')).popcount, 0)

    def test_path_counts(self):
        self.assertEqual(path_fingerprint(parse_smiles('CC')).popcount, 1)
        butane = parse_smiles('CCCC')
        self.assertEqual(len(list(linear_paths(butane, 2))), 5)
        self.assertLessEqual(path_fingerprint(butane, max_path_len=2).popcount, 5)
        self.assertEqual(path_fingerprint(parse_smiles('C')).popcount, 0)

    def test_ring_paths_listed_once(self):
        paths = list(linear_paths(parse_smiles('C1CC1'), 2))
        self.assertEqual(len(paths), len(set(paths)))
        self.assertEqual(len(paths), 6)

    def test_atom_order_independence(self):
        """Each native scheme gives the same bits for differently ordered SMILES."""
        schemes = default_scheme_set(length=1024)
        for first, second in [('CCO', 'OCC'), ('c1ccccc1O', 'Oc1ccccc1'), ('CC(=O)O', 'OC(C)=O')]:
            for scheme in schemes:
                with self.subTest(pair=(first, second), scheme=scheme.scheme_id):
                    self.assertEqual(compute_fingerprint(parse_smiles(first), scheme).packed,
                                     compute_fingerprint(parse_smiles(second), scheme).packed)

    def test_deterministic(self):
        schemes = default_scheme_set(length=512)
        first = fingerprint_rows(CORPUS, schemes)
        second = fingerprint_rows(CORPUS, schemes)
        self.assertEqual(first, second)
        self.assertEqual(len(first), len(CORPUS))
        self.assertTrue(all(len(packed) == 64 for row in first for packed in row))

    @override_settings(POEM_PARALLEL_MIN_ROWS=4)
    def test_process_pool_matches_serial(self):
        schemes = default_scheme_set(length=256)
        smiles = CORPUS[:12]
        self.assertEqual(fingerprint_rows(smiles, schemes, workers=2), fingerprint_rows(smiles, schemes))

    def test_external_scheme_not_computable(self):
        with self.assertRaises(SchemeMismatch):
            compute_fingerprint(parse_smiles('CC'), FingerprintScheme('ext', SchemeKind.EXTERNAL, 16))


class TanimotoTestCase(SimpleTestCase):

    def test_worked_example(self):
        a = Fingerprint.from_hex('x', 4, 'e')
        b = Fingerprint.from_hex('x', 4, '6')
        self.assertAlmostEqual(tanimoto_distance(a, b), 1 / 3)

    def test_identity_disjoint_and_empty(self):
        a = Fingerprint.from_bits('x', 8, [0, 1])
        b = Fingerprint.from_bits('x', 8, [4, 5])
        empty = Fingerprint.from_bits('x', 8, [])
        self.assertEqual(tanimoto_distance(a, a), 0.0)
        self.assertEqual(tanimoto_distance(a, b), 1.0)
        self.assertEqual(tanimoto_distance(empty, empty), 0.0)
        self.assertEqual(tanimoto_distance(a, empty), 1.0)

    def test_scheme_mismatch(self):
        with self.assertRaises(SchemeMismatch):
            tanimoto_distance(Fingerprint.from_bits('x', 8, [1]), Fingerprint.from_bits('y', 8, [1]))
        with self.assertRaises(SchemeMismatch):
            tanimoto_distance(Fingerprint.from_bits('x', 8, [1]), Fingerprint.from_bits('x', 16, [1]))

    def test_symmetric_and_bounded(self):
        rng = np.random.default_rng(3)
        for _ in range(200):
            a, b = random_fingerprint(rng), random_fingerprint(rng)
            distance = tanimoto_distance(a, b)
            self.assertEqual(distance, tanimoto_distance(b, a))
            self.assertTrue(0.0 <= distance <= 1.0)

    def test_vectorised_matches_scalar(self):
        rng = np.random.default_rng(5)
        fps = [random_fingerprint(rng, length=100) for _ in range(30)]
        matrix = np.stack([fp.array for fp in fps])
        pairwise = pairwise_distances(matrix, block_rows=7)
        for i, query in enumerate(fps):
            row = tanimoto_distances(query.array, matrix, popcounts(matrix))
            for j, other in enumerate(fps):
                expected = tanimoto_distance(query, other)
                self.assertEqual(row[j], expected)
                self.assertEqual(pairwise[i, j], expected)

    def test_fold_keeps_identical_molecules_together(self):
        mol = parse_smiles('CC(=O)Nc1ccc(O)cc1')
        fp = morgan_fingerprint(mol, 2, length=2048)
        folded = fold_fingerprint(fp, 256)
        self.assertEqual(tanimoto_distance(folded, fold_fingerprint(fp, 256)), 0.0)
        self.assertLessEqual(folded.popcount, fp.popcount)
        self.assertEqual({bit % 256 for bit in fp.on_bits}, set(folded.on_bits))

    def test_fold_rejects_bad_length(self):
        with self.assertRaises(ValueError):
            fold_fingerprint(Fingerprint.from_bits('x', 64, [1]), 48)


class HexTestCase(SimpleTestCase):

    def test_prefix_and_popcount(self):
        fp = Fingerprint.from_hex('x', 16, '0xF0F0')
        self.assertEqual(fp.popcount, 8)
        self.assertEqual(fp.on_bits, (0, 1, 2, 3, 8, 9, 10, 11))
        self.assertEqual(fp.to_hex(), 'f0f0')

    def test_odd_digit_count(self):
        fp = Fingerprint.from_hex('x', 12, 'a01')
        self.assertEqual(fp.on_bits, (0, 2, 11))
        self.assertEqual(fp.to_hex(), 'a01')

    def test_bits_beyond_length(self):
        with self.assertRaises(FormatError):
            Fingerprint.from_hex('x', 3, 'f')
        Fingerprint.from_hex('x', 3, 'e')

    def test_wrong_width_and_characters(self):
        for text in ['fff', 'f', '', 'zz']:
            with self.subTest(text=text):
                with self.assertRaises(FormatError):
                    Fingerprint.from_hex('x', 8, text)


class ExternalFileTestCase(SimpleTestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, name, text):
        path = self.dir / name
        path.write_text(text, encoding='utf-8')
        return path

    def test_load(self):
        path = self.write('maccs.csv', 'maccs,12\nm1,a01\nm2,0x000\n')
        schemes, fps = load_external_fingerprints(path)
        self.assertEqual(schemes.ids, ('maccs',))
        self.assertEqual(schemes[0].length, 12)
        self.assertFalse(schemes[0].is_native)
        self.assertEqual(fps['m1'].on_bits, (0, 2, 11))
        self.assertEqual(fps['m2'].popcount, 0)

    def test_write_then_load(self):
        rng = np.random.default_rng(11)
        fps = [(f"k{index}", random_fingerprint(rng, length=20, scheme_id='ext')) for index in range(5)]
        path = self.dir / 'ext.csv'
        write_external_fingerprints(path, 'ext', 20, fps)
        _, loaded = load_external_fingerprints(path)
        self.assertEqual(list(loaded), [key for key, _ in fps])
        for key, fp in fps:
            self.assertEqual(loaded[key].packed, fp.packed)

    def test_header_only_file(self):
        _, fps = load_external_fingerprints(self.write('empty.csv', 'ext,8\n'))
        self.assertEqual(fps, {})

    def test_errors_carry_line_numbers(self):
        cases = {
            'bad header': ('ext\nm1,ff\n', 1),
            'bad length': ('ext,abc\nm1,ff\n', 1),
            'too long': ('ext,8\nm1,ff\nm2,fff\n', 3),
            'duplicate': ('ext,8\nm1,ff\nm1,00\n', 3),
            'empty hex': ('ext,8\nm1,ff\nm2,\n', 3),
        }
        for name, (text, line) in cases.items():
            with self.subTest(case=name):
                with self.assertRaises(FormatError) as ctx:
                    load_external_fingerprints(self.write('bad.csv', text))
                self.assertEqual(ctx.exception.line, line)

    def test_field_count_is_checked(self):
        with self.assertRaises(FormatError) as ctx:
            load_external_fingerprints(self.write('three.csv', 'ext,8\nm1,ff,00\nm2,00,ff\n'))
        self.assertEqual(ctx.exception.line, 2)
        for name, text in {'later row': 'ext,8\nm1,ff\nm2,00,ff\n', 'key only': 'ext,8\nm1\nm2\n'}.items():
            with self.subTest(case=name):
                with self.assertRaises(FormatError):
                    load_external_fingerprints(self.write('bad.csv', text))

    def test_unknown_keys(self):
        path = self.write('ext.csv', 'ext,8\nm1,ff\nm9,00\n')
        load_external_fingerprints(path, expected_keys=['m1', 'm9', 'm2'])
        with self.assertRaises(KeyMismatch):
            load_external_fingerprints(path, expected_keys=['m1', 'm2'])
