import tempfile
from pathlib import Path

from django.test import SimpleTestCase

from ..exceptions import (
    EmptyDataset,
    FormatError,
    InvariantViolation,
    MissingClass,
    MissingExternalFingerprint,
    UnknownScheme,
)
from ..utils.datasets import (
    CleaningReport,
    SchemaConfig,
    build_library,
    clean,
    compose_scheme_set,
    load_csv,
    read_molecule_table,
)
from ..utils.fingerprints import Fingerprint, FingerprintScheme, SchemeKind, SchemeSet
from ..utils.library import LabelKind, dump_library


class DatasetFileMixin:

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def write(self, text, name='data.csv', newline='\n'):
        path = self.dir / name
        with open(path, 'w', encoding='utf-8', newline='') as handle:
            handle.write(text.replace('\n', newline))
        return path


class LoadCsvTestCase(DatasetFileMixin, SimpleTestCase):

    def test_three_rows(self):
        raw = load_csv(self.write('smiles,label\nCCO,1\nc1ccccc1,0\nCCN,pos\n'))
        self.assertEqual(len(raw), 3)
        self.assertEqual(raw.keys, ['0', '1', '2'])
        self.assertEqual(raw.label_kind, LabelKind.BINARY_CLASS)
        self.assertEqual([row.label for row in raw.rows], ['1', '0', '1'])
        self.assertEqual([row.line for row in raw.rows], [2, 3, 4])

    def test_missing_label_column(self):
        with self.assertRaises(FormatError) as ctx:
            load_csv(self.write('smiles,activity\nCCO,1\n'))
        self.assertEqual(ctx.exception.line, 1)

    def test_crlf_and_quoting(self):
        plain = load_csv(self.write('id,smiles,label,extra\nm1,CCO,1,x\nm2,"CC(=O)O",0,y\n', name='a.csv'),
                         SchemaConfig(key_column='id'))
        windows = load_csv(self.write('id,smiles,label,extra\n"m1","CCO","1",x\nm2,"CC(=O)O",0,"y"\n',
                                      name='b.csv', newline='\r\n'),
                           SchemaConfig(key_column='id'))
        self.assertEqual([(row.key, row.smiles, row.label) for row in plain.rows],
                         [(row.key, row.smiles, row.label) for row in windows.rows])
        self.assertEqual(plain.keys, ['m1', 'm2'])

    def test_custom_columns_and_tokens(self):
        raw = load_csv(
            self.write('mol,structure,bbb\na,CCO,Active\nb,CCN,inactive\n'),
            SchemaConfig(smiles_column='structure', label_column='bbb', key_column='mol'),
        )
        self.assertEqual([row.label for row in raw.rows], ['1', '0'])

    def test_label_kind_detection(self):
        continuous = load_csv(self.write('smiles,label\nCCO,0.5\nCCN,1.5\nCCC,-2\n'))
        self.assertEqual(continuous.label_kind, LabelKind.CONTINUOUS)
        self.assertEqual([row.label for row in continuous.rows], [0.5, 1.5, -2.0])
        multi = load_csv(self.write('smiles,label\nCCO,low\nCCN,high\nCCC,mid\n'))
        self.assertEqual(multi.label_kind, LabelKind.MULTI_CLASS)

    def test_whole_number_levels_warn(self):
        for text in ('smiles,label\nCCO,0\nCCN,1\nCCC,2\n', 'smiles,label\nCCO,0.0\nCCN,1.0\nCCC,1.0\n'):
            with self.subTest(text=text):
                with self.assertLogs('poem.utils.datasets', level='WARNING') as logs:
                    raw = load_csv(self.write(text))
                self.assertEqual(raw.label_kind, LabelKind.CONTINUOUS)
                self.assertIn('--label-kind multi_class', logs.output[0])
        with self.assertNoLogs('poem.utils.datasets', level='WARNING'):
            load_csv(self.write('smiles,label\nCCO,0.5\nCCN,1.5\nCCC,-2\n'))
        with self.assertNoLogs('poem.utils.datasets', level='WARNING'):
            declared = load_csv(self.write('smiles,label\nCCO,0\nCCN,1\nCCC,2\n'),
                                SchemaConfig(label_kind='multi_class'))
        self.assertEqual(declared.label_kind, LabelKind.MULTI_CLASS)

    def test_declared_kind_is_enforced(self):
        with self.assertRaises(FormatError) as ctx:
            load_csv(self.write('smiles,label\nCCO,1\nCCN,maybe\n'), SchemaConfig(label_kind='binary_class'))
        self.assertEqual(ctx.exception.line, 3)

    def test_row_errors(self):
        cases = {
            'empty label': ('smiles,label\nCCO,1\nCCN,\n', 3),
            'ragged': ('smiles,label\nCCO,1\nCCN\n', 3),
            'duplicate key': ('key,smiles,label\na,CCO,1\na,CCN,0\n', 3),
        }
        for name, (text, line) in cases.items():
            with self.subTest(case=name):
                schema = SchemaConfig(key_column='key') if text.startswith('key') else None
                with self.assertRaises(FormatError) as ctx:
                    load_csv(self.write(text), schema)
                self.assertEqual(ctx.exception.line, line)

    def test_missing_file(self):
        with self.assertRaises(FormatError):
            load_csv(self.dir / 'absent.csv')


class CleanTestCase(DatasetFileMixin, SimpleTestCase):

    def load(self, text):
        return load_csv(self.write('key,smiles,label\n' + text), SchemaConfig(key_column='key'))

    def test_replicates_collapse(self):
        rows, report = clean(self.load('a,CCO,1\nb,OCC,1\nc,CCN,0\n'))
        self.assertEqual([row.key for row in rows], ['a', 'c'])
        self.assertEqual(report.n_replicates_removed, 1)
        self.assertIn(('b', 'replicate of a'), report.excluded)

    def test_conflicting_group_removed(self):
        rows, report = clean(self.load('a,CCO,1\nb,OCC,0\nc,CCN,0\nd,CCC,1\n'))
        self.assertEqual([row.key for row in rows], ['c', 'd'])
        self.assertEqual(report.n_conflicting, 2)
        self.assertEqual(report.n_final, 2)

    def test_unparsable_excluded(self):
        rows, report = clean(self.load('a,C1CC,1\nb,CCN,0\nc,CCC,1\n'))
        self.assertEqual(report.n_unparsable, 1)
        self.assertEqual(len(rows), 2)
        self.assertEqual(report.excluded, [('a', 'unparsable')])

    def test_counts_reconcile(self):
        _, report = clean(self.load('a,CCO,1\nb,OCC,1\nc,C(O)C,1\nd,CCN,0\ne,NCC,1\nf,X,0\ng,CCC,0\n'))
        self.assertEqual(report.as_dict(), {
            'n_input': 7,
            'n_unparsable': 1,
            'n_conflicting': 2,
            'n_replicates_removed': 2,
            'n_final': 2,
        })
        report.check()
        with self.assertRaises(InvariantViolation):
            CleaningReport(n_input=3, n_final=1).check()

    def test_report_renderings(self):
        _, report = clean(self.load('a,CCO,1\nb,OCC,1\nc,CCN,0\n'))
        self.assertIn('n_replicates_removed=1\n', report.to_key_values())
        self.assertIn('excluded=b:replicate of a', report.to_key_values())
        self.assertIn('Replicates removed:    1', report.to_text())

    def test_idempotent(self):
        rows, _ = clean(self.load('a,CCO,1\nb,OCC,1\nc,CCN,0\nd,CCN,1\ne,c1ccccc1,0\nf,CCCl,1\n'))
        survivors = ''.join(f"{row.key},{row.smiles},{row.label}\n" for row in rows)
        again, report = clean(self.load(survivors))
        self.assertEqual([(row.key, row.label, row.graph_key) for row in again],
                         [(row.key, row.label, row.graph_key) for row in rows])
        self.assertEqual(report.n_final, report.n_input)

    def test_continuous_replicates_are_averaged(self):
        rows, report = clean(self.load('a,CCO,1.0\nb,OCC,2.0\nc,CCN,5\n'))
        self.assertEqual([row.label for row in rows], [1.5, 5.0])
        self.assertEqual(report.n_conflicting, 0)
        self.assertEqual(report.n_replicates_removed, 1)

    def test_too_few_survivors(self):
        with self.assertRaises(EmptyDataset):
            clean(self.load('a,CCO,1\nb,OCC,0\nc,CCN,1\n'))

    def test_external_only_rows_need_no_smiles(self):
        external = SchemeSet((FingerprintScheme('ext', SchemeKind.EXTERNAL, 8),))
        rows, _ = clean(self.load('a,,1\nb,,0\nc,CCO,1\n'), scheme_set=external)
        self.assertEqual([row.key for row in rows], ['a', 'b', 'c'])
        self.assertIsNone(rows[0].graph_key)
        with self.assertRaises(EmptyDataset):
            clean(self.load('a,,1\nb,,0\nc,CCO,1\n'))


class BuildLibraryTestCase(DatasetFileMixin, SimpleTestCase):

    def rows(self, text):
        raw = load_csv(self.write('key,smiles,label\n' + text), SchemaConfig(key_column='key'))
        return clean(raw)[0], raw.label_kind

    def test_four_by_six(self):
        rows, kind = self.rows('a,CCO,1\nb,CCN,0\nc,c1ccccc1,1\nd,CC(=O)O,0\n')
        library = build_library(rows, compose_scheme_set(length=512), kind)
        self.assertEqual((library.size, library.scheme_count), (4, 6))
        self.assertTrue((library.popcounts > 0).all())
        self.assertEqual(library.label_space, ('0', '1'))

    def test_missing_class(self):
        rows, kind = self.rows('a,CCO,1\nb,OCC,0\nc,CCN,1\nd,CCC,1\n')
        with self.assertRaises(MissingClass):
            build_library(rows, compose_scheme_set(length=256), kind)

    def test_continuous_library(self):
        rows, kind = self.rows('a,CCO,0.5\nb,CCN,1.5\n')
        library = build_library(rows, compose_scheme_set(length=256), kind)
        self.assertEqual(library.label_kind, LabelKind.CONTINUOUS)
        self.assertEqual(library.label_space, ())
        self.assertEqual(library.labels(), [0.5, 1.5])

    def test_multi_class_label_space_is_sorted(self):
        rows, kind = self.rows('a,CCO,mid\nb,CCN,high\nc,CCC,low\n')
        library = build_library(rows, compose_scheme_set(length=256), kind)
        self.assertEqual(library.label_space, ('high', 'low', 'mid'))

    def test_external_schemes_join_by_key(self):
        rows, kind = self.rows('a,CCO,1\nb,CCN,0\n')
        external_set = SchemeSet((FingerprintScheme('ext', SchemeKind.EXTERNAL, 12),))
        schemes = compose_scheme_set(['morgan2'], length=256, external_sets=[external_set])
        self.assertEqual(schemes.ids, ('morgan2', 'ext'))
        table = {'a': Fingerprint.from_hex('ext', 12, 'f00'), 'b': Fingerprint.from_hex('ext', 12, '00f')}
        library = build_library(rows, schemes, kind, external={'ext': table})
        self.assertEqual(library.fingerprint(1, 1).to_hex(), '00f')

        with self.assertRaises(MissingExternalFingerprint):
            build_library(rows, schemes, kind, external={'ext': {'a': table['a']}})

    def test_external_scheme_replaces_native_namesake(self):
        external_set = SchemeSet((FingerprintScheme('path', SchemeKind.EXTERNAL, 64),))
        schemes = compose_scheme_set(length=256, external_sets=[external_set])
        self.assertEqual(schemes.ids, ('morgan2', 'morgan4', 'morgan2_features', 'morgan4_features',
                                       'atom_pair', 'path'))
        self.assertEqual(schemes.get('path').kind, SchemeKind.EXTERNAL)
        self.assertEqual(schemes.get('path').length, 64)

    def test_unknown_scheme_id(self):
        with self.assertRaises(UnknownScheme):
            compose_scheme_set(['maccs'])

    def test_deterministic(self):
        rows, kind = self.rows('a,CCO,1\nb,CCN,0\nc,c1ccccc1,1\n')
        first = build_library(rows, compose_scheme_set(length=256), kind)
        second = build_library(rows, compose_scheme_set(length=256), kind)
        self.assertEqual(dump_library(first), dump_library(second))


class MoleculeTableTestCase(DatasetFileMixin, SimpleTestCase):

    def test_key_column_default(self):
        rows = read_molecule_table(self.write('key,smiles\nq1,CCO\nq2,CCN\n'))
        self.assertEqual([(row.key, row.smiles) for row in rows], [('q1', 'CCO'), ('q2', 'CCN')])

    def test_index_keys(self):
        rows = read_molecule_table(self.write('smiles\nCCO\nCCN\n'))
        self.assertEqual([row.key for row in rows], ['0', '1'])

    def test_empty_file(self):
        self.assertEqual(read_molecule_table(self.write('')), [])

    def test_errors(self):
        with self.assertRaises(FormatError):
            read_molecule_table(self.write('name\nCCO\n'))
        with self.assertRaises(FormatError):
            read_molecule_table(self.write('key,smiles\nq1,CCO\nq1,CCN\n'))
