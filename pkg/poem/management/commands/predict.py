import logging

import pandas as pd

from ._base import PoemCommand
from ...exceptions import PoemError, SchemeMismatch
from ...utils.datasets import read_molecule_table
from ...utils.dominance import predict_many, target_fingerprints
from ...utils.fingerprints import load_external_fingerprints
from ...utils.library import load_library

logger = logging.getLogger(__name__)


def load_external_tables(paths, keys):
    """``{scheme_id: {key: Fingerprint}}`` from external fingerprint files."""
    tables = {}
    for path in paths:
        scheme_set, fingerprints = load_external_fingerprints(path, expected_keys=keys)
        tables[scheme_set[0].scheme_id] = fingerprints
    return tables


def row_external(tables, key):
    return {scheme_id: table[key] for scheme_id, table in tables.items() if key in table}


def prediction_frame(library, predictions):
    """One row per prediction: class probabilities and label, or the value."""
    if library.is_classification:
        columns = ['key'] + [f"p_{label}" for label in library.label_space] + ['predicted']
        records = [
            [prediction.target_key]
            + [f"{prediction.probabilities[label]:.6f}" for label in library.label_space]
            + [prediction.predicted]
            for prediction in predictions
        ]
    else:
        columns = ['key', 'value']
        records = [[prediction.target_key, f"{prediction.value:.6f}"] for prediction in predictions]
    return pd.DataFrame(records, columns=columns)


class Command(PoemCommand):
    help = 'Predict labels (or values) for query molecules against a reference library'

    def add_command_arguments(self, parser):
        parser.add_argument('--library', required=True)
        parser.add_argument('--query', required=True, help='CSV with a SMILES column and optional key column')
        parser.add_argument('--smiles-col', dest='smiles_col')
        parser.add_argument('--key-col', dest='key_col')
        parser.add_argument('--external', action='append', default=[],
                            help='External fingerprints of the queries (repeatable)')
        parser.add_argument('--relax', type=float)
        parser.add_argument('--out', help='Predictions CSV (default: stdout)')

    def run(self, config, **options):
        library = load_library(options['library'])
        rows = read_molecule_table(options['query'], config.smiles_col, config.key_col,
                                   require_smiles=library.scheme_set.has_native)
        tables = load_external_tables(options['external'], [row.key for row in rows])

        targets, keys, failures = [], [], []
        for row in rows:
            try:
                targets.append(target_fingerprints(row.smiles, library, row_external(tables, row.key))
                               if row.smiles else self._external_row(library, tables, row.key))
                keys.append(row.key)
            except PoemError as exc:
                logger.warning(f"Query {row.key!r} (line {row.line}) skipped: {exc.describe()}")
                failures.append((row.key, exc.describe()))

        predictions = predict_many(targets, library, relax=config.relax, workers=config.threads, keys=keys)
        frame = prediction_frame(library, predictions)
        self.emit(options.get('out'), frame.to_csv(index=False, lineterminator='\n'))
        logger.info(f"Predicted {len(predictions)} of {len(rows)} queries")
        self.fail_rows(failures)

    @staticmethod
    def _external_row(library, tables, key):
        external = row_external(tables, key)
        missing = [scheme.scheme_id for scheme in library.scheme_set if scheme.scheme_id not in external]
        if missing:
            raise SchemeMismatch(f"No SMILES and no {', '.join(missing)} fingerprint")
        return tuple(external[scheme.scheme_id] for scheme in library.scheme_set)
