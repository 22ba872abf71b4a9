import logging

import pandas as pd

from ._base import PoemCommand
from ...exceptions import ConfigurationError, FormatError
from ...utils.datasets import read_molecule_table
from ...utils.dominance import predict
from ...utils.library import load_library
from .predict import load_external_tables, row_external

logger = logging.getLogger(__name__)


def explanation_text(library, prediction):
    """Header lines with the prediction, then one CSV row per reference."""
    lines = [f"# target={prediction.target_key}"]
    if library.is_classification:
        lines.append(f"# predicted={prediction.predicted}")
        lines.append('# probabilities ' + ' '.join(
            f"{label}={prediction.probabilities[label]:.6f}" for label in library.label_space
        ))
    else:
        lines.append(f"# value={prediction.value:.6f}")
    lines.append(f"# coverage={prediction.coverage:.6f}")
    if prediction.degenerate:
        lines.append('# degenerate=true')

    columns = ['rank', 'key', 'label', 'fitness', 'fitness_share'] + [f"d_{scheme_id}" for scheme_id
                                                                      in library.scheme_set.ids]
    rows = []
    for rank, entry in enumerate(prediction.explanation, start=1):
        label = entry.label if library.is_classification else f"{entry.label:.6f}"
        rows.append([rank, entry.key, label, f"{entry.fitness:.6f}", f"{entry.fitness_share:.6f}"]
                    + [f"{distance:.6f}" for distance in entry.distances])
    table = pd.DataFrame(rows, columns=columns).to_csv(index=False, lineterminator='\n')
    return '\n'.join(lines) + '\n' + table


class Command(PoemCommand):
    help = 'Explain one prediction: the top references with fitness, share, label and per-scheme distances'

    def add_command_arguments(self, parser):
        parser.add_argument('--library', required=True)
        target = parser.add_mutually_exclusive_group(required=True)
        target.add_argument('--smiles', help='Query SMILES')
        target.add_argument('--query', help='Query CSV (use with --key)')
        parser.add_argument('--key', help='Row of --query to explain')
        parser.add_argument('--smiles-col', dest='smiles_col')
        parser.add_argument('--key-col', dest='key_col')
        parser.add_argument('--external', action='append', default=[],
                            help='External fingerprints of the query (repeatable)')
        parser.add_argument('--depth', type=int, help='Number of references to list')
        parser.add_argument('--relax', type=float)
        parser.add_argument('--out', help='Explanation file (default: stdout)')

    def run(self, config, **options):
        library = load_library(options['library'])
        if options.get('smiles'):
            key = options.get('key') or options['smiles']
            smiles = options['smiles']
        else:
            if not options.get('key'):
                raise ConfigurationError('--query needs --key')
            key = options['key']
            rows = {row.key: row for row in read_molecule_table(options['query'], config.smiles_col,
                                                                config.key_col)}
            if key not in rows:
                raise FormatError(f"No query row with key {key!r}", path=options['query'])
            smiles = rows[key].smiles

        tables = load_external_tables(options['external'], [key])
        prediction = predict(smiles, library, relax=config.relax, depth=config.depth, workers=config.threads,
                             target_key=key, external=row_external(tables, key))
        logger.info(f"Explained {key!r} with {len(prediction.explanation)} references "
                    f"(coverage {prediction.coverage:.3f})")
        self.emit(options.get('out'), explanation_text(library, prediction))
