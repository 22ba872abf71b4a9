import logging
from pathlib import Path

from ._base import PoemCommand
from ...exceptions import SchemeMismatch
from ...utils.datasets import (
    SchemaConfig,
    build_library,
    clean,
    compose_scheme_set,
    fingerprint_clean_rows,
    load_csv,
)
from ...utils.fingerprints import load_external_fingerprints
from ...utils.library import LabelKind, extend_library, load_library, save_library

logger = logging.getLogger(__name__)


class Command(PoemCommand):
    help = 'Build a reference library file from a labeled molecule CSV'

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Labeled molecule CSV')
        parser.add_argument('--smiles-col', dest='smiles_col')
        parser.add_argument('--label-col', dest='label_col')
        parser.add_argument('--key-col', dest='key_col')
        parser.add_argument('--label-kind', dest='label_kind', choices=[kind.value for kind in LabelKind])
        parser.add_argument('--external', action='append', default=[],
                            help='External fingerprint file (repeatable)')
        parser.add_argument('--schemes', help='Comma-separated scheme ids to keep')
        parser.add_argument('--fp-length', dest='fp_length', type=int, help='Native fingerprint length in bits')
        parser.add_argument('--name', help='Library name (default: the CSV file stem)')
        parser.add_argument('--extend', help='Existing library to append the cleaned rows to')
        parser.add_argument('--out', required=True, help='Library file to write')
        parser.add_argument('--report', help='Cleaning report file (default: OUT.report)')

    def run(self, config, **options):
        data = Path(options['data'])
        base = load_library(options['extend']) if options.get('extend') else None

        label_kind = config.label_kind
        if base is not None:
            label_kind = base.label_kind.value
        schema = SchemaConfig(
            smiles_column=config.smiles_col,
            label_column=config.label_col,
            key_column=config.key_col,
            label_kind=label_kind,
        )
        raw = load_csv(data, schema)

        external_sets = []
        external = {}
        for path in options['external']:
            scheme_set, fingerprints = load_external_fingerprints(path, expected_keys=raw.keys)
            external_sets.append(scheme_set)
            external[scheme_set[0].scheme_id] = fingerprints

        if base is None:
            scheme_set = compose_scheme_set(config.schemes, config.fp_length, external_sets)
        else:
            scheme_set = base.scheme_set
            if config.schemes is not None and tuple(config.schemes) != scheme_set.ids:
                raise SchemeMismatch(f"An extended library keeps its schemes ({', '.join(scheme_set.ids)})")

        rows, report = clean(raw, scheme_set, min_rows=1 if base is not None else 2)
        if base is None:
            library = build_library(
                rows,
                scheme_set,
                raw.label_kind,
                external=external,
                name=options.get('name') or data.stem,
                notes=f"built from {data.name}",
                workers=config.threads,
            )
        else:
            library = extend_library(
                base,
                keys=[row.key for row in rows],
                labels=[row.label for row in rows],
                rows=fingerprint_clean_rows(rows, scheme_set, external, workers=config.threads),
                graph_keys=[row.graph_key for row in rows],
                notes=f"{base.metadata.notes}; extended from {data.name}".lstrip('; '),
            )

        out = save_library(library, options['out'])
        report_path = Path(options.get('report') or f"{out}.report")
        report_path.write_text(report.to_key_values(), encoding='utf-8')
        logger.info(f"Cleaning report written to {report_path}")

        self.stdout.write(report.to_text())
        self.stdout.write(library.summary())
