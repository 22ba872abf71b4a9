import logging

from ._base import PoemCommand
from ...exceptions import UnknownScheme, UnparsableMolecule
from ...utils.datasets import read_molecule_table
from ...utils.fingerprints import compute_fingerprint, default_scheme_set, write_external_fingerprints
from ...utils.smiles import parse_smiles

logger = logging.getLogger(__name__)


class Command(PoemCommand):
    help = 'Write native fingerprints of a molecule CSV in the external fingerprint format'

    def add_command_arguments(self, parser):
        parser.add_argument('--data', required=True, help='Molecule CSV')
        parser.add_argument('--scheme', required=True, help='Native scheme id')
        parser.add_argument('--smiles-col', dest='smiles_col')
        parser.add_argument('--key-col', dest='key_col')
        parser.add_argument('--fp-length', dest='fp_length', type=int)
        parser.add_argument('--out', required=True)

    def run(self, config, **options):
        schemes = default_scheme_set(config.fp_length)
        if options['scheme'] not in schemes.ids:
            raise UnknownScheme(f"Unknown native scheme {options['scheme']!r}; available: {', '.join(schemes.ids)}")
        scheme = schemes.get(options['scheme'])

        fingerprints, failures = [], []
        for row in read_molecule_table(options['data'], config.smiles_col, config.key_col):
            try:
                fingerprints.append((row.key, compute_fingerprint(parse_smiles(row.smiles), scheme)))
            except UnparsableMolecule as exc:
                logger.warning(f"Row {row.key!r} (line {row.line}) skipped: {exc.message}")
                failures.append((row.key, exc.message))

        write_external_fingerprints(options['out'], scheme.scheme_id, scheme.length, fingerprints)
        self.stdout.write(f"{len(fingerprints)} fingerprints ({scheme.describe()}) written to {options['out']}")
        self.fail_rows(failures)
