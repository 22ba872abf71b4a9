from ._base import PoemCommand
from ...utils.fingerprints import FingerprintScheme
from ...utils.library import read_library_header


class Command(PoemCommand):
    help = 'Describe a library file from its header (fingerprints are not read)'

    def add_command_arguments(self, parser):
        parser.add_argument('--library', required=True)

    def run(self, config, **options):
        header = read_library_header(options['library'])
        schemes = [FingerprintScheme.from_dict(entry) for entry in header['schemes']]
        np_text = header['Np'] if header['label_kind'] != 'continuous' else 'continuous'
        lines = [
            f"format_version: {header['format_version']}",
            f"name: {header['name']}",
            f"version: {header['version']}",
            f"label_kind: {header['label_kind']}",
            f"M: {header['M']}",
            f"N: {header['N']}",
            f"Np: {np_text}",
        ]
        if header['label_space']:
            lines.append(f"label_space: {', '.join(header['label_space'])}")
        if header.get('notes'):
            lines.append(f"notes: {header['notes']}")
        lines.append('schemes:')
        lines += [f"  {scheme.describe()}" for scheme in schemes]
        self.stdout.write('\n'.join(lines))
