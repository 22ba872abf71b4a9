"""
Shared plumbing for the POEM management commands: run configuration
resolution (flag > --config file > settings/environment > default), output
handling and error translation to exit codes.
"""
import logging
import os
from dataclasses import dataclass
from pathlib import Path

from django.conf import settings
from django.core.management.base import BaseCommand, CommandError
from environ import Env

from ...exceptions import ConfigurationError, PoemError

logger = logging.getLogger(__name__)


def read_config_file(path):
    """
    Read ``KEY=value`` lines into a private Env.

    The values never reach ``os.environ``; each call gets its own mapping.
    """
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError("Config file not found", path=path)
    config_env = type('RunConfigEnv', (Env,), {'ENVIRON': {}})()
    config_env.read_env(str(path), overwrite=True)
    logger.debug(f"Read {len(config_env.ENVIRON)} config values from {path}")
    return config_env


@dataclass(frozen=True)
class RunConfig:
    """Resolved parameters of one command run."""
    command: str
    relax: float
    threads: int
    seed: int = 0
    depth: int = 10
    test_fraction: float = 0.2
    k: int = 5
    thresholds: tuple = ()
    repeats: int = 1
    smiles_col: str = 'smiles'
    label_col: str = 'label'
    key_col: str | None = None
    label_kind: str | None = None
    fp_length: int = 2048
    schemes: tuple | None = None

    def __post_init__(self):
        if not 0.5 < self.relax <= 1.0:
            raise ConfigurationError(f"relax must be in (0.5, 1.0], got {self.relax}")
        if self.depth < 1:
            raise ConfigurationError(f"Explanation depth must be >= 1, got {self.depth}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.threads < 1:
            raise ConfigurationError(f"Thread count must be >= 1, got {self.threads}")
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if self.fp_length < 8 or self.fp_length & (self.fp_length - 1):
            raise ConfigurationError(f"Fingerprint length must be a power of two >= 8, got {self.fp_length}")

    @classmethod
    def resolve(cls, command, options):
        """
        Merge command options, the optional ``--config`` file and settings.

        Args:
            command (str): Command name.
            options (dict): Parsed command options; ``None`` means "not given".
        """
        config_env = read_config_file(options['config']) if options.get('config') else None

        def pick(option, key, cast, fallback):
            value = options.get(option)
            if value is not None:
                return value
            if config_env is not None and key in config_env.ENVIRON:
                try:
                    return getattr(config_env, cast)(key)
                except (ValueError, TypeError):
                    raise ConfigurationError(f"Invalid value for {key}: {config_env.ENVIRON[key]!r}",
                                             path=options.get('config')) from None
            return fallback

        thresholds = options.get('threshold')
        if not thresholds and config_env is not None and 'THRESHOLD' in config_env.ENVIRON:
            thresholds = [float(value) for value in config_env.list('THRESHOLD')]
        schemes = options.get('schemes')
        if schemes is None and config_env is not None and 'SCHEMES' in config_env.ENVIRON:
            schemes = ','.join(config_env.list('SCHEMES'))

        threads = pick('threads', 'THREADS', 'int', getattr(settings, 'POEM_THREADS', 0))
        if threads == 0:
            threads = os.cpu_count() or 1

        return cls(
            command=command,
            relax=pick('relax', 'RELAX', 'float', getattr(settings, 'POEM_RELAX', 0.9)),
            threads=threads,
            seed=pick('seed', 'SEED', 'int', 0),
            depth=pick('depth', 'DEPTH', 'int', getattr(settings, 'POEM_EXPLAIN_DEPTH', 10)),
            test_fraction=pick('test_fraction', 'TEST_FRACTION', 'float', 0.2),
            k=pick('k', 'K', 'int', 5),
            thresholds=tuple(thresholds or ()),
            repeats=pick('repeats', 'REPEATS', 'int', 1),
            smiles_col=pick('smiles_col', 'SMILES_COL', 'str', 'smiles'),
            label_col=pick('label_col', 'LABEL_COL', 'str', 'label'),
            key_col=pick('key_col', 'KEY_COL', 'str', None),
            label_kind=pick('label_kind', 'LABEL_KIND', 'str', None),
            fp_length=pick('fp_length', 'FP_LENGTH', 'int', getattr(settings, 'POEM_FINGERPRINT_LENGTH', 2048)),
            schemes=tuple(part.strip() for part in schemes.split(',') if part.strip()) if schemes else None,
        )


class PoemCommand(BaseCommand):
    """
    Base for POEM commands. Subclasses implement ``add_command_arguments`` and
    ``run(config, **options)``; PoemError becomes a CommandError carrying the
    error's exit code.
    """

    def add_arguments(self, parser):
        parser.add_argument('--config', help='KEY=value file with run parameters; flags take precedence')
        parser.add_argument('--threads', type=int, help='Worker threads (default: POEM_THREADS or all cores)')
        self.add_command_arguments(parser)

    def add_command_arguments(self, parser):
        pass

    def handle(self, *args, **options):
        try:
            config = RunConfig.resolve(self.command_name(), options)
            logger.debug(f"Run config: {config}")
            self.run(config, **{name: value for name, value in options.items() if name != 'config'})
        except PoemError as exc:
            logger.error(exc.describe())
            raise CommandError(exc.describe(), returncode=exc.exit_code) from exc
        except CommandError:
            raise
        except Exception as exc:
            logger.exception(f"Unexpected failure in {self.command_name()}")
            raise CommandError(f"Internal error: {exc}", returncode=2) from exc

    def command_name(self):
        return self.__module__.rsplit('.', 1)[-1]

    def run(self, config, **options):
        raise NotImplementedError('subclasses of PoemCommand must provide a run() method')

    def emit(self, path, text):
        """Write ``text`` to ``path``, or to stdout when no path is given."""
        if path:
            with open(path, 'w', encoding='utf-8', newline='') as handle:
                handle.write(text)
            logger.info(f"Wrote {path}")
        else:
            self.stdout.write(text, ending='')

    def fail_rows(self, failures):
        """Finish a batch that had per-row failures with exit code 1."""
        if not failures:
            return
        keys = ', '.join(key for key, _ in failures)
        for key, message in failures:
            logger.error(f"{key}: {message}")
        raise CommandError(f"{len(failures)} row(s) failed: {keys}", returncode=1)
