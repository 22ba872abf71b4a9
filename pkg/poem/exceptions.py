"""
Error types raised by the POEM toolkit.

Every error carries an ``exit_code`` used by the management commands:
1 for input/format problems, 2 for internal invariant violations.
"""


class PoemError(Exception):
    """Base class for all POEM errors."""

    exit_code = 1

    def __init__(self, message, path=None, line=None):
        self.message = message
        self.path = path
        self.line = line
        super().__init__(self.describe())

    def describe(self):
        """Return the message prefixed with file/line context when known."""
        if self.path is not None and self.line is not None:
            return f"{self.path}:{self.line}: {self.message}"
        if self.path is not None:
            return f"{self.path}: {self.message}"
        return self.message


class UnparsableMolecule(PoemError):
    """The SMILES string cannot be turned into a molecular graph."""

    def __init__(self, message, smiles=None, position=None, **kwargs):
        self.smiles = smiles
        self.position = position
        if smiles is not None and position is not None:
            message = f"{message} (at position {position} in {smiles!r})"
        elif smiles is not None:
            message = f"{message} ({smiles!r})"
        super().__init__(message, **kwargs)


class FormatError(PoemError):
    """A file does not follow its documented format."""


class KeyMismatch(PoemError):
    """Fingerprint rows are not aligned with the dataset rows."""


class MissingExternalFingerprint(KeyMismatch):
    """A cleaned dataset row has no row in a required external fingerprint file."""


class DuplicateKey(PoemError):
    """A molecule key occurs more than once where keys must be unique."""


class SchemeMismatch(PoemError):
    """Fingerprints from different schemes (or lengths) were combined."""


class UnknownScheme(PoemError):
    """A scheme id was requested that the scheme set does not contain."""


class ConflictingLabel(PoemError):
    """The same molecule was given two different labels."""


class EmptyDataset(PoemError):
    """Fewer than two molecules survived cleaning."""


class MissingClass(PoemError):
    """A declared class has no molecules in the cleaned data."""


class ConfigurationError(PoemError):
    """A run parameter is outside its allowed range."""


class EvaluationError(PoemError):
    """An evaluation plan cannot be carried out on the given library."""


class StratificationImpossible(EvaluationError):
    """A class is too small to appear on both sides of a split."""


class ClassCoverageImpossible(EvaluationError):
    """No cluster assignment puts every class into the test set."""


class SingleClass(EvaluationError):
    """ROC AUC is undefined because only one class is present."""


class LengthMismatch(EvaluationError):
    """Paired sequences have different (or zero) lengths."""


class InvariantViolation(PoemError):
    """An internal consistency check failed."""

    exit_code = 2


class DegenerateFitness(UserWarning):
    """All fitness values are zero; the prediction falls back to an unweighted answer."""
