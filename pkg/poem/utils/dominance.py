"""
Relaxed Pareto dominance over Tanimoto distance profiles, fitness ranking and
label prediction.

A target is embedded as an ``(N, M)`` matrix of distances to the M reference
molecules under N schemes. Every pair of references is compared scheme by
scheme (closer scores 1, tie 0.5, further 0); a reference dominates another
when at least ``relax`` of its comparisons are better or tied and the reverse
does not hold. Fitness rewards references that are close to the target and
dominate many others, and label probabilities are fitness-weighted votes.
"""
import logging
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from django.conf import settings

from ..exceptions import ConfigurationError, DegenerateFitness, InvariantViolation, SchemeMismatch
from .fingerprints import Fingerprint, native_fingerprints, tanimoto_distances
from .smiles import parse_smiles

logger = logging.getLogger(__name__)

FITNESS_OFFSET = 0.05

# Upper bound on elements of the (N, rows, M) comparison tensor per block
_BLOCK_ELEMENTS = 1 << 22


def resolve_relax(relax=None):
    if relax is None:
        relax = getattr(settings, 'POEM_RELAX', 0.9)
    relax = float(relax)
    if not 0.5 < relax <= 1.0:
        raise ConfigurationError(f"relax must be in (0.5, 1.0], got {relax}")
    return relax


def resolve_workers(workers=None):
    if workers is None:
        workers = getattr(settings, 'POEM_THREADS', 0)
    workers = int(workers)
    if workers < 0:
        raise ConfigurationError(f"Thread count must be >= 0, got {workers}")
    return workers or os.cpu_count() or 1


def resolve_depth(depth=None):
    if depth is None:
        depth = getattr(settings, 'POEM_EXPLAIN_DEPTH', 10)
    depth = int(depth)
    if depth < 1:
        raise ConfigurationError(f"Explanation depth must be >= 1, got {depth}")
    return depth


@dataclass(frozen=True, eq=False)
class DistanceProfile:
    """``dist[k, i]``: distance from the target to reference i under scheme k."""
    dist: np.ndarray

    def __post_init__(self):
        dist = np.ascontiguousarray(self.dist, dtype=np.float64)
        if dist.ndim != 2 or dist.shape[0] < 1:
            raise ValueError(f"Distance profile must be a non-empty (N, M) matrix, got shape {dist.shape}")
        if dist.size and (dist.min() < 0.0 or dist.max() > 1.0):
            raise ValueError("Distances must lie in [0, 1]")
        object.__setattr__(self, 'dist', dist)

    @property
    def scheme_count(self):
        return self.dist.shape[0]

    @property
    def size(self):
        return self.dist.shape[1]

    def columns(self, indices):
        """The profile restricted to references ``indices``."""
        return DistanceProfile(self.dist[:, np.asarray(indices, dtype=np.int64)])


def embed(target_fps, library):
    """
    Distances from a target to every library molecule under every scheme.

    Args:
        target_fps (Sequence[Fingerprint]): One fingerprint per library scheme,
            in library order.
        library (ReferenceLibrary): Reference library.

    Returns:
        DistanceProfile: Shape ``(N, M)``.

    Raises:
        SchemeMismatch: When the fingerprints do not line up with the schemes.
    """
    target_fps = tuple(target_fps)
    if len(target_fps) != library.scheme_count:
        raise SchemeMismatch(f"Got {len(target_fps)} fingerprints for {library.scheme_count} schemes")
    dist = np.empty((library.scheme_count, library.size), dtype=np.float64)
    for position, (scheme, fp) in enumerate(zip(library.scheme_set, target_fps)):
        if fp.scheme_id != scheme.scheme_id or fp.length != scheme.length:
            raise SchemeMismatch(
                f"Position {position}: expected {scheme.scheme_id} ({scheme.length} bits), "
                f"got {fp.scheme_id} ({fp.length} bits)"
            )
        dist[position] = tanimoto_distances(fp.array, library.fp_matrix[position], library.popcounts[position])
    return DistanceProfile(dist)


@dataclass(frozen=True, eq=False)
class DominanceResult:
    """
    Pairwise dominance of the references.

    ``row_sums[i]`` is the sum over j of the mean comparison score of i
    against j (diagonal 0.5 included); it is computed from integer tallies so
    it does not depend on how rows were split across workers. ``dom_matrix``
    is only kept when requested.
    """
    row_sums: np.ndarray
    dom: np.ndarray
    sub: np.ndarray
    relax: float
    dom_matrix: np.ndarray | None = None

    @property
    def size(self):
        return len(self.row_sums)


def _normalise_weights(weights, scheme_count):
    weights = np.asarray(weights, dtype=np.float64)
    if weights.shape != (scheme_count,) or (weights <= 0).any():
        raise ConfigurationError(f"Scheme weights must be {scheme_count} positive numbers")
    return weights / weights.sum()


def _dominance_rows(dist, start, stop, relax, weights):
    """Tallies for reference rows ``start:stop`` against all references."""
    scheme_count = dist.shape[0]
    # negative difference: row molecule is closer to the target than the column molecule
    difference = dist[:, start:stop, None] - dist[:, None, :]
    closer = difference < 0
    further = difference > 0
    if weights is None:
        better = closer.sum(axis=0, dtype=np.int64)
        worse = further.sum(axis=0, dtype=np.int64)
        tied = scheme_count - better - worse
        scores = (better + 0.5 * tied) / scheme_count
        row_sums = (better.sum(axis=1) + 0.5 * tied.sum(axis=1)) / scheme_count
        dom_check = (better + tied) / scheme_count >= relax
        sub_check = (worse + tied) / scheme_count >= relax
    else:
        better = np.tensordot(weights, closer.astype(np.float64), axes=1)
        worse = np.tensordot(weights, further.astype(np.float64), axes=1)
        tied = 1.0 - better - worse
        scores = better + 0.5 * tied
        row_sums = scores.sum(axis=1)
        dom_check = (better + tied) >= relax
        sub_check = (worse + tied) >= relax
    dom = (dom_check & ~sub_check).sum(axis=1)
    sub = (sub_check & ~dom_check).sum(axis=1)
    return scores, row_sums, dom, sub


def _row_blocks(size, scheme_count, workers):
    rows = max(1, _BLOCK_ELEMENTS // max(1, scheme_count * size))
    if workers > 1:
        rows = min(rows, max(1, -(-size // workers)))
    return [(start, min(start + rows, size)) for start in range(0, size, rows)]


def dominance(profile, relax=None, weights=None, workers=1, keep_matrix=True):
    """
    Relaxed dominance relationships among all references.

    Args:
        profile (DistanceProfile): Distances from the target.
        relax (float, optional): Fraction of comparisons that must be better
            or tied, in (0.5, 1]. Defaults to ``settings.POEM_RELAX``.
        weights (Sequence[float], optional): Per-scheme weights; uniform when
            omitted.
        workers (int): Threads for the row blocks. Results do not depend on it.
        keep_matrix (bool): Also return the ``(M, M)`` score matrix.

    Returns:
        DominanceResult
    """
    relax = resolve_relax(relax)
    dist = profile.dist
    scheme_count, size = dist.shape
    if weights is not None:
        weights = _normalise_weights(weights, scheme_count)

    dom_matrix = np.empty((size, size), dtype=np.float64) if keep_matrix else None
    row_sums = np.empty(size, dtype=np.float64)
    dom = np.empty(size, dtype=np.int64)
    sub = np.empty(size, dtype=np.int64)

    def run(block):
        start, stop = block
        scores, sums, block_dom, block_sub = _dominance_rows(dist, start, stop, relax, weights)
        if dom_matrix is not None:
            dom_matrix[start:stop] = scores
        row_sums[start:stop] = sums
        dom[start:stop] = block_dom
        sub[start:stop] = block_sub

    blocks = _row_blocks(size, scheme_count, workers)
    if workers > 1 and len(blocks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            list(executor.map(run, blocks))
    else:
        for block in blocks:
            run(block)

    return DominanceResult(row_sums=row_sums, dom=dom, sub=sub, relax=relax, dom_matrix=dom_matrix)


@dataclass(frozen=True, eq=False)
class FitnessVector:
    fitness: np.ndarray

    @property
    def total(self):
        return float(self.fitness.sum())

    @property
    def shares(self):
        total = self.total
        if total <= 0:
            return np.zeros_like(self.fitness)
        return self.fitness / total

    def __len__(self):
        return len(self.fitness)


def fitness(dom_result):
    """``row_sum * (dom + 0.05) / (sub + 0.05)`` for every reference."""
    values = dom_result.row_sums * (dom_result.dom + FITNESS_OFFSET) / (dom_result.sub + FITNESS_OFFSET)
    if (values < 0).any():
        raise InvariantViolation("Negative fitness value")
    return FitnessVector(values)


@dataclass(frozen=True)
class ExplanationEntry:
    key: str
    fitness: float
    fitness_share: float
    label: object
    distances: tuple


@dataclass(frozen=True)
class Prediction:
    """
    Outcome for one target. Classification fills ``probabilities`` (in label
    space order) and ``predicted``; regression fills ``value`` and sets
    ``predicted`` to the same number.
    """
    target_key: str | None
    probabilities: dict = field(default_factory=dict)
    value: float | None = None
    predicted: object = None
    explanation: tuple = ()
    degenerate: bool = False

    @property
    def coverage(self):
        """Fitness share covered by the explanation entries."""
        return float(sum(entry.fitness_share for entry in self.explanation))

    def probability(self, label):
        return self.probabilities.get(str(label), 0.0)


def _explain(fitness_vector, library, indices, profile, depth):
    values = fitness_vector.fitness
    shares = fitness_vector.shares
    order = np.argsort(-values, kind='stable')[:depth]
    entries = []
    for position in order:
        reference = int(indices[position])
        distances = tuple(float(value) for value in profile.dist[:, position]) if profile is not None else ()
        entries.append(ExplanationEntry(
            key=library.keys[reference],
            fitness=float(values[position]),
            fitness_share=float(shares[position]),
            label=library.label(reference),
            distances=distances,
        ))
    return tuple(entries)


def _warn_degenerate(target_key):
    message = f"All fitness values are zero for target {target_key!r}; falling back to an unweighted answer"
    warnings.warn(message, DegenerateFitness, stacklevel=3)
    logger.warning(message)


def _reference_indices(library, indices, count):
    if indices is None:
        indices = np.arange(library.size)
    indices = np.asarray(indices, dtype=np.int64)
    if len(indices) != count:
        raise InvariantViolation(f"{count} fitness values for {len(indices)} references")
    return indices


def predict_class(fitness_vector, library, indices=None, profile=None, depth=None, target_key=None):
    """
    Fitness-weighted class probabilities.

    Args:
        fitness_vector (FitnessVector): Fitness of the references.
        library (ReferenceLibrary): Classification library.
        indices (Sequence[int], optional): Library rows the fitness values
            belong to; all rows when omitted.
        profile (DistanceProfile, optional): Distances, for the explanation.
        depth (int, optional): Number of explanation entries.
        target_key (str, optional): Identifier carried on the prediction.

    Returns:
        Prediction: Probabilities sum to 1; the predicted label is the first
        maximum in label space order.
    """
    depth = resolve_depth(depth)
    indices = _reference_indices(library, indices, len(fitness_vector))
    codes = library.targets[indices]
    total = fitness_vector.total
    degenerate = not total > 0
    if degenerate:
        _warn_degenerate(target_key)
        probabilities = np.full(library.class_count, 1.0 / library.class_count)
    else:
        probabilities = np.bincount(codes, weights=fitness_vector.fitness, minlength=library.class_count) / total
    predicted = library.label_space[int(np.argmax(probabilities))]
    return Prediction(
        target_key=target_key,
        probabilities={label: float(probability) for label, probability in zip(library.label_space, probabilities)},
        predicted=predicted,
        explanation=_explain(fitness_vector, library, indices, profile, depth),
        degenerate=degenerate,
    )


def predict_value(fitness_vector, library, indices=None, profile=None, depth=None, target_key=None):
    """Fitness-weighted mean of continuous labels; unweighted mean if all fitness is zero."""
    depth = resolve_depth(depth)
    indices = _reference_indices(library, indices, len(fitness_vector))
    values = library.targets[indices]
    total = fitness_vector.total
    degenerate = not total > 0
    if degenerate:
        _warn_degenerate(target_key)
        value = float(values.mean())
    else:
        value = float(np.dot(fitness_vector.fitness, values) / total)
    return Prediction(
        target_key=target_key,
        value=value,
        predicted=value,
        explanation=_explain(fitness_vector, library, indices, profile, depth),
        degenerate=degenerate,
    )


def predict_profile(profile, library, indices=None, relax=None, depth=None, workers=1, target_key=None,
                    weights=None):
    """Dominance, fitness and prediction for an already embedded target."""
    result = dominance(profile, relax=relax, weights=weights, workers=workers, keep_matrix=False)
    fitness_vector = fitness(result)
    predictor = predict_class if library.is_classification else predict_value
    return predictor(fitness_vector, library, indices=indices, profile=profile, depth=depth,
                     target_key=target_key)


def target_fingerprints(target, library, external=None):
    """
    Fingerprints of ``target`` in library scheme order.

    Args:
        target (str or Sequence[Fingerprint]): SMILES text, or a ready
            fingerprint row.
        library (ReferenceLibrary): Library whose schemes to follow.
        external (dict, optional): ``{scheme_id: Fingerprint}`` for the
            library's external schemes.

    Raises:
        UnparsableMolecule: SMILES cannot be parsed.
        SchemeMismatch: A fingerprint is missing or belongs to another scheme.
    """
    if isinstance(target, str):
        external = external or {}
        native = native_fingerprints(parse_smiles(target), library.scheme_set)
        row = []
        for scheme in library.scheme_set:
            fp = native.get(scheme.scheme_id) or external.get(scheme.scheme_id)
            if not isinstance(fp, Fingerprint):
                raise SchemeMismatch(f"No fingerprint for external scheme {scheme.scheme_id}")
            row.append(fp)
    else:
        row = list(target)
    if len(row) != library.scheme_count:
        raise SchemeMismatch(f"Got {len(row)} fingerprints for {library.scheme_count} schemes")
    for scheme, fp in zip(library.scheme_set, row):
        if fp.scheme_id != scheme.scheme_id or fp.length != scheme.length:
            raise SchemeMismatch(f"Expected {scheme.scheme_id} ({scheme.length} bits), "
                                 f"got {fp.scheme_id} ({fp.length} bits)")
    return tuple(row)


def predict(target, library, relax=None, depth=None, workers=1, target_key=None, external=None, weights=None):
    """
    Predict a label (or value) for one target: embed, dominance, fitness, vote.

    Args:
        target (str or Sequence[Fingerprint]): SMILES or a fingerprint row.
        library (ReferenceLibrary): Reference library.
        relax (float, optional): Relaxation fraction.
        depth (int, optional): Explanation depth.
        workers (int): Threads for the dominance rows.
        target_key (str, optional): Identifier for the result.
        external (dict, optional): External fingerprints of a SMILES target.
        weights (Sequence[float], optional): Per-scheme weights.

    Returns:
        Prediction
    """
    if target_key is None and isinstance(target, str):
        target_key = target
    profile = embed(target_fingerprints(target, library, external), library)
    return predict_profile(profile, library, relax=relax, depth=depth, workers=workers,
                           target_key=target_key, weights=weights)


def predict_many(targets, library, relax=None, depth=None, workers=None, keys=None, external=None):
    """
    Predict many independent targets over one shared library.

    Targets are spread over a thread pool; each one runs its dominance
    sequentially. Results come back in input order.

    Args:
        targets (Sequence): SMILES strings or fingerprint rows.
        keys (Sequence[str], optional): Target keys.
        external (Sequence[dict], optional): Per-target external fingerprints.
    """
    relax = resolve_relax(relax)
    workers = resolve_workers(workers)
    targets = list(targets)
    if keys is None:
        keys = [target if isinstance(target, str) else str(index) for index, target in enumerate(targets)]
    if external is None:
        external = [None] * len(targets)

    def run(index):
        return predict(targets[index], library, relax=relax, depth=depth, workers=1,
                       target_key=keys[index], external=external[index])

    if workers <= 1 or len(targets) <= 1:
        return [run(index) for index in range(len(targets))]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, range(len(targets))))
