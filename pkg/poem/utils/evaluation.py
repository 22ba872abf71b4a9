"""
Cross-validation harnesses and metrics.

Held-out molecules are never refingerprinted: each one is embedded against
the whole library and the distance profile is then restricted to the
training columns, which gives the same numbers as predicting against a
library rebuilt from the training rows alone.
"""
import enum
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import sparse, stats
from scipy.sparse.csgraph import connected_components

from ..exceptions import (
    ClassCoverageImpossible,
    ConfigurationError,
    EvaluationError,
    InvariantViolation,
    LengthMismatch,
    SingleClass,
    StratificationImpossible,
)
from .dominance import embed, predict_profile, resolve_relax, resolve_workers
from .fingerprints import pairwise_distances

logger = logging.getLogger(__name__)

# Explanations are not needed for scoring
_EVAL_DEPTH = 1


class SplitKind(enum.Enum):
    LOO = 'loo'
    SPLIT = 'split'
    KFOLD = 'kfold'
    CLUSTER = 'cluster'

    def __str__(self):
        return self.value


@dataclass(frozen=True)
class SplitPlan:
    kind: SplitKind
    seed: int = 0
    test_fraction: float = 0.2
    k: int = 5
    tanimoto_threshold: float | None = None
    repeats: int = 1
    cluster_scheme: str = 'morgan4'

    def __post_init__(self):
        if isinstance(self.kind, str):
            object.__setattr__(self, 'kind', SplitKind(self.kind))
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigurationError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        if self.repeats < 1:
            raise ConfigurationError(f"repeats must be >= 1, got {self.repeats}")
        if self.kind is SplitKind.CLUSTER:
            if self.tanimoto_threshold is None:
                raise ConfigurationError("Cluster validation needs a Tanimoto threshold")
            if not 0.0 <= self.tanimoto_threshold < 1.0:
                raise ConfigurationError(f"Tanimoto threshold must be in [0, 1), got {self.tanimoto_threshold}")

    def describe(self):
        if self.kind is SplitKind.SPLIT:
            return f"split test_fraction={self.test_fraction} repeats={self.repeats}"
        if self.kind is SplitKind.KFOLD:
            return f"kfold k={self.k} repeats={self.repeats}"
        if self.kind is SplitKind.CLUSTER:
            return (f"cluster threshold={self.tanimoto_threshold} test_fraction={self.test_fraction} "
                    f"scheme={self.cluster_scheme} repeats={self.repeats}")
        return str(self.kind)

    def repeat_rng(self, repeat):
        return np.random.default_rng(np.random.SeedSequence([self.seed, repeat]))


@dataclass(frozen=True)
class MoleculePrediction:
    key: str
    true: object
    predicted: object
    # positive-class probability (classification) or predicted value (regression)
    probability: float
    true_probability: float | None
    repeat: int
    fold: int
    probabilities: dict = field(default_factory=dict)


@dataclass(frozen=True)
class FoldScore:
    repeat: int
    fold: int
    score: float | None
    n_train: int
    n_test: int
    seconds: float = 0.0
    threshold: float | None = None
    test_train_ratio: float | None = None
    min_cross_distance: float | None = None


@dataclass
class EvalResult:
    plan: str
    metric: str
    seed: int
    scheme_ids: tuple
    dataset: str = ''
    folds: list = field(default_factory=list)
    predictions: list = field(default_factory=list)
    repeat_scores: list = field(default_factory=list)

    @property
    def scores(self):
        return [fold.score for fold in self.folds if fold.score is not None]

    @property
    def score(self):
        """Mean pooled score over repeats."""
        values = [score for score in self.repeat_scores if score is not None]
        return float(np.mean(values)) if values else None

    @property
    def runtime(self):
        return float(sum(fold.seconds for fold in self.folds))

    def aggregate(self):
        scores = self.scores
        if not scores:
            return {'mean': None, 'min': None, 'max': None}
        return {'mean': float(np.mean(scores)), 'min': float(np.min(scores)), 'max': float(np.max(scores))}

    def box_stats(self):
        """Min, quartiles and max of the per-repeat scores."""
        values = [score for score in self.repeat_scores if score is not None]
        if not values:
            return None
        q = np.percentile(values, [0, 25, 50, 75, 100])
        return dict(zip(('min', 'q1', 'median', 'q3', 'max'), (float(value) for value in q)))

    def mean_true_probability(self):
        values = [record.true_probability for record in self.predictions if record.true_probability is not None]
        return float(np.mean(values)) if values else None


def roc_auc(scores, labels):
    """
    ROC AUC as the Mann-Whitney probability that a random positive outranks
    a random negative, ties counting one half.

    Args:
        scores (Sequence[float]): Positive-class scores.
        labels (Sequence[bool | int]): True when the example is positive.

    Raises:
        SingleClass: No positives or no negatives.
        LengthMismatch: Inputs of different length.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels).astype(bool)
    if scores.shape != labels.shape:
        raise LengthMismatch(f"{len(scores)} scores for {len(labels)} labels")
    positives = int(labels.sum())
    negatives = len(labels) - positives
    if positives == 0 or negatives == 0:
        raise SingleClass(f"ROC AUC needs both classes ({positives} positive, {negatives} negative)")
    ranks = stats.rankdata(scores)
    rank_sum = ranks[labels].sum()
    return float((rank_sum - positives * (positives + 1) / 2.0) / (positives * negatives))


def macro_roc_auc(probabilities, truth, label_space):
    """One-vs-rest ROC AUC averaged over the classes present in ``truth``."""
    probabilities = np.asarray(probabilities, dtype=np.float64)
    truth = np.asarray(truth)
    values = []
    for column, label in enumerate(label_space):
        positive = truth == label
        if positive.all() or not positive.any():
            continue
        values.append(roc_auc(probabilities[:, column], positive))
    if not values:
        raise SingleClass("ROC AUC needs at least two classes in the evaluated molecules")
    return float(np.mean(values))


def rmse(predicted, truth):
    """Root mean squared error."""
    predicted = np.asarray(predicted, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if predicted.shape != truth.shape or predicted.size == 0:
        raise LengthMismatch(f"rmse needs equal non-empty inputs, got {predicted.size} and {truth.size}")
    return float(np.sqrt(np.mean((predicted - truth) ** 2)))


def positive_label(library):
    """The class scored as positive: '1' when present, else the last label."""
    return '1' if '1' in library.label_space else library.label_space[-1]


def metric_name(library):
    return 'roc_auc' if library.is_classification else 'rmse'


def score_predictions(library, records):
    """ROC AUC (macro one-vs-rest beyond two classes) or RMSE; None when undefined."""
    if not records:
        return None
    if not library.is_classification:
        return rmse([record.predicted for record in records], [record.true for record in records])
    try:
        if library.class_count == 2:
            positive = positive_label(library)
            return roc_auc([record.probability for record in records],
                           [record.true == positive for record in records])
        matrix = [[record.probabilities[label] for label in library.label_space] for record in records]
        return macro_roc_auc(matrix, [record.true for record in records], library.label_space)
    except SingleClass:
        return None


def _record(library, index, prediction, repeat, fold):
    truth = library.label(index)
    if library.is_classification:
        return MoleculePrediction(
            key=library.keys[index],
            true=truth,
            predicted=prediction.predicted,
            probability=prediction.probability(positive_label(library)),
            true_probability=prediction.probability(truth),
            repeat=repeat,
            fold=fold,
            probabilities=dict(prediction.probabilities),
        )
    return MoleculePrediction(
        key=library.keys[index],
        true=truth,
        predicted=prediction.value,
        probability=prediction.value,
        true_probability=None,
        repeat=repeat,
        fold=fold,
    )


def predict_held_out(library, test_indices, train_indices, relax=None, workers=1, repeat=0, fold=0):
    """
    Predict every test molecule against the training rows.

    Returns:
        list[MoleculePrediction]: In ``test_indices`` order.
    """
    train_indices = np.asarray(train_indices, dtype=np.int64)
    if train_indices.size == 0:
        raise EvaluationError("Empty training set")

    def run(index):
        profile = embed(library.fingerprint_row(index), library).columns(train_indices)
        prediction = predict_profile(profile, library, indices=train_indices, relax=relax, depth=_EVAL_DEPTH,
                                     workers=1, target_key=library.keys[index])
        return _record(library, index, prediction, repeat, fold)

    test_indices = [int(index) for index in test_indices]
    if workers <= 1 or len(test_indices) <= 1:
        return [run(index) for index in test_indices]
    with ThreadPoolExecutor(max_workers=workers) as executor:
        return list(executor.map(run, test_indices))


def _run_fold(library, result, test_indices, train_indices, relax, workers, repeat, fold, **extra):
    started = time.perf_counter()
    records = predict_held_out(library, test_indices, train_indices, relax=relax, workers=workers,
                               repeat=repeat, fold=fold)
    seconds = time.perf_counter() - started
    score = score_predictions(library, records)
    result.predictions.extend(records)
    result.folds.append(FoldScore(repeat=repeat, fold=fold, score=score, n_train=len(train_indices),
                                  n_test=len(test_indices), seconds=seconds, **extra))
    logger.info(f"{result.plan} repeat {repeat} fold {fold}: {len(test_indices)} test / "
                f"{len(train_indices)} train, {result.metric}="
                f"{'n/a' if score is None else f'{score:.6f}'} in {seconds:.2f}s")
    return records


def _new_result(library, plan_name, seed):
    return EvalResult(plan=plan_name, metric=metric_name(library), seed=seed,
                      scheme_ids=library.scheme_set.ids, dataset=library.metadata.name)


def _class_members(library):
    return [np.flatnonzero(library.targets == code) for code in range(library.class_count)]


def loo_eval(library, relax=None, workers=None):
    """
    Leave-one-out: every molecule predicted from all the others.

    Raises:
        EvaluationError: Fewer than 3 molecules, or a class with a single member.
    """
    relax = resolve_relax(relax)
    workers = resolve_workers(workers)
    if library.size < 3:
        raise EvaluationError(f"Leave-one-out needs at least 3 molecules, got {library.size}")
    if library.is_classification:
        counts = library.class_counts()
        if (counts < 2).any():
            sparse_classes = [label for label, count in zip(library.label_space, counts) if count < 2]
            raise EvaluationError(f"Classes {sparse_classes} vanish when their only molecule is left out")

    result = _new_result(library, 'loo', 0)
    everything = np.arange(library.size)
    started = time.perf_counter()

    def run(index):
        train = np.delete(everything, index)
        profile = embed(library.fingerprint_row(index), library).columns(train)
        prediction = predict_profile(profile, library, indices=train, relax=relax, depth=_EVAL_DEPTH,
                                     workers=1, target_key=library.keys[index])
        return _record(library, index, prediction, 0, int(index))

    if workers <= 1:
        records = [run(index) for index in everything]
    else:
        with ThreadPoolExecutor(max_workers=workers) as executor:
            records = list(executor.map(run, everything))
    seconds = time.perf_counter() - started

    score = score_predictions(library, records)
    result.predictions.extend(records)
    result.folds.append(FoldScore(repeat=0, fold=0, score=score, n_train=library.size - 1,
                                  n_test=library.size, seconds=seconds))
    result.repeat_scores.append(score)
    logger.info(f"loo on {library.size} molecules: {result.metric}="
                f"{'n/a' if score is None else f'{score:.6f}'} in {seconds:.2f}s")
    return result


def stratified_test_indices(library, test_fraction, rng):
    """
    Draw a test set holding ``round(n_c * test_fraction)`` molecules of every
    class, clamped so each class keeps at least one molecule on both sides.
    """
    if not library.is_classification:
        size = min(max(1, round(library.size * test_fraction)), library.size - 2)
        if size < 1:
            raise StratificationImpossible(f"Cannot split {library.size} molecules")
        return np.sort(rng.permutation(library.size)[:size])
    chosen = []
    for label, members in zip(library.label_space, _class_members(library)):
        if len(members) < 2:
            raise StratificationImpossible(
                f"Class {label!r} has {len(members)} molecule(s); at least 2 are needed to split it"
            )
        count = min(max(1, round(len(members) * test_fraction)), len(members) - 1)
        chosen.append(rng.permutation(members)[:count])
    return np.sort(np.concatenate(chosen))


def split_eval(library, plan, relax=None, workers=None):
    """Stratified random split(s); each repeat draws from its own seed sequence."""
    relax = resolve_relax(relax)
    workers = resolve_workers(workers)
    result = _new_result(library, plan.describe(), plan.seed)
    for repeat in range(plan.repeats):
        test = stratified_test_indices(library, plan.test_fraction, plan.repeat_rng(repeat))
        train = np.setdiff1d(np.arange(library.size), test)
        records = _run_fold(library, result, test, train, relax, workers, repeat, 0)
        result.repeat_scores.append(score_predictions(library, records))
    return result


def stratified_folds(library, k, rng):
    """
    Deal molecules into ``k`` folds round-robin, class by class, after a
    seeded shuffle inside each class.
    """
    if k < 2 or k > library.size:
        raise StratificationImpossible(f"k must be between 2 and {library.size}, got {k}")
    if library.is_classification:
        groups = _class_members(library)
        for label, members in zip(library.label_space, groups):
            if len(members) < 2:
                raise StratificationImpossible(f"Class {label!r} has fewer than 2 molecules")
        order = np.concatenate([rng.permutation(members) for members in groups])
    else:
        order = rng.permutation(library.size)
    folds = [[] for _ in range(k)]
    for position, index in enumerate(order):
        folds[position % k].append(int(index))
    return [np.sort(np.array(fold, dtype=np.int64)) for fold in folds]


def kfold_eval(library, plan, relax=None, workers=None):
    """Stratified k-fold; per-fold scores plus a pooled score per repeat."""
    relax = resolve_relax(relax)
    workers = resolve_workers(workers)
    result = _new_result(library, plan.describe(), plan.seed)
    everything = np.arange(library.size)
    for repeat in range(plan.repeats):
        pooled = []
        for fold, test in enumerate(stratified_folds(library, plan.k, plan.repeat_rng(repeat))):
            train = np.setdiff1d(everything, test)
            pooled.extend(_run_fold(library, result, test, train, relax, workers, repeat, fold))
        result.repeat_scores.append(score_predictions(library, pooled))
    return result


def single_linkage_clusters(distances, threshold):
    """Connected components of the graph linking pairs closer than ``threshold``."""
    adjacency = distances < threshold
    np.fill_diagonal(adjacency, False)
    count, labels = connected_components(sparse.csr_matrix(adjacency), directed=False)
    return [np.flatnonzero(labels == cluster) for cluster in range(count)]


def cluster_test_indices(library, clusters, test_fraction, rng):
    """
    Assign whole clusters to the test side, largest first (seeded tie-break),
    skipping clusters that would overshoot the target size or take the last
    training molecule of a class; then make sure every class is represented
    in the test set.

    Raises:
        ClassCoverageImpossible: No admissible assignment puts every class on
            both sides.
    """
    size = library.size
    target = min(max(1, round(size * test_fraction)), size - 2)
    tiebreak = rng.permutation(len(clusters))
    order = sorted(range(len(clusters)), key=lambda cluster: (-len(clusters[cluster]), tiebreak[cluster]))

    if library.is_classification:
        train_left = library.class_counts().copy()
        cluster_counts = [np.bincount(library.targets[members], minlength=library.class_count)
                          for members in clusters]
    chosen = []
    taken = 0

    def admissible(cluster, limit):
        if cluster in chosen or taken + len(clusters[cluster]) > limit:
            return False
        return not library.is_classification or bool((train_left - cluster_counts[cluster] >= 1).all())

    def take(cluster):
        nonlocal taken
        chosen.append(cluster)
        taken += len(clusters[cluster])
        if library.is_classification:
            train_left[:] -= cluster_counts[cluster]

    for cluster in order:
        if admissible(cluster, target):
            take(cluster)
        if taken >= target:
            break
    if not chosen:
        for cluster in reversed(order):
            if admissible(cluster, size - 2):
                take(cluster)
                break

    if library.is_classification:
        for code, label in enumerate(library.label_space):
            if any(cluster_counts[cluster][code] for cluster in chosen):
                continue
            for cluster in order:
                if cluster_counts[cluster][code] and admissible(cluster, size - 2):
                    take(cluster)
                    break
            else:
                raise ClassCoverageImpossible(
                    f"No cluster assignment puts class {label!r} on both the test and the training side"
                )

    if not chosen:
        raise ClassCoverageImpossible("Every cluster is too large to leave a training set")
    return np.sort(np.concatenate([clusters[cluster] for cluster in chosen]))


def cluster_eval(library, plan, relax=None, workers=None, distances=None):
    """
    Nested cluster validation: single-linkage clusters at the Tanimoto
    threshold (on the plan's cluster scheme) are kept whole, so every test
    molecule is at least the threshold away from every training molecule.

    Raises:
        UnknownScheme: The cluster scheme is not in the library.
        ClassCoverageImpossible: No assignment covers every class.
        InvariantViolation: The distance guarantee fails.
    """
    relax = resolve_relax(relax)
    workers = resolve_workers(workers)
    threshold = plan.tanimoto_threshold
    if distances is None:
        position = library.scheme_set.index(plan.cluster_scheme)
        distances = pairwise_distances(library.fp_matrix[position])
    clusters = single_linkage_clusters(distances, threshold)
    logger.info(f"{len(clusters)} clusters at Tanimoto distance < {threshold} on {plan.cluster_scheme}")

    result = _new_result(library, plan.describe(), plan.seed)
    everything = np.arange(library.size)
    for repeat in range(plan.repeats):
        test = cluster_test_indices(library, clusters, plan.test_fraction, plan.repeat_rng(repeat))
        train = np.setdiff1d(everything, test)
        min_cross = float(distances[np.ix_(test, train)].min())
        if min_cross < threshold:
            raise InvariantViolation(
                f"Cluster split violates the distance guarantee: {min_cross:.6f} < {threshold}"
            )
        if library.is_classification and (library.class_counts(train) == 0).any():
            raise InvariantViolation("Cluster split left a class without training molecules")
        records = _run_fold(library, result, test, train, relax, workers, repeat, 0, threshold=threshold,
                            test_train_ratio=len(test) / len(train), min_cross_distance=min_cross)
        result.repeat_scores.append(score_predictions(library, records))
    return result


def cluster_sweep(library, thresholds, plan, relax=None, workers=None):
    """``cluster_eval`` at every threshold, sharing one pairwise distance matrix."""
    position = library.scheme_set.index(plan.cluster_scheme)
    distances = pairwise_distances(library.fp_matrix[position])
    results = []
    for threshold in thresholds:
        threshold_plan = SplitPlan(kind=SplitKind.CLUSTER, seed=plan.seed, test_fraction=plan.test_fraction,
                                   tanimoto_threshold=threshold, repeats=plan.repeats,
                                   cluster_scheme=plan.cluster_scheme)
        results.append(cluster_eval(library, threshold_plan, relax=relax, workers=workers, distances=distances))
    return results


def single_scheme_eval(library, scheme_id, relax=None, workers=None):
    """
    Leave-one-out with only one scheme.

    Raises:
        UnknownScheme: ``scheme_id`` is not in the library.
    """
    result = loo_eval(library.restrict_schemes([scheme_id]), relax=relax, workers=workers)
    result.plan = f"single scheme={scheme_id}"
    return result


def consensus_comparison(library, scheme_ids=None, relax=None, workers=None):
    """Consensus leave-one-out next to single-scheme leave-one-out for every scheme."""
    scheme_ids = library.scheme_set.ids if scheme_ids is None else tuple(scheme_ids)
    results = {'consensus': loo_eval(library, relax=relax, workers=workers)}
    for scheme_id in scheme_ids:
        results[scheme_id] = single_scheme_eval(library, scheme_id, relax=relax, workers=workers)
    return results


def run_plan(library, plan, relax=None, workers=None):
    if plan.kind is SplitKind.LOO:
        return loo_eval(library, relax=relax, workers=workers)
    if plan.kind is SplitKind.SPLIT:
        return split_eval(library, plan, relax=relax, workers=workers)
    if plan.kind is SplitKind.KFOLD:
        return kfold_eval(library, plan, relax=relax, workers=workers)
    return cluster_eval(library, plan, relax=relax, workers=workers)


# Reports

def _number(value):
    if value is None:
        return ''
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def report_lines(result, header=True):
    """
    The machine-readable report: ``#`` header lines, the fold table and the
    per-molecule table, each a CSV block with its own header row. Runtimes
    are left out so repeated runs produce identical files.
    """
    lines = []
    if header:
        lines += [
            f"# dataset={result.dataset}",
            f"# plan={result.plan}",
            f"# seed={result.seed}",
            f"# schemes={','.join(result.scheme_ids)}",
        ]
    aggregate = result.aggregate()
    lines.append(f"# metric={result.metric} score={_number(result.score)} mean={_number(aggregate['mean'])} "
                 f"min={_number(aggregate['min'])} max={_number(aggregate['max'])}")
    box = result.box_stats()
    if box is not None and len(result.repeat_scores) > 1:
        lines.append('# box ' + ' '.join(f"{name}={_number(value)}" for name, value in box.items()))
    true_probability = result.mean_true_probability()
    if true_probability is not None:
        lines.append(f"# mean_true_probability={_number(true_probability)}")

    folds = pd.DataFrame([
        {
            'repeat': fold.repeat,
            'fold': fold.fold,
            'score': _number(fold.score),
            'n_train': fold.n_train,
            'n_test': fold.n_test,
            'threshold': _number(fold.threshold),
            'test_train_ratio': _number(fold.test_train_ratio),
            'min_cross_distance': _number(fold.min_cross_distance),
        }
        for fold in result.folds
    ], columns=['repeat', 'fold', 'score', 'n_train', 'n_test', 'threshold', 'test_train_ratio',
                'min_cross_distance'])
    lines.append('# folds')
    lines.append(folds.to_csv(index=False, lineterminator='\n').rstrip('\n'))

    predictions = pd.DataFrame([
        {
            'key': record.key,
            'true': _number(record.true),
            'predicted': _number(record.predicted),
            'probability': _number(record.probability),
            'true_probability': _number(record.true_probability),
            'repeat': record.repeat,
            'fold': record.fold,
        }
        for record in result.predictions
    ], columns=['key', 'true', 'predicted', 'probability', 'true_probability', 'repeat', 'fold'])
    lines.append('# predictions')
    lines.append(predictions.to_csv(index=False, lineterminator='\n').rstrip('\n'))
    return lines


def write_report(results, handle):
    """Write one or more EvalResults (e.g. a threshold sweep) to an open text handle."""
    if isinstance(results, EvalResult):
        results = [results]
    for position, result in enumerate(results):
        handle.write('\n'.join(report_lines(result)) + '\n')
        if position < len(results) - 1:
            handle.write('\n')
