import io
import logging

from ._base import PoemCommand
from ...exceptions import ConfigurationError
from ...utils.evaluation import (
    SplitKind,
    SplitPlan,
    cluster_sweep,
    consensus_comparison,
    run_plan,
    single_scheme_eval,
    write_report,
)
from ...utils.library import load_library

logger = logging.getLogger(__name__)

PLANS = ('loo', 'split', 'kfold', 'cluster', 'single')


def summary_line(result):
    score = 'n/a' if result.score is None else f"{result.score:.3f}"
    line = f"{result.plan}: {result.metric} {score}"
    if len(result.folds) > 1:
        aggregate = result.aggregate()
        if aggregate['mean'] is not None:
            line += f" (folds mean {aggregate['mean']:.3f} min {aggregate['min']:.3f} max {aggregate['max']:.3f})"
    distances = [fold.min_cross_distance for fold in result.folds if fold.min_cross_distance is not None]
    if distances:
        ratios = [fold.test_train_ratio for fold in result.folds if fold.test_train_ratio is not None]
        line += f" min_cross_distance {min(distances):.6f} test_train_ratio {ratios[0]:.3f}"
    return line


class Command(PoemCommand):
    help = 'Cross-validate a reference library (leave-one-out, split, k-fold, cluster, single scheme)'

    def add_command_arguments(self, parser):
        parser.add_argument('--library', required=True)
        parser.add_argument('--plan', required=True, choices=PLANS)
        parser.add_argument('--test-fraction', dest='test_fraction', type=float)
        parser.add_argument('--k', type=int)
        parser.add_argument('--threshold', action='append', type=float,
                            help='Minimum Tanimoto distance between test and training molecules (repeatable)')
        parser.add_argument('--cluster-scheme', dest='cluster_scheme', default='morgan4')
        parser.add_argument('--repeats', type=int)
        parser.add_argument('--seed', type=int)
        parser.add_argument('--scheme', help='Scheme for --plan single (default: every scheme plus consensus)')
        parser.add_argument('--relax', type=float)
        parser.add_argument('--out', help='Report file (default: stdout)')

    def run(self, config, **options):
        library = load_library(options['library'])
        plan_name = options['plan']
        workers = config.threads

        if plan_name == 'single':
            if options.get('scheme'):
                results = [single_scheme_eval(library, options['scheme'], relax=config.relax, workers=workers)]
            else:
                results = list(consensus_comparison(library, relax=config.relax, workers=workers).values())
        elif plan_name == 'cluster':
            if not config.thresholds:
                raise ConfigurationError("--plan cluster needs at least one --threshold")
            plan = SplitPlan(kind=SplitKind.CLUSTER, seed=config.seed, test_fraction=config.test_fraction,
                             tanimoto_threshold=config.thresholds[0], repeats=config.repeats,
                             cluster_scheme=options['cluster_scheme'])
            results = cluster_sweep(library, config.thresholds, plan, relax=config.relax, workers=workers)
        else:
            plan = SplitPlan(kind=SplitKind(plan_name), seed=config.seed, test_fraction=config.test_fraction,
                             k=config.k, repeats=config.repeats)
            results = [run_plan(library, plan, relax=config.relax, workers=workers)]

        buffer = io.StringIO()
        write_report(results, buffer)
        self.emit(options.get('out'), buffer.getvalue())

        for result in results:
            line = summary_line(result)
            logger.info(f"{line} ({result.runtime:.2f}s)")
            if options.get('out'):
                self.stdout.write(line)
