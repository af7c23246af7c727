import argparse
import json
import logging
import os
import sys
import time
import warnings
from datetime import datetime, timezone

import numpy as np
import pandas as pd

from graspflow import (DataError, EvaluatorError, FlowError, NumericError, ShapeError,
                       TrainingDiverged, UsageError)
from graspflow.bench import (fusion_table, introspection_report, plot_fusion,
                             plot_ood, run_mode_coverage, sample_runtime)
from graspflow.checkpoint import load_model, require_kind, save_model
from graspflow.config import load_config_file, resolve_config
from graspflow.datasetgen import augment_negatives, build_dataset, load_dataset
from graspflow.evaluator import evaluate, fuse, ranking, train_evaluator
from graspflow.introspect import auroc, ood_score
from graspflow.models import build_model, sample_grasps, train_model
from graspflow.numerics import make_rng
from graspflow.pointcloud import load_cloud, make_basis

__version__ = '0.1.0'

ABOUT_MSG = '''
    graspflowctl.py <command> [options]

    Flow-based generative grasp synthesis from partial point clouds
    Commands: dataset, train, sample, score, ood, bench
    Version: {}
'''.format(__version__)

COMMANDS = ('dataset', 'train', 'sample', 'score', 'ood', 'bench')
GENERATIVE = ('lvm', 'lvm-light', 'cnf', 'cvae')

logger = logging.getLogger('graspflowctl')


def exit_code(exctype):
    '''
        1 usage, 2 data or model, 3 numeric; anything unexpected counts as
        usage. Shape, flow and evaluator failures come from inputs that do
        not fit the loaded model and count as data errors.
    '''
    if issubclass(exctype, UsageError):
        return 1
    if issubclass(exctype, (DataError, OSError, ShapeError, FlowError, EvaluatorError)):
        return 2
    if issubclass(exctype, NumericError):
        return 3
    return 1


def hook(exctype, value, tb):
    sys.stderr.write('{}: {}\n'.format(exctype.__name__, value))
    sys.exit(exit_code(exctype))


class GraspFlowArgumentParser(argparse.ArgumentParser):

    def error(self, message):
        raise UsageError(message)


def get_argparser():
    argparser = GraspFlowArgumentParser(usage=ABOUT_MSG)
    argparser.add_argument('command', choices=COMMANDS, help='Command to run')
    argparser.add_argument('--config', type=str, help='Config file')
    argparser.add_argument('--seed', type=int, help='Seed for every section')
    argparser.add_argument('--out', type=str, help='Output directory')
    argparser.add_argument('--model', type=str, help='Generative model checkpoint')
    argparser.add_argument('--evaluator', type=str, help='Evaluator checkpoint')
    argparser.add_argument('--dataset', type=str, help='Dataset directory')
    argparser.add_argument('--view', type=int, help='View id inside --dataset')
    argparser.add_argument('--cloud', type=str, help='Binary point cloud file')
    argparser.add_argument('--epsilon', type=float, help='Evaluator weight in [0, 1]')
    argparser.add_argument('--n-grasps', type=int, help='Grasps sampled per cloud')
    argparser.add_argument(
        '--families',
        nargs='+',
        help='Comma separated family lists; two lists compare in vs out of distribution')
    argparser.add_argument('--preset', choices=GENERATIVE, help='Model preset')
    argparser.add_argument('--workers', type=int, help='Dataset worker processes')
    argparser.add_argument(
        '--train-evaluator',
        action='store_true',
        help='Also train the grasp evaluator (train)')
    argparser.add_argument(
        '--coverage',
        action='store_true',
        help='Also run the toy mode coverage comparison (bench)')
    argparser.add_argument('--plots', action='store_true', help='Write plot images (bench)')
    argparser.add_argument('-v', '--version', action='version', version=__version__)
    argparser.add_argument('--verbose', action='store_true', help='Debug logging')
    argparser.add_argument('--quiet', action='store_true', help='Warnings and errors only')
    argparser.add_argument(
        '--debug',
        action='store_true',
        help='Print the whole traceback (useful for debugging)')
    return argparser


def parse_families(values):
    if values is None:
        return None
    families = [tuple(f for f in v.split(',') if f) for v in values]
    if not all(families) or len(families) > 2:
        raise UsageError('--families takes one or two comma separated lists')
    return families


def configure_logging(args):
    level = logging.INFO
    if args.verbose:
        level = logging.DEBUG
    elif args.quiet:
        level = logging.WARNING
    logging.basicConfig(level=level, format='%(asctime)s %(name)s %(levelname)s %(message)s')


class GraspFlowDriver:
    '''
        Runs one command. Every command writes the resolved config as
        config.toml and its timestamps into metadata.json, next to its
        own artifacts in the output directory.
    '''

    def __init__(self, args, argv=None):
        self.args = args
        self.argv = list(argv) if argv is not None else sys.argv[1:]
        self.families = parse_families(args.families)
        flags = {
            'seed': args.seed,
            'model.preset': args.preset,
            'fusion.epsilon': args.epsilon,
            'fusion.n_grasps': args.n_grasps,
            'dataset.workers': args.workers,
        }
        text = load_config_file(args.config) if args.config else None
        out = args.out or os.path.join('runs', args.command)
        self.run = resolve_config(args.command, text, flags, out)
        self.meta = {}
        self.started = None

    def require(self, *names):
        missing = ['--' + n.replace('_', '-') for n in names if getattr(self.args, n) is None]
        if missing:
            raise UsageError('{} needs {}'.format(self.args.command, ', '.join(missing)))

    def path(self, name):
        return os.path.join(self.run.out, name)

    def begin(self):
        os.makedirs(self.run.out, exist_ok=True)
        self.started = time.time()
        with open(self.path('config.toml'), 'w') as f:
            f.write(self.run.dump())

    def finish(self):
        self.meta.update({
            'command': self.args.command,
            'argv': self.argv,
            'version': __version__,
            'started': datetime.fromtimestamp(self.started, timezone.utc).isoformat(),
            'finished': datetime.now(timezone.utc).isoformat(),
            'runtime_seconds': time.time() - self.started,
        })
        with open(self.path('metadata.json'), 'w') as f:
            f.write(json.dumps(self.meta, sort_keys=True, indent=2, default=str) + '\n')

    def load_generative(self):
        return require_kind(load_model(self.args.model), *GENERATIVE)

    def load_evaluator(self):
        return require_kind(load_model(self.args.evaluator), 'evaluator')

    def input_cloud(self):
        if (self.args.cloud is None) == (self.args.view is None):
            raise UsageError('give exactly one of --cloud or --dataset with --view')
        if self.args.cloud is not None:
            return load_cloud(self.args.cloud)
        self.require('dataset')
        dataset = load_dataset(self.args.dataset)
        if self.args.view not in dataset.views:
            raise DataError('no view {} in {}'.format(self.args.view, self.args.dataset))
        return dataset.cloud(self.args.view)

    def dataset(self):
        manifest = build_dataset(self.run.dataset, self.run.out)
        self.meta['manifest'] = {k: manifest[k] for k in
                                 ('n_objects', 'n_views', 'n_records', 'positive_rate')}

    def train(self):
        self.require('dataset')
        dataset = load_dataset(self.args.dataset)
        config = self.run.model
        basis = make_basis(config.bps_points, config.bps_radius, config.bps_seed)
        data = dataset.training_arrays(basis, 'train', positives_only=True)
        model = build_model(config, basis)
        logger.info('training %s on %d grasps from %d views', config.preset,
                    len(data), len(data.features))
        try:
            result = train_model(model, data, self.run.train)
        except TrainingDiverged as e:
            save_model(self.path('model.diverged.gfm'), model,
                       meta={'diverged_at': e.iteration, 'term': e.term})
            raise
        result.curve.to_csv(self.path('loss.csv'), index=False)
        save_model(self.path('model.gfm'), model, meta={'dataset': self.args.dataset})

        if self.args.train_evaluator:
            extra = augment_negatives(dataset, make_rng(self.run.train.seed),
                                      per_positive=self.run.dataset.negatives_per_positive)
            labeled = dataset.training_arrays(basis, 'train', positives_only=False,
                                              extra=extra)
            net, report = train_evaluator(labeled, self.run.train, config, basis)
            save_model(self.path('evaluator.gfm'), net, meta={'report': report})
            self.meta['evaluator'] = report

    def sample(self):
        self.require('model')
        model = self.load_generative()
        cloud = self.input_cloud()
        samples = sample_grasps(model, cloud, self.run.fusion.n_grasps,
                                make_rng(self.run.fusion.seed))
        frame = samples.to_frame()
        frame.to_csv(self.path('grasps.csv'), index=False)
        self.meta['clamped'] = int(frame.clamped.sum())

    def score(self):
        self.require('model', 'evaluator')
        model = self.load_generative()
        net = self.load_evaluator()
        cloud = self.input_cloud()
        samples = sample_grasps(model, cloud, self.run.fusion.n_grasps,
                                make_rng(self.run.fusion.seed))
        decoded = samples.decode()
        scores = evaluate(net, cloud, decoded[0])
        fused = fuse(scores, samples.grasp_logp, self.run.fusion.epsilon)
        order = ranking(fused, samples.grasp_logp)
        frame = samples.to_frame(decoded)
        frame.insert(0, 'fused', fused)
        frame.insert(0, 'score', scores)
        frame.insert(0, 'sample', np.arange(len(frame)))
        frame = frame.iloc[order].reset_index(drop=True)
        frame.insert(0, 'rank', np.arange(len(frame)))
        frame.to_csv(self.path('ranking.csv'), index=False)

    def ood(self):
        self.require('model', 'dataset')
        model = require_kind(load_model(self.args.model), 'lvm', 'lvm-light')
        dataset = load_dataset(self.args.dataset)
        groups = self.families or [None]
        rng = make_rng(self.run.fusion.seed)
        rows = []
        for group, families in enumerate(groups):
            for view_id in dataset.view_ids(families=families):
                view = dataset.views[view_id]
                rows.append({
                    'view': view_id,
                    'group': group,
                    'split': view.split,
                    'family': view.shape.family.value,
                    'ood_score': ood_score(model, dataset.cloud(view_id),
                                           m=self.run.fusion.ood_samples, rng=rng),
                })
        frame = pd.DataFrame(rows, columns=['view', 'group', 'split', 'family', 'ood_score'])
        frame.to_csv(self.path('ood.csv'), index=False)
        if len(groups) == 2:
            inside = frame.loc[frame.group == 0, 'ood_score']
            outside = frame.loc[frame.group == 1, 'ood_score']
            summary = {
                'auroc': auroc(inside, outside),
                'families': [list(families) for families in groups],
                'views': [int(len(inside)), int(len(outside))],
            }
            with open(self.path('ood_summary.json'), 'w') as f:
                f.write(json.dumps(summary, sort_keys=True, indent=2) + '\n')
            self.meta['auroc'] = summary['auroc']
            logger.info('ood AUROC %.3f', summary['auroc'])

    def bench(self):
        self.require('model', 'evaluator', 'dataset')
        model = require_kind(load_model(self.args.model), 'lvm', 'lvm-light')
        net = self.load_evaluator()
        dataset = load_dataset(self.args.dataset)
        fusion = self.run.fusion
        rng = make_rng(fusion.seed)

        table = fusion_table(model, net, dataset, fusion, rng)
        table.to_csv(self.path('report.csv'), index=False)
        frame, summary = introspection_report(model, net, dataset, fusion, rng)
        frame.to_csv(self.path('introspection.csv'), index=False)
        with open(self.path('summary.json'), 'w') as f:
            f.write(json.dumps(summary, sort_keys=True, indent=2) + '\n')
        if self.args.coverage:
            run_mode_coverage(seed=fusion.seed).to_csv(self.path('coverage.csv'), index=False)
        if self.args.plots:
            plot_fusion(table, self.path('fusion.png'))
            plot_ood(frame, self.path('ood.png'))

        view_ids = dataset.view_ids('similar')
        if view_ids:
            # hardware bound, so kept out of the reproducible reports
            self.meta['sample_runtime_seconds'] = sample_runtime(
                model, dataset.cloud(view_ids[0]), fusion.n_grasps, rng=make_rng(fusion.seed))

    def execute(self):
        command_funcs = {
            'dataset': self.dataset,
            'train': self.train,
            'sample': self.sample,
            'score': self.score,
            'ood': self.ood,
            'bench': self.bench,
        }
        self.begin()
        command_funcs[self.args.command]()
        self.finish()
        return 0


def main(argv=None):
    argv = sys.argv[1:] if argv is None else argv
    args = get_argparser().parse_args(argv)
    configure_logging(args)
    if args.debug:
        warnings.simplefilter('default')
    return GraspFlowDriver(args, argv).execute()


if __name__ == '__main__':
    if '--debug' not in sys.argv:
        sys.excepthook = hook
    sys.exit(main())
