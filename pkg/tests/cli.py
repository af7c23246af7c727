import json
import os
import struct
import subprocess
import sys

import numpy as np
import pandas as pd
import pytest

from graspflow import (CheckpointCorruptError, ConfigError, ContractError,
                       DataError, EvaluatorError, FlowError, NumericError,
                       ShapeError, TrainingDiverged, UsageError)
from graspflow.checkpoint import save_model
from graspflow.config import ModelConfig, resolve_config
from graspflow.evaluator import EvaluatorNet
from graspflow.grasp import JOINT_LOWER, JOINT_UPPER
from graspflow.models import CnfModel, LvmModel
from graspflow.pointcloud import (ShapeSpec, make_basis, partial_view,
                                  sample_shape, save_cloud)
from graspflowctl import exit_code, get_argparser, main, parse_families

root = os.path.join(os.path.dirname(os.path.abspath(__file__)), '..')
script = os.path.join(root, 'graspflowctl.py')

config = ModelConfig(grasp_dim=24, latent_dim=2, blocks=1, conditioner_hidden=(8,),
                     embed_hidden=(8,), inference_hidden=(8,), evaluator_hidden=(8,),
                     bps_points=32, identity_init=True)

grasp_columns = (['grasp_logp', 'prior_logp', 'tx', 'ty', 'tz']
                 + ['r{}{}'.format(i, j) for i in range(3) for j in range(3)]
                 + ['j{}'.format(i) for i in range(15)] + ['clamped'])


@pytest.fixture(scope='module')
def artifacts(tmp_path_factory):
    folder = tmp_path_factory.mktemp('artifacts')
    basis = make_basis(32, 0.15, 0)
    paths = {name: str(folder / name) for name in
             ('model.gfm', 'evaluator.gfm', 'cnf.gfm', 'cloud.bin')}
    save_model(paths['model.gfm'], LvmModel(config, basis))
    save_model(paths['evaluator.gfm'], EvaluatorNet(config, basis))
    save_model(paths['cnf.gfm'], CnfModel(ModelConfig(preset='cnf', **{
        k: getattr(config, k) for k in ('grasp_dim', 'latent_dim', 'blocks',
                                        'conditioner_hidden', 'embed_hidden',
                                        'bps_points', 'identity_init')}), basis))
    cloud = sample_shape(ShapeSpec('cylinder', (0.03, 0.15), n_points=512), 0)
    save_cloud(paths['cloud.bin'], partial_view(cloud, np.array([1.0, 0.0, 0.0])))
    return paths


def test_argparser_errors():
    argparser = get_argparser()
    with pytest.raises(UsageError):
        argparser.parse_args(['nonsense'])
    with pytest.raises(UsageError):
        argparser.parse_args(['sample', '--view', 'first'])
    with pytest.raises(UsageError):
        argparser.parse_args(['train', '--preset', 'gan'])
    args = argparser.parse_args(['bench', '--seed', '3', '--families', 'box,cylinder', 'lshape'])
    assert args.seed == 3 and args.families == ['box,cylinder', 'lshape']


@pytest.mark.parametrize('exctype,code', [
    (UsageError, 1), (DataError, 2), (ConfigError, 2), (CheckpointCorruptError, 2),
    (FileNotFoundError, 2), (ShapeError, 2), (FlowError, 2), (EvaluatorError, 2),
    (NumericError, 3), (TrainingDiverged, 3), (ContractError, 1), (ValueError, 1),
])
def test_exit_codes(exctype, code):
    assert exit_code(exctype) == code


def test_parse_families():
    assert parse_families(None) is None
    assert parse_families(['box,cylinder', 'lshape']) == [('box', 'cylinder'), ('lshape',)]
    with pytest.raises(UsageError):
        parse_families(['box', 'cylinder', 'lshape'])
    with pytest.raises(UsageError):
        parse_families([','])


def test_sample(artifacts, tmp_path):
    out = str(tmp_path / 'sample')
    argv = ['sample', '--model', artifacts['model.gfm'], '--cloud', artifacts['cloud.bin'],
            '--out', out, '--n-grasps', '8', '--seed', '3']
    assert main(argv) == 0
    grasps = pd.read_csv(os.path.join(out, 'grasps.csv'))
    assert len(grasps) == 8
    assert list(grasps.columns) == grasp_columns
    assert grasps.clamped.dtype.kind == 'i' and (grasps.clamped >= 0).all()
    rotations = grasps[grasp_columns[5:14]].to_numpy().reshape(-1, 3, 3)
    assert np.allclose(rotations @ rotations.transpose(0, 2, 1), np.eye(3), atol=1e-6)
    joints = grasps[grasp_columns[14:29]].to_numpy()
    assert np.all(joints >= JOINT_LOWER - 1e-12) and np.all(joints <= JOINT_UPPER + 1e-12)

    with open(os.path.join(out, 'config.toml')) as f:
        run = resolve_config('sample', f.read())
    assert run.fusion.n_grasps == 8 and run.fusion.seed == 3
    with open(os.path.join(out, 'metadata.json')) as f:
        meta = json.load(f)
    assert meta['command'] == 'sample' and meta['argv'] == argv
    assert meta['clamped'] == grasps.clamped.sum()

    again = str(tmp_path / 'again')
    assert main(argv[:-6] + ['--out', again, '--n-grasps', '8', '--seed', '3']) == 0
    with open(os.path.join(out, 'grasps.csv')) as a, open(os.path.join(again, 'grasps.csv')) as b:
        assert a.read() == b.read()


def test_score_with_evaluator_only(artifacts, tmp_path):
    out = str(tmp_path / 'score')
    argv = ['score', '--model', artifacts['model.gfm'], '--evaluator', artifacts['evaluator.gfm'],
            '--cloud', artifacts['cloud.bin'], '--out', out, '--n-grasps', '16',
            '--epsilon', '1.0']
    assert main(argv) == 0
    ranking = pd.read_csv(os.path.join(out, 'ranking.csv'))
    assert list(ranking.columns[:6]) == ['rank', 'sample', 'score', 'fused', 'grasp_logp',
                                         'prior_logp']
    assert list(ranking['rank']) == list(range(16))
    assert sorted(ranking['sample']) == list(range(16))
    assert np.all(np.diff(ranking['score']) <= 0)
    assert np.allclose(ranking['fused'], ranking['score'])


def test_missing_inputs(artifacts, tmp_path):
    out = str(tmp_path / 'missing')
    with pytest.raises(UsageError):
        main(['sample', '--cloud', artifacts['cloud.bin'], '--out', out])
    with pytest.raises(UsageError):
        main(['sample', '--model', artifacts['model.gfm'], '--out', out])
    with pytest.raises(UsageError):
        main(['sample', '--model', artifacts['model.gfm'], '--cloud', artifacts['cloud.bin'],
              '--view', '0', '--out', out])
    with pytest.raises(UsageError):
        main(['sample', '--model', artifacts['model.gfm'], '--view', '0', '--out', out])
    with pytest.raises(UsageError):
        main(['score', '--model', artifacts['model.gfm'], '--cloud', artifacts['cloud.bin'],
              '--out', out])


def test_wrong_checkpoint_kinds(artifacts, tmp_path):
    out = str(tmp_path / 'kinds')
    with pytest.raises(ContractError):
        main(['ood', '--model', artifacts['cnf.gfm'], '--dataset', out, '--out', out])
    with pytest.raises(ContractError):
        main(['sample', '--model', artifacts['evaluator.gfm'], '--cloud', artifacts['cloud.bin'],
              '--out', out])


pipeline_config = '''
[model]
preset = "lvm-light"
latent_dim = 2
blocks = 1
conditioner_hidden = [8]
embed_hidden = [8]
inference_hidden = [8]
evaluator_hidden = [8]
bps_points = 32

[train]
iterations = 5
batch = 8
lr = 1e-3
log_every = 1
snapshot_every = 1

[dataset]
train_families = ["box", "cylinder"]
novel_families = ["capsule"]
objects_per_family = 2
similar_per_family = 1
novel_per_family = 1
views_per_object = 1
grasps_per_view = 16
n_points = 256
positive_rate_min = 0.0
positive_rate_max = 1.0

[fusion]
n_grasps = 4
epsilon_grid = [0.0, 1.0]
likelihood_samples = 2
ood_samples = 2
max_views = 2
'''


def test_pipeline(tmp_path):
    config = str(tmp_path / 'run.toml')
    with open(config, 'w') as f:
        f.write(pipeline_config)
    data, runs = str(tmp_path / 'data'), str(tmp_path / 'runs')

    assert main(['dataset', '--config', config, '--out', data]) == 0
    with open(os.path.join(data, 'manifest.json')) as f:
        assert json.load(f)['n_objects'] == 2 * 2 + 2 * 1 + 1

    curves = []
    for name in ('a', 'b'):
        out = os.path.join(runs, name)
        assert main(['train', '--config', config, '--dataset', data, '--out', out,
                     '--seed', '1', '--train-evaluator']) == 0
        with open(os.path.join(out, 'loss.csv')) as f:
            curves.append(f.read())
    assert curves[0] == curves[1]
    model = os.path.join(runs, 'a', 'model.gfm')
    evaluator = os.path.join(runs, 'a', 'evaluator.gfm')
    assert os.path.exists(evaluator)

    ood = os.path.join(runs, 'ood')
    assert main(['ood', '--config', config, '--model', model, '--dataset', data,
                 '--out', ood, '--families', 'box,cylinder', 'capsule']) == 0
    frame = pd.read_csv(os.path.join(ood, 'ood.csv'))
    assert list(frame.groupby('group').size()) == [6, 1]
    with open(os.path.join(ood, 'ood_summary.json')) as f:
        summary = json.load(f)
    assert 0.0 <= summary['auroc'] <= 1.0
    assert summary['families'] == [['box', 'cylinder'], ['capsule']]
    assert summary['views'] == [6, 1]
    with open(os.path.join(ood, 'metadata.json')) as f:
        assert json.load(f)['auroc'] == summary['auroc']

    again = os.path.join(runs, 'ood-again')
    assert main(['ood', '--config', config, '--model', model, '--dataset', data,
                 '--out', again, '--families', 'box,cylinder', 'capsule']) == 0
    for name in ('ood.csv', 'ood_summary.json'):
        with open(os.path.join(ood, name)) as a, open(os.path.join(again, name)) as b:
            assert a.read() == b.read()

    bench = os.path.join(runs, 'bench')
    assert main(['bench', '--config', config, '--model', model, '--evaluator', evaluator,
                 '--dataset', data, '--out', bench]) == 0
    report = pd.read_csv(os.path.join(bench, 'report.csv'))
    assert {'evaluator-only', 'evaluator+prior-flow', 'evaluator+grasp-flow'} <= \
        set(report.strategy)
    for name in ('introspection.csv', 'summary.json', 'config.toml'):
        assert os.path.exists(os.path.join(bench, name))


def run(*args):
    return subprocess.run([sys.executable, script] + list(args), cwd=root,
                          stdout=subprocess.PIPE, stderr=subprocess.PIPE,
                          stdin=subprocess.DEVNULL, universal_newlines=True)


def test_usage_error_exit_code(tmp_path):
    result = run('sample', '--out', str(tmp_path / 'usage'))
    assert result.returncode == 1
    assert result.stderr.strip().splitlines()[-1].startswith('UsageError')


def test_corrupt_checkpoint_exit_code(artifacts, tmp_path):
    bad = tmp_path / 'bad.gfm'
    bad.write_bytes(b'GFCKPT01' + struct.pack('<II', 1, 0) + b'\x00' * 64)
    result = run('sample', '--model', str(bad), '--cloud', artifacts['cloud.bin'],
                 '--out', str(tmp_path / 'corrupt'))
    assert result.returncode == 2
    assert result.stderr.strip().splitlines()[-1].startswith('CheckpointCorruptError')


def test_version():
    result = run('--version')
    assert result.returncode == 0
    assert result.stdout.strip() == '0.1.0'


if __name__ == '__main__':
    pytest.main(args=[os.path.abspath(__file__)])
