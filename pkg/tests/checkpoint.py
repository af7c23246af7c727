import os
import struct

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from graspflow import (CheckpointCorruptError, CheckpointVersionError,
                       ContractError)
from graspflow.checkpoint import (load_model, read_meta, require_kind,
                                  save_model)
from graspflow.config import ModelConfig
from graspflow.evaluator import EvaluatorNet
from graspflow.models import CnfModel, LvmModel
from graspflow.numerics import make_rng
from graspflow.pointcloud import make_basis

config = ModelConfig(grasp_dim=4, latent_dim=2, blocks=2, conditioner_hidden=(8, 8),
                     embed_hidden=(8,), inference_hidden=(8,), evaluator_hidden=(8,),
                     bps_points=32)
basis = make_basis(32, 0.15, 0)


def trained_like_lvm():
    model = LvmModel(config, basis)
    rng = make_rng(1)
    model.data_init(rng.uniform(0.0, 0.1, (20, 32)), rng.standard_normal((20, 4)), rng)
    for param in model.parameters():
        param.value = param.value + 0.05 * rng.standard_normal(param.value.shape)
    return model


@pytest.fixture
def saved(tmp_path):
    model = trained_like_lvm()
    path = str(tmp_path / 'model.gfm')
    save_model(path, model, meta={'iterations': 3})
    return model, path


def test_round_trip_is_exact(saved):
    model, path = saved
    loaded = load_model(path)
    assert isinstance(loaded, LvmModel)
    assert loaded.config == model.config
    assert_array_equal(loaded.basis.points, basis.points)
    assert loaded.basis.radius == basis.radius and loaded.basis.seed == basis.seed
    for (name, a), (other, b) in zip(model.named_parameters(), loaded.named_parameters()):
        assert name == other
        assert_array_equal(a.value, b.value)
    for (name, a), (_, b) in zip(model.named_buffers(), loaded.named_buffers()):
        assert_array_equal(a, b)
    assert loaded.prior_flow.initialized and loaded.grasp_flow.initialized


def test_saving_twice_gives_identical_bytes(saved, tmp_path):
    model, path = saved
    again = str(tmp_path / 'again.gfm')
    save_model(again, load_model(path), meta={'iterations': 3})
    assert open(path, 'rb').read() == open(again, 'rb').read()


def test_reloaded_model_samples_identically(saved):
    model, path = saved
    loaded = load_model(path)
    feature = make_rng(2).uniform(0.0, 0.1, 32)
    a = model.sample(feature, 20, make_rng(3))
    b = loaded.sample(feature, 20, make_rng(3))
    assert_array_equal(a.vectors, b.vectors)
    assert_array_equal(a.grasp_logp, b.grasp_logp)


def _rewrite(path, data):
    with open(path, 'wb') as f:
        f.write(data)


def test_corruption_is_detected(saved):
    _, path = saved
    data = open(path, 'rb').read()
    _rewrite(path, data[:-10])
    with pytest.raises(CheckpointCorruptError):
        load_model(path)

    flipped = bytearray(data)
    flipped[len(data) // 2] ^= 0x01
    _rewrite(path, bytes(flipped))
    with pytest.raises(CheckpointCorruptError):
        load_model(path)

    _rewrite(path, b'NOTMODEL' + data[8:])
    with pytest.raises(CheckpointCorruptError):
        load_model(path)

    _rewrite(path, data[:20])
    with pytest.raises(CheckpointCorruptError):
        load_model(path)


def test_unknown_version(saved):
    _, path = saved
    data = open(path, 'rb').read()
    _rewrite(path, data[:8] + struct.pack('<I', 2) + data[12:])
    with pytest.raises(CheckpointVersionError):
        load_model(path)
    with pytest.raises(CheckpointVersionError):
        read_meta(path)


def test_read_meta(saved):
    _, path = saved
    header = read_meta(path)
    assert header['kind'] == 'lvm'
    assert header['meta'] == {'iterations': 3}
    assert header['config']['latent_dim'] == 2


def test_evaluator_round_trip(tmp_path):
    net = EvaluatorNet(config, basis)
    path = str(tmp_path / 'evaluator.gfm')
    save_model(path, net)
    loaded = load_model(path)
    assert isinstance(loaded, EvaluatorNet)
    rng = make_rng(4)
    features, grasps = rng.uniform(0.0, 0.1, 32), rng.standard_normal((10, 4))
    assert_array_equal(loaded.predict_proba(features, grasps), net.predict_proba(features, grasps))
    assert read_meta(path)['kind'] == 'evaluator'


def test_model_without_basis(tmp_path):
    model = CnfModel(ModelConfig(preset='cnf', grasp_dim=4, latent_dim=2, blocks=1,
                                 conditioner_hidden=(8,), embed_hidden=(8,),
                                 bps_points=32, identity_init=True))
    path = str(tmp_path / 'cnf.gfm')
    save_model(path, model)
    loaded = load_model(path)
    assert loaded.basis is None
    assert loaded.flow.initialized


def test_require_kind(saved):
    model, _ = saved
    assert require_kind(model, 'lvm', 'lvm-light') is model
    with pytest.raises(ContractError):
        require_kind(model, 'cnf')
    with pytest.raises(ContractError):
        require_kind(EvaluatorNet(config, basis), 'lvm')


if __name__ == '__main__':
    pytest.main(args=[os.path.abspath(__file__)])
