import os

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from pandas.testing import assert_frame_equal

from graspflow import ConfigError, ContractError, NumericError, TrainingDiverged
from graspflow.config import ModelConfig, TrainConfig
from graspflow.flows import LOG_2PI
from graspflow.models import (LOG_2PI_E, CnfModel, CvaeBaseline, LvmModel,
                              TrainingData, beta_schedule, build_model,
                              cnf_log_prob, cnf_sample, cvae_sample,
                              elbo_loss, gaussian_kl, sample_grasps,
                              standard_normal_logp, train_cnf, train_cvae,
                              train_lvm, train_model)
from graspflow.numerics import check_gradients, make_rng, no_tape
from graspflow.pointcloud import ShapeSpec, make_basis, sample_shape


def tiny_config(**kwargs):
    values = dict(grasp_dim=4, latent_dim=2, blocks=2, conditioner_hidden=(8, 8),
                  embed_hidden=(8,), inference_hidden=(8,), bps_points=32,
                  activation='tanh')
    values.update(kwargs)
    return ModelConfig(**values)


def tiny_data(seed=0, n=40, views=3, grasp_dim=4):
    rng = make_rng(seed)
    return TrainingData(rng.uniform(0.0, 0.1, (views, 32)), rng.integers(views, size=n),
                        rng.normal(0.0, 1.0, (n, grasp_dim)))


def perturbed_lvm(seed=0):
    ''' Data-initialized LVM with every zero-initialized layer moved off zero '''
    model = LvmModel(tiny_config(seed=seed))
    data = tiny_data(seed)
    rng = make_rng(seed + 1)
    model.data_init(*data.batch(np.arange(len(data))), rng)
    for param in model.parameters():
        param.value = param.value + 0.05 * rng.standard_normal(param.value.shape)
    return model, data


identity_lvm_config = ModelConfig(grasp_dim=24, latent_dim=16, blocks=1,
                                  conditioner_hidden=(8,), embed_hidden=(8,),
                                  inference_hidden=(8,), bps_points=32,
                                  identity_init=True)


def test_identity_elbo_closed_form():
    model = LvmModel(identity_lvm_config)
    features = make_rng(0).uniform(0.0, 0.1, 32)
    grasps = np.zeros((5, 24))
    noise = np.zeros((5, 16))
    for beta, expected in ((0.0, 12 * LOG_2PI), (0.5, 12 * LOG_2PI - 4.0)):
        loss, terms = model.loss(features, grasps, beta, None, noise)
        assert abs(float(loss.value) - expected) < 1e-10
    assert abs(terms['recon'] + 12 * LOG_2PI) < 1e-10
    assert abs(terms['entropy'] - 8 * LOG_2PI_E) < 1e-10
    assert abs(terms['prior'] + 8 * LOG_2PI) < 1e-10
    assert abs(terms['kld'] + 8.0) < 1e-10


def test_loss_assembles_terms():
    model, data = perturbed_lvm(1)
    features, grasps = data.batch(np.arange(10))
    noise = make_rng(2).standard_normal((10, 2))
    loss, terms = model.loss(features, grasps, 0.5, None, noise)
    recon, entropy, prior, _ = model.elbo_terms(features, grasps, None, noise)
    kld = -(entropy.value + prior.value)
    expected = -np.mean(recon.value - 0.5 * kld)
    assert abs(float(loss.value) - expected) < 1e-10
    assert abs(terms['kld'] - kld.mean()) < 1e-10


def test_negative_beta():
    model = LvmModel(tiny_config(identity_init=True))
    with pytest.raises(ContractError):
        model.loss(np.zeros(32), np.zeros((2, 4)), -0.1, make_rng(0))


def test_elbo_gradients():
    model, data = perturbed_lvm(3)
    features, grasps = data.batch(np.arange(8))
    noise = make_rng(4).standard_normal((8, 2))
    worst = check_gradients(lambda: model.loss(features, grasps, 0.5, None, noise)[0],
                            model.parameters(), make_rng(5), n_coords=150, floor=1e-3)
    assert worst < 1e-4


def test_lvm_samples_score_consistently():
    model, _ = perturbed_lvm(6)
    feature = make_rng(7).uniform(0.0, 0.1, 32)
    samples = model.sample(feature, 200, make_rng(8))
    assert samples.vectors.shape == (200, 4) and samples.latents.shape == (200, 2)
    with no_tape():
        emb = model.embed(feature)
        grasp_logp = model.grasp_flow.log_prob(samples.vectors, samples.latents).value[:, 0]
        prior_logp = model.prior_flow.log_prob(samples.latents, emb).value[:, 0]
    assert_allclose(grasp_logp, samples.grasp_logp, atol=1e-8)
    assert_allclose(prior_logp, samples.prior_logp, atol=1e-8)


def test_sample_grasps_from_cloud():
    config = ModelConfig(grasp_dim=24, latent_dim=4, blocks=1, conditioner_hidden=(8,),
                         embed_hidden=(8,), inference_hidden=(8,), bps_points=32,
                         identity_init=True)
    model = LvmModel(config, make_basis(32, 0.15, 0))
    cloud = sample_shape(ShapeSpec('box', (0.05, 0.05, 0.05), n_points=256), 0)
    samples = sample_grasps(model, cloud, 10, make_rng(9))
    assert len(samples) == 10 and samples.frame is not None
    for grasp in samples.grasps():
        r = grasp.rotation
        assert np.linalg.norm(r.T @ r - np.eye(3)) < 1e-6
        assert np.linalg.det(r) > 0
    frame = samples.to_frame()
    assert list(frame.columns[:5]) == ['grasp_logp', 'prior_logp', 'tx', 'ty', 'tz']
    assert len(frame.columns) == 2 + 3 + 9 + 15 + 1
    world = samples.grasps()
    assert_allclose(frame[['tx', 'ty', 'tz']].to_numpy(),
                    np.stack([g.translation for g in world]))
    assert_allclose(frame[['r10', 'r11', 'r12']].to_numpy(),
                    np.stack([g.rotation[1] for g in world]))
    assert_allclose(frame[['j{}'.format(i) for i in range(15)]].to_numpy(),
                    np.stack([g.joints for g in world]))
    canonical = samples.grasps(world=False)
    assert_allclose(frame[['tx', 'ty', 'tz']].to_numpy(), samples.frame.points_to_world(
        np.stack([g.translation for g in canonical])))
    again = sample_grasps(model, cloud, 10, make_rng(9))
    assert_array_equal(again.vectors, samples.vectors)
    with pytest.raises(ContractError):
        sample_grasps(model, cloud, 0, make_rng(9))


def test_model_without_basis():
    model = LvmModel(tiny_config())
    cloud = sample_shape(ShapeSpec('sphere', (0.05,), n_points=256), 0)
    with pytest.raises(ContractError):
        sample_grasps(model, cloud, 2, make_rng(0))


def test_cnf_identity_log_prob():
    model = CnfModel(tiny_config(preset='cnf', identity_init=True))
    grasps = make_rng(10).standard_normal((6, 4))
    assert_allclose(model.log_prob(np.zeros(32), grasps), standard_normal_logp(grasps),
                    atol=1e-12)
    with pytest.raises(ContractError):
        model.log_prob(np.zeros((2, 32)), grasps)
    with pytest.raises(ContractError):
        model.log_prob(np.zeros(32), np.zeros((2, 5)))


def test_cnf_samples():
    model = CnfModel(tiny_config(preset='cnf', identity_init=True))
    samples = model.sample(np.zeros(32), 50, make_rng(11))
    assert_allclose(samples.grasp_logp, standard_normal_logp(samples.vectors), atol=1e-12)
    assert_array_equal(samples.prior_logp, np.zeros(50))
    assert samples.latents is None


def test_gaussian_kl():
    assert_allclose(gaussian_kl(np.array([1.0]), np.array([0.0])).value, [0.5])
    assert_allclose(gaussian_kl(np.zeros(3), np.zeros(3)).value, np.zeros(3))


def test_cvae_zero_decoder():
    model = CvaeBaseline(tiny_config(preset='cvae'))
    weight, bias = model.decoder.layers[-1]
    weight.value = np.zeros_like(weight.value)
    bias.value = np.zeros_like(bias.value)
    expected = 4 * np.log(10.0) - 2 * LOG_2PI
    assert abs(model._log_const() - expected) < 1e-12
    loss, terms = model.loss(np.zeros(32), np.zeros((3, 4)), 1.0, None, np.zeros((3, 2)))
    assert abs(terms['recon'] - expected) < 1e-12
    assert abs(terms['kld']) < 1e-12
    assert abs(float(loss.value) + expected) < 1e-12

    samples = model.sample(np.zeros(32), 5, make_rng(0))
    assert_array_equal(samples.vectors, np.zeros((5, 4)))
    assert_allclose(samples.prior_logp, standard_normal_logp(samples.latents))


def test_build_model():
    assert isinstance(build_model(tiny_config(preset='cnf')), CnfModel)
    assert isinstance(build_model(tiny_config(preset='cvae')), CvaeBaseline)
    light = build_model(tiny_config(preset='lvm-light'))
    assert isinstance(light, LvmModel) and light.kind == 'lvm'
    with pytest.raises(ConfigError):
        tiny_config(preset='gan')


def test_training_data_contract():
    with pytest.raises(ContractError):
        TrainingData(np.zeros((2, 32)), [0, 2], np.zeros((2, 4)))
    with pytest.raises(ContractError):
        TrainingData(np.zeros((2, 32)), [0], np.zeros((2, 4)))
    with pytest.raises(ContractError):
        TrainingData(np.zeros((2, 32)), [0, 1], np.zeros((2, 4)), labels=[1.0])
    data = tiny_data()
    features, grasps = data.batch(np.array([0, 5]))
    assert_array_equal(features, data.features[data.view_index[[0, 5]]])
    assert len(data.subset(np.arange(7))) == 7


def test_beta_schedule():
    assert beta_schedule(0, 100, 1e-7, 0.1) == 1e-7
    assert beta_schedule(99, 100, 1e-7, 0.1) == 0.1
    assert beta_schedule(0, 1, 1e-7, 0.1) == 0.1
    values = [beta_schedule(i, 100, 1e-7, 0.1) for i in range(100)]
    assert all(a <= b for a, b in zip(values, values[1:]))
    with pytest.raises(ContractError):
        beta_schedule(0, 10, 0.2, 0.1)


train_config = TrainConfig(iterations=20, batch=8, lr=1e-3, log_every=5, snapshot_every=5)


def test_training_is_deterministic():
    curves = []
    for _ in range(2):
        result = train_model(LvmModel(tiny_config()), tiny_data(), train_config)
        curves.append(result.curve)
    assert_frame_equal(curves[0], curves[1])
    assert len(curves[0]) == 20
    assert list(curves[0].columns[:4]) == ['iteration', 'beta', 'lr', 'loss']
    assert np.all(np.isfinite(curves[0]['loss']))


@pytest.mark.parametrize('preset,cls', [('cnf', CnfModel), ('cvae', CvaeBaseline)])
def test_training_other_presets(preset, cls):
    result = train_model(cls(tiny_config(preset=preset)), tiny_data(), train_config)
    assert len(result.curve) == 20
    assert np.all(result.curve['kld'] >= 0.0)


def test_entry_points():
    for train, cls in ((train_lvm, LvmModel), (train_cnf, CnfModel), (train_cvae, CvaeBaseline)):
        result = train(train_config, tiny_data(), tiny_config())
        assert isinstance(result.model, cls) and len(result.curve) == 20

    basis = make_basis(32, 0.15, 0)
    cloud = sample_shape(ShapeSpec('sphere', (0.05,), n_points=256), 0)
    cnf = CnfModel(tiny_config(preset='cnf', identity_init=True), basis)
    grasps = make_rng(12).standard_normal((5, 4))
    assert_allclose(cnf_log_prob(cnf, cloud, grasps), standard_normal_logp(grasps), atol=1e-12)
    assert_array_equal(cnf_sample(cnf, cloud, 4, make_rng(13)).vectors,
                       sample_grasps(cnf, cloud, 4, make_rng(13)).vectors)
    cvae = CvaeBaseline(tiny_config(preset='cvae'), basis)
    assert_array_equal(cvae_sample(cvae, cloud, 4, make_rng(14)).vectors,
                       sample_grasps(cvae, cloud, 4, make_rng(14)).vectors)

    model, data = perturbed_lvm()
    features, batch = data.batch(np.arange(8))
    with no_tape():
        loss, terms = elbo_loss(model, features, batch, 0.1, make_rng(15))
        again, _ = model.loss(features, batch, 0.1, make_rng(15))
    assert float(loss.value) == float(again.value) == terms['loss']


def test_divergence_restores_snapshot(monkeypatch):
    model = LvmModel(tiny_config())
    original = model.loss
    calls = {'n': 0}

    def flaky(*args, **kwargs):
        calls['n'] += 1
        if calls['n'] == 4:
            for param in model.parameters():
                param.value = param.value + 1.0
            raise NumericError('non-finite loss', term='recon')
        return original(*args, **kwargs)

    monkeypatch.setattr(model, 'loss', flaky)
    config = TrainConfig(iterations=10, batch=8, lr=1e-3, snapshot_every=1)
    with pytest.raises(TrainingDiverged) as e:
        train_model(model, tiny_data(), config)
    assert e.value.iteration == 3
    assert e.value.term == 'recon'
    for name, param in model.named_parameters():
        assert_array_equal(param.value, e.value.snapshot['parameters'][name])


@pytest.mark.parametrize('cls', [LvmModel, CnfModel])
def test_training_on_fewer_grasps_than_an_init_batch(cls):
    data = tiny_data(n=10)
    result = train_model(cls(tiny_config()), data, TrainConfig(iterations=5, batch=8))
    assert all(flow.initialized for flow in result.model.flows())
    assert np.all(np.isfinite(result.curve['loss']))


def test_initialized_models_skip_data_init(monkeypatch):
    model = LvmModel(tiny_config(identity_init=True))

    def refuse(*args):
        raise AssertionError('data_init called on an initialized model')

    monkeypatch.setattr(model, 'data_init', refuse)
    result = train_model(model, tiny_data(n=3), TrainConfig(iterations=3, batch=2))
    assert len(result.curve) == 3


@pytest.mark.slow
def test_cvae_learns():
    rng = make_rng(12)
    data = TrainingData(rng.uniform(0.0, 0.1, (4, 32)), rng.integers(4, size=256),
                        rng.normal(0.3, 0.2, (256, 4)))
    config = TrainConfig(iterations=500, batch=32, lr=1e-3, log_every=100)
    curve = train_model(CvaeBaseline(tiny_config(preset='cvae')), data, config).curve
    assert curve['recon'].iloc[-50:].mean() - curve['recon'].iloc[:50].mean() >= 2.0


@pytest.mark.slow
def test_lvm_learns():
    rng = make_rng(13)
    centers = rng.uniform(-1.0, 1.0, (4, 4))
    view_index = rng.integers(4, size=512)
    data = TrainingData(rng.uniform(0.0, 0.1, (4, 32)), view_index,
                        centers[view_index] + rng.normal(0.0, 0.05, (512, 4)))
    config = TrainConfig(iterations=1000, batch=32, lr=1e-3, log_every=100)
    curve = train_model(LvmModel(tiny_config()), data, config).curve
    assert curve['recon'].iloc[-50:].mean() - curve['recon'].iloc[:50].mean() >= 2.0


if __name__ == '__main__':
    pytest.main(args=[os.path.abspath(__file__)])
