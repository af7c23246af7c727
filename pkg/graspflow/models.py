'''
    Generative grasp models and their training loop.

    All models share the same front end: a frozen BPS basis turns a cloud
    into a feature vector and an MLP embeds it into the context used by
    the flows.

    LvmModel
        prior flow p(z | x), grasp flow p(g | z) and a Gaussian inference
        network q(z | x, g), trained on the beta-weighted ELBO.
    CnfModel
        a single conditional flow p(g | x).
    CvaeBaseline
        Gaussian encoder and decoder with an N(0, I) prior.
'''
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass

import numpy as np
import pandas as pd

from graspflow.error import ContractError, NumericError, TrainingDiverged
from graspflow.flows import BASE_LOG_STD_CLAMP, LOG_2PI, MIN_INIT_BATCH, FlowStack
from graspflow.grasp import N_JOINTS, decode_vectors
from graspflow.numerics import (Activation, AdamW, GradTape, Mlp, Var, as_batch,
                                encoded_width, exp, gather, make_rng, mean,
                                mul, neg, no_tape, positional_encode,
                                soft_clamp, square, vsum)
from graspflow.pointcloud import encode_view

logger = logging.getLogger(__name__)

LOG_2PI_E = np.log(2.0 * np.pi * np.e)


def _term(name, fn):
    try:
        return fn()
    except NumericError as e:
        raise NumericError('non-finite {} term: {}'.format(name, e), term=name)


def gaussian_kl(mu, log_std):
    ''' Per-dimension KL(N(mu, sigma^2) || N(0, 1)) '''
    return (square(mu) + exp(log_std * 2.0) - log_std * 2.0 - 1.0) * 0.5


def standard_normal_logp(x):
    x = np.atleast_2d(x)
    return -0.5 * np.sum(x ** 2, axis=1) - 0.5 * x.shape[1] * LOG_2PI


@dataclass
class GraspSamples:
    '''
        Vectors drawn by a model for one view, in that view's canonical
        frame, with their log-likelihoods.
    '''
    vectors: np.ndarray
    grasp_logp: np.ndarray
    prior_logp: np.ndarray
    latents: np.ndarray = None
    frame: object = None

    def __len__(self):
        return len(self.vectors)

    def subset(self, index):
        latents = self.latents[index] if self.latents is not None else None
        return GraspSamples(self.vectors[index], self.grasp_logp[index],
                            self.prior_logp[index], latents, self.frame)

    def decode(self, world=True):
        '''
            Decoded GraspConfigs, mapped back to the world when a frame is
            known, and the number of clamped joint values of each grasp.
        '''
        grasps, clamped = decode_vectors(self.vectors)
        if world and self.frame is not None:
            grasps = [self.frame.grasp_to_world(g) for g in grasps]
        return grasps, clamped

    def grasps(self, world=True):
        return self.decode(world)[0]

    def to_frame(self, decoded=None):
        '''
            One row per grasp: the log-likelihoods, the world-frame wrist
            translation (tx..tz) and rotation (r00..r22, row major), the
            joints j0..j14 and the clamped joint count.
        '''
        grasps, clamped = decoded if decoded is not None else self.decode()
        translation = np.array([g.translation for g in grasps]).reshape(-1, 3)
        rotation = np.array([g.rotation.reshape(-1) for g in grasps]).reshape(-1, 9)
        joints = np.array([g.joints for g in grasps]).reshape(-1, N_JOINTS)
        columns = {'grasp_logp': self.grasp_logp, 'prior_logp': self.prior_logp}
        for i, axis in enumerate('xyz'):
            columns['t' + axis] = translation[:, i]
        for i in range(9):
            columns['r{}{}'.format(*divmod(i, 3))] = rotation[:, i]
        for i in range(N_JOINTS):
            columns['j{}'.format(i)] = joints[:, i]
        columns['clamped'] = clamped
        return pd.DataFrame(columns)


class GraspModel(ABC):
    '''
        The abstract base class of the generative models.
    '''

    kind = None

    def __init__(self, config, basis=None):
        self.config = config
        self.basis = basis
        self.obs_dim = len(basis) if basis is not None else config.bps_points
        self.grasp_dim = config.grasp_dim
        self.latent_dim = config.latent_dim
        self.rng = make_rng(config.seed)
        self.embedder = Mlp(self.obs_dim, config.embed_hidden, config.latent_dim,
                            activation=config.activation, rng=self.rng, name='embed')

    def raise_exception_helper(self, msg, exception=ContractError):
        msg_new = '{}: {}'.format(self.__class__.__name__, msg)
        raise exception(msg_new)

    def _flow(self, dim, context_dim, name):
        flow = FlowStack(dim, context_dim, blocks=self.config.blocks,
                         hidden=self.config.conditioner_hidden,
                         activation=self.config.activation,
                         clamp=self.config.clamp, rng=self.rng,
                         identity_linear=self.config.identity_init, name=name)
        if self.config.identity_init:
            flow.skip_data_init()
        return flow

    @abstractmethod
    def components(self):
        ''' Sub-networks in declaration order '''
        msg = 'components method not implemented for {}'.format(
            self.__class__.__name__)
        raise NotImplementedError(msg)

    def flows(self):
        return [c for c in self.components() if isinstance(c, FlowStack)]

    def named_parameters(self):
        params = []
        for component in self.components():
            params += component.named_parameters()
        return params

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        buffers = []
        for flow in self.flows():
            buffers += flow.named_buffers()
        return buffers

    def load_buffers(self, buffers):
        for flow in self.flows():
            flow.load_buffers(buffers)

    def state(self):
        initialized = []
        for flow in self.flows():
            initialized += [a.name for a in flow.actnorms if a.initialized]
        return {'actnorm_initialized': initialized}

    def load_state(self, state):
        names = set(state.get('actnorm_initialized', []))
        for flow in self.flows():
            for actnorm in flow.actnorms:
                actnorm.initialized = actnorm.name in names

    def snapshot(self):
        return {
            'parameters': {name: p.value.copy() for name, p in self.named_parameters()},
            'state': self.state(),
        }

    def restore(self, snapshot):
        values = snapshot['parameters']
        for name, param in self.named_parameters():
            param.value = values[name].copy()
        self.load_state(snapshot['state'])

    def encode(self, cloud):
        ''' BPS feature of a cloud and the canonical frame it was taken in '''
        if self.basis is None:
            self.raise_exception_helper('no BPS basis attached')
        feature, frame = encode_view(cloud, self.basis)
        return feature.values, frame

    def embed(self, features):
        features = as_batch(features, self.obs_dim, what='observation')
        return self.embedder(features)

    def _check_batch(self, features, grasps):
        features = np.atleast_2d(np.asarray(features, dtype=np.float64))
        grasps = np.atleast_2d(np.asarray(grasps, dtype=np.float64))
        if grasps.shape[1] != self.grasp_dim:
            self.raise_exception_helper('grasps must have width {}, got {}'.format(
                self.grasp_dim, grasps.shape))
        if len(features) not in (1, len(grasps)):
            self.raise_exception_helper('{} feature rows for {} grasps'.format(
                len(features), len(grasps)))
        return features, grasps

    def data_init(self, features, grasps, rng):
        pass

    @abstractmethod
    def loss(self, features, grasps, beta, rng, noise=None):
        '''
            Returns:
                (scalar loss Var, dict of float terms)
        '''
        msg = 'loss method not implemented for {}'.format(self.__class__.__name__)
        raise NotImplementedError(msg)

    @abstractmethod
    def sample(self, feature, n, rng):
        ''' n GraspSamples for a single observation feature '''
        msg = 'sample method not implemented for {}'.format(self.__class__.__name__)
        raise NotImplementedError(msg)


class _GaussianPosterior:
    '''
        q(z | x, g): diagonal Gaussian from the positional-encoded grasp and
        the observation embedding. Starts at N(0, I).
    '''

    def __init__(self, grasp_dim, latent_dim, bands, hidden, rng, name):
        self.bands = bands
        self.latent_dim = latent_dim
        self.net = Mlp(encoded_width(grasp_dim, bands), hidden, 2 * latent_dim,
                       context_dim=latent_dim, activation=Activation.TANH, rng=rng,
                       zero_last=True, name=name)

    def __call__(self, grasps, emb):
        h = self.net(positional_encode(grasps, self.bands), emb)
        l = self.latent_dim
        mu = gather(h, np.arange(l))
        log_delta = soft_clamp(gather(h, np.arange(l, 2 * l)), BASE_LOG_STD_CLAMP)
        return mu, log_delta

    def named_parameters(self):
        return self.net.named_parameters()


class LvmModel(GraspModel):

    kind = 'lvm'

    def __init__(self, config, basis=None):
        super(LvmModel, self).__init__(config, basis)
        l, d = config.latent_dim, config.grasp_dim
        self.prior_flow = self._flow(l, l, 'prior')
        self.grasp_flow = self._flow(d, l, 'grasp')
        self.inference = _GaussianPosterior(d, l, config.bands, config.inference_hidden,
                                            self.rng, 'inference')

    def components(self):
        return [self.embedder, self.prior_flow, self.grasp_flow, self.inference]

    def posterior(self, emb, grasps):
        return self.inference(grasps, emb)

    def data_init(self, features, grasps, rng):
        features, grasps = self._check_batch(features, grasps)
        with no_tape():
            emb = self.embed(features).value
            mu, log_delta = (v.value for v in self.posterior(emb, grasps))
            z = mu + np.exp(log_delta) * rng.standard_normal(mu.shape)
            if len(emb) == 1:
                emb = np.repeat(emb, len(z), axis=0)
            self.prior_flow.initialize(z, emb)
            self.grasp_flow.initialize(grasps, z)

    def elbo_terms(self, features, grasps, rng=None, noise=None):
        '''
            Per-item ELBO pieces with one reparameterized latent per item.

            Returns:
                (log p(g|z), H[q], log p(z|x), z) as (n, 1) Vars and (n, l)
        '''
        features, grasps = self._check_batch(features, grasps)
        emb = self.embed(features)
        mu, log_delta = self.posterior(emb, grasps)
        if noise is None:
            noise = rng.standard_normal((len(grasps), self.latent_dim))
        z = mu + mul(exp(log_delta), noise)
        recon = _term('recon', lambda: self.grasp_flow.log_prob(grasps, z))
        entropy = vsum(log_delta, axis=1, keepdims=True) + 0.5 * self.latent_dim * LOG_2PI_E
        prior = _term('prior', lambda: self.prior_flow.log_prob(z, emb))
        return recon, entropy, prior, z

    def loss(self, features, grasps, beta, rng, noise=None):
        if beta < 0:
            self.raise_exception_helper('beta must be non-negative')
        recon, entropy, prior, _ = self.elbo_terms(features, grasps, rng, noise)
        kld = neg(entropy + prior)
        loss = _term('loss', lambda: neg(mean(recon - kld * beta)))
        terms = {
            'loss': float(loss.value),
            'recon': float(recon.value.mean()),
            'kld': float(kld.value.mean()),
            'entropy': float(entropy.value.mean()),
            'prior': float(prior.value.mean()),
        }
        return loss, terms

    def sample(self, feature, n, rng):
        with no_tape():
            emb = self.embed(feature).value
            z, prior_logp = self.prior_flow.sample(emb, n, rng)
            g, grasp_logp = self.grasp_flow.sample(z, n, rng)
        return GraspSamples(g, grasp_logp, prior_logp, latents=z)


class CnfModel(GraspModel):

    kind = 'cnf'

    def __init__(self, config, basis=None):
        super(CnfModel, self).__init__(config, basis)
        self.flow = self._flow(config.grasp_dim, config.latent_dim, 'grasp')

    def components(self):
        return [self.embedder, self.flow]

    def data_init(self, features, grasps, rng):
        features, grasps = self._check_batch(features, grasps)
        with no_tape():
            emb = self.embed(features).value
            self.flow.initialize(grasps, emb)

    def log_prob(self, features, grasps):
        features, grasps = self._check_batch(features, grasps)
        with no_tape():
            return self.flow.log_prob(grasps, self.embed(features)).value[:, 0]

    def loss(self, features, grasps, beta, rng, noise=None):
        features, grasps = self._check_batch(features, grasps)
        recon = _term('recon', lambda: self.flow.log_prob(grasps, self.embed(features)))
        loss = neg(mean(recon))
        return loss, {'loss': float(loss.value), 'recon': float(recon.value.mean()),
                      'kld': 0.0}

    def sample(self, feature, n, rng):
        with no_tape():
            emb = self.embed(feature).value
            g, grasp_logp = self.flow.sample(emb, n, rng)
        return GraspSamples(g, grasp_logp, np.zeros(n))


class CvaeBaseline(GraspModel):

    kind = 'cvae'

    def __init__(self, config, basis=None):
        super(CvaeBaseline, self).__init__(config, basis)
        self.sigma = config.cvae_sigma
        self.encoder = _GaussianPosterior(config.grasp_dim, config.latent_dim, config.bands,
                                          config.inference_hidden, self.rng, 'encoder')
        self.decoder = Mlp(config.latent_dim, config.conditioner_hidden, config.grasp_dim,
                           context_dim=config.latent_dim, activation=config.activation,
                           rng=self.rng, name='decoder')

    def components(self):
        return [self.embedder, self.encoder, self.decoder]

    def _log_const(self):
        return -self.grasp_dim * np.log(self.sigma) - 0.5 * self.grasp_dim * LOG_2PI

    def loss(self, features, grasps, beta, rng, noise=None):
        features, grasps = self._check_batch(features, grasps)
        emb = self.embed(features)
        mu, log_std = self.encoder(grasps, emb)
        if noise is None:
            noise = rng.standard_normal((len(grasps), self.latent_dim))
        z = mu + mul(exp(log_std), noise)
        g_hat = self.decoder(z, emb)
        sq = vsum(square(g_hat - grasps), axis=1, keepdims=True)
        recon = _term('recon', lambda: sq * (-0.5 / self.sigma ** 2) + self._log_const())
        kl = vsum(gaussian_kl(mu, log_std), axis=1, keepdims=True)
        loss = _term('loss', lambda: neg(mean(recon - kl * beta)))
        return loss, {'loss': float(loss.value), 'recon': float(recon.value.mean()),
                      'kld': float(kl.value.mean())}

    def sample(self, feature, n, rng):
        with no_tape():
            emb = self.embed(feature).value
            z = rng.standard_normal((n, self.latent_dim))
            g = self.decoder(z, emb).value
        return GraspSamples(g, np.full(n, self._log_const()), standard_normal_logp(z),
                            latents=z)


MODEL_KINDS = {
    'lvm': LvmModel,
    'lvm-light': LvmModel,
    'cnf': CnfModel,
    'cvae': CvaeBaseline,
}


def build_model(config, basis=None):
    try:
        cls = MODEL_KINDS[config.preset]
    except KeyError:
        raise ContractError('Unknown model preset {}'.format(config.preset))
    return cls(config, basis)


def sample_grasps(model, cloud, n, rng):
    '''
        Ancestral sampling for one cloud. The returned samples carry the
        canonical frame of the cloud, so `grasps()` yields world poses.
    '''
    if n < 1:
        raise ContractError('sample count must be positive')
    feature, frame = model.encode(cloud)
    samples = model.sample(feature, n, rng)
    samples.frame = frame
    return samples


def cnf_log_prob(model, cloud, grasps):
    feature, frame = model.encode(cloud)
    return model.log_prob(feature, grasps)


def cnf_sample(model, cloud, n, rng):
    return sample_grasps(model, cloud, n, rng)


def cvae_sample(model, cloud, n, rng):
    return sample_grasps(model, cloud, n, rng)


def elbo_loss(model, features, grasps, beta, rng, noise=None):
    return model.loss(features, grasps, beta, rng, noise)


@dataclass
class TrainingData:
    '''
        Grasps with the index of the view they belong to; the features of
        every view are stored once.
    '''
    features: np.ndarray
    view_index: np.ndarray
    grasps: np.ndarray
    labels: np.ndarray = None

    def __post_init__(self):
        self.features = np.atleast_2d(np.asarray(self.features, dtype=np.float64))
        self.grasps = np.atleast_2d(np.asarray(self.grasps, dtype=np.float64))
        self.view_index = np.asarray(self.view_index, dtype=np.int64)
        if len(self.grasps) == 0:
            raise ContractError('training data is empty')
        if len(self.view_index) != len(self.grasps):
            raise ContractError('one view index per grasp required')
        if self.view_index.min() < 0 or self.view_index.max() >= len(self.features):
            raise ContractError('view index out of range')
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=np.float64)
            if len(self.labels) != len(self.grasps):
                raise ContractError('one label per grasp required')

    def __len__(self):
        return len(self.grasps)

    def batch(self, index):
        return self.features[self.view_index[index]], self.grasps[index]

    def subset(self, index):
        labels = self.labels[index] if self.labels is not None else None
        return TrainingData(self.features, self.view_index[index], self.grasps[index], labels)


def beta_schedule(iteration, total, start=1e-7, end=1e-1):
    ''' Linear from `start` at iteration 0 to `end` at the final iteration '''
    if start > end:
        raise ContractError('beta schedule must not decrease')
    if total <= 1 or iteration >= total - 1:
        return end
    f = iteration / (total - 1)
    # endpoints come out exactly
    return start * (1.0 - f) + end * f


@dataclass
class TrainResult:
    model: GraspModel
    curve: pd.DataFrame


def train_model(model, data, config):
    '''
        AdamW on mini-batches drawn with replacement, beta annealed
        linearly over the run. Actnorm layers not yet initialized see one
        batch of the data first. A non-finite step restores the last good
        snapshot and raises TrainingDiverged carrying it.
    '''
    if config.iterations < 1 or config.batch < 1:
        raise ContractError('iterations and batch must be positive')
    rng = make_rng(config.seed)
    if not all(flow.initialized for flow in model.flows()):
        # small datasets are resampled up to the actnorm minimum
        size = max(config.batch, MIN_INIT_BATCH)
        resample = len(data) < MIN_INIT_BATCH
        init_rows = rng.choice(len(data), size=size if resample else min(len(data), size),
                               replace=resample)
        model.data_init(*data.batch(init_rows), rng)

    params = model.parameters()
    optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
    snapshot = model.snapshot()
    rows = []
    for it in range(config.iterations):
        index = rng.integers(len(data), size=config.batch)
        beta = beta_schedule(it, config.iterations, config.beta_start, config.beta_end)
        lr = config.lr
        if config.lr_warmup > 0:
            lr = config.lr * min(1.0, (it + 1) / config.lr_warmup)
        try:
            with GradTape() as tape:
                loss, terms = model.loss(*data.batch(index), beta, rng)
            grads = tape.backward(loss, params)
            optimizer.step(grads, lr)
        except NumericError as e:
            model.restore(snapshot)
            msg = 'training diverged at iteration {}: {}'.format(it, e)
            raise TrainingDiverged(msg, snapshot=snapshot, iteration=it, term=e.term)

        rows.append(dict(iteration=it, beta=beta, lr=lr, **terms))
        if (it + 1) % config.snapshot_every == 0:
            snapshot = model.snapshot()
        if (it + 1) % config.log_every == 0:
            logger.info('%s iteration %d/%d: loss %.4f recon %.4f kld %.4f',
                        model.kind, it + 1, config.iterations, terms['loss'],
                        terms['recon'], terms['kld'])
    return TrainResult(model=model, curve=pd.DataFrame(rows))


def train_lvm(config, data, model_config, basis=None):
    return train_model(LvmModel(model_config, basis), data, config)


def train_cnf(config, data, model_config, basis=None):
    return train_model(CnfModel(model_config, basis), data, config)


def train_cvae(config, data, model_config, basis=None):
    return train_model(CvaeBaseline(model_config, basis), data, config)
