'''
    Discriminative grasp evaluator and the likelihood fusion rule

        fused = eps * score + (1 - eps) * (logp - mean(logp)) / std(logp)

    with statistics taken over the candidate batch of one view.
'''
import logging
import math

import numpy as np
from scipy.special import expit
from sklearn.metrics import accuracy_score, roc_auc_score

from graspflow.error import ContractError, EvaluatorError, NumericError
from graspflow.numerics import (AdamW, GradTape, Mlp, as_batch, encoded_width,
                                make_rng, mean, no_tape, positional_encode,
                                softplus)
from graspflow.pointcloud import encode_view

logger = logging.getLogger(__name__)


class EvaluatorNet:
    '''
        f(g, x) = sigmoid(MLP(PE(g) ++ embed(x))). The context embedding
        has the same shape as the generative models' one but is trained
        separately.
    '''

    kind = 'evaluator'

    def __init__(self, config, basis=None):
        self.config = config
        self.basis = basis
        self.obs_dim = len(basis) if basis is not None else config.bps_points
        self.grasp_dim = config.grasp_dim
        rng = make_rng(config.seed)
        self.embedder = Mlp(self.obs_dim, config.embed_hidden, config.latent_dim,
                            activation=config.activation, rng=rng, name='evaluator.embed')
        self.head = Mlp(encoded_width(config.grasp_dim, config.bands), config.evaluator_hidden,
                        1, context_dim=config.latent_dim, activation=config.activation,
                        rng=rng, name='evaluator.head')

    def named_parameters(self):
        return self.embedder.named_parameters() + self.head.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        return []

    def load_buffers(self, buffers):
        pass

    def state(self):
        return {}

    def load_state(self, state):
        pass

    def encode(self, cloud):
        if self.basis is None:
            raise ContractError('EvaluatorNet: no BPS basis attached')
        feature, frame = encode_view(cloud, self.basis)
        return feature.values, frame

    def logits(self, features, grasps):
        grasps = np.atleast_2d(np.asarray(grasps, dtype=np.float64))
        if grasps.shape[1] != self.grasp_dim:
            raise ContractError('EvaluatorNet: grasps must have width {}'.format(self.grasp_dim))
        emb = self.embedder(as_batch(features, self.obs_dim, what='observation'))
        return self.head(positional_encode(grasps, self.config.bands), emb)

    def loss(self, features, grasps, labels):
        ''' Mean binary cross-entropy, softplus(a) - y a '''
        logits = self.logits(features, grasps)
        labels = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
        return mean(softplus(logits) - logits * labels)

    def predict_proba(self, features, grasps):
        with no_tape():
            return expit(self.logits(features, grasps).value[:, 0])

    def fit(self, data, config):
        '''
            Supervised training on labeled grasps with a random held-out
            split.

            Returns:
                report dict with held-out accuracy, AUC and score gap
        '''
        if data.labels is None:
            raise EvaluatorError('evaluator training needs labels')
        labels = data.labels
        if len(np.unique(labels)) < 2:
            raise EvaluatorError('evaluator training needs both feasible and infeasible grasps')

        rng = make_rng(config.seed)
        order = rng.permutation(len(data))
        n_hold = max(1, int(round(config.holdout * len(data))))
        held, train = order[:n_hold], order[n_hold:]
        if len(train) == 0:
            raise EvaluatorError('no training rows left after the held-out split')

        params = self.parameters()
        optimizer = AdamW(params, lr=config.lr, weight_decay=config.weight_decay)
        for it in range(config.iterations):
            index = train[rng.integers(len(train), size=config.batch)]
            features, grasps = data.batch(index)
            try:
                with GradTape() as tape:
                    loss = self.loss(features, grasps, labels[index])
                optimizer.step(tape.backward(loss, params))
            except NumericError as e:
                raise EvaluatorError('evaluator training failed at iteration {}: {}'.format(it, e))
            if (it + 1) % config.log_every == 0:
                logger.info('evaluator iteration %d/%d: bce %.4f', it + 1,
                            config.iterations, float(loss.value))

        report = self.report(data.subset(held))
        logger.info('evaluator held-out accuracy %.3f over %d grasps',
                    report['accuracy'], report['n_holdout'])
        return report

    def report(self, data):
        features, grasps = data.batch(np.arange(len(data)))
        scores = self.predict_proba(features, grasps)
        labels = data.labels.astype(int)
        report = {
            'n_holdout': len(data),
            'accuracy': float(accuracy_score(labels, scores >= 0.5)),
            'auc': float('nan'),
            'score_gap': float('nan'),
        }
        if len(np.unique(labels)) == 2:
            report['auc'] = float(roc_auc_score(labels, scores))
            report['score_gap'] = float(scores[labels == 1].mean() - scores[labels == 0].mean())
        return report


def train_evaluator(data, train_config, model_config, basis=None):
    net = EvaluatorNet(model_config, basis)
    report = net.fit(data, train_config)
    return net, report


def grasp_vectors(grasps, frame=None):
    '''
        Canonical-frame vectors from either an (n, d) array (already
        canonical) or a list of world-frame GraspConfigs.
    '''
    if isinstance(grasps, np.ndarray):
        return np.atleast_2d(grasps)
    if frame is not None:
        grasps = [frame.grasp_to_canonical(g) for g in grasps]
    return np.stack([g.to_vector() for g in grasps])


def evaluate(net, cloud, grasps):
    ''' Per-grasp scores in [0, 1] '''
    feature, frame = net.encode(cloud)
    return net.predict_proba(feature, grasp_vectors(grasps, frame))


def fuse(scores, grasp_logps, epsilon):
    scores = np.asarray(scores, dtype=np.float64)
    grasp_logps = np.asarray(grasp_logps, dtype=np.float64)
    if scores.shape != grasp_logps.shape or scores.ndim != 1:
        msg = 'fuse needs equal-length score and likelihood vectors, got {} and {}'.format(
            scores.shape, grasp_logps.shape)
        raise ContractError(msg)
    if len(scores) < 2:
        raise ContractError('fuse needs a batch of at least 2 candidates')
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError('epsilon {} outside [0, 1]'.format(epsilon))
    centered = grasp_logps - grasp_logps.mean()
    std = grasp_logps.std()
    normalized = centered / std if std > 0 else centered
    return epsilon * scores + (1.0 - epsilon) * normalized


def ranking(fused, grasp_logps=None):
    '''
        Indices in descending fused order; ties go to the higher
        likelihood, then to the lower index.
    '''
    fused = np.asarray(fused, dtype=np.float64)
    if grasp_logps is None:
        grasp_logps = np.zeros_like(fused)
    return np.lexsort((np.arange(len(fused)), -np.asarray(grasp_logps), -fused))


def rank_and_select(grasps, fused, k, grasp_logps=None):
    '''
        Returns:
            (top-k grasps in ranked order, their indices)
    '''
    n = len(fused)
    if not 1 <= k <= n:
        raise ContractError('cannot select {} of {} grasps'.format(k, n))
    if grasp_logps is None and hasattr(grasps, 'grasp_logp'):
        grasp_logps = grasps.grasp_logp
    index = ranking(fused, grasp_logps)[:k]
    if hasattr(grasps, 'subset'):
        return grasps.subset(index), index
    if isinstance(grasps, np.ndarray):
        return grasps[index], index
    return [grasps[i] for i in index], index


def filter_top_fraction(samples, fraction):
    ''' Keep the ceil(fraction * n) most likely samples by grasp_logp '''
    if not 0.0 < fraction <= 1.0:
        raise ContractError('fraction must lie in (0, 1]')
    keep = max(1, int(math.ceil(fraction * len(samples))))
    index = ranking(samples.grasp_logp)[:keep]
    return samples.subset(index)
