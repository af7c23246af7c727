'''
    Likelihood-based introspection of a trained latent variable model.

    View-level: log p(g | z*) of a grasp, with z* the mean of a few prior
    draws for the view. Object-level: the average prior log-likelihood of
    the view's own latent samples.
'''
import logging

import numpy as np
from scipy.special import logsumexp
from sklearn.metrics import roc_auc_score

from graspflow.error import ContractError
from graspflow.evaluator import grasp_vectors
from graspflow.models import CnfModel, LvmModel
from graspflow.numerics import make_rng, no_tape

logger = logging.getLogger(__name__)


def _feature(model, cloud):
    if isinstance(cloud, np.ndarray):
        return cloud, None
    return model.encode(cloud)


def latent_anchor(model, feature, m, rng):
    ''' Mean of m prior-flow draws for one observation feature '''
    with no_tape():
        emb = model.embed(feature).value
        z, _ = model.prior_flow.sample(emb, m, rng)
    return z.mean(axis=0, keepdims=True)


def grasp_log_likelihood(model, cloud, grasps, m=16, rng=None):
    '''
        log p(g | z*) for externally supplied grasps.

        Args:
            cloud: PointCloud, or a precomputed observation feature
            grasps: (n, d) canonical vectors or world-frame GraspConfigs
    '''
    rng = rng if rng is not None else make_rng(0)
    feature, frame = _feature(model, cloud)
    vectors = grasp_vectors(grasps, frame)
    if isinstance(model, CnfModel):
        return model.log_prob(feature, vectors)
    if not isinstance(model, LvmModel):
        raise ContractError('grasp likelihoods need a flow model, got {}'.format(model.kind))
    z_star = latent_anchor(model, feature, m, rng)
    with no_tape():
        return model.grasp_flow.log_prob(vectors, z_star).value[:, 0]


def ood_score(model, cloud, m=32, rng=None):
    ''' Mean prior log-likelihood of m latent draws; higher is more familiar '''
    if not isinstance(model, LvmModel):
        raise ContractError('ood_score needs a latent variable model')
    rng = rng if rng is not None else make_rng(0)
    feature, _ = _feature(model, cloud)
    with no_tape():
        emb = model.embed(feature).value
        _, logp = model.prior_flow.sample(emb, m, rng)
    return float(logp.mean())


def importance_log_likelihood(model, features, grasps, k=128, rng=None):
    '''
        K-sample importance-weighted estimate of log p(g | x) with the
        inference network as proposal.

        Returns:
            (per-item estimates (n,), standard error of their mean)
    '''
    if k < 1:
        raise ContractError('importance sampling needs k >= 1')
    rng = rng if rng is not None else make_rng(0)
    features, grasps = model._check_batch(features, grasps)
    n, l = len(grasps), model.latent_dim
    if len(features) == 1:
        features = np.repeat(features, n, axis=0)

    estimates = np.empty(n)
    with no_tape():
        emb = model.embed(features).value
        mu, log_delta = (v.value for v in model.posterior(emb, grasps))
        for i in range(n):
            eps = rng.standard_normal((k, l))
            z = mu[i] + np.exp(log_delta[i]) * eps
            log_q = np.sum(-0.5 * eps ** 2 - log_delta[i], axis=1) - 0.5 * l * np.log(2 * np.pi)
            g = np.repeat(grasps[i:i + 1], k, axis=0)
            ctx = np.repeat(emb[i:i + 1], k, axis=0)
            log_recon = model.grasp_flow.log_prob(g, z).value[:, 0]
            log_prior = model.prior_flow.log_prob(z, ctx).value[:, 0]
            estimates[i] = logsumexp(log_recon + log_prior - log_q) - np.log(k)
    se = estimates.std(ddof=1) / np.sqrt(n) if n > 1 else 0.0
    return estimates, float(se)


def view_level_split(grasps, view_dir):
    '''
        True for grasps approaching the seen side: the camera looks along
        view_dir, so a grasp whose approach axis points the same way
        reaches the surface the camera saw.
    '''
    view_dir = np.asarray(view_dir, dtype=np.float64)
    if isinstance(grasps, np.ndarray):
        grasps = np.atleast_2d(grasps)
        r1, r2 = grasps[:, 3:6], grasps[:, 6:9]
        r1 = r1 / np.linalg.norm(r1, axis=1, keepdims=True)
        r2 = r2 - np.sum(r1 * r2, axis=1, keepdims=True) * r1
        r2 = r2 / np.linalg.norm(r2, axis=1, keepdims=True)
        approach = np.cross(r1, r2)
    else:
        approach = np.stack([g.approach for g in grasps])
    return approach @ view_dir > 0.0


def auroc(in_scores, out_scores):
    ''' Probability that an in-distribution score exceeds an out-of-distribution one '''
    in_scores = np.asarray(in_scores, dtype=np.float64)
    out_scores = np.asarray(out_scores, dtype=np.float64)
    if len(in_scores) == 0 or len(out_scores) == 0:
        raise ContractError('auroc needs both score populations')
    labels = np.concatenate([np.ones(len(in_scores)), np.zeros(len(out_scores))])
    return float(roc_auc_score(labels, np.concatenate([in_scores, out_scores])))
