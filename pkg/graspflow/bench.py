'''
    Benchmark reports on the synthetic oracle:

    - fusion strategies x epsilon grid, top-1 oracle feasibility
    - view-level and object-level introspection
    - mode coverage and diversity on a two-context, two-mode toy task
    - sampling runtime
'''
import logging
import time
from collections import defaultdict

import numpy as np
import pandas as pd
from scipy.spatial.distance import pdist

from graspflow.config import ModelConfig, TrainConfig
from graspflow.datasetgen import label_grasp, propose_grasps
from graspflow.evaluator import evaluate, fuse, ranking
from graspflow.grasp import GraspConfig
from graspflow.introspect import (auroc, grasp_log_likelihood, ood_score,
                                  view_level_split)
from graspflow.models import TrainingData, build_model, sample_grasps, train_model
from graspflow.numerics import make_rng

logger = logging.getLogger(__name__)

STRATEGIES = ('evaluator-only', 'evaluator+prior-flow', 'evaluator+grasp-flow')

# context -> two mode centers
TOY_MODES = np.array([
    [[-2.0, 0.0], [2.0, 0.0]],
    [[0.0, -2.0], [0.0, 2.0]],
])


def toy_two_mode_data(n_per_context, rng, spread=0.3):
    ''' One-hot contexts, each with an equal mixture of two Gaussian modes '''
    view_index, grasps = [], []
    for c, modes in enumerate(TOY_MODES):
        picks = rng.integers(2, size=n_per_context)
        grasps.append(modes[picks] + rng.normal(0.0, spread, (n_per_context, 2)))
        view_index.append(np.full(n_per_context, c))
    return TrainingData(features=np.eye(len(TOY_MODES)),
                        view_index=np.concatenate(view_index),
                        grasps=np.concatenate(grasps))


def toy_model_config(preset, seed=0):
    return ModelConfig(preset=preset, grasp_dim=2, latent_dim=2, blocks=4,
                       conditioner_hidden=(32, 32, 32), embed_hidden=(16,),
                       inference_hidden=(32, 32), bands=2, bps_points=len(TOY_MODES),
                       seed=seed)


def mode_coverage(model, rng, n=200):
    '''
        Fraction of n samples per context falling in each mode basin
        (nearest center), plus the mean pairwise sample distance.
    '''
    rows = []
    for c, modes in enumerate(TOY_MODES):
        x = model.sample(np.eye(len(TOY_MODES))[c], n, rng).vectors
        nearest = np.argmin(np.linalg.norm(x[:, None, :] - modes[None], axis=2), axis=1)
        rows.append({
            'model': model.kind,
            'context': c,
            'mode0': float(np.mean(nearest == 0)),
            'mode1': float(np.mean(nearest == 1)),
            'diversity': float(pdist(x).mean()),
        })
    return rows


def run_mode_coverage(train_config=None, presets=('cnf', 'lvm', 'cvae'), n=200, seed=0):
    train_config = train_config or TrainConfig(lr=1e-3, iterations=3000, seed=seed)
    rng = make_rng(seed)
    data = toy_two_mode_data(1000, rng)
    rows = []
    for preset in presets:
        model = build_model(toy_model_config(preset, seed))
        train_model(model, data, train_config)
        rows += mode_coverage(model, rng, n)
        logger.info('mode coverage for %s: %s', preset, rows[-2:])
    return pd.DataFrame(rows)


def _top1(scores, likelihood, epsilon):
    return ranking(fuse(scores, likelihood, epsilon), likelihood)[0]


def fusion_table(lvm, evaluator, dataset, fusion, rng, splits=('similar', 'novel')):
    '''
        Top-1 oracle feasibility for each fusion strategy and epsilon, on
        held-out views. Also reports unranked generative sampling and the
        normal-based heuristic sampler.
    '''
    outcomes = defaultdict(list)
    for split in splits:
        for view_id in dataset.view_ids(split)[:fusion.max_views]:
            view = dataset.views[view_id]
            cloud = dataset.cloud(view_id)
            samples = sample_grasps(lvm, cloud, fusion.n_grasps, rng)
            world = samples.grasps()
            feasible = np.array([label_grasp(view.shape, g).feasible for g in world])
            scores = evaluate(evaluator, cloud, world)

            terms = {
                'evaluator-only': samples.grasp_logp,
                'evaluator+prior-flow': samples.prior_logp,
                'evaluator+grasp-flow': samples.grasp_logp,
            }
            for strategy in STRATEGIES:
                for eps in fusion.epsilon_grid:
                    e = 1.0 if strategy == 'evaluator-only' else eps
                    top = _top1(scores, terms[strategy], e)
                    outcomes[(strategy, eps, split)].append(feasible[top])
            outcomes[('generative-only', np.nan, split)].append(feasible[0])

            proposal = propose_grasps(cloud, 1, rng)[0]
            outcomes[('heuristic', np.nan, split)].append(
                label_grasp(view.shape, proposal).feasible)
        logger.info('fusion table: %s split done', split)

    rows = [{'strategy': strategy, 'epsilon': eps, 'split': split,
             'feasible_rate': float(np.mean(values)), 'n_views': len(values)}
            for (strategy, eps, split), values in outcomes.items()]
    return pd.DataFrame(rows)


def introspection_report(lvm, evaluator, dataset, fusion, rng):
    '''
        Returns:
            (per-view DataFrame, summary dict). Per view: the likelihood
            margin of feasible grasps approaching the seen side over the
            culled side, and the object-level scores of the view.
    '''
    rows = []
    for split in ('similar', 'novel'):
        for view_id in dataset.view_ids(split)[:fusion.max_views]:
            view = dataset.views[view_id]
            cloud = dataset.cloud(view_id)
            records = [r for r in dataset.records_for(view_id) if r['label']['feasible']]
            margin = np.nan
            if records:
                grasps = [GraspConfig.from_dict(r['grasp_world']) for r in records]
                seen = view_level_split(grasps, view.view_dir)
                if seen.any() and (~seen).any():
                    logp = grasp_log_likelihood(lvm, cloud, grasps,
                                                m=fusion.likelihood_samples, rng=rng)
                    margin = float(logp[seen].mean() - logp[~seen].mean())
            samples = sample_grasps(lvm, cloud, fusion.n_grasps, rng)
            rows.append({
                'view': view_id,
                'split': split,
                'family': view.shape.family.value,
                'view_margin': margin,
                'ood_score': ood_score(lvm, cloud, m=fusion.ood_samples, rng=rng),
                'evaluator_score': float(evaluate(evaluator, cloud, samples.grasps()).mean()),
            })
    frame = pd.DataFrame(rows)
    margins = frame.loc[frame.split == 'similar', 'view_margin'].dropna()
    inside, outside = frame[frame.split == 'similar'], frame[frame.split == 'novel']
    summary = {
        'views_with_margin': int(len(margins)),
        'positive_margin_rate': float((margins > 0).mean()) if len(margins) else np.nan,
        'ood_auroc': np.nan,
        'evaluator_auroc': np.nan,
    }
    if len(inside) and len(outside):
        summary['ood_auroc'] = auroc(inside.ood_score, outside.ood_score)
        summary['evaluator_auroc'] = auroc(inside.evaluator_score, outside.evaluator_score)
    return frame, summary


def sample_runtime(model, cloud, n=100, repeats=5, rng=None):
    ''' Mean wall time in seconds of one sample_grasps call '''
    rng = rng if rng is not None else make_rng(0)
    sample_grasps(model, cloud, n, rng)
    start = time.perf_counter()
    for _ in range(repeats):
        sample_grasps(model, cloud, n, rng)
    return (time.perf_counter() - start) / repeats


def plot_fusion(table, path):
    ''' Feasible rate against epsilon per strategy; needs matplotlib '''
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, axes = plt.subplots(1, table.split.nunique(), figsize=(10, 4), squeeze=False)
    for ax, (split, group) in zip(axes[0], table.groupby('split')):
        for strategy in STRATEGIES:
            rows = group[group.strategy == strategy].sort_values('epsilon')
            ax.plot(rows.epsilon.astype(str), rows.feasible_rate, marker='o', label=strategy)
        ax.set_title(split)
        ax.set_xlabel('epsilon')
        ax.set_ylabel('top-1 feasible rate')
    axes[0][0].legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)


def plot_ood(frame, path):
    import matplotlib
    matplotlib.use('Agg')
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(5, 4))
    for split, group in frame.groupby('split'):
        ax.hist(group.ood_score, bins=20, alpha=0.6, label=split)
    ax.set_xlabel('prior log-likelihood')
    ax.legend()
    fig.tight_layout()
    fig.savefig(path)
    plt.close(fig)
