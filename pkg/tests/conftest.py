from dataclasses import dataclass

import pytest

from graspflow.config import DatasetConfig, FusionConfig, ModelConfig, TrainConfig
from graspflow.datasetgen import (Dataset, augment_negatives, build_dataset,
                                  load_dataset)
from graspflow.evaluator import EvaluatorNet, train_evaluator
from graspflow.models import LvmModel, train_model
from graspflow.numerics import make_rng
from graspflow.pointcloud import make_basis


@dataclass
class TrainedRun:
    dataset: Dataset
    lvm: LvmModel
    evaluator: EvaluatorNet
    fusion: FusionConfig


# The default pipeline at desk scale: same families and grasp dimensions,
# fewer objects and a shorter schedule.
acceptance_dataset = DatasetConfig(objects_per_family=8, similar_per_family=7,
                                   novel_per_family=13, views_per_object=4,
                                   grasps_per_view=32, n_points=1024, workers=4)
acceptance_model = ModelConfig(latent_dim=16, blocks=8, conditioner_hidden=(64, 64),
                               embed_hidden=(128, 64), inference_hidden=(64, 64),
                               evaluator_hidden=(64, 64), bps_points=256)
acceptance_train = TrainConfig(lr=1e-3, batch=64, iterations=3000, log_every=500)


@pytest.fixture(scope='session')
def trained_run(tmp_path_factory):
    root = str(tmp_path_factory.mktemp('acceptance'))
    build_dataset(acceptance_dataset, root)
    dataset = load_dataset(root)
    config = acceptance_model
    basis = make_basis(config.bps_points, config.bps_radius, config.bps_seed)

    data = dataset.training_arrays(basis, 'train', positives_only=True)
    lvm = train_model(LvmModel(config, basis), data, acceptance_train).model

    extra = augment_negatives(dataset, make_rng(1), per_positive=1)
    labeled = dataset.training_arrays(basis, 'train', positives_only=False, extra=extra)
    evaluator, _ = train_evaluator(labeled, acceptance_train, config, basis)
    return TrainedRun(dataset, lvm, evaluator, FusionConfig(max_views=50))
