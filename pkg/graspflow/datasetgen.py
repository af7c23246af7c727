'''
    Procedural grasp dataset: random desk-scale objects, partial views,
    heuristic grasp proposals from surface normals and a geometric
    feasibility oracle built on the analytic signed distance functions.

    On disk a dataset is

        records.jsonl   one canonical JSON record per labeled grasp
        clouds/         one binary partial cloud per view
        manifest.json   counts, split, positive rate, seed, config hash
'''
import json
import logging
import os
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass
from enum import Enum

import numpy as np

from graspflow.config import config_hash, dump_config
from graspflow.error import ConfigError, ContractError, DataError, GraspFlowWarning
from graspflow.grasp import (JOINT_LOWER, JOINT_UPPER, N_JOINTS, SPHERE_RADIUS,
                             GraspConfig, closing_path, finger_points,
                             hand_spheres, rotation_about_approach, to_world)
from graspflow.models import TrainingData
from graspflow.numerics import make_rng, spawn_seeds
from graspflow.pointcloud import (CanonicalFrame, ShapeFamily,
                                  ShapeSpec, canonicalize, encode_view,
                                  load_cloud, partial_view, random_rotation,
                                  random_unit_vector, sample_shape, save_cloud,
                                  signed_distance, surface_normal)

logger = logging.getLogger(__name__)

CLOSING_STEPS = 64
CONTACT_TOLERANCE = 0.01
ANTIPODAL_THRESHOLD = -0.3
STANDOFF = (0.02, 0.06)
PRESHAPE_JITTER = 0.05

PRESHAPES = {
    'straight': np.zeros(N_JOINTS),
    'wide': np.tile([0.0, -0.3, 0.3], 5),
    'hook': np.tile([0.0, 0.3, 0.5], 5),
}

# (low, high) per size parameter; "similar" objects come from the upper band
SIZE_RANGES = {
    ShapeFamily.BOX: {'train': [(0.04, 0.07), (0.04, 0.07), (0.08, 0.16)],
                      'similar': [(0.07, 0.08), (0.07, 0.08), (0.16, 0.18)]},
    ShapeFamily.CYLINDER: {'train': [(0.02, 0.035), (0.08, 0.16)],
                           'similar': [(0.035, 0.04), (0.16, 0.18)]},
    ShapeFamily.SPHERE: {'train': [(0.025, 0.04)],
                         'similar': [(0.04, 0.045)]},
    ShapeFamily.CAPSULE: {'train': [(0.02, 0.035), (0.06, 0.12)],
                          'similar': [(0.035, 0.04), (0.12, 0.14)]},
    ShapeFamily.LSHAPE: {'train': [(0.08, 0.12), (0.08, 0.14), (0.02, 0.03), (0.04, 0.06)],
                         'similar': [(0.12, 0.14), (0.14, 0.16), (0.03, 0.035), (0.06, 0.07)]},
}


class GraspReason(Enum):
    OK = 'ok'
    COLLISION = 'collision'
    NO_CONTACT = 'no_contact'
    UNREACHABLE_CLOSURE = 'unreachable_closure'


@dataclass(frozen=True)
class GraspLabel:
    feasible: bool
    reason: GraspReason

    def __post_init__(self):
        if self.feasible != (self.reason == GraspReason.OK):
            raise ContractError('feasible must hold exactly when the reason is ok')

    def to_dict(self):
        return {'feasible': self.feasible, 'reason': self.reason.value}

    @classmethod
    def from_dict(cls, d):
        return cls(bool(d['feasible']), GraspReason(d['reason']))


def propose_grasps(cloud, n, rng):
    '''
        Heuristic proposals: approach a random surface point against its
        normal from a random stand-off, with a random roll and a jittered
        preshape template.
    '''
    if cloud.normals is None:
        raise ContractError('grasp proposals need surface normals')
    templates = list(PRESHAPES.values())
    grasps = []
    for _ in range(n):
        i = rng.integers(len(cloud))
        point, normal = cloud.points[i], cloud.normals[i]
        standoff = rng.uniform(*STANDOFF)
        roll = rng.uniform(0.0, 2.0 * np.pi)
        template = templates[rng.integers(len(templates))]
        joints = np.clip(template + rng.normal(0.0, PRESHAPE_JITTER, N_JOINTS),
                         JOINT_LOWER, JOINT_UPPER)
        grasps.append(GraspConfig(point + standoff * normal,
                                  rotation_about_approach(-normal, roll), joints))
    return grasps


def close_fingers(spec, grasp, steps=CLOSING_STEPS):
    '''
        Flex every finger from the preshape until its tip sphere would
        penetrate the shape; each finger stops one step before that.

        Returns:
            world fingertip centers (5, 3) at the stopping configuration
    '''
    path = closing_path(grasp.joints, steps)
    tips = finger_points(path)[:, :, 2, :]                        # (steps + 1, 5, 3)
    world = to_world(grasp, tips.reshape(-1, 3))
    clearance = (signed_distance(spec, world) - SPHERE_RADIUS).reshape(steps + 1, -1)
    blocked = clearance <= 0.0
    stop = np.where(blocked.any(axis=0), np.argmax(blocked, axis=0) - 1, steps)
    stop = np.maximum(stop, 0)
    world = world.reshape(steps + 1, -1, 3)
    return world[stop, np.arange(world.shape[1])]


def label_grasp(spec, grasp):
    '''
        Geometric feasibility oracle. Deterministic in (shape, grasp).
    '''
    centers, palm = hand_spheres(grasp)
    if np.any(signed_distance(spec, palm) < 0.0) or \
            np.any(signed_distance(spec, centers) < SPHERE_RADIUS):
        return GraspLabel(False, GraspReason.COLLISION)

    tips = close_fingers(spec, grasp)
    clearance = signed_distance(spec, tips) - SPHERE_RADIUS
    contact = clearance <= CONTACT_TOLERANCE
    if not np.any(contact):
        return GraspLabel(False, GraspReason.NO_CONTACT)
    if np.count_nonzero(contact) >= 2:
        normals = surface_normal(spec, tips[contact])
        dots = normals @ normals.T
        if np.min(dots) < ANTIPODAL_THRESHOLD:
            return GraspLabel(True, GraspReason.OK)
    return GraspLabel(False, GraspReason.UNREACHABLE_CLOSURE)


def random_shape(family, split, rng, n_points=1024):
    family = ShapeFamily(family)
    band = 'similar' if split == 'similar' else 'train'
    sizes = tuple(float(rng.uniform(lo, hi)) for lo, hi in SIZE_RANGES[family][band])
    rotation = random_rotation(rng)
    return ShapeSpec(family, sizes, rotation=tuple(rotation.reshape(-1)),
                     n_points=n_points)


def _object_jobs(config):
    jobs = []
    for family in config.train_families:
        jobs += [('train', family)] * config.objects_per_family
        jobs += [('similar', family)] * config.similar_per_family
    for family in config.novel_families:
        jobs += [('novel', family)] * config.novel_per_family
    seeds = spawn_seeds(config.seed, len(jobs))
    return [(i, split, family, seed) for i, ((split, family), seed) in enumerate(zip(jobs, seeds))]


def _build_object(job, views, grasps_per_view, n_points, radius):
    object_id, split, family, seed = job
    rng = make_rng(seed)
    spec = random_shape(family, split, rng, n_points)
    full = sample_shape(spec, rng)
    results = []
    for _ in range(views):
        view_dir = random_unit_vector(rng)
        cloud = partial_view(full, view_dir)
        _, frame = canonicalize(cloud, radius)
        grasps = propose_grasps(full, grasps_per_view, rng)
        labels = [label_grasp(spec, g) for g in grasps]
        results.append((view_dir, cloud, frame, grasps, labels))
    return object_id, split, spec, results


def _build_one(args):
    return _build_object(*args)


def make_record(record_id, view_id, object_id, split, spec, view_dir, cloud_path,
                frame, grasp, label):
    return {
        'id': record_id,
        'view': view_id,
        'object': object_id,
        'split': split,
        'family': spec.family.value,
        'shape': spec.to_dict(),
        'view_dir': [float(v) for v in view_dir],
        'cloud': cloud_path,
        'frame': frame.to_dict(),
        'grasp': frame.grasp_to_canonical(grasp).to_vector().tolist(),
        'grasp_world': grasp.to_dict(),
        'label': label.to_dict(),
    }


def build_dataset(config, out_dir):
    '''
        Generate every object, view and labeled grasp of `config` into
        `out_dir`. Objects are generated independently from spawned seeds
        and merged in object order, so the output does not depend on the
        worker count.

        Returns:
            the manifest dict
    '''
    os.makedirs(os.path.join(out_dir, 'clouds'), exist_ok=True)
    jobs = _object_jobs(config)
    args = [(job, config.views_per_object, config.grasps_per_view, config.n_points,
             config.bps_radius) for job in jobs]
    if config.workers > 1:
        with ProcessPoolExecutor(max_workers=config.workers) as pool:
            built = list(pool.map(_build_one, args))
    else:
        built = [_build_one(a) for a in args]

    counts = {}
    splits = {'train': set(), 'similar': set(), 'novel': set()}
    positives = total = 0
    view_id = record_id = 0
    with open(os.path.join(out_dir, 'records.jsonl'), 'w') as f:
        for object_id, split, spec, results in built:
            splits[split].add(spec.family.value)
            key = '{}/{}'.format(split, spec.family.value)
            entry = counts.setdefault(key, {'objects': 0, 'views': 0, 'grasps': 0,
                                            'positives': 0})
            entry['objects'] += 1
            for view_dir, cloud, frame, grasps, labels in results:
                cloud_path = 'clouds/{:06d}.bin'.format(view_id)
                save_cloud(os.path.join(out_dir, cloud_path), cloud)
                entry['views'] += 1
                for grasp, label in zip(grasps, labels):
                    record = make_record(record_id, view_id, object_id, split, spec,
                                         view_dir, cloud_path, frame, grasp, label)
                    f.write(json.dumps(record, sort_keys=True) + '\n')
                    record_id += 1
                    entry['grasps'] += 1
                    entry['positives'] += int(label.feasible)
                    positives += int(label.feasible)
                    total += 1
                view_id += 1

    positive_rate = positives / total if total else 0.0
    manifest = {
        'seed': config.seed,
        'config_hash': config_hash(dump_config({'dataset': config})),
        'config': asdict(config),
        'counts': counts,
        'n_objects': len(built),
        'n_views': view_id,
        'n_records': record_id,
        'positive_rate': positive_rate,
        'splits': {k: sorted(v) for k, v in splits.items()},
    }
    with open(os.path.join(out_dir, 'manifest.json'), 'w') as f:
        f.write(json.dumps(manifest, sort_keys=True, indent=2) + '\n')

    check_positive_rate(positive_rate, config)
    logger.info('dataset with %d views and %d grasps (positive rate %.3f) written to %s',
                view_id, record_id, positive_rate, out_dir)
    return manifest


def check_positive_rate(rate, config):
    if config.positive_rate_min <= rate <= config.positive_rate_max:
        return
    msg = 'positive rate {:.3f} outside [{}, {}]'.format(
        rate, config.positive_rate_min, config.positive_rate_max)
    if config.enforce_positive_rate:
        raise ConfigError(msg)
    warnings.warn(msg, GraspFlowWarning)


@dataclass
class View:
    view_id: int
    object_id: int
    split: str
    shape: ShapeSpec
    view_dir: np.ndarray
    cloud_path: str
    frame: CanonicalFrame


class Dataset:
    '''
        A generated dataset loaded back from disk. Clouds are read lazily.
    '''

    def __init__(self, root, records, manifest):
        self.root = root
        self.records = records
        self.manifest = manifest
        self.views = {}
        self.by_view = {}
        for r in records:
            self.by_view.setdefault(r['view'], []).append(r)
            if r['view'] not in self.views:
                self.views[r['view']] = View(r['view'], r['object'], r['split'],
                                             ShapeSpec.from_dict(r['shape']),
                                             np.array(r['view_dir']), r['cloud'],
                                             CanonicalFrame.from_dict(r['frame']))
        self._clouds = {}

    def __len__(self):
        return len(self.records)

    def cloud(self, view_id):
        if view_id not in self._clouds:
            self._clouds[view_id] = load_cloud(os.path.join(self.root, self.views[view_id].cloud_path))
        return self._clouds[view_id]

    def view_ids(self, split=None, families=None):
        return [v.view_id for v in self.views.values()
                if (split is None or v.split == split)
                and (families is None or v.shape.family.value in families)]

    def records_for(self, view_id):
        return self.by_view.get(view_id, [])

    def training_arrays(self, basis, split='train', positives_only=True, extra=()):
        '''
            Encode the views of `split` against `basis` and collect their
            grasps (optionally only the feasible ones, plus `extra` records).
        '''
        records = [r for r in list(self.records) + list(extra) if r['split'] == split]
        if positives_only:
            records = [r for r in records if r['label']['feasible']]
        if not records:
            raise DataError('no {} records in split {}'.format(
                'feasible' if positives_only else 'labeled', split))
        view_ids = sorted({r['view'] for r in records})
        position = {v: i for i, v in enumerate(view_ids)}
        encoded = [encode_view(self.cloud(v), basis) for v in view_ids]
        features = np.stack([feature.values for feature, _ in encoded])
        # re-derive canonical grasps in the basis' own frame
        frames = [frame for _, frame in encoded]
        grasps = [frames[position[r['view']]].grasp_to_canonical(
            GraspConfig.from_dict(r['grasp_world'])).to_vector() for r in records]
        return TrainingData(features=features,
                            view_index=np.array([position[r['view']] for r in records]),
                            grasps=np.array(grasps),
                            labels=np.array([float(r['label']['feasible']) for r in records]))


def load_dataset(root):
    try:
        with open(os.path.join(root, 'manifest.json')) as f:
            manifest = json.load(f)
        with open(os.path.join(root, 'records.jsonl')) as f:
            records = [json.loads(line) for line in f if line.strip()]
    except OSError as e:
        raise DataError('cannot read dataset {}: {}'.format(root, e))
    except ValueError as e:
        raise DataError('malformed dataset {}: {}'.format(root, e))
    if len(records) != manifest.get('n_records'):
        raise DataError('dataset {} has {} records, manifest says {}'.format(
            root, len(records), manifest.get('n_records')))
    return Dataset(root, records, manifest)


def _jitter_rotation(rotation, angle, rng):
    axis = random_unit_vector(rng)
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    delta = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
    return delta @ rotation


def augment_negatives(dataset, rng, per_positive=1, translation_jitter=0.03,
                      angle_jitter=0.5, free_space=(0.25, 0.4)):
    '''
        Extra infeasible examples for the evaluator: perturbed poses of
        feasible grasps that the oracle rejects, plus one free-space pose
        per view.

        Returns:
            list of records in the dataset's record format
    '''
    extra = []
    next_id = len(dataset.records)
    for view_id in sorted(dataset.views):
        view = dataset.views[view_id]
        records = dataset.records_for(view_id)
        base = {k: records[0][k] for k in ('view', 'object', 'split', 'family', 'shape',
                                           'view_dir', 'cloud', 'frame')}
        candidates = []
        for r in records:
            if not r['label']['feasible']:
                continue
            grasp = GraspConfig.from_dict(r['grasp_world'])
            for _ in range(per_positive):
                candidates.append(GraspConfig(
                    grasp.translation + rng.normal(0.0, translation_jitter, 3),
                    _jitter_rotation(grasp.rotation, rng.normal(0.0, angle_jitter), rng),
                    grasp.joints))
        centroid = np.array(view.frame.centroid)
        direction = random_unit_vector(rng)
        candidates.append(GraspConfig(centroid + rng.uniform(*free_space) * direction,
                                      rotation_about_approach(-direction, rng.uniform(0, 2 * np.pi)),
                                      PRESHAPES['straight']))
        for grasp in candidates:
            label = label_grasp(view.shape, grasp)
            if label.feasible:
                continue
            record = dict(base, id=next_id, label=label.to_dict(),
                          grasp=view.frame.grasp_to_canonical(grasp).to_vector().tolist(),
                          grasp_world=grasp.to_dict())
            extra.append(record)
            next_id += 1
    logger.info('mined %d extra negatives over %d views', len(extra), len(dataset.views))
    return extra
