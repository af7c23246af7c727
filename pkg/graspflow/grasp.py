'''
    Grasp representation and the geometric hand proxy.

    A grasp is a palm pose (R, t) plus 15 finger joints. The flows work on
    the flat 24-vector [t, R[:, 0], R[:, 1], joints]; decoding
    re-orthonormalizes the two rotation columns and clamps the joints.

    Palm frame: z is the approach axis, y is the closing direction of the
    four fingers, the thumb sits opposite them on -y.
'''
import logging
import warnings
from dataclasses import dataclass

import numpy as np

from graspflow.error import ContractError, GraspFlowWarning

logger = logging.getLogger(__name__)

D_GRASP = 24
N_FINGERS = 5
N_JOINTS = 15

# per finger: abduction, proximal flexion, distal flexion
JOINT_LOWER = np.tile([-0.35, -0.5, 0.0], N_FINGERS)
JOINT_UPPER = np.tile([0.35, 1.6, 1.6], N_FINGERS)

PALM_HALF_EXTENTS = np.array([0.04, 0.05, 0.01])
FINGER_BASES = np.array([
    [0.00, -0.045, 0.01],     # thumb
    [-0.03, 0.045, 0.01],
    [-0.01, 0.045, 0.01],
    [0.01, 0.045, 0.01],
    [0.03, 0.045, 0.01],
])
# fingers on +y curl towards -y and the thumb the other way
FINGER_SIDES = np.array([-1.0, 1.0, 1.0, 1.0, 1.0])
LINK_LENGTHS = (0.05, 0.04)
SPHERE_RADIUS = 0.01


@dataclass
class GraspConfig:
    translation: np.ndarray
    rotation: np.ndarray
    joints: np.ndarray

    def __post_init__(self):
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(N_JOINTS)

    @property
    def approach(self):
        return self.rotation[:, 2]

    def to_vector(self):
        return np.concatenate([self.translation, self.rotation[:, 0],
                               self.rotation[:, 1], self.joints])

    @classmethod
    def from_vector(cls, vector):
        '''
            Decode a flat 24-vector.

            Returns:
                (GraspConfig, number of joints clamped into their limits)
        '''
        vector = np.asarray(vector, dtype=np.float64)
        if vector.shape != (D_GRASP,):
            msg = 'grasp vector must have length {}, got shape {}'.format(
                D_GRASP, vector.shape)
            raise ContractError(msg)
        joints = vector[9:]
        clamped = np.clip(joints, JOINT_LOWER, JOINT_UPPER)
        n_clamped = int(np.count_nonzero(clamped != joints))
        return cls(vector[:3], rotation_from_6d(vector[3:9]), clamped), n_clamped

    def to_dict(self):
        return {
            'translation': self.translation.tolist(),
            'rotation': self.rotation.reshape(-1).tolist(),
            'joints': self.joints.tolist(),
        }

    @classmethod
    def from_dict(cls, d):
        return cls(d['translation'], np.reshape(d['rotation'], (3, 3)), d['joints'])


def _perpendicular(v):
    # cross with the least aligned basis axis
    axis = np.zeros(3)
    axis[np.argmin(np.abs(v))] = 1.0
    p = np.cross(v, axis)
    return p / np.linalg.norm(p)


def rotation_from_6d(r6):
    ''' Gram-Schmidt on the two columns; degenerate inputs get a valid completion '''
    a1, a2 = np.asarray(r6[:3], dtype=np.float64), np.asarray(r6[3:6], dtype=np.float64)
    n1 = np.linalg.norm(a1)
    b1 = a1 / n1 if n1 > 1e-12 else np.array([1.0, 0.0, 0.0])
    b2 = a2 - np.dot(b1, a2) * b1
    n2 = np.linalg.norm(b2)
    b2 = b2 / n2 if n2 > 1e-12 else _perpendicular(b1)
    b3 = np.cross(b1, b2)
    return np.stack([b1, b2, b3], axis=1)


def decode_vectors(vectors):
    '''
        Decode a batch of grasp vectors, warning once when joints had to be
        clamped.

        Returns:
            (list of GraspConfig, int array of clamped joint values per grasp)
    '''
    grasps, clamped = [], []
    for vector in np.atleast_2d(vectors):
        grasp, n_clamped = GraspConfig.from_vector(vector)
        grasps.append(grasp)
        clamped.append(n_clamped)
    clamped = np.array(clamped, dtype=np.int64)
    total = int(clamped.sum())
    if total > 0:
        msg = '{} joint values clamped into limits while decoding {} grasps'.format(
            total, len(grasps))
        warnings.warn(msg, GraspFlowWarning)
    return grasps, clamped


def rotation_about_approach(approach, roll):
    ''' Palm rotation whose z-axis is `approach`, rolled by `roll` radians '''
    z = np.asarray(approach, dtype=np.float64)
    z = z / np.linalg.norm(z)
    x0 = _perpendicular(z)
    y0 = np.cross(z, x0)
    x = np.cos(roll) * x0 + np.sin(roll) * y0
    y = np.cross(z, x)
    return np.stack([x, y, z], axis=1)


def finger_points(joints):
    '''
        Palm-frame sphere centers of the finger proxy.

        Args:
            joints: (..., 15) joint values
        Returns:
            (..., 5, 3, 3): per finger the proximal link midpoint, the
            middle joint and the fingertip
    '''
    joints = np.asarray(joints, dtype=np.float64)
    q = joints.reshape(joints.shape[:-1] + (N_FINGERS, 3))
    a, t1, t2 = q[..., 0], q[..., 1], q[..., 2]
    side = FINGER_SIDES

    def direction(theta):
        return np.stack([np.sin(a),
                         -side * np.sin(theta) * np.cos(a),
                         np.cos(theta) * np.cos(a)], axis=-1)

    d1, d2 = direction(t1), direction(t1 + t2)
    l1, l2 = LINK_LENGTHS
    mid = FINGER_BASES + 0.5 * l1 * d1
    knuckle = FINGER_BASES + l1 * d1
    tip = knuckle + l2 * d2
    return np.stack([mid, knuckle, tip], axis=-2)


def palm_points(resolution=5):
    ''' Palm-frame sample grid filling the palm box '''
    axes = [np.linspace(-h, h, resolution) for h in PALM_HALF_EXTENTS]
    grid = np.stack(np.meshgrid(*axes, indexing='ij'), axis=-1)
    return grid.reshape(-1, 3)


def to_world(grasp, points):
    return np.asarray(points) @ grasp.rotation.T + grasp.translation


def hand_spheres(grasp):
    '''
        World-frame proxy of the preshaped hand.

        Returns:
            (sphere centers (15, 3), palm box samples (n, 3))
    '''
    centers = finger_points(grasp.joints).reshape(-1, 3)
    return to_world(grasp, centers), to_world(grasp, palm_points())


def closing_path(joints, steps):
    '''
        Joint configurations from the preshape to fully flexed fingers:
        flexion joints move linearly to their upper limits, abduction is
        held. Returns (steps + 1, 15).
    '''
    joints = np.asarray(joints, dtype=np.float64)
    target = joints.copy()
    flex = np.ones(N_JOINTS, dtype=bool)
    flex[0::3] = False
    target[flex] = JOINT_UPPER[flex]
    t = np.linspace(0.0, 1.0, steps + 1)[:, None]
    return joints + t * (target - joints)
