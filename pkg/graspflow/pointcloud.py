'''
    Procedural desk-scale objects, partial views and Basis Point Set
    encoding.

    Shapes live in their own object frame and are placed in the world by
    the rigid pose of their ShapeSpec. Every sampled point carries its
    outward surface normal, which the partial-view camera proxy and the
    grasp proposer rely on.
'''
import logging
import os
import struct
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy.spatial import cKDTree

from graspflow.error import ContractError, DataError, ShapeError
from graspflow.numerics import ensure_finite, make_rng

logger = logging.getLogger(__name__)

CLOUD_MAGIC = b'GFCLOUD1'
BASIS_MAGIC = b'GFBASIS1'
MIN_SURFACE_POINTS = 256


class ShapeFamily(Enum):
    BOX = 'box'
    CYLINDER = 'cylinder'
    SPHERE = 'sphere'
    CAPSULE = 'capsule'
    LSHAPE = 'lshape'


# Number of size parameters per family:
#   box (sx, sy, sz), cylinder (radius, height), sphere (radius,),
#   capsule (radius, height of the straight part),
#   lshape (foot length, height, thickness, depth)
SIZE_ARITY = {
    ShapeFamily.BOX: 3,
    ShapeFamily.CYLINDER: 2,
    ShapeFamily.SPHERE: 1,
    ShapeFamily.CAPSULE: 2,
    ShapeFamily.LSHAPE: 4,
}

_IDENTITY = (1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0)


@dataclass(frozen=True)
class ShapeSpec:
    family: ShapeFamily
    sizes: tuple
    rotation: tuple = _IDENTITY
    translation: tuple = (0.0, 0.0, 0.0)
    n_points: int = 1024

    def __post_init__(self):
        try:
            family = ShapeFamily(self.family)
        except ValueError:
            raise ShapeError('Unsupported shape family {}'.format(self.family))
        object.__setattr__(self, 'family', family)
        object.__setattr__(self, 'sizes', tuple(float(s) for s in self.sizes))
        object.__setattr__(self, 'rotation', tuple(float(r) for r in np.ravel(self.rotation)))
        object.__setattr__(self, 'translation', tuple(float(t) for t in self.translation))
        if len(self.sizes) != SIZE_ARITY[family]:
            msg = '{} expects {} sizes, got {}'.format(
                family.value, SIZE_ARITY[family], len(self.sizes))
            raise ShapeError(msg)
        if min(self.sizes) <= 0:
            raise ShapeError('Shape sizes must be positive: {}'.format(self.sizes))
        if self.n_points < MIN_SURFACE_POINTS:
            msg = 'At least {} surface points required, got {}'.format(
                MIN_SURFACE_POINTS, self.n_points)
            raise ShapeError(msg)
        if len(self.rotation) != 9 or len(self.translation) != 3:
            raise ShapeError('Pose must be a 3x3 rotation and a 3-vector')

    @property
    def R(self):
        return np.array(self.rotation).reshape(3, 3)

    @property
    def t(self):
        return np.array(self.translation)

    def to_world(self, points):
        return points @ self.R.T + self.t

    def to_object(self, points):
        return (points - self.t) @ self.R

    def to_dict(self):
        return {
            'family': self.family.value,
            'sizes': list(self.sizes),
            'rotation': list(self.rotation),
            'translation': list(self.translation),
            'n_points': self.n_points,
        }

    @classmethod
    def from_dict(cls, d):
        return cls(family=d['family'], sizes=tuple(d['sizes']),
                   rotation=tuple(d['rotation']),
                   translation=tuple(d['translation']),
                   n_points=int(d['n_points']))


@dataclass
class PointCloud:
    points: np.ndarray
    normals: np.ndarray = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if len(self.points) < 1:
            raise ContractError('A point cloud needs at least one point')
        ensure_finite(self.points, 'PointCloud.points')
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ContractError('Normals must match points one to one')
            norms = np.linalg.norm(self.normals, axis=1)
            if np.any(np.abs(norms - 1.0) > 1e-6):
                raise ContractError('Normals must have unit length')

    def __len__(self):
        return len(self.points)

    @property
    def centroid(self):
        return self.points.mean(axis=0)

    def subset(self, mask):
        normals = self.normals[mask] if self.normals is not None else None
        return PointCloud(self.points[mask], normals)


@dataclass(frozen=True)
class CanonicalFrame:
    '''
        Maps world coordinates into the centered, ball-scaled frame used for
        BPS encoding. Rotations are left untouched.
    '''
    centroid: tuple
    scale: float = 1.0

    def points_to_canonical(self, points):
        return (np.asarray(points) - np.array(self.centroid)) * self.scale

    def points_to_world(self, points):
        return np.asarray(points) / self.scale + np.array(self.centroid)

    def grasp_to_canonical(self, grasp):
        return replace(grasp, translation=self.points_to_canonical(grasp.translation))

    def grasp_to_world(self, grasp):
        return replace(grasp, translation=self.points_to_world(grasp.translation))

    def to_dict(self):
        return {'centroid': list(self.centroid), 'scale': self.scale}

    @classmethod
    def from_dict(cls, d):
        return cls(centroid=tuple(float(c) for c in d['centroid']),
                   scale=float(d['scale']))


@dataclass
class BpsBasis:
    points: np.ndarray
    radius: float
    seed: int

    def __post_init__(self):
        self.points = np.array(self.points, dtype=np.float64).reshape(-1, 3)
        self.points.setflags(write=False)

    def __len__(self):
        return len(self.points)


@dataclass
class BpsFeature:
    values: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __len__(self):
        return len(self.values)


def _random_rotation(rng):
    q = rng.standard_normal(4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def random_rotation(rng):
    ''' Uniform rotation from a random unit quaternion '''
    return _random_rotation(rng)


def random_unit_vector(rng):
    v = rng.standard_normal(3)
    return v / np.linalg.norm(v)


def _box_surface(half, n, rng, center=(0.0, 0.0, 0.0)):
    half = np.asarray(half, dtype=np.float64)
    # face pairs normal to x, y, z
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]])
    areas = np.repeat(areas, 2)
    faces = rng.choice(6, size=n, p=areas / areas.sum())
    points = rng.uniform(-1.0, 1.0, size=(n, 3)) * half
    normals = np.zeros((n, 3))
    axis = faces // 2
    sign = np.where(faces % 2 == 0, 1.0, -1.0)
    rows = np.arange(n)
    points[rows, axis] = sign * half[axis]
    normals[rows, axis] = sign
    return points + np.asarray(center), normals


def _sphere_directions(n, rng):
    d = rng.standard_normal((n, 3))
    return d / np.linalg.norm(d, axis=1, keepdims=True)


def _cylinder_surface(radius, height, n, rng):
    side = 2.0 * np.pi * radius * height
    cap = np.pi * radius ** 2
    which = rng.choice(3, size=n, p=np.array([side, cap, cap]) / (side + 2 * cap))
    theta = rng.uniform(0.0, 2.0 * np.pi, size=n)
    points = np.zeros((n, 3))
    normals = np.zeros((n, 3))

    on_side = which == 0
    points[on_side, 0] = radius * np.cos(theta[on_side])
    points[on_side, 1] = radius * np.sin(theta[on_side])
    points[on_side, 2] = rng.uniform(-height / 2, height / 2, size=on_side.sum())
    normals[on_side, 0] = np.cos(theta[on_side])
    normals[on_side, 1] = np.sin(theta[on_side])

    on_cap = ~on_side
    rho = radius * np.sqrt(rng.uniform(0.0, 1.0, size=on_cap.sum()))
    points[on_cap, 0] = rho * np.cos(theta[on_cap])
    points[on_cap, 1] = rho * np.sin(theta[on_cap])
    sign = np.where(which[on_cap] == 1, 1.0, -1.0)
    points[on_cap, 2] = sign * height / 2
    normals[on_cap, 2] = sign
    return points, normals


def _capsule_surface(radius, height, n, rng):
    side = 2.0 * np.pi * radius * height
    caps = 4.0 * np.pi * radius ** 2
    on_side = rng.uniform(0.0, side + caps, size=n) < side
    points = np.zeros((n, 3))
    normals = np.zeros((n, 3))

    theta = rng.uniform(0.0, 2.0 * np.pi, size=on_side.sum())
    points[on_side, 0] = radius * np.cos(theta)
    points[on_side, 1] = radius * np.sin(theta)
    points[on_side, 2] = rng.uniform(-height / 2, height / 2, size=on_side.sum())
    normals[on_side, 0] = np.cos(theta)
    normals[on_side, 1] = np.sin(theta)

    d = _sphere_directions((~on_side).sum(), rng)
    offset = np.where(d[:, 2] >= 0.0, height / 2, -height / 2)
    points[~on_side] = radius * d
    points[~on_side, 2] += offset
    normals[~on_side] = d
    return points, normals


def _lshape_boxes(sizes):
    '''
        Foot box and upright box of the L, as (half extents, center) pairs
        in a frame centered on the bounding box.
    '''
    length, height, thickness, depth = sizes
    shift = np.array([length / 2, 0.0, height / 2])
    foot = (np.array([length / 2, depth / 2, thickness / 2]),
            np.array([length / 2, 0.0, thickness / 2]) - shift)
    upright = (np.array([thickness / 2, depth / 2, height / 2]),
               np.array([thickness / 2, 0.0, height / 2]) - shift)
    return foot, upright


def _inside_box(points, half, center, strict):
    q = np.abs(points - center) - half
    if strict:
        return np.all(q < -1e-12, axis=1)
    return np.all(q <= 1e-12, axis=1)


def _lshape_surface(sizes, n, rng):
    (foot_half, foot_c), (up_half, up_c) = _lshape_boxes(sizes)

    def area(h):
        return 8.0 * (h[0] * h[1] + h[1] * h[2] + h[0] * h[2])

    points, normals = [], []
    count = 0
    while count < n:
        batch = 2 * n
        from_foot = rng.uniform(size=batch) < area(foot_half) / (area(foot_half) + area(up_half))
        p_foot, n_foot = _box_surface(foot_half, from_foot.sum(), rng, foot_c)
        p_up, n_up = _box_surface(up_half, (~from_foot).sum(), rng, up_c)
        # coplanar faces are kept on the foot, dropped on the upright
        keep_foot = ~_inside_box(p_foot, up_half, up_c, strict=True)
        keep_up = ~_inside_box(p_up, foot_half, foot_c, strict=False)
        cand_p = np.concatenate([p_foot[keep_foot], p_up[keep_up]])
        cand_n = np.concatenate([n_foot[keep_foot], n_up[keep_up]])
        order = rng.permutation(len(cand_p))
        points.append(cand_p[order])
        normals.append(cand_n[order])
        count += len(cand_p)
    return np.concatenate(points)[:n], np.concatenate(normals)[:n]


def sample_shape(spec, seed):
    '''
        N points uniformly distributed over the shape surface with outward
        normals, in world coordinates. Deterministic per seed.
    '''
    rng = make_rng(seed) if not isinstance(seed, np.random.Generator) else seed
    n = spec.n_points
    if spec.family == ShapeFamily.SPHERE:
        normals = _sphere_directions(n, rng)
        points = spec.sizes[0] * normals
    elif spec.family == ShapeFamily.BOX:
        points, normals = _box_surface(np.array(spec.sizes) / 2, n, rng)
    elif spec.family == ShapeFamily.CYLINDER:
        points, normals = _cylinder_surface(spec.sizes[0], spec.sizes[1], n, rng)
    elif spec.family == ShapeFamily.CAPSULE:
        points, normals = _capsule_surface(spec.sizes[0], spec.sizes[1], n, rng)
    elif spec.family == ShapeFamily.LSHAPE:
        points, normals = _lshape_surface(spec.sizes, n, rng)
    else:
        raise ShapeError('Unsupported shape family {}'.format(spec.family))
    return PointCloud(spec.to_world(points), normals @ spec.R.T)


def _sdf_box(p, half, center=(0.0, 0.0, 0.0)):
    q = np.abs(p - np.asarray(center)) - half
    outside = np.linalg.norm(np.maximum(q, 0.0), axis=1)
    inside = np.minimum(q.max(axis=1), 0.0)
    return outside + inside


def _sdf_cylinder(p, radius, height):
    dx = np.linalg.norm(p[:, :2], axis=1) - radius
    dz = np.abs(p[:, 2]) - height / 2
    d = np.stack([dx, dz], axis=1)
    outside = np.linalg.norm(np.maximum(d, 0.0), axis=1)
    inside = np.minimum(d.max(axis=1), 0.0)
    return outside + inside


def _sdf_capsule(p, radius, height):
    closest = np.zeros_like(p)
    closest[:, 2] = np.clip(p[:, 2], -height / 2, height / 2)
    return np.linalg.norm(p - closest, axis=1) - radius


def signed_distance(spec, points):
    ''' Signed distance of world points to the analytic surface (negative inside) '''
    p = spec.to_object(np.asarray(points, dtype=np.float64).reshape(-1, 3))
    if spec.family == ShapeFamily.SPHERE:
        return np.linalg.norm(p, axis=1) - spec.sizes[0]
    if spec.family == ShapeFamily.BOX:
        return _sdf_box(p, np.array(spec.sizes) / 2)
    if spec.family == ShapeFamily.CYLINDER:
        return _sdf_cylinder(p, *spec.sizes)
    if spec.family == ShapeFamily.CAPSULE:
        return _sdf_capsule(p, *spec.sizes)
    if spec.family == ShapeFamily.LSHAPE:
        (foot_half, foot_c), (up_half, up_c) = _lshape_boxes(spec.sizes)
        return np.minimum(_sdf_box(p, foot_half, foot_c), _sdf_box(p, up_half, up_c))
    raise ShapeError('Unsupported shape family {}'.format(spec.family))


def surface_normal(spec, points, h=1e-6):
    ''' Outward unit normal of the closest surface, from the SDF gradient '''
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    grad = np.zeros_like(points)
    for axis in range(3):
        step = np.zeros(3)
        step[axis] = h
        grad[:, axis] = (signed_distance(spec, points + step)
                         - signed_distance(spec, points - step)) / (2 * h)
    norms = np.linalg.norm(grad, axis=1, keepdims=True)
    return grad / np.maximum(norms, 1e-12)


def partial_view(cloud, view_dir):
    '''
        Camera proxy: keep the points whose surface faces a camera looking
        along `view_dir` (normal . view_dir < 0).
    '''
    if cloud.normals is None:
        raise ContractError('partial_view needs surface normals')
    view_dir = np.asarray(view_dir, dtype=np.float64)
    norm = np.linalg.norm(view_dir)
    if norm == 0:
        raise ContractError('view direction must be non-zero')
    mask = cloud.normals @ (view_dir / norm) < 0.0
    if not np.any(mask):
        raise ShapeError('Degenerate view {}: no surface faces the camera'.format(
            view_dir.tolist()))
    return cloud.subset(mask)


def canonicalize(cloud, radius):
    '''
        Center a cloud on its centroid and, if it still sticks out of the
        basis ball, shrink it into it.

        Returns:
            (PointCloud in the canonical frame, CanonicalFrame)
    '''
    centroid = cloud.centroid
    centered = cloud.points - centroid
    extent = np.linalg.norm(centered, axis=1).max()
    scale = 1.0 if extent <= radius else radius / extent
    frame = CanonicalFrame(centroid=tuple(float(c) for c in centroid), scale=float(scale))
    return PointCloud(centered * scale, cloud.normals), frame


def make_basis(s, r, seed):
    ''' s points uniform in the ball of radius r; frozen after creation '''
    if s < 8:
        raise ContractError('A basis needs at least 8 points, got {}'.format(s))
    if r <= 0:
        raise ContractError('Basis radius must be positive, got {}'.format(r))
    rng = make_rng(seed)
    directions = _sphere_directions(s, rng)
    radii = r * rng.uniform(0.0, 1.0, size=(s, 1)) ** (1.0 / 3.0)
    return BpsBasis(points=directions * radii, radius=float(r), seed=int(seed))


def bps_encode(cloud, basis):
    ''' values[i] = min over cloud points of |basis_i - p| '''
    tree = cKDTree(cloud.points)
    distances, _ = tree.query(basis.points, k=1)
    return BpsFeature(values=np.asarray(distances, dtype=np.float64))


def encode_view(cloud, basis):
    ''' Canonicalize then encode; returns (BpsFeature, CanonicalFrame) '''
    canonical, frame = canonicalize(cloud, basis.radius)
    return bps_encode(canonical, basis), frame


def _read_exact(f, n, what):
    data = f.read(n)
    if len(data) != n:
        raise DataError('Truncated {} ({} of {} bytes)'.format(what, len(data), n))
    return data


def _check_remaining(f, n, what):
    ''' Header counts are checked against the file size before any read '''
    remaining = os.fstat(f.fileno()).st_size - f.tell()
    if n != remaining:
        raise DataError('Header of {} announces {} bytes, file holds {}'.format(what, n, remaining))


def save_cloud(path, cloud):
    flags = 1 if cloud.normals is not None else 0
    with open(path, 'wb') as f:
        f.write(CLOUD_MAGIC)
        f.write(struct.pack('<QQ', len(cloud), flags))
        f.write(cloud.points.astype('<f8').tobytes())
        if flags:
            f.write(cloud.normals.astype('<f8').tobytes())


def load_cloud(path):
    with open(path, 'rb') as f:
        if _read_exact(f, 8, 'cloud magic') != CLOUD_MAGIC:
            raise DataError('{} is not a point cloud file'.format(path))
        n, flags = struct.unpack('<QQ', _read_exact(f, 16, 'cloud header'))
        _check_remaining(f, 24 * n * (2 if flags & 1 else 1), 'cloud payload')
        points = np.frombuffer(_read_exact(f, 24 * n, 'cloud points'), dtype='<f8')
        normals = None
        if flags & 1:
            normals = np.frombuffer(_read_exact(f, 24 * n, 'cloud normals'), dtype='<f8')
    return PointCloud(points.reshape(n, 3).astype(np.float64),
                      None if normals is None else normals.reshape(n, 3).astype(np.float64))


def save_basis(path, basis):
    with open(path, 'wb') as f:
        f.write(BASIS_MAGIC)
        f.write(struct.pack('<Qdq', len(basis), basis.radius, basis.seed))
        f.write(basis.points.astype('<f8').tobytes())


def load_basis(path):
    with open(path, 'rb') as f:
        if _read_exact(f, 8, 'basis magic') != BASIS_MAGIC:
            raise DataError('{} is not a basis file'.format(path))
        s, radius, seed = struct.unpack('<Qdq', _read_exact(f, 24, 'basis header'))
        _check_remaining(f, 24 * s, 'basis points')
        points = np.frombuffer(_read_exact(f, 24 * s, 'basis points'), dtype='<f8')
    return BpsBasis(points=points.reshape(s, 3), radius=radius, seed=seed)
