'''
    Versioned binary checkpoint container.

    Layout (little endian), see docs/formats.md:

        magic 'GFCKPT01' | uint32 version | uint32 n | n bytes header JSON
        basis block | uint32 tensor count | tensors | sha256 of all of the above
'''
import hashlib
import io
import json
import logging
import struct
from dataclasses import asdict

import numpy as np

from graspflow.config import ModelConfig
from graspflow.error import (CheckpointCorruptError, CheckpointVersionError,
                             ContractError, GraspFlowError)
from graspflow.evaluator import EvaluatorNet
from graspflow.models import MODEL_KINDS
from graspflow.pointcloud import BpsBasis

logger = logging.getLogger(__name__)

MAGIC = b'GFCKPT01'
VERSION = 1
DIGEST_SIZE = 32

KINDS = dict(MODEL_KINDS, evaluator=EvaluatorNet)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(',', ':'))


def _kind(model):
    if isinstance(model, EvaluatorNet):
        return 'evaluator'
    return model.config.preset


def _write_tensor(buf, name, value):
    encoded = name.encode('utf-8')
    value = np.asarray(value, dtype='<f8')
    buf.write(struct.pack('<H', len(encoded)))
    buf.write(encoded)
    buf.write(struct.pack('<B', value.ndim))
    buf.write(struct.pack('<{}Q'.format(value.ndim), *value.shape))
    buf.write(value.tobytes())


def save_model(path, model, meta=None):
    '''
        Write a model (any generative preset or the evaluator) with its
        config, BPS basis, parameters and non-trainable buffers.
    '''
    header = {
        'kind': _kind(model),
        'config': asdict(model.config),
        'state': model.state(),
        'meta': meta or {},
    }
    buf = io.BytesIO()
    buf.write(MAGIC)
    encoded = canonical_json(header).encode('utf-8')
    buf.write(struct.pack('<II', VERSION, len(encoded)))
    buf.write(encoded)

    basis = model.basis
    if basis is None:
        buf.write(struct.pack('<Qdq', 0, 0.0, 0))
    else:
        buf.write(struct.pack('<Qdq', len(basis), basis.radius, basis.seed))
        buf.write(basis.points.astype('<f8').tobytes())

    tensors = list(model.named_parameters())
    tensors += [('buffer:' + name, value) for name, value in model.named_buffers()]
    buf.write(struct.pack('<I', len(tensors)))
    for name, tensor in tensors:
        value = tensor.value if hasattr(tensor, 'value') else tensor
        _write_tensor(buf, name, value)

    payload = buf.getvalue()
    with open(path, 'wb') as f:
        f.write(payload)
        f.write(hashlib.sha256(payload).digest())
    logger.info('saved %s checkpoint with %d tensors to %s', header['kind'],
                len(tensors), path)


class _Reader:

    def __init__(self, data):
        self.data = data
        self.pos = 0

    def read(self, n):
        if self.pos + n > len(self.data):
            raise CheckpointCorruptError('checkpoint truncated at byte {}'.format(self.pos))
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt):
        return struct.unpack(fmt, self.read(struct.calcsize(fmt)))


def _model_config(d):
    d = {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}
    return ModelConfig(**d)


def load_model(path):
    '''
        Read a checkpoint written by `save_model`. Nothing is returned
        unless the digest, the version and every tensor shape check out.
    '''
    with open(path, 'rb') as f:
        data = f.read()
    if len(data) < len(MAGIC) + 8 + DIGEST_SIZE:
        raise CheckpointCorruptError('{} is too short to be a checkpoint'.format(path))
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointCorruptError('{} is not a checkpoint'.format(path))
    payload, digest = data[:-DIGEST_SIZE], data[-DIGEST_SIZE:]

    reader = _Reader(payload)
    reader.read(len(MAGIC))
    version, n = reader.unpack('<II')
    if version != VERSION:
        msg = 'checkpoint version {} is not supported (expected {})'.format(version, VERSION)
        raise CheckpointVersionError(msg)
    if hashlib.sha256(payload).digest() != digest:
        raise CheckpointCorruptError('{} failed its integrity check'.format(path))

    try:
        header = json.loads(reader.read(n).decode('utf-8'))
        s, radius, seed = reader.unpack('<Qdq')
        basis = None
        if s > 0:
            points = np.frombuffer(reader.read(24 * s), dtype='<f8').reshape(s, 3)
            basis = BpsBasis(points=points, radius=radius, seed=seed)

        (count,) = reader.unpack('<I')
        tensors = {}
        for _ in range(count):
            (length,) = reader.unpack('<H')
            name = reader.read(length).decode('utf-8')
            (ndim,) = reader.unpack('<B')
            shape = reader.unpack('<{}Q'.format(ndim))
            size = int(np.prod(shape)) if ndim else 1
            value = np.frombuffer(reader.read(8 * size), dtype='<f8').reshape(shape)
            tensors[name] = value.astype(np.float64)
        if reader.pos != len(payload):
            raise CheckpointCorruptError('trailing bytes in {}'.format(path))

        cls = KINDS[header['kind']]
        model = cls(_model_config(header['config']), basis)
    except (KeyError, ValueError, TypeError, OverflowError) as e:
        raise CheckpointCorruptError('malformed checkpoint {}: {}'.format(path, e))
    except GraspFlowError as e:
        if isinstance(e, CheckpointCorruptError):
            raise
        raise CheckpointCorruptError('checkpoint {} is invalid: {}'.format(path, e))

    named = model.named_parameters()
    expected = [name for name, _ in named] + ['buffer:' + name for name, _ in model.named_buffers()]
    if list(tensors) != expected:
        raise CheckpointCorruptError('tensor list of {} does not match its config'.format(path))
    for name, param in named:
        if tensors[name].shape != param.value.shape:
            msg = 'tensor {} has shape {}, expected {}'.format(
                name, tensors[name].shape, param.value.shape)
            raise CheckpointCorruptError(msg)
        param.value = tensors[name].copy()
    model.load_buffers({name[len('buffer:'):]: value for name, value in tensors.items()
                        if name.startswith('buffer:')})
    model.load_state(header.get('state', {}))
    logger.info('loaded %s checkpoint from %s', header['kind'], path)
    return model


def read_meta(path):
    ''' Header metadata without building the model '''
    with open(path, 'rb') as f:
        data = f.read(len(MAGIC) + 8)
        if data[:len(MAGIC)] != MAGIC or len(data) < len(MAGIC) + 8:
            raise CheckpointCorruptError('{} is not a checkpoint'.format(path))
        version, n = struct.unpack('<II', data[len(MAGIC):])
        if version != VERSION:
            raise CheckpointVersionError('checkpoint version {} is not supported'.format(version))
        header = f.read(n)
    try:
        return json.loads(header.decode('utf-8'))
    except ValueError as e:
        raise CheckpointCorruptError('malformed checkpoint header: {}'.format(e))


def require_kind(model, *kinds):
    kind = _kind(model)
    if kind not in kinds:
        raise ContractError('expected a {} model, got {}'.format(' or '.join(kinds), kind))
    return model
