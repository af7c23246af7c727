'''
    Minimal differentiable computation core.

    Values are float64 numpy arrays wrapped in `Var` nodes. While a
    `GradTape` is active every op appends its output to the tape, and
    `GradTape.backward` walks the recording in reverse to produce the
    gradient of a scalar loss with respect to every `Parameter`.

    Only the ops the flows, the inference networks and the evaluator need
    are provided (matmul, broadcasting add/sub/mul, concat, column gather,
    exp/log/tanh/relu/softplus/square and sums).
'''
import logging
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from enum import Enum

import numpy as np
from scipy.special import expit

from graspflow.error import ContractError, NumericError, TapeError

logger = logging.getLogger(__name__)

DTYPE = np.float64

_local = threading.local()


def _tape_stack():
    if not hasattr(_local, 'tapes'):
        _local.tapes = []
    return _local.tapes


def active_tape():
    stack = _tape_stack()
    return stack[-1] if stack else None


def ensure_finite(value, where):
    if not np.all(np.isfinite(value)):
        msg = 'Non-finite value produced by {}'.format(where)
        raise NumericError(msg, term=where)


def make_rng(seed):
    ''' Deterministic generator; identical seeds give identical streams '''
    return np.random.default_rng(seed)


def spawn_seeds(seed, n):
    ''' n independent child seeds derived from one master seed '''
    children = np.random.SeedSequence(seed).spawn(n)
    return [int(child.generate_state(1)[0]) for child in children]


class Var:
    '''
        A node of the computation graph. Leaves are parameters or
        constants, inner nodes remember the op and inputs that made them.
    '''

    # numpy defers mixed arithmetic to Var's reflected operators
    __array_priority__ = 100

    def __init__(self, value, op=None, parents=(), name=None):
        value = np.asarray(value, dtype=DTYPE)
        where = name or (type(op).__name__ if op is not None else 'constant')
        ensure_finite(value, where)
        self.value = value
        self.op = op
        self.parents = parents
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return 'Var(shape={}, name={})'.format(self.shape, self.name)

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def sum(self, axis=None, keepdims=False):
        return vsum(self, axis=axis, keepdims=keepdims)


class Parameter(Var):
    ''' A trainable leaf. The optimizer replaces `value` in place. '''

    def __init__(self, value, name=None):
        value = np.array(value, dtype=DTYPE, copy=True, order='C')
        super(Parameter, self).__init__(value, name=name)

    def __repr__(self):
        return 'Parameter(shape={}, name={})'.format(self.shape, self.name)


def as_var(x):
    if isinstance(x, Var):
        return x
    return Var(x)


def unbroadcast(grad, shape):
    ''' Sum a broadcast gradient back down to `shape` '''
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Op(ABC):
    '''
        The abstract base class of a recorded operation. Subclasses give
        the value rule (`forward`) and the vector-Jacobian rule (`backward`).
    '''

    def __call__(self, *inputs):
        inputs = tuple(as_var(x) for x in inputs)
        try:
            value = self.forward(*[x.value for x in inputs])
        except ValueError as e:
            self.raise_exception_helper(str(e))
        tape = active_tape()
        if tape is None:
            return Var(value, name=type(self).__name__)
        out = Var(value, op=self, parents=inputs)
        tape.record(out)
        return out

    def raise_exception_helper(self, msg, exception=ContractError):
        msg_new = '{}: {}'.format(self.__class__.__name__, msg)
        raise exception(msg_new)

    @abstractmethod
    def forward(self, *values):
        msg = 'forward method not implemented for {}'.format(
            self.__class__.__name__)
        raise NotImplementedError(msg)

    @abstractmethod
    def backward(self, grad, out, *values):
        msg = 'backward method not implemented for {}'.format(
            self.__class__.__name__)
        raise NotImplementedError(msg)


class Add(Op):

    def forward(self, a, b):
        return a + b

    def backward(self, grad, out, a, b):
        return unbroadcast(grad, a.shape), unbroadcast(grad, b.shape)


class Sub(Op):

    def forward(self, a, b):
        return a - b

    def backward(self, grad, out, a, b):
        return unbroadcast(grad, a.shape), unbroadcast(-grad, b.shape)


class Mul(Op):

    def forward(self, a, b):
        return a * b

    def backward(self, grad, out, a, b):
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


class Neg(Op):

    def forward(self, a):
        return -a

    def backward(self, grad, out, a):
        return (-grad,)


class MatMul(Op):

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            msg = 'cannot multiply {} by {}'.format(a.shape, b.shape)
            self.raise_exception_helper(msg)
        return a @ b

    def backward(self, grad, out, a, b):
        return grad @ b.T, a.T @ grad


class Exp(Op):

    def forward(self, a):
        with np.errstate(over='ignore'):
            return np.exp(a)

    def backward(self, grad, out, a):
        return (grad * out,)


class Log(Op):

    def forward(self, a):
        if np.any(a <= 0):
            self.raise_exception_helper('log of non-positive value', NumericError)
        return np.log(a)

    def backward(self, grad, out, a):
        return (grad / a,)


class Tanh(Op):

    def forward(self, a):
        return np.tanh(a)

    def backward(self, grad, out, a):
        return (grad * (1.0 - out * out),)


class Relu(Op):

    def forward(self, a):
        return np.maximum(a, 0.0)

    def backward(self, grad, out, a):
        return (grad * (a > 0.0),)


class Softplus(Op):

    def forward(self, a):
        return np.logaddexp(0.0, a)

    def backward(self, grad, out, a):
        return (grad * expit(a),)


class Square(Op):

    def forward(self, a):
        return a * a

    def backward(self, grad, out, a):
        return (2.0 * a * grad,)


class Sum(Op):

    def __init__(self, axis=None, keepdims=False):
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, a):
        return np.sum(a, axis=self.axis, keepdims=self.keepdims)

    def backward(self, grad, out, a):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, a.shape).copy(),)


class Concat(Op):

    def __init__(self, axis=1):
        self.axis = axis

    def forward(self, *values):
        return np.concatenate(values, axis=self.axis)

    def backward(self, grad, out, *values):
        sizes = np.cumsum([v.shape[self.axis] for v in values])[:-1]
        return tuple(np.split(grad, sizes, axis=self.axis))


class Gather(Op):
    ''' Column selection by a duplicate-free index list '''

    def __init__(self, index):
        index = np.asarray(index, dtype=np.int64)
        if len(np.unique(index)) != len(index):
            self.raise_exception_helper('gather index must not repeat')
        self.index = index

    def forward(self, a):
        return a[:, self.index]

    def backward(self, grad, out, a):
        full = np.zeros_like(a)
        full[:, self.index] = grad
        return (full,)


_add, _sub, _mul, _neg, _matmul = Add(), Sub(), Mul(), Neg(), MatMul()
_exp, _log, _tanh, _relu = Exp(), Log(), Tanh(), Relu()
_softplus, _square = Softplus(), Square()


def add(a, b):
    return _add(a, b)


def sub(a, b):
    return _sub(a, b)


def mul(a, b):
    return _mul(a, b)


def neg(a):
    return _neg(a)


def matmul(a, b):
    return _matmul(a, b)


def exp(a):
    return _exp(a)


def log(a):
    return _log(a)


def tanh(a):
    return _tanh(a)


def relu(a):
    return _relu(a)


def softplus(a):
    return _softplus(a)


def square(a):
    return _square(a)


def vsum(a, axis=None, keepdims=False):
    return Sum(axis=axis, keepdims=keepdims)(a)


def mean(a, axis=None, keepdims=False):
    a = as_var(a)
    count = a.value.size if axis is None else a.value.shape[axis]
    return vsum(a, axis=axis, keepdims=keepdims) * (1.0 / count)


def concat(parts, axis=1):
    return Concat(axis=axis)(*parts)


def gather(a, index):
    return Gather(index)(a)


def soft_clamp(a, bound):
    ''' Smooth clamp into the open interval (-bound, bound) '''
    return tanh(a * (1.0 / bound)) * bound


def _promote(x, what):
    x = as_var(x)
    if x.value.ndim == 1:
        if x.op is not None or isinstance(x, Parameter):
            msg = '{} must be a 2-D batch inside the graph'.format(what)
            raise ContractError(msg)
        x = Var(x.value[None, :])
    return x


def repeat_rows(a, n):
    ''' Tile a single-row value to n rows, keeping the gradient path '''
    a = _promote(a, 'repeated value')
    if a.shape[0] == n:
        return a
    if a.shape[0] != 1:
        msg = 'cannot repeat {} rows to {}'.format(a.shape[0], n)
        raise ContractError(msg)
    return matmul(np.ones((n, 1), dtype=DTYPE), a)


def as_batch(x, width, what='input'):
    ''' Promote a vector to a one-row batch and check the column count '''
    x = _promote(x, what)
    if x.value.ndim != 2 or x.shape[1] != width:
        msg = '{} expected width {}, got shape {}'.format(what, width, x.shape)
        raise ContractError(msg)
    return x


class GradTape:
    '''
        Records the ops of one loss evaluation. Use as a context manager;
        `backward` may be called exactly once per recording.
    '''

    def __init__(self):
        self.nodes = []
        self.used = False

    def __enter__(self):
        _tape_stack().append(self)
        return self

    def __exit__(self, exctype, value, tb):
        stack = _tape_stack()
        for i in range(len(stack) - 1, -1, -1):
            if stack[i] is self:
                del stack[i]
                break

    def record(self, var):
        self.nodes.append(var)

    def parameters(self):
        seen = {}
        for node in self.nodes:
            for parent in node.parents:
                if isinstance(parent, Parameter):
                    seen.setdefault(id(parent), parent)
        return list(seen.values())

    def backward(self, loss, parameters=None):
        '''
            Gradient of the scalar `loss` with respect to `parameters`
            (default: every parameter the recording touched). Parameters
            the loss does not depend on get a zero gradient.
        '''
        if self.used:
            raise TapeError('backward called twice on one recording')
        loss = as_var(loss)
        if loss.value.size != 1:
            msg = 'loss must be a scalar, got shape {}'.format(loss.shape)
            raise ContractError(msg)
        self.used = True
        if parameters is None:
            parameters = self.parameters()

        grads = {id(loss): np.ones_like(loss.value)}
        for node in reversed(self.nodes):
            grad = grads.pop(id(node), None)
            if grad is None:
                continue
            parent_values = [p.value for p in node.parents]
            parent_grads = node.op.backward(grad, node.value, *parent_values)
            for parent, parent_grad in zip(node.parents, parent_grads):
                if parent.op is None and not isinstance(parent, Parameter):
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + parent_grad
                else:
                    grads[key] = parent_grad

        gradient_map = {}
        for param in parameters:
            grad = grads.get(id(param))
            if grad is None:
                grad = np.zeros_like(param.value)
            gradient_map[param] = grad
        return gradient_map


def backward(tape, loss, parameters=None):
    return tape.backward(loss, parameters)


class no_tape:
    ''' Suspend recording, e.g. for data-dependent initialization or sampling '''

    def __enter__(self):
        _tape_stack().append(None)
        return self

    def __exit__(self, exctype, value, tb):
        _tape_stack().pop()


class Activation(Enum):
    RELU = 'relu'
    TANH = 'tanh'


_activations = {
    Activation.RELU: relu,
    Activation.TANH: tanh,
}


class Mlp:
    '''
        Dense network y = W_k(...act(W_1 [x, c] + b_1)...) + b_k.
        The context, when present, joins the input of the first layer only.
    '''

    def __init__(self, input_dim, hidden, output_dim, context_dim=0,
                 activation=Activation.RELU, final_activation=False,
                 rng=None, zero_last=False, name='mlp'):
        self.input_dim = input_dim
        self.context_dim = context_dim
        self.output_dim = output_dim
        self.activation = Activation(activation)
        self.final_activation = final_activation
        self.name = name
        rng = rng if rng is not None else make_rng(0)

        dims = [input_dim + context_dim] + list(hidden) + [output_dim]
        self.layers = []
        for i, (fan_in, fan_out) in enumerate(zip(dims[:-1], dims[1:])):
            last = i == len(dims) - 2
            bound = 1.0 / np.sqrt(fan_in)
            if last and zero_last:
                weight = np.zeros((fan_in, fan_out))
                bias = np.zeros((1, fan_out))
            else:
                weight = rng.uniform(-bound, bound, size=(fan_in, fan_out))
                bias = rng.uniform(-bound, bound, size=(1, fan_out))
            self.layers.append((
                Parameter(weight, name='{}.w{}'.format(name, i)),
                Parameter(bias, name='{}.b{}'.format(name, i))))

    def __call__(self, x, context=None):
        x = as_batch(x, self.input_dim, what=self.name)
        if self.context_dim > 0:
            if context is None:
                msg = '{} expects a context of width {}'.format(
                    self.name, self.context_dim)
                raise ContractError(msg)
            context = as_batch(context, self.context_dim, what=self.name + ' context')
            x = concat([x, repeat_rows(context, x.shape[0])])
        elif context is not None:
            msg = '{} takes no context'.format(self.name)
            raise ContractError(msg)

        act = _activations[self.activation]
        h = x
        for i, (weight, bias) in enumerate(self.layers):
            h = matmul(h, weight) + bias
            if i < len(self.layers) - 1 or self.final_activation:
                h = act(h)
        return h

    def named_parameters(self):
        params = []
        for weight, bias in self.layers:
            params += [(weight.name, weight), (bias.name, bias)]
        return params

    def parameters(self):
        return [p for _, p in self.named_parameters()]


def mlp_forward(params, x, context=None):
    return params(x, context)


@dataclass
class AdamWState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 1e-2
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adamw_step(params, grads, state):
    '''
        One decoupled-weight-decay Adam update, applied in place.

        Args:
            params: list of Parameter
            grads: mapping Parameter -> ndarray (missing means zero)
            state: AdamWState, moments allocated on the first call
    '''
    if state.lr <= 0:
        raise ContractError('learning rate must be positive')
    if not state.m:
        state.m = [np.zeros_like(p.value) for p in params]
        state.v = [np.zeros_like(p.value) for p in params]
    if len(state.m) != len(params):
        msg = 'optimizer state tracks {} tensors, got {}'.format(
            len(state.m), len(params))
        raise ContractError(msg)

    state.step += 1
    correction1 = 1.0 - state.beta1 ** state.step
    correction2 = 1.0 - state.beta2 ** state.step
    for i, param in enumerate(params):
        grad = grads.get(param)
        if grad is None:
            grad = np.zeros_like(param.value)
        if grad.shape != param.value.shape or state.m[i].shape != grad.shape:
            msg = 'gradient shape {} does not match parameter {} {}'.format(
                grad.shape, param.name, param.value.shape)
            raise ContractError(msg)
        state.m[i] = state.beta1 * state.m[i] + (1.0 - state.beta1) * grad
        state.v[i] = state.beta2 * state.v[i] + (1.0 - state.beta2) * grad * grad
        m_hat = state.m[i] / correction1
        v_hat = state.v[i] / correction2
        value = param.value * (1.0 - state.lr * state.weight_decay)
        value = value - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
        ensure_finite(value, 'adamw_step({})'.format(param.name))
        param.value = value
    return params, state


class AdamW:
    ''' Optimizer object around `adamw_step` with a mutable learning rate '''

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=1e-2):
        if lr <= 0:
            raise ContractError('Invalid learning rate: {}'.format(lr))
        if not (0.0 <= betas[0] < 1.0 and 0.0 <= betas[1] < 1.0):
            raise ContractError('Invalid betas: {}'.format(betas))
        if weight_decay < 0 or eps < 0:
            raise ContractError('weight decay and eps must be non-negative')
        self.params = list(params)
        self.state = AdamWState(lr=lr, beta1=betas[0], beta2=betas[1],
                                weight_decay=weight_decay, eps=eps)

    def step(self, grads, lr=None):
        if lr is not None:
            self.state.lr = lr
        adamw_step(self.params, grads, self.state)


def positional_encode(v, bands):
    '''
        [v, sin(2^0 pi v), cos(2^0 pi v), ..., sin(2^(L-1) pi v), cos(2^(L-1) pi v)]
        along the last axis; L = 0 returns v.
    '''
    if bands < 0:
        raise ContractError('positional encoding needs bands >= 0')
    v = np.asarray(v, dtype=DTYPE)
    ensure_finite(v, 'positional_encode')
    if bands == 0:
        return v.copy()
    parts = [v]
    for k in range(bands):
        freq = (2.0 ** k) * np.pi
        parts += [np.sin(freq * v), np.cos(freq * v)]
    return np.concatenate(parts, axis=-1)


def encoded_width(width, bands):
    return (2 * bands + 1) * width


def check_gradients(loss_fn, parameters, rng, n_coords=100, h=1e-5, floor=1e-6):
    '''
        Compare tape gradients with central finite differences on up to
        `n_coords` random parameter coordinates.

        Args:
            loss_fn: callable returning a scalar Var
            parameters: list of Parameter
        Returns:
            worst relative error over the checked coordinates
    '''
    with GradTape() as tape:
        loss = loss_fn()
    grads = tape.backward(loss, parameters)

    coords = [(p, i) for p in parameters for i in range(p.value.size)]
    if len(coords) > n_coords:
        picks = rng.choice(len(coords), size=n_coords, replace=False)
        coords = [coords[i] for i in sorted(picks)]

    worst = 0.0
    for param, index in coords:
        flat = param.value.reshape(-1)
        saved = flat[index]
        flat[index] = saved + h
        upper = float(loss_fn().value)
        flat[index] = saved - h
        lower = float(loss_fn().value)
        flat[index] = saved
        numeric = (upper - lower) / (2.0 * h)
        analytic = float(grads[param].reshape(-1)[index])
        scale = max(abs(analytic), abs(numeric), floor)
        worst = max(worst, abs(analytic - numeric) / scale)
    logger.debug('gradient check over %d coordinates: worst rel error %.3e',
                 len(coords), worst)
    return worst
