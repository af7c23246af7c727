'''
    Conditional Glow-style flows on flat vectors.

    Layers are stored in normalizing order (data -> base). `inverse` maps
    data towards the base distribution and is recorded on the active tape,
    so log-likelihoods are differentiable. `forward` is the sampling
    direction, evaluated on plain arrays.
'''
import logging
from abc import ABC, abstractmethod
from enum import Enum

import numpy as np
from scipy.linalg import lu, qr, solve_triangular

from graspflow.error import ContractError, FlowError
from graspflow.numerics import (Activation, Mlp, Parameter, Var, as_batch,
                                concat, exp, gather, make_rng, matmul, mul,
                                neg, no_tape, soft_clamp, square, vsum)

logger = logging.getLogger(__name__)

LOG_2PI = np.log(2.0 * np.pi)
COUPLING_CLAMP = 5.0
BASE_LOG_STD_CLAMP = 7.0
MIN_INIT_BATCH = 16


def _values(x):
    return x.value if isinstance(x, Var) else np.asarray(x, dtype=np.float64)


class FlowLayer(ABC):
    '''
        The abstract base class of an invertible layer.
    '''

    def __init__(self, dim, name):
        self.dim = dim
        self.name = name

    def raise_exception_helper(self, msg, exception=FlowError):
        msg_new = '{} ({}): {}'.format(self.__class__.__name__, self.name, msg)
        raise exception(msg_new)

    @abstractmethod
    def inverse(self, x, context):
        '''
            Normalizing direction.

            Returns:
                (u Var (n, d), log|det du/dx| Var broadcastable to (n, 1))
        '''
        msg = 'inverse method not implemented for {}'.format(
            self.__class__.__name__)
        raise NotImplementedError(msg)

    @abstractmethod
    def forward(self, u, context):
        '''
            Sampling direction on arrays.

            Returns:
                (x ndarray (n, d), log|det dx/du| ndarray (n,))
        '''
        msg = 'forward method not implemented for {}'.format(
            self.__class__.__name__)
        raise NotImplementedError(msg)

    def named_parameters(self):
        return []

    def named_buffers(self):
        return []


class ActNorm(FlowLayer):
    '''
        x = u * exp(log_scale) + shift, per dimension. Data-dependent
        initialization sets shift and scale to the batch mean and std.
    '''

    def __init__(self, dim, name='actnorm', initialized=False):
        super(ActNorm, self).__init__(dim, name)
        self.log_scale = Parameter(np.zeros((1, dim)), name=name + '.log_scale')
        self.shift = Parameter(np.zeros((1, dim)), name=name + '.shift')
        self.initialized = initialized

    def initialize(self, x):
        x = np.asarray(x, dtype=np.float64)
        std = x.std(axis=0)
        if np.any(std < 1e-12):
            self.raise_exception_helper('zero variance in the initialization batch')
        self.shift.value = x.mean(axis=0, keepdims=True)
        self.log_scale.value = np.log(std)[None, :]
        self.initialized = True

    def _check(self):
        if not self.initialized:
            self.raise_exception_helper('used before data-dependent initialization')

    def inverse(self, x, context):
        self._check()
        u = mul(x - self.shift, exp(neg(self.log_scale)))
        logdet = neg(vsum(self.log_scale, axis=1, keepdims=True))
        return u, logdet

    def forward(self, u, context):
        self._check()
        x = u * np.exp(self.log_scale.value) + self.shift.value
        logdet = np.full(len(u), self.log_scale.value.sum())
        return x, logdet

    def named_parameters(self):
        return [(self.log_scale.name, self.log_scale), (self.shift.name, self.shift)]


class InvLinear(FlowLayer):
    '''
        Dense invertible linear map u = x W with W = P L U: P a fixed
        permutation, L unit lower triangular, U upper triangular with
        diagonal sign * exp(log_s).
    '''

    def __init__(self, dim, rng=None, name='invlinear', identity=False):
        super(InvLinear, self).__init__(dim, name)
        if identity:
            perm, lower, upper = np.eye(dim), np.eye(dim), np.eye(dim)
        else:
            rng = rng if rng is not None else make_rng(0)
            q, _ = qr(rng.standard_normal((dim, dim)))
            perm, lower, upper = lu(q)
        diag = np.diag(upper)
        self.perm = perm
        self.sign = np.sign(diag)[None, :]
        self.lower_mask = np.tril(np.ones((dim, dim)), -1)
        self.upper_mask = np.triu(np.ones((dim, dim)), 1)
        self.lower = Parameter(np.tril(lower, -1), name=name + '.lower')
        self.upper = Parameter(np.triu(upper, 1), name=name + '.upper')
        self.log_s = Parameter(np.log(np.abs(diag))[None, :], name=name + '.log_s')

    def _factors(self):
        eye = np.eye(self.dim)
        lower = mul(self.lower, self.lower_mask) + eye
        upper = mul(self.upper, self.upper_mask) + mul(mul(exp(self.log_s), self.sign), eye)
        return lower, upper

    def weight(self):
        lower, upper = self._factors()
        return matmul(matmul(self.perm, lower), upper)

    def inverse(self, x, context):
        u = matmul(x, self.weight())
        return u, vsum(self.log_s, axis=1, keepdims=True)

    def forward(self, u, context):
        lower, upper = (f.value for f in self._factors())
        # x W = u  <=>  U^T L^T P^T x^T = u^T
        a = solve_triangular(upper, u.T, trans='T', lower=False)
        b = solve_triangular(lower, a, trans='T', lower=True, unit_diagonal=True)
        x = (self.perm @ b).T
        return x, np.full(len(u), -self.log_s.value.sum())

    def named_parameters(self):
        return [(self.lower.name, self.lower), (self.upper.name, self.upper),
                (self.log_s.name, self.log_s)]

    def named_buffers(self):
        return [(self.name + '.perm', self.perm), (self.name + '.sign', self.sign)]

    def load_buffers(self, buffers):
        self.perm = np.array(buffers[self.name + '.perm'])
        self.sign = np.array(buffers[self.name + '.sign'])


class AffineCoupling(FlowLayer):
    '''
        Transforms one half of the vector by an affine map whose log-scale
        and shift come from an MLP of the other half and the context.
        Parity alternates which half is transformed.
    '''

    def __init__(self, dim, context_dim=0, parity=0, hidden=(64, 64, 64),
                 activation=Activation.RELU, clamp=COUPLING_CLAMP, rng=None,
                 zero_init=True, name='coupling'):
        super(AffineCoupling, self).__init__(dim, name)
        split = dim // 2
        first, second = np.arange(split), np.arange(split, dim)
        self.parity = parity
        self.identity, self.transformed = (first, second) if parity % 2 == 0 else (second, first)
        self.restore = np.argsort(np.concatenate([self.identity, self.transformed]))
        self.clamp = clamp
        k = len(self.transformed)
        self.conditioner = Mlp(len(self.identity), hidden, 2 * k, context_dim=context_dim,
                               activation=activation, rng=rng, zero_last=zero_init,
                               name=name + '.net')

    def _scale_shift(self, xa, context):
        h = self.conditioner(xa, context)
        k = len(self.transformed)
        log_scale = soft_clamp(gather(h, np.arange(k)), self.clamp)
        shift = gather(h, np.arange(k, 2 * k))
        return log_scale, shift

    def inverse(self, x, context):
        xa = gather(x, self.identity)
        xb = gather(x, self.transformed)
        log_scale, shift = self._scale_shift(xa, context)
        ub = mul(xb, exp(log_scale)) + shift
        u = gather(concat([xa, ub]), self.restore)
        return u, vsum(log_scale, axis=1, keepdims=True)

    def forward(self, u, context):
        ua = u[:, self.identity]
        log_scale, shift = self._scale_shift(ua, context)
        s, t = log_scale.value, shift.value
        x = np.empty_like(u)
        x[:, self.identity] = ua
        x[:, self.transformed] = (u[:, self.transformed] - t) * np.exp(-s)
        return x, -s.sum(axis=1)

    def named_parameters(self):
        return self.conditioner.named_parameters()


class BaseKind(Enum):
    STANDARD = 'standard_normal'
    CONDITIONAL = 'conditional_normal'


class BaseDistribution:
    '''
        Diagonal Gaussian base. The conditional kind predicts mean and
        log-std from the context and starts out as a standard normal.
    '''

    def __init__(self, dim, kind=BaseKind.STANDARD, context_dim=0,
                 hidden=(64, 64), activation=Activation.RELU, rng=None, name='base'):
        self.dim = dim
        self.kind = BaseKind(kind)
        self.net = None
        if self.kind == BaseKind.CONDITIONAL:
            if context_dim <= 0:
                raise ContractError('a conditional base needs a context')
            self.net = Mlp(context_dim, hidden, 2 * dim, activation=activation,
                           rng=rng, zero_last=True, name=name + '.net')

    def _moments(self, context):
        h = self.net(context)
        mean = gather(h, np.arange(self.dim))
        log_std = soft_clamp(gather(h, np.arange(self.dim, 2 * self.dim)),
                             BASE_LOG_STD_CLAMP)
        return mean, log_std

    def log_prob(self, u, context=None):
        ''' Per-row log-density as a (n, 1) Var '''
        if self.net is None:
            return vsum(square(u), axis=1, keepdims=True) * -0.5 - 0.5 * self.dim * LOG_2PI
        mean, log_std = self._moments(context)
        z = mul(u - mean, exp(neg(log_std)))
        log_density = square(z) * -0.5 - log_std
        return vsum(log_density, axis=1, keepdims=True) - 0.5 * self.dim * LOG_2PI

    def sample(self, n, context, rng):
        eps = rng.standard_normal((n, self.dim))
        if self.net is None:
            u = eps
            logp = -0.5 * np.sum(eps ** 2, axis=1) - 0.5 * self.dim * LOG_2PI
            return u, logp
        mean, log_std = (m.value for m in self._moments(context))
        u = mean + np.exp(log_std) * eps
        logp = np.sum(-0.5 * eps ** 2 - log_std, axis=1) - 0.5 * self.dim * LOG_2PI
        return u, logp

    def named_parameters(self):
        return self.net.named_parameters() if self.net is not None else []


class FlowStack:
    '''
        K blocks of actnorm -> invertible linear -> affine coupling, with
        a standard or context-dependent Gaussian base.
    '''

    def __init__(self, dim, context_dim=0, blocks=8, hidden=(64, 64, 64),
                 activation=Activation.RELU, base=BaseKind.CONDITIONAL,
                 clamp=COUPLING_CLAMP, rng=None, zero_init=True,
                 identity_linear=False, name='flow'):
        if dim < 2:
            raise ContractError('flows need an event dimension of at least 2')
        if blocks < 1:
            raise ContractError('flows need at least one block')
        rng = rng if rng is not None else make_rng(0)
        self.dim = dim
        self.context_dim = context_dim
        self.name = name
        self.layers = []
        for k in range(blocks):
            prefix = '{}.{}'.format(name, k)
            self.layers.append(ActNorm(dim, name=prefix + '.actnorm'))
            self.layers.append(InvLinear(dim, rng=rng, name=prefix + '.invlinear',
                                         identity=identity_linear))
            self.layers.append(AffineCoupling(dim, context_dim, parity=k, hidden=hidden,
                                              activation=activation, clamp=clamp, rng=rng,
                                              zero_init=zero_init,
                                              name=prefix + '.coupling'))
        if context_dim == 0:
            base = BaseKind.STANDARD
        self.base = BaseDistribution(dim, base, context_dim, hidden=hidden[:2],
                                     activation=activation, rng=rng, name=name + '.base')

    def _context(self, context, n):
        if self.context_dim == 0:
            if context is not None:
                raise ContractError('{} takes no context'.format(self.name))
            return None
        if context is None:
            raise ContractError('{} expects a context of width {}'.format(
                self.name, self.context_dim))
        context = as_batch(context, self.context_dim, what=self.name + ' context')
        if context.shape[0] not in (1, n):
            msg = '{} got {} context rows for {} inputs'.format(
                self.name, context.shape[0], n)
            raise ContractError(msg)
        return context

    @property
    def actnorms(self):
        return [layer for layer in self.layers if isinstance(layer, ActNorm)]

    @property
    def initialized(self):
        return all(layer.initialized for layer in self.actnorms)

    def skip_data_init(self):
        ''' Keep actnorm at the identity instead of initializing from data '''
        for layer in self.actnorms:
            layer.initialized = True

    def initialize(self, x, context=None):
        '''
            Data-dependent actnorm initialization: push the batch through
            the layers in order, initializing every actnorm on the values
            it sees.
        '''
        x = np.asarray(_values(x), dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.dim:
            raise ContractError('initialization batch must be (n, {})'.format(self.dim))
        if len(x) < MIN_INIT_BATCH:
            msg = 'actnorm initialization needs a batch of at least {}, got {}'.format(
                MIN_INIT_BATCH, len(x))
            raise FlowError(msg)
        with no_tape():
            ctx = self._context(None if context is None else _values(context), len(x))
            h = Var(x)
            for layer in self.layers:
                if isinstance(layer, ActNorm) and not layer.initialized:
                    layer.initialize(h.value)
                h, _ = layer.inverse(h, ctx)
        logger.debug('%s: initialized %d actnorm layers on %d rows',
                     self.name, len(self.actnorms), len(x))

    def inverse(self, x, context=None):
        ''' u = T^-1(x; context) and log|det J_{T^-1}(x)| as (n, 1) Vars '''
        x = as_batch(x, self.dim, what=self.name)
        n = x.shape[0]
        ctx = self._context(context, n)
        total = Var(np.zeros((n, 1)))
        for layer in self.layers:
            x, logdet = layer.inverse(x, ctx)
            total = total + logdet
        return x, total

    def forward(self, u, context=None):
        ''' x = T(u; context) and log|det J_T(u)| on arrays '''
        u = np.atleast_2d(np.asarray(u, dtype=np.float64))
        if u.shape[1] != self.dim:
            raise ContractError('{} expected width {}, got {}'.format(
                self.name, self.dim, u.shape))
        ctx = self._context(None if context is None else _values(context), len(u))
        total = np.zeros(len(u))
        with no_tape():
            for layer in reversed(self.layers):
                u, logdet = layer.forward(u, ctx)
                total += logdet
        return u, total

    def log_prob(self, x, context=None):
        ''' log p(x | context) as a (n, 1) Var '''
        x = as_batch(x, self.dim, what=self.name)
        u, logdet = self.inverse(x, context)
        ctx = self._context(context, x.shape[0])
        return self.base.log_prob(u, ctx) + logdet

    def sample(self, context, n, rng):
        '''
            Draw n samples. A single context row is shared by all samples,
            otherwise one row per sample.

            Returns:
                (x (n, d), log p(x | context) (n,))
        '''
        if n < 1:
            raise ContractError('sample count must be positive')
        ctx = None
        if self.context_dim > 0:
            ctx = self._context(None if context is None else _values(context), n).value
            if len(ctx) == 1:
                ctx = np.repeat(ctx, n, axis=0)
        with no_tape():
            u, base_logp = self.base.sample(n, ctx, rng)
        x, logdet = self.forward(u, ctx)
        return x, base_logp - logdet

    def named_parameters(self):
        params = []
        for layer in self.layers:
            params += layer.named_parameters()
        return params + self.base.named_parameters()

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def named_buffers(self):
        buffers = []
        for layer in self.layers:
            buffers += layer.named_buffers()
        return buffers

    def load_buffers(self, buffers):
        for layer in self.layers:
            if isinstance(layer, InvLinear):
                layer.load_buffers(buffers)


def flow_forward(stack, u, context=None):
    return stack.forward(u, context)


def flow_inverse(stack, x, context=None):
    u, logdet = stack.inverse(x, context)
    return u.value, logdet.value[:, 0]


def flow_log_prob(stack, x, context=None):
    return stack.log_prob(x, context)


def flow_sample(stack, context, n, rng):
    return stack.sample(context, n, rng)


def actnorm_init(stack, first_batch, context_batch=None):
    stack.initialize(first_batch, context_batch)
    return stack
