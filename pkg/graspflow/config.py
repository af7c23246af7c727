'''
    Typed run configuration.

    Values are resolved through a stack of scopes, innermost first:
    command-line flags, then the config file, then the model preset, then
    the dataclass defaults. The resolved configuration is dumped back to
    the text format into every output directory.
'''
import hashlib
import logging
from collections import deque
from dataclasses import dataclass, field, fields

from graspflow.error import ConfigError
from graspflow.parser import parse_config

logger = logging.getLogger(__name__)


@dataclass
class ModelConfig:
    preset: str = 'lvm'
    grasp_dim: int = 24
    latent_dim: int = 16
    blocks: int = 8
    conditioner_hidden: tuple = (64, 64, 64)
    embed_hidden: tuple = (256, 128, 64)
    inference_hidden: tuple = (128, 128, 128)
    evaluator_hidden: tuple = (128, 128)
    bands: int = 4
    clamp: float = 5.0
    activation: str = 'relu'
    cvae_sigma: float = 0.1
    bps_points: int = 1024
    bps_radius: float = 0.15
    bps_seed: int = 0
    identity_init: bool = False
    seed: int = 0

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise ConfigError('Unknown preset {}, expected one of {}'.format(
                self.preset, sorted(PRESETS)))
        if self.latent_dim < 2 or self.grasp_dim < 2:
            raise ConfigError('latent_dim and grasp_dim must be at least 2')
        if self.blocks < 1 or self.bands < 0 or self.clamp <= 0 or self.cvae_sigma <= 0:
            raise ConfigError('Invalid model configuration {}'.format(self))
        if self.activation not in ('relu', 'tanh'):
            raise ConfigError('Unknown activation {}'.format(self.activation))


@dataclass
class TrainConfig:
    lr: float = 1e-4
    batch: int = 64
    iterations: int = 20000
    beta_start: float = 1e-7
    beta_end: float = 1e-1
    weight_decay: float = 1e-2
    lr_warmup: int = 0
    snapshot_every: int = 100
    log_every: int = 100
    holdout: float = 0.2
    seed: int = 0

    def __post_init__(self):
        if self.lr <= 0 or self.batch < 1 or self.iterations < 1:
            raise ConfigError('lr, batch and iterations must be positive')
        if not 0 <= self.beta_start <= self.beta_end:
            raise ConfigError('beta schedule needs 0 <= beta_start <= beta_end')
        if self.snapshot_every < 1 or self.log_every < 1:
            raise ConfigError('snapshot_every and log_every must be positive')
        if not 0.0 < self.holdout < 1.0:
            raise ConfigError('holdout must lie in (0, 1)')


@dataclass
class DatasetConfig:
    train_families: tuple = ('box', 'cylinder')
    novel_families: tuple = ('lshape', 'capsule')
    objects_per_family: int = 8
    similar_per_family: int = 4
    novel_per_family: int = 4
    views_per_object: int = 4
    grasps_per_view: int = 32
    n_points: int = 1024
    bps_radius: float = 0.15
    negatives_per_positive: int = 1
    positive_rate_min: float = 0.1
    positive_rate_max: float = 0.6
    enforce_positive_rate: bool = False
    workers: int = 1
    seed: int = 0

    def __post_init__(self):
        if set(self.train_families) & set(self.novel_families):
            raise ConfigError('novel families must not overlap train families')
        if min(self.objects_per_family, self.views_per_object, self.grasps_per_view) < 1:
            raise ConfigError('object, view and grasp counts must be positive')
        if self.workers < 1:
            raise ConfigError('workers must be positive')


@dataclass
class FusionConfig:
    epsilon: float = 0.01
    n_grasps: int = 100
    epsilon_grid: tuple = (0.0, 0.01, 0.1, 0.5, 1.0)
    likelihood_samples: int = 16
    ood_samples: int = 32
    max_views: int = 50
    seed: int = 0

    def __post_init__(self):
        for eps in (self.epsilon,) + tuple(self.epsilon_grid):
            if not 0.0 <= eps <= 1.0:
                raise ConfigError('epsilon {} outside [0, 1]'.format(eps))
        if self.n_grasps < 2:
            raise ConfigError('fusion needs at least 2 grasps per view')


PRESETS = {
    'lvm': {},
    'lvm-light': {'blocks': 4},
    'cnf': {},
    'cvae': {},
}

SECTIONS = {
    'model': ModelConfig,
    'train': TrainConfig,
    'dataset': DatasetConfig,
    'fusion': FusionConfig,
}


@dataclass
class RunConfig:
    command: str
    out: str = None
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    fusion: FusionConfig = field(default_factory=FusionConfig)

    def sections(self):
        return {name: getattr(self, name) for name in SECTIONS}

    def dump(self):
        return dump_config(self.sections())


class ConfigScope:
    def __init__(self, name):
        self.entries = {}
        self.name = name

    def lookup(self, key):
        return self.entries.get(key, None)

    def insert(self, key, value, lineno=-1):
        if key in self.entries:
            msg = 'Duplicate name {} at line {}'.format(key, lineno)
            raise ConfigError(msg)
        self.entries[key] = (value, lineno)


class ConfigTable:
    '''
        Scoped lookup of qualified keys (`section.key`); the most recently
        opened scope wins.
    '''

    def __init__(self):
        self.scopes = deque([])

    def open_scope(self, name=None):
        scope = ConfigScope(name=name)
        self.scopes.append(scope)
        return scope

    def close_scope(self):
        if len(self.scopes) == 0:
            raise ConfigError('Tried to pop nonexistent scope')
        self.scopes.pop()

    def insert(self, key, value, lineno=-1):
        if len(self.scopes) == 0:
            raise ConfigError('Scopes do not exist')
        self.scopes[-1].insert(key, value, lineno)

    def lookup(self, key):
        '''
            Returns:
                (value, lineno, scope name), or None when no scope binds key
        '''
        for scope in reversed(self.scopes):
            entry = scope.lookup(key)
            if entry is not None:
                return entry + (scope.name,)
        return None

    def resolve(self, section):
        cls = SECTIONS[section]
        values = {}
        for f in fields(cls):
            entry = self.lookup('{}.{}'.format(section, f.name))
            if entry is None:
                continue
            value, lineno, scope = entry
            values[f.name] = coerce(value, f.type, f.default,
                                    '{}.{}'.format(section, f.name), lineno)
        try:
            return cls(**values)
        except TypeError as e:
            raise ConfigError('Invalid [{}] section: {}'.format(section, e))


def _type_name(value):
    return type(value).__name__


def coerce(value, type_, default, key, lineno=-1):
    def mismatch(expected):
        msg = 'Type mismatch for {} at line {}: expected {}, got {}'.format(
            key, lineno, expected, _type_name(value))
        raise ConfigError(msg)

    if type_ is bool:
        if not isinstance(value, bool):
            mismatch('boolean')
        return value
    if type_ is int:
        if isinstance(value, bool) or not isinstance(value, int):
            mismatch('integer')
        return value
    if type_ is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            mismatch('number')
        return float(value)
    if type_ is str:
        if not isinstance(value, str):
            mismatch('string')
        return value
    if type_ is tuple:
        if isinstance(value, str):
            value = [v for v in value.split(',') if v]
        if not isinstance(value, (list, tuple)):
            mismatch('array')
        element = type(default[0]) if default else str
        return tuple(coerce(v, element, None, key, lineno) for v in value)
    return value


def _format_value(value):
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (int, float)):
        return repr(value)
    if isinstance(value, str):
        return '"{}"'.format(value)
    if isinstance(value, (tuple, list)):
        return '[{}]'.format(', '.join(_format_value(v) for v in value))
    raise ConfigError('Cannot serialize {}'.format(value))


def dump_config(sections):
    ''' Canonical text form: sections and keys in declaration order '''
    lines = []
    for name, config in sections.items():
        if lines:
            lines.append('')
        lines.append('[{}]'.format(name))
        for f in fields(config):
            lines.append('{} = {}'.format(f.name, _format_value(getattr(config, f.name))))
    return '\n'.join(lines) + '\n'


def config_hash(text):
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def resolve_config(command, text=None, flags=None, out=None):
    '''
        Resolve every section from defaults, the preset, the config text
        and flag overrides.

        Args:
            text: contents of a config file or None
            flags: dict of qualified keys (`train.seed`) or bare keys that
                apply to every section having that field (`seed`)
    '''
    flags = flags or {}
    parsed = parse_config(text) if text else {'': {}}
    table = ConfigTable()

    file_scope = ConfigScope('file')
    for section, entries in parsed.items():
        if section == '' and entries:
            key = next(iter(entries))
            msg = 'Name {} at line {} is outside any section'.format(key, entries[key][1])
            raise ConfigError(msg)
        if section and section not in SECTIONS:
            raise ConfigError('Unknown section [{}]'.format(section))
        known = {f.name for f in fields(SECTIONS[section])} if section else set()
        for key, (value, lineno) in entries.items():
            if key not in known:
                msg = 'Unknown name {}.{} at line {}'.format(section, key, lineno)
                raise ConfigError(msg)
            file_scope.insert('{}.{}'.format(section, key), value, lineno)

    flag_scope = ConfigScope('flags')
    for key, value in flags.items():
        if value is None:
            continue
        if '.' in key:
            flag_scope.insert(key, value)
            continue
        for section, cls in SECTIONS.items():
            if key in {f.name for f in fields(cls)}:
                flag_scope.insert('{}.{}'.format(section, key), value)

    # the preset is itself configurable, so look it up before building the stack
    table.scopes.extend([file_scope, flag_scope])
    entry = table.lookup('model.preset')
    preset = entry[0] if entry else ModelConfig.preset
    if preset not in PRESETS:
        raise ConfigError('Unknown preset {}'.format(preset))

    table = ConfigTable()
    table.open_scope('preset')
    for key, value in PRESETS[preset].items():
        table.insert('model.{}'.format(key), value)
    table.scopes.append(file_scope)
    table.scopes.append(flag_scope)

    run = RunConfig(command=command, out=out,
                    **{name: table.resolve(name) for name in SECTIONS})
    logger.debug('resolved configuration for %s (preset %s)', command, preset)
    return run


def load_config_file(path):
    try:
        with open(path) as f:
            return f.read()
    except OSError as e:
        raise ConfigError('Cannot read config {}: {}'.format(path, e))
