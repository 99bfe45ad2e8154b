import os
from typing import Any, Dict, Literal, Optional, Tuple, Union, get_args, get_origin

from dotenv import load_dotenv
from pydantic import BaseModel, ConfigDict, ValidationError, field_validator, model_validator

from errors import ConfigError

# Load environment variables from .env file
load_dotenv()


def _env_bool(name: str, default: str) -> bool:
    return os.environ.get(name, default).strip().lower() in ('1', 'true', 'yes', 'on')


class Config:
    """Base configuration class."""

    # Numerics
    PRECISION = os.environ.get('WAYMARK_PRECISION', 'f32')
    THREADS = int(os.environ.get('WAYMARK_THREADS', '1'))
    SEED = int(os.environ.get('WAYMARK_SEED', '0'))

    # Output
    LOG_LEVEL = os.environ.get('WAYMARK_LOG_LEVEL', 'INFO')
    RUNS_DIR = os.environ.get('WAYMARK_RUNS_DIR', 'runs')
    PROGRESS_BARS = _env_bool('WAYMARK_PROGRESS', '1')

    # Training harness
    MAX_BATCH_RETRIES = int(os.environ.get('WAYMARK_MAX_BATCH_RETRIES', '10'))


class DevelopmentConfig(Config):
    """Development configuration."""
    LOG_LEVEL = os.environ.get('WAYMARK_LOG_LEVEL', 'DEBUG')


class TestingConfig(Config):
    """Testing configuration: 64-bit numerics, quiet output."""
    PRECISION = 'f64'
    PROGRESS_BARS = False
    LOG_LEVEL = 'WARNING'


# Dictionary to easily access configurations
config = {
    'development': DevelopmentConfig,
    'testing': TestingConfig,
    'default': Config,
}


def get_config(name: Optional[str] = None):
    """Resolve a Config class by name, falling back to WAYMARK_ENV."""
    if name is None:
        name = os.environ.get('WAYMARK_ENV', 'default')
    return config.get(name, Config)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

class _Section(BaseModel):
    model_config = ConfigDict(extra='forbid', frozen=True)


def _check_probability(name: str, value: float) -> float:
    if not 0.0 <= value <= 1.0:
        raise ValueError(f"{name} must be in [0, 1], got {value}")
    return value


class QuantizationConfig(_Section):
    step: float = 0.01

    @field_validator('step')
    @classmethod
    def _positive_step(cls, v):
        if v <= 0:
            raise ValueError("quantization step must be > 0")
        return v


class NetworkConfig(_Section):
    k: int = 128
    pc_channels: Tuple[int, ...] = (32, 32, 64, 64)
    image_channels: Tuple[int, ...] = (32, 64, 128, 256)
    fusion_mode: Literal['concat', 'add'] = 'concat'
    fusion_head: Literal['none', 'fc', 'mlp'] = 'none'
    modality: Literal['fused', 'pc', 'rgb'] = 'fused'
    normalize_descriptors: bool = True
    eca_kernel: Optional[int] = None

    @field_validator('k')
    @classmethod
    def _positive_k(cls, v):
        if v <= 0:
            raise ValueError("descriptor width k must be > 0")
        return v

    @field_validator('pc_channels')
    @classmethod
    def _pc_depth(cls, v):
        if len(v) < 3 or any(c <= 0 for c in v):
            raise ValueError("pc_channels needs at least 3 positive widths (Conv0 plus two downsampling blocks)")
        return v

    @field_validator('image_channels')
    @classmethod
    def _image_depth(cls, v):
        if len(v) < 1 or any(c <= 0 for c in v):
            raise ValueError("image_channels must be a nonempty list of positive widths")
        return v

    @field_validator('eca_kernel')
    @classmethod
    def _odd_eca(cls, v):
        if v is not None and (v < 1 or v % 2 == 0):
            raise ValueError("eca_kernel must be a positive odd integer")
        return v

    @property
    def fused_width(self) -> int:
        if self.modality != 'fused':
            return self.k
        return 2 * self.k if self.fusion_mode == 'concat' else self.k


class PoolingConfig(_Section):
    method: Literal['gem', 'mac', 'spoc'] = 'gem'
    image_method: Optional[Literal['gem', 'mac', 'spoc']] = None
    p: float = 3.0
    eps: float = 1e-6

    @field_validator('p')
    @classmethod
    def _p_at_least_one(cls, v):
        if v < 1:
            raise ValueError("GeM exponent p must be >= 1")
        return v

    @field_validator('eps')
    @classmethod
    def _positive_eps(cls, v):
        if v <= 0:
            raise ValueError("pooling eps must be > 0")
        return v

    def method_for(self, branch: str) -> str:
        if branch == 'image' and self.image_method is not None:
            return self.image_method
        return self.method


class LossConfig(_Section):
    margin: float = 0.2
    alpha: float = 0.5
    beta: float = 0.0
    positive_radius_m: float = 10.0
    negative_radius_m: float = 50.0

    @model_validator(mode='after')
    def _check_weights(self):
        if self.margin <= 0:
            raise ValueError("margin must be > 0")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("alpha and beta must be >= 0")
        if self.alpha + self.beta > 1:
            raise ValueError("alpha + beta must be <= 1")
        if not 0 < self.positive_radius_m < self.negative_radius_m:
            raise ValueError("positive radius must be positive and below the negative radius")
        return self


class OptimizerConfig(_Section):
    lr_main: float = 1e-3
    lr_image_branch: float = 1e-4
    weight_decay: float = 1e-3
    epochs: int = 50
    lr_drop_epoch: int = 30
    lr_drop_factor: float = 10.0
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8

    @model_validator(mode='after')
    def _check_schedule(self):
        for name in ('lr_main', 'lr_image_branch', 'lr_drop_factor', 'adam_eps'):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be > 0")
        if self.weight_decay < 0:
            raise ValueError("weight_decay must be >= 0")
        if self.epochs <= 0 or self.lr_drop_epoch <= 0:
            raise ValueError("epochs and lr_drop_epoch must be > 0")
        if self.lr_drop_epoch > self.epochs:
            raise ValueError("lr_drop_epoch must not exceed epochs")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must be in [0, 1)")
        return self


class BatchConfig(_Section):
    initial_size: int = 8
    growth: float = 1.4
    active_threshold: float = 0.7
    max_size: int = 160

    @model_validator(mode='after')
    def _check_sizes(self):
        if self.initial_size < 2:
            raise ValueError("initial batch size must be >= 2")
        if self.max_size < self.initial_size:
            raise ValueError("max batch size must be >= initial size")
        if self.growth < 1:
            raise ValueError("batch growth must be >= 1")
        _check_probability('active_threshold', self.active_threshold)
        return self


class AugmentationConfig(_Section):
    enabled: bool = True
    # point clouds
    jitter_sigma: float = 0.002
    point_drop_prob: float = 0.1
    cuboid_erase_prob: float = 0.4
    cuboid_scale: Tuple[float, float] = (0.1, 0.4)
    # images
    image_erase_prob: float = 0.5
    erase_area: Tuple[float, float] = (0.02, 0.33)
    erase_aspect: Tuple[float, float] = (0.3, 3.3)
    crop_fraction: float = 0.9
    brightness: float = 0.2
    contrast: float = 0.2
    saturation: float = 0.2

    @model_validator(mode='after')
    def _check_ranges(self):
        for name in ('point_drop_prob', 'cuboid_erase_prob', 'image_erase_prob'):
            _check_probability(name, getattr(self, name))
        if self.jitter_sigma < 0:
            raise ValueError("jitter_sigma must be >= 0")
        if not 0 < self.crop_fraction <= 1:
            raise ValueError("crop_fraction must be in (0, 1]")
        for name in ('brightness', 'contrast', 'saturation'):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} jitter bound must be in [0, 1]")
        for name in ('cuboid_scale', 'erase_area', 'erase_aspect'):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ValueError(f"{name} must be an increasing positive range")
        return self

    def disabled(self) -> 'AugmentationConfig':
        return self.model_copy(update={'enabled': False})


class EvaluationConfig(_Section):
    radius_m: float = 25.0
    recall_ns: Tuple[int, ...] = (1, 5, 10)
    dump_top: int = 25

    @model_validator(mode='after')
    def _check_eval(self):
        if self.radius_m <= 0:
            raise ValueError("evaluation radius must be > 0")
        if not self.recall_ns or any(n < 1 for n in self.recall_ns):
            raise ValueError("recall_ns must be positive")
        return self


class DataConfig(_Section):
    query_traversal: int = -1
    test_region: Optional[Tuple[float, float, float, float]] = None

    @field_validator('test_region')
    @classmethod
    def _nondegenerate(cls, v):
        if v is not None:
            xmin, ymin, xmax, ymax = v
            if not (xmin < xmax and ymin < ymax):
                raise ValueError("test_region must be a nondegenerate rectangle (xmin, ymin, xmax, ymax)")
        return v


class RunConfig(_Section):
    seed: int = 0
    precision: Literal['f32', 'f64'] = 'f32'
    threads: int = 1
    save_every: int = 0
    val_every: int = 0
    network: NetworkConfig = NetworkConfig()
    pooling: PoolingConfig = PoolingConfig()
    quantization: QuantizationConfig = QuantizationConfig()
    loss: LossConfig = LossConfig()
    optimizer: OptimizerConfig = OptimizerConfig()
    batch: BatchConfig = BatchConfig()
    augmentation: AugmentationConfig = AugmentationConfig()
    evaluation: EvaluationConfig = EvaluationConfig()
    data: DataConfig = DataConfig()

    @field_validator('threads')
    @classmethod
    def _threads(cls, v):
        if v < 1:
            raise ValueError("threads must be >= 1")
        return v


# ---------------------------------------------------------------------------
# Flat key = value files
# ---------------------------------------------------------------------------

def _parse_value(raw: str) -> Any:
    raw = raw.strip()
    if raw.lower() in ('none', 'null', ''):
        return None
    if ',' in raw:
        return [part.strip() for part in raw.split(',') if part.strip()]
    return raw


def parse_flat_config(text: str) -> Dict[str, Any]:
    """Parse `section.field = value` lines into a flat dict of dotted keys."""
    values: Dict[str, Any] = {}
    for line_no, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith('#'):
            continue
        if '=' not in line:
            raise ConfigError(f"line {line_no}: expected 'key = value', got {line!r}")
        key, raw = line.split('=', 1)
        key = key.strip()
        if not key:
            raise ConfigError(f"line {line_no}: empty key")
        values[key] = _parse_value(raw)
    return values


def _nest(flat: Dict[str, Any]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        parts = key.split('.')
        node = nested
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"config key {key!r} conflicts with a scalar value")
            node = child
        node[parts[-1]] = value
    return nested


def _sequence_keys(model=None, prefix: str = '') -> set:
    """Dotted keys of tuple-typed fields, so single values can be read as 1-tuples."""
    model = model or RunConfig
    keys = set()
    for name, field in model.model_fields.items():
        annotation = field.annotation
        candidates = get_args(annotation) if get_origin(annotation) is Union else (annotation,)
        for candidate in candidates:
            if isinstance(candidate, type) and issubclass(candidate, BaseModel):
                keys |= _sequence_keys(candidate, f"{prefix}{name}.")
            elif get_origin(candidate) is tuple:
                keys.add(f"{prefix}{name}")
    return keys


def build_run_config(flat: Dict[str, Any]) -> RunConfig:
    """Validate a flat dotted-key mapping into a RunConfig."""
    sequence_keys = _sequence_keys()
    flat = {
        key: [value] if key in sequence_keys and isinstance(value, (str, int, float)) else value
        for key, value in flat.items()
    }
    try:
        return RunConfig.model_validate(_nest(flat))
    except ValidationError as e:
        problems = '; '.join(
            f"{'.'.join(str(p) for p in err['loc'])}: {err['msg']}" for err in e.errors()
        )
        raise ConfigError(f"invalid configuration: {problems}") from e


def load_run_config(path: Optional[str] = None, overrides: Optional[Dict[str, Any]] = None,
                    base: Optional[Dict[str, Any]] = None) -> RunConfig:
    """Defaults < base (environment) < config file < overrides (CLI flags). None values are ignored."""
    flat: Dict[str, Any] = {key: value for key, value in (base or {}).items() if value is not None}
    if path:
        try:
            with open(path, 'r', encoding='utf-8') as f:
                flat.update(parse_flat_config(f.read()))
        except OSError as e:
            raise ConfigError(f"cannot read config file {path}: {e}") from e
    for key, value in (overrides or {}).items():
        if value is not None:
            flat[key] = value
    return build_run_config(flat)


def _format_value(value: Any) -> str:
    if value is None:
        return 'none'
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, (tuple, list)):
        return ','.join(_format_value(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def flatten_run_config(cfg: RunConfig) -> Dict[str, str]:
    flat: Dict[str, str] = {}

    def walk(prefix: str, data: Dict[str, Any]):
        for key, value in data.items():
            dotted = f"{prefix}{key}"
            if isinstance(value, dict):
                walk(dotted + '.', value)
            else:
                flat[dotted] = _format_value(value)

    walk('', cfg.model_dump())
    return flat


def dump_run_config(cfg: RunConfig) -> str:
    """Render a RunConfig in the flat key = value format (parses back to an equal config)."""
    return ''.join(f"{key} = {value}\n" for key, value in flatten_run_config(cfg).items())
