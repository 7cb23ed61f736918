"""
Experiment configuration: task-generation specs, named presets and loading of TOML configs and run manifests.

A configuration is resolved as preset -> config file -> command-line overrides, every layer being a nested
dictionary with the sections taskgen, meta, meta.smoothing, checks, output and verify.
"""
import copy
import json
import logging
import os
try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Optional

from exceptions import ConfigError, MetaLqrError
from rollout_sim import MAX_SEED
from zoo_meta import EstimatorKind, MetaConfig, OptimizationMode, SmoothingParams

logger = logging.getLogger(__name__)

LIBRARY_VERSION = '0.1.0'
WORKERS_ENV_VAR = 'META_LQR_WORKERS'


def _require(condition: bool, field_name: str, message: str):
    if not condition:
        raise ConfigError(field_name, message)


@dataclass(frozen=True)
class TaskGenSpec:
    """
    How a task collection is generated: a center system with entries uniform on [center_entry_low,
      center_entry_high] and tasks drawn entrywise Gaussian around it with perturbation_std.
    """
    d: int = 2
    k: int = 2
    num_tasks: int = 5
    center_entry_low: float = -1.0
    center_entry_high: float = 1.0
    perturbation_std: float = 0.25
    spectral_target: float = 0.9
    seed: int = 0

    def __post_init__(self):
        _require(self.d >= 1, 'taskgen.d', "must be a positive integer")
        _require(self.k >= 1, 'taskgen.k', "must be a positive integer")
        _require(self.num_tasks >= 1, 'taskgen.num_tasks', "must be a positive integer")
        _require(self.center_entry_low < self.center_entry_high, 'taskgen.center_entry_high',
                 "must be larger than center_entry_low")
        _require(self.perturbation_std >= 0, 'taskgen.perturbation_std', "must be nonnegative")
        _require(0 < self.spectral_target < 1, 'taskgen.spectral_target', "must lie in (0, 1)")
        _require(0 <= self.seed < MAX_SEED, 'taskgen.seed', "must be an unsigned 64-bit integer")


@dataclass(frozen=True)
class ChecksSpec:
    check_stability: bool = True
    stop_on_violation: bool = True
    report_exact_error: bool = True


@dataclass(frozen=True)
class OutputSpec:
    directory: str = 'results'
    # Hot-load cache of generated task sets; generated tasks are not cached when None
    task_cache: Optional[str] = None
    # Wall-clock times differ between replays, so they are left out of the trace unless asked for
    record_wall_clock: bool = False


@dataclass(frozen=True)
class VerifySpec:
    """
    Sample sizes of the verify property suites.

    The defaults are scaled down for a quick run, the acceptance preset carries the full sizes.
    """
    num_random_pairs: int = 100
    num_random_tasks: int = 20
    finite_difference_step: float = 1e-5
    gradient_radius: float = 0.01
    gradient_perturbations: int = 1000
    gradient_tolerance: float = 0.02
    meta_adaptation_rate: float = 0.01
    meta_radius: float = 0.01
    meta_perturbations: int = 200
    meta_inner_perturbations: int = 20
    meta_horizon: int = 2000
    meta_tolerance: float = 0.05
    repetitions: int = 10
    pass_fraction: float = 0.9
    gradient_pass_fraction: float = 0.9
    estimator: EstimatorKind = EstimatorKind.TWO_POINT

    def __post_init__(self):
        for name in ('num_random_pairs', 'num_random_tasks', 'gradient_perturbations', 'meta_perturbations',
                     'meta_inner_perturbations', 'meta_horizon', 'repetitions'):
            _require(getattr(self, name) >= 1, f'verify.{name}', "must be a positive integer")
        for name in ('finite_difference_step', 'gradient_radius', 'gradient_tolerance', 'meta_radius',
                     'meta_tolerance'):
            _require(getattr(self, name) > 0, f'verify.{name}', "must be positive")
        _require(self.meta_adaptation_rate >= 0, 'verify.meta_adaptation_rate', "must be nonnegative")
        _require(0 < self.pass_fraction <= 1, 'verify.pass_fraction', "must lie in (0, 1]")
        _require(0 < self.gradient_pass_fraction <= 1, 'verify.gradient_pass_fraction', "must lie in (0, 1]")
        object.__setattr__(self, 'estimator', EstimatorKind(self.estimator))


@dataclass(frozen=True)
class ExperimentSpec:
    taskgen: TaskGenSpec = field(default_factory=TaskGenSpec)
    meta: MetaConfig = field(default_factory=MetaConfig)
    mode: OptimizationMode = OptimizationMode.ZEROTH_ORDER
    task_file: Optional[str] = None
    checks: ChecksSpec = field(default_factory=ChecksSpec)
    output: OutputSpec = field(default_factory=OutputSpec)
    verify: VerifySpec = field(default_factory=VerifySpec)


_SMALL_PRESET_META = {
    'adaptation_rate': 1e-5,
    'learning_rate': 1e-3,
    'task_batch_size': 5,
    'max_iterations': 2000,
    'smoothing': {'radius': 0.05, 'num_perturbations': 100, 'horizon': 50},
}

PRESETS: dict[str, dict[str, Any]] = {
    'd1': {
        'mode': 'zeroth',
        'taskgen': {'d': 1, 'k': 1, 'num_tasks': 5},
        'meta': _SMALL_PRESET_META,
    },
    'd2': {
        'mode': 'zeroth',
        'taskgen': {'d': 2, 'k': 2, 'num_tasks': 5},
        'meta': _SMALL_PRESET_META,
    },
    'd20': {
        'mode': 'zeroth',
        'taskgen': {'d': 20, 'k': 20, 'num_tasks': 5},
        'meta': {
            'adaptation_rate': 1e-7,
            'learning_rate': 1e-5,
            'task_batch_size': 5,
            'max_iterations': 2000,
            'smoothing': {'radius': 0.05, 'num_perturbations': 100, 'horizon': 50},
        },
    },
    'acceptance': {
        'mode': 'zeroth',
        'taskgen': {'d': 1, 'k': 1, 'num_tasks': 5},
        'meta': _SMALL_PRESET_META,
        'verify': {
            'gradient_perturbations': 100_000,
            'meta_perturbations': 10_000,
            'meta_inner_perturbations': 100,
            'meta_horizon': 10_000,
            'repetitions': 100,
            'gradient_pass_fraction': 0.95,
            'pass_fraction': 0.9,
        },
    },
}

_SECTIONS = {
    'taskgen': TaskGenSpec,
    'checks': ChecksSpec,
    'output': OutputSpec,
    'verify': VerifySpec,
}
_TOP_LEVEL_KEYS = {'mode', 'task_file', 'meta', *_SECTIONS}
# MetaConfig fields owned by the checks section
_CHECK_FIELDS = tuple(ChecksSpec.__dataclass_fields__)


def default_workers() -> int:
    """Parallelism degree from META_LQR_WORKERS, else the number of available cores."""
    value = os.environ.get(WORKERS_ENV_VAR)
    if value is None:
        return os.cpu_count() or 1
    try:
        workers = int(value)
    except ValueError:
        raise ConfigError(WORKERS_ENV_VAR, f"must be a positive integer, got {value!r}")
    _require(workers >= 1, WORKERS_ENV_VAR, f"must be a positive integer, got {workers}")
    return workers


def merge_config(base: dict, override: dict) -> dict:
    """Recursively overlay override on a copy of base."""
    merged = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = merge_config(merged[key], value)
        else:
            merged[key] = copy.deepcopy(value)
    return merged


def load_config_file(path) -> dict:
    """
    Read a TOML config file, or a JSON run manifest whose 'config' entry is replayed.

    :raises FileNotFoundError: if path does not exist
    :raises ConfigError: if the file cannot be parsed
    """
    path = Path(path)
    text = path.read_text(encoding='utf-8')
    if path.suffix == '.json':
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as error:
            raise ConfigError(str(path), f"not valid JSON: {error}")
        if not isinstance(raw, dict):
            raise ConfigError(str(path), "a manifest must be a JSON object")
        return raw.get('config', raw)
    try:
        return tomllib.loads(text)
    except tomllib.TOMLDecodeError as error:
        raise ConfigError(str(path), f"not valid TOML: {error}")


def _check_keys(raw: dict, allowed, prefix: str):
    if not isinstance(raw, dict):
        raise ConfigError(prefix, "must be a section")
    for key in raw:
        if key not in allowed:
            raise ConfigError(f"{prefix}.{key}" if prefix else key, "unknown key")


def _build(cls, raw: dict, prefix: str):
    allowed = cls.__dataclass_fields__
    _check_keys(raw, allowed, prefix)
    try:
        return cls(**raw)
    except ConfigError:
        raise
    except (MetaLqrError, TypeError, ValueError) as error:
        raise ConfigError(prefix, str(error))


def _build_meta(raw: dict, checks: ChecksSpec) -> MetaConfig:
    _check_keys(raw, [name for name in MetaConfig.__dataclass_fields__ if name not in _CHECK_FIELDS], 'meta')
    raw = dict(raw)
    smoothing = _build(SmoothingParams, raw.pop('smoothing', {}), 'meta.smoothing')
    raw.setdefault('workers', default_workers())
    try:
        return MetaConfig(smoothing=smoothing, **raw, **asdict(checks))
    except (MetaLqrError, TypeError, ValueError) as error:
        raise ConfigError('meta', str(error))


def build_experiment_spec(raw: dict) -> ExperimentSpec:
    """
    Turn a resolved nested configuration into an ExperimentSpec.

    :raises ConfigError: naming the dotted path of the first unknown key or invalid value
    """
    _check_keys(raw, _TOP_LEVEL_KEYS, '')
    try:
        mode = OptimizationMode(raw.get('mode', OptimizationMode.ZEROTH_ORDER.value))
    except ValueError:
        raise ConfigError('mode', f"must be one of {[mode.value for mode in OptimizationMode]}")
    task_file = raw.get('task_file')
    if task_file is not None and not Path(task_file).is_file():
        raise ConfigError('task_file', f"{task_file} does not exist")
    sections = {name: _build(cls, raw.get(name, {}), name) for name, cls in _SECTIONS.items()}
    return ExperimentSpec(meta=_build_meta(raw.get('meta', {}), sections['checks']), mode=mode, task_file=task_file,
                          **sections)


def resolve_experiment_spec(preset: Optional[str] = None, config_path=None, seed: Optional[int] = None,
                            out: Optional[str] = None, mode: Optional[str] = None) -> ExperimentSpec:
    """
    Resolve preset -> config file -> command-line overrides into an ExperimentSpec.

    :param preset: name in PRESETS
    :param config_path: TOML config or JSON manifest
    :param seed: overrides both the task-generation and the optimization seed
    :param out: output directory
    :param mode: 'zeroth' or 'exact'

    :raises ConfigError: for unknown presets, unknown keys and invalid values
    :raises FileNotFoundError: if config_path does not exist
    """
    raw: dict = {}
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError('preset', f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
        raw = merge_config(raw, PRESETS[preset])
    if config_path is not None:
        raw = merge_config(raw, load_config_file(config_path))
    overrides: dict = {}
    if seed is not None:
        overrides = {'taskgen': {'seed': seed}, 'meta': {'seed': seed}}
    if out is not None:
        overrides['output'] = {'directory': out}
    if mode is not None:
        overrides['mode'] = mode
    return build_experiment_spec(merge_config(raw, overrides))


def experiment_spec_to_dict(spec: ExperimentSpec) -> dict:
    """Nested plain-data form of spec that build_experiment_spec accepts again."""
    result = {
        'mode': spec.mode.value,
        'taskgen': asdict(spec.taskgen),
        'meta': asdict(spec.meta),
        'checks': asdict(spec.checks),
        'output': asdict(spec.output),
        'verify': asdict(spec.verify),
    }
    if spec.task_file is not None:
        result['task_file'] = spec.task_file
    for name in _CHECK_FIELDS:
        del result['meta'][name]
    result['meta']['smoothing']['estimator'] = spec.meta.smoothing.estimator.value
    result['verify']['estimator'] = spec.verify.estimator.value
    return result
