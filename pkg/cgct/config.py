"""
Experiment configuration.

Config files are flat ``key = value`` lines with dotted namespaces::

    # D-CGCT on the default synthetic task
    task.kind = synthetic
    task.shift_magnitudes = 0.2, 0.6, 0.9
    variant.variant = D-CGCT
    loss.lambda_node = 0.3
    run.seeds = 0, 1, 2

Namespaces are task, variant, model, optim, loss, graph and run. Lists are
comma separated, ``none`` stands for an unset optional value and ``#`` starts
a comment.
"""
import enum
import logging
import os
import typing
from dataclasses import dataclass, field, fields, replace
from typing import Any, Dict, List, Optional, Tuple, Type

from dotenv import load_dotenv

from .data import MTDATask, SyntheticSpec, build_folder_task, generate_synthetic_task
from .errors import ConfigurationError
from .graph_head import DEGREE_SOURCES, RAW_PLUS_IDENTITY
from .models import ArchitectureConfig, architecture_for_inputs
from .objectives import LossWeights
from .variants import OptimConfig, Variant, VariantConfig

load_dotenv()

logger = logging.getLogger(__name__)

ENV_OUTPUT_DIR = "CGCT_OUTPUT_DIR"
ENV_LOG_LEVEL = "CGCT_LOG_LEVEL"
ENV_NUM_THREADS = "CGCT_NUM_THREADS"
DEFAULT_OUTPUT_DIR = "runs"
TASK_KINDS = ("synthetic", "folder")


def _env_output_dir() -> str:
    return os.getenv(ENV_OUTPUT_DIR) or DEFAULT_OUTPUT_DIR


def _env_num_threads() -> Optional[int]:
    value = os.getenv(ENV_NUM_THREADS)
    if not value:
        return None
    try:
        return int(value)
    except ValueError:
        raise ConfigurationError(f"{ENV_NUM_THREADS} must be an integer, got {value!r}")


@dataclass(frozen=True)
class TaskConfig:
    """
    Where the task comes from: the synthetic generator or image folders.

    A synthetic task without its own seed is regenerated with each run seed.
    """

    kind: str = "synthetic"
    n_c: int = 4
    d: int = 16
    samples_per_class: int = 100
    shift_magnitudes: Tuple[float, ...] = (0.2, 0.6, 0.9)
    noise_scale: float = 1.0
    eval_samples_per_class: int = 50
    class_separation: float = 3.0
    translation_scale: float = 0.5
    seed: Optional[int] = None
    root: Optional[str] = None
    source: Optional[str] = None
    targets: Tuple[str, ...] = ()
    eval_fraction: float = 0.2
    image_size: Optional[int] = None

    def __post_init__(self):
        if self.kind not in TASK_KINDS:
            raise ConfigurationError(f"task.kind must be one of {TASK_KINDS}, got {self.kind!r}")
        if self.kind == "folder":
            if not self.root or not self.source or not self.targets:
                raise ConfigurationError("Folder tasks need task.root, task.source and task.targets")
            if not 0 < self.eval_fraction < 1:
                raise ConfigurationError("task.eval_fraction must be in (0, 1)")
        else:
            self.synthetic_spec(0).validate()

    def synthetic_spec(self, run_seed: int) -> SyntheticSpec:
        return SyntheticSpec(
            n_c=self.n_c,
            d=self.d,
            samples_per_class_per_domain=self.samples_per_class,
            shift_magnitudes=tuple(self.shift_magnitudes),
            noise_scale=self.noise_scale,
            seed=self.seed if self.seed is not None else run_seed,
            eval_samples_per_class=self.eval_samples_per_class,
            class_separation=self.class_separation,
            translation_scale=self.translation_scale,
        )

    def check_paths(self) -> None:
        if self.kind != "folder":
            return
        for name in (self.source, *self.targets):
            path = os.path.join(self.root, name)
            if not os.path.isdir(path):
                raise ConfigurationError(f"Domain folder not found: {path}")

    def build(self, run_seed: int) -> MTDATask:
        if self.kind == "folder":
            return build_folder_task(
                self.root,
                self.source,
                self.targets,
                eval_fraction=self.eval_fraction,
                seed=self.seed if self.seed is not None else run_seed,
                image_size=self.image_size,
            )
        return generate_synthetic_task(self.synthetic_spec(run_seed))


@dataclass(frozen=True)
class ModelConfig:
    """Network widths; the backbone kind and input shape follow from the task's samples."""

    feature_dim: int = 32
    hidden_dim: int = 64
    activation: str = "relu"
    backbone_dropout: float = 0.0
    edge_hidden: Tuple[int, ...] = (64, 32)
    node_hidden: int = 64
    disc_hidden: int = 100
    disc_dropout: float = 0.5

    def architecture(self, task: MTDATask) -> ArchitectureConfig:
        overrides = {f.name: getattr(self, f.name) for f in fields(self)}
        return architecture_for_inputs(task.source.samples[0].features.shape, task.n_c, **overrides)


@dataclass(frozen=True)
class GraphConfig:
    degree_of: str = RAW_PLUS_IDENTITY

    def __post_init__(self):
        if self.degree_of not in DEGREE_SOURCES:
            raise ConfigurationError(f"graph.degree_of must be one of {DEGREE_SOURCES}")


@dataclass(frozen=True)
class RunConfig:
    """
    Seeds and outputs of an experiment.

    output_dir and num_threads fall back to CGCT_OUTPUT_DIR and CGCT_NUM_THREADS.
    """

    seeds: Tuple[int, ...] = (0,)
    output_dir: str = field(default_factory=_env_output_dir)
    parallel_seeds: bool = False
    num_threads: Optional[int] = field(default_factory=_env_num_threads)
    save_checkpoints: bool = True
    export_embeddings: bool = False

    def __post_init__(self):
        object.__setattr__(self, "seeds", tuple(self.seeds))
        if not self.seeds:
            raise ConfigurationError("run.seeds needs at least one seed")
        if len(set(self.seeds)) != len(self.seeds):
            raise ConfigurationError(f"run.seeds has duplicates: {list(self.seeds)}")
        if self.num_threads is not None and self.num_threads < 1:
            raise ConfigurationError("run.num_threads must be >= 1")


# variant.* keys that live elsewhere in the file
_VARIANT_EXCLUDED = ("optim", "seed")


@dataclass(frozen=True)
class ExperimentConfig:
    task: TaskConfig = field(default_factory=TaskConfig)
    variant: VariantConfig = field(default_factory=VariantConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    graph: GraphConfig = field(default_factory=GraphConfig)
    run: RunConfig = field(default_factory=RunConfig)

    def variant_config(self, seed: int) -> VariantConfig:
        """The variant settings of one run, with this config's optimizer and the given seed."""
        return replace(self.variant, optim=self.optim, seed=seed)

    @property
    def variant_name(self) -> str:
        return self.variant.variant.value

    def to_lines(self) -> List[str]:
        """Every key of every namespace, fully resolved, in config-file syntax."""
        lines = []
        for namespace, cls in NAMESPACES.items():
            section = getattr(self, namespace)
            for f in fields(cls):
                if namespace == "variant" and f.name in _VARIANT_EXCLUDED:
                    continue
                lines.append(f"{namespace}.{f.name} = {_format_value(getattr(section, f.name))}")
        return lines

    def to_text(self) -> str:
        return "\n".join(self.to_lines()) + "\n"


NAMESPACES: Dict[str, Type] = {
    "task": TaskConfig,
    "variant": VariantConfig,
    "model": ModelConfig,
    "optim": OptimConfig,
    "loss": LossWeights,
    "graph": GraphConfig,
    "run": RunConfig,
}

_TRUE = ("true", "yes", "on", "1")
_FALSE = ("false", "no", "off", "0")


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, enum.Enum):
        return str(value.value)
    if isinstance(value, (tuple, list)):
        return ", ".join(_format_value(v) for v in value)
    return str(value)


def _coerce(text: str, hint: Any) -> Any:
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin is typing.Union:
        inner = [a for a in args if a is not type(None)]
        if text.lower() in ("none", ""):
            return None
        return _coerce(text, inner[0])
    if origin in (tuple, Tuple):
        if not text:
            return ()
        return tuple(_coerce(part.strip(), args[0]) for part in text.split(","))
    if hint is bool:
        if text.lower() in _TRUE:
            return True
        if text.lower() in _FALSE:
            return False
        raise ValueError(f"expected a boolean, got {text!r}")
    if isinstance(hint, type) and issubclass(hint, enum.Enum):
        return hint(text)
    if hint is int:
        return int(text)
    if hint is float:
        return float(text)
    return text


def parse_config_text(text: str, source: str = "<config>") -> ExperimentConfig:
    """
    Parses config-file text into an ExperimentConfig.

    Args:
        text (str): File contents.
        source (str): Name used in error messages.

    Returns:
        ExperimentConfig: The parsed config with defaults for absent keys.

    Raises:
        ConfigurationError: Malformed line, unknown key, duplicate key or invalid value.
    """
    values: Dict[str, Dict[str, Any]] = {ns: {} for ns in NAMESPACES}
    seen: Dict[str, int] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{lineno}"
        if "=" not in line:
            raise ConfigurationError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key in seen:
            raise ConfigurationError(f"{where}: duplicate key {key!r} (first set on line {seen[key]})")
        seen[key] = lineno
        namespace, _, name = key.partition(".")
        cls = NAMESPACES.get(namespace)
        names = {f.name for f in fields(cls)} if cls else set()
        if namespace == "variant":
            names -= set(_VARIANT_EXCLUDED)
        if cls is None or name not in names:
            raise ConfigurationError(f"{where}: unknown key {key!r}")
        hint = typing.get_type_hints(cls)[name]
        try:
            values[namespace][name] = _coerce(value, hint)
        except (ValueError, TypeError) as e:
            raise ConfigurationError(f"{where}: invalid value for {key}: {e}") from e

    try:
        sections = {ns: cls(**values[ns]) for ns, cls in NAMESPACES.items()}
    except ConfigurationError as e:
        raise ConfigurationError(f"{source}: {e}") from e
    return ExperimentConfig(**sections)


def load_config(path: str) -> ExperimentConfig:
    """Reads and parses a config file; a missing file is a ConfigurationError."""
    if not os.path.isfile(path):
        raise ConfigurationError(f"Config file not found: {path}")
    with open(path, "r", encoding="utf-8") as f:
        config = parse_config_text(f.read(), source=path)
    logger.debug("Loaded %s: %s on %s task", path, config.variant_name, config.task.kind)
    return config


def apply_overrides(
    config: ExperimentConfig,
    seed: Optional[int] = None,
    out: Optional[str] = None,
    variant: Optional[str] = None,
) -> ExperimentConfig:
    """Applies command-line overrides; each one replaces the file's value."""
    run = config.run
    if seed is not None:
        run = replace(run, seeds=(seed,))
    if out is not None:
        run = replace(run, output_dir=out)
    variant_config = config.variant
    if variant is not None:
        try:
            variant_config = replace(variant_config, variant=Variant(variant))
        except ValueError as e:
            raise ConfigurationError(f"Unknown variant {variant!r}") from e
    return replace(config, run=run, variant=variant_config)
