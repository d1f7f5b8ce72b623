"""
Run configuration.

A `RunConfig` groups one dataclass per pipeline stage. It is stored as
canonical JSON; loading a file and saving it again gives the same bytes.
Unknown keys are rejected, and `validate()` reports every problem at once.
"""
import dataclasses
import json
from dataclasses import dataclass, field
from typing import Any, Dict, List, Mapping, Optional, Sequence, Tuple, Type, TypeVar

from .checkpoint import canonical_json, write_atomic
from .errors import ConfigError

__all__ = (
    "METRICS",
    "SCHEDULERS",
    "VARIANTS",
    "ModelConfig",
    "ExtractorConfig",
    "RetrievalConfig",
    "TrainingConfig",
    "DataConfig",
    "RunConfig",
    "parse_override",
)

METRICS = ("l2", "l1", "cosine")
SCHEDULERS = ("cosine", "constant")
VARIANTS = ("full", "backbone_only", "without_eb", "without_projector", "linear_probe")
SOURCES = ("synthetic", "external")

_T = TypeVar("_T")


@dataclass
class ModelConfig:
    image_size: int = 32
    patch_size: int = 8
    model_dim: int = 64
    ffn_dim: int = 256
    backbone_heads: int = 4
    depth: int = 4
    eb_heads: int = 4
    eb_head_dim: int = 16
    eb_frequency: int = 2
    num_exemplars: int = 4
    num_genes: int = 16
    style_dim: int = 64

    @classmethod
    def desk(cls) -> "ModelConfig":
        return cls()

    @classmethod
    def full(cls) -> "ModelConfig":
        return cls(
            image_size=224,
            patch_size=32,
            model_dim=1024,
            ffn_dim=4096,
            backbone_heads=16,
            depth=8,
            eb_heads=8,
            eb_head_dim=64,
            eb_frequency=2,
            num_exemplars=9,
            num_genes=250,
            style_dim=256,
        )

    @classmethod
    def toy(cls) -> "ModelConfig":
        "Small enough for finite-difference checks of the whole network."
        return cls(
            image_size=16,
            patch_size=8,
            model_dim=16,
            ffn_dim=32,
            backbone_heads=2,
            depth=2,
            eb_heads=2,
            eb_head_dim=4,
            eb_frequency=1,
            num_exemplars=2,
            num_genes=4,
            style_dim=8,
        )

    @property
    def num_patches(self) -> int:
        return (self.image_size // self.patch_size) ** 2

    def problems(self) -> List[str]:
        result = []
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                result.append(f"model.{f.name} must be positive, got {getattr(self, f.name)!r}.")
        if result:
            return result

        if self.image_size % self.patch_size:
            result.append(
                f"model.image_size {self.image_size} is not divisible by "
                f"model.patch_size {self.patch_size}."
            )
        if self.image_size % 16:
            result.append(
                f"model.image_size {self.image_size} must be divisible by 16 "
                "(four stride-2 extractor stages)."
            )
        if self.model_dim % self.backbone_heads:
            result.append(
                f"model.model_dim {self.model_dim} is not divisible by "
                f"model.backbone_heads {self.backbone_heads}."
            )
        if self.eb_frequency > self.depth:
            result.append(
                f"model.eb_frequency {self.eb_frequency} exceeds model.depth {self.depth}."
            )
        return result


@dataclass
class ExtractorConfig:
    epochs: int = 20
    batch_size: int = 16
    lr: float = 1e-3
    base_channels: int = 16
    adversarial: bool = False
    adversarial_weight: float = 0.1

    def problems(self) -> List[str]:
        result = []
        for name in ("epochs", "batch_size", "base_channels"):
            if getattr(self, name) <= 0:
                result.append(f"extractor.{name} must be positive.")
        if self.lr <= 0:
            result.append("extractor.lr must be positive.")
        if self.adversarial_weight < 0:
            result.append("extractor.adversarial_weight must be >= 0.")
        return result


@dataclass
class RetrievalConfig:
    metric: str = "l2"
    k: int = 4

    def problems(self) -> List[str]:
        result = []
        if self.metric not in METRICS:
            result.append(f"retrieval.metric {self.metric!r} is not one of {METRICS!r}.")
        if self.k < 1:
            result.append(f"retrieval.k must be >= 1, got {self.k!r}.")
        return result


@dataclass
class TrainingConfig:
    lr: float = 5e-4
    weight_decay: float = 1e-4
    epochs: int = 20
    batch_size: int = 16
    scheduler: str = "cosine"
    variant: str = "full"
    run_name: str = ""
    seed: int = 0

    def problems(self) -> List[str]:
        result = []
        if self.lr <= 0:
            result.append("training.lr must be positive.")
        if self.weight_decay < 0:
            result.append("training.weight_decay must be >= 0.")
        if self.epochs <= 0:
            result.append("training.epochs must be positive.")
        if self.batch_size < 2:
            result.append(
                "training.batch_size must be >= 2 (the correlation loss needs two samples)."
            )
        if self.scheduler not in SCHEDULERS:
            result.append(f"training.scheduler {self.scheduler!r} is not one of {SCHEDULERS!r}.")
        if self.variant not in VARIANTS:
            result.append(f"training.variant {self.variant!r} is not one of {VARIANTS!r}.")
        return result


@dataclass
class DataConfig:
    source: str = "synthetic"
    manifest_path: str = ""
    n_patients: int = 6
    windows_per_patient: int = 60
    slides_per_patient: int = 2
    skew_fraction: float = 0.3
    motifs_per_window: float = 4.0
    n_folds: int = 3
    seed: int = 0

    def problems(self) -> List[str]:
        result = []
        if self.source not in SOURCES:
            result.append(f"data.source {self.source!r} is not one of {SOURCES!r}.")
        if self.source == "external" and not self.manifest_path:
            result.append("data.manifest_path is required when data.source is 'external'.")
        for name in ("n_patients", "windows_per_patient", "slides_per_patient"):
            if getattr(self, name) <= 0:
                result.append(f"data.{name} must be positive.")
        if not 0.0 <= self.skew_fraction <= 1.0:
            result.append(f"data.skew_fraction must lie in [0, 1], got {self.skew_fraction!r}.")
        if self.motifs_per_window < 0:
            result.append("data.motifs_per_window must be >= 0.")
        if self.n_folds < 2:
            result.append(f"data.n_folds must be >= 2, got {self.n_folds!r}.")
        elif self.source == "synthetic" and self.n_folds > self.n_patients:
            result.append(
                f"data.n_folds {self.n_folds} exceeds data.n_patients {self.n_patients}."
            )
        return result


def _from_mapping(cls: Type[_T], section: str, values: Any, problems: List[str]) -> _T:
    if not isinstance(values, Mapping):
        problems.append(f"Section {section!r} must be an object.")
        return cls()

    known = {f.name: f for f in dataclasses.fields(cls)}
    kwargs: Dict[str, Any] = {}
    for key, value in values.items():
        if key not in known:
            problems.append(f"Unknown key {section}.{key}.")
            continue
        default = getattr(cls(), key)
        expected = type(default)
        if expected is float and isinstance(value, int) and not isinstance(value, bool):
            value = float(value)
        if type(value) is not expected:
            problems.append(
                f"{section}.{key} must be of type {expected.__name__}, got {value!r}."
            )
            continue
        kwargs[key] = value
    return cls(**kwargs)


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    extractor: ExtractorConfig = field(default_factory=ExtractorConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    data: DataConfig = field(default_factory=DataConfig)
    output_dir: str = "out"

    _SECTIONS = {
        "model": ModelConfig,
        "extractor": ExtractorConfig,
        "retrieval": RetrievalConfig,
        "training": TrainingConfig,
        "data": DataConfig,
    }

    @classmethod
    def preset(cls, name: str) -> "RunConfig":
        if name == "desk":
            return cls()
        if name == "full":
            model = ModelConfig.full()
            return cls(
                model=model,
                retrieval=RetrievalConfig(k=model.num_exemplars),
                training=TrainingConfig(epochs=50, batch_size=32),
            )
        if name == "toy":
            model = ModelConfig.toy()
            return cls(model=model, retrieval=RetrievalConfig(k=model.num_exemplars))
        raise ConfigError([f"Unknown preset {name!r}."])

    @classmethod
    def from_dict(cls, values: Mapping[str, Any]) -> "RunConfig":
        """
        Build a config from parsed JSON. Unknown keys and wrongly typed values
        are all collected and raised together.
        """
        problems: List[str] = []
        kwargs: Dict[str, Any] = {}
        for key, value in values.items():
            if key in cls._SECTIONS:
                kwargs[key] = _from_mapping(cls._SECTIONS[key], key, value, problems)
            elif key == "output_dir":
                if isinstance(value, str):
                    kwargs[key] = value
                else:
                    problems.append(f"output_dir must be a string, got {value!r}.")
            else:
                problems.append(f"Unknown key {key}.")
        if problems:
            raise ConfigError(problems)
        return cls(**kwargs)

    def to_dict(self) -> Dict[str, Any]:
        result: Dict[str, Any] = {
            name: dataclasses.asdict(getattr(self, name)) for name in self._SECTIONS
        }
        result["output_dir"] = self.output_dir
        return result

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path) as f:
                values = json.load(f)
        except FileNotFoundError:
            raise ConfigError([f"Config file {path!r} does not exist."])
        except ValueError as e:
            raise ConfigError([f"Config file {path!r} is not valid JSON: {e}"])
        if not isinstance(values, dict):
            raise ConfigError([f"Config file {path!r} must hold a JSON object."])
        return cls.from_dict(values)

    def save(self, path: str) -> None:
        write_atomic(path, self.to_json().encode("utf-8"))

    def problems(self) -> List[str]:
        result: List[str] = []
        for name in self._SECTIONS:
            result.extend(getattr(self, name).problems())
        if self.retrieval.k != self.model.num_exemplars:
            result.append(
                f"retrieval.k {self.retrieval.k} must equal model.num_exemplars "
                f"{self.model.num_exemplars}."
            )
        if not self.output_dir:
            result.append("output_dir must not be empty.")
        return result

    def validate(self) -> "RunConfig":
        problems = self.problems()
        if problems:
            raise ConfigError(problems)
        return self

    def with_overrides(
        self, overrides: Sequence[str] = (), seed: Optional[int] = None
    ) -> "RunConfig":
        """
        Return a copy with ``section.key=value`` overrides applied. Values are
        parsed as JSON, falling back to a plain string.
        """
        values = self.to_dict()
        problems: List[str] = []
        for item in overrides:
            try:
                path, value = parse_override(item)
            except ConfigError as e:
                problems.extend(e.problems)
                continue
            if len(path) == 1 and path[0] == "output_dir":
                values["output_dir"] = value
            elif len(path) == 2 and path[0] in values and isinstance(values[path[0]], dict):
                values[path[0]][path[1]] = value
            else:
                problems.append(f"Unknown key {'.'.join(path)}.")
        if seed is not None:
            values["data"]["seed"] = seed
        if problems:
            raise ConfigError(problems)
        return type(self).from_dict(values)


def parse_override(item: str) -> Tuple[List[str], Any]:
    if "=" not in item:
        raise ConfigError([f"Override {item!r} is not of the form section.key=value."])
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip().split("."), value
