"""Run configuration: backbone, optimizer, progressive schedule, paths.

A RunConfig is loaded from a JSON file, optionally patched by CLI
`key=value` overrides, and serialized verbatim into every checkpoint
sidecar and metrics file so artifacts are self-describing.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


HEAD_NAMES = ("concat", "s5", "s4", "s3")


@dataclass
class ScheduleStep:
    """One progressive step: shuffle grid size, supervised head, KD teacher."""

    scale: int
    head: str
    teacher: str | None = None
    # shuffle neighbourhood range; defaults to scale // 2 (>= 1)
    shuffle_range: int | None = None

    def __post_init__(self):
        if self.head not in HEAD_NAMES:
            raise ConfigError(f"unknown head {self.head!r}, expected one of {HEAD_NAMES}")
        if self.teacher is not None and self.teacher not in HEAD_NAMES:
            raise ConfigError(f"unknown teacher head {self.teacher!r}")
        if self.scale < 1:
            raise ConfigError(f"shuffle scale must be >= 1, got {self.scale}")
        if self.shuffle_range is None and self.scale > 1:
            self.shuffle_range = max(1, self.scale // 2)


def default_schedule() -> list[ScheduleStep]:
    return [
        ScheduleStep(1, "concat", None),
        ScheduleStep(2, "s5", "concat"),
        ScheduleStep(4, "s4", "s5"),
        ScheduleStep(8, "s3", "s4"),
    ]


def validate_schedule(steps: list[ScheduleStep]) -> None:
    scales = [s.scale for s in steps]
    if any(b < a for a, b in zip(scales, scales[1:])):
        raise ConfigError(f"shuffle scales must be non-decreasing, got {scales}")
    heads = [s.head for s in steps]
    if len(set(heads)) != len(heads):
        raise ConfigError(f"each head may be supervised at most once, got {heads}")


@dataclass
class RunConfig:
    # model
    backbone: str = "desk"  # "desk" (5-stage small CNN) or "resnet50"
    stage_channels: list[int] = field(default_factory=lambda: [16, 32, 64, 128, 256])
    head_width: int = 128
    num_classes: int = 4
    input_size: int = 64  # crop target, the network input resolution
    resize_size: int = 72
    use_attention: bool = True
    attention_rectify: bool = False
    attention_residual: bool = False
    enhancement_target: str = "propagate"  # or "heads" (ablation)
    combine_probs: bool = False  # combined prediction over probs instead of logits

    # optimization
    learning_rate: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    batch_size: int = 16
    epochs: int = 30
    kd_temperature: float = 4.0
    kd_weight: float = 0.5
    seed: int = 0

    schedule: list[ScheduleStep] = field(default_factory=default_schedule)

    # paths
    data_root: str | None = None
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError(f"need at least 2 classes, got {self.num_classes}")
        if self.backbone not in ("desk", "resnet50"):
            raise ConfigError(f"unknown backbone {self.backbone!r}")
        if self.enhancement_target not in ("propagate", "heads"):
            raise ConfigError(f"enhancement_target must be 'propagate' or 'heads'")
        if self.learning_rate <= 0 or self.batch_size < 1 or self.epochs < 0:
            raise ConfigError("learning_rate, batch_size must be positive; epochs >= 0")
        if self.kd_temperature < 1:
            raise ConfigError(f"kd_temperature must be >= 1, got {self.kd_temperature}")
        if self.input_size > self.resize_size:
            raise ConfigError("crop target larger than resize target")
        self.schedule = [
            s if isinstance(s, ScheduleStep) else ScheduleStep(**s) for s in self.schedule
        ]
        validate_schedule(self.schedule)
        for step in self.schedule:
            if step.scale > 1 and self.input_size % step.scale:
                raise ConfigError(
                    f"input size {self.input_size} not divisible by shuffle scale {step.scale}"
                )

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "RunConfig":
        known = cls.__dataclass_fields__.keys()
        unknown = set(obj) - set(known)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**obj)

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            obj = json.loads(path.read_text())
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}") from e
        return cls.from_dict(obj)

    def apply_overrides(self, overrides: list[str]) -> "RunConfig":
        """Apply `key=value` strings; values parsed as JSON, falling back to str."""
        obj = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            key, _, raw = item.partition("=")
            if key not in obj:
                raise ConfigError(f"unknown config field {key!r}")
            try:
                obj[key] = json.loads(raw)
            except json.JSONDecodeError:
                obj[key] = raw
        return RunConfig.from_dict(obj)

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")
