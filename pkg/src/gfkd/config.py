"""Declarative experiment configuration with strict parsing and overrides."""
from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Mapping, Sequence, Union

from gfkd.graph_flow import check_patch


class ConfigError(ValueError):
    """Raised for malformed or invalid configuration documents."""


@dataclass
class DataSection:
    seed: int = 0
    n_train: int = 512
    n_val: int = 128
    image_size: int = 32
    num_classes: int = 4
    noise_sigma: float = 0.1
    labeled_fraction: float = 1.0


@dataclass
class NetSection:
    width: int = 8


@dataclass
class DistillSection:
    patch_size: Union[int, str] = 3
    lambda1: float = 1e-5
    lambda2: float = 1e-9
    lambda3: float = 0.1
    lambda4: float = 1.0
    tau: float = 1.0
    enable_graph: bool = True
    enable_adv: bool = True
    enable_logits: bool = True
    enable_paraphraser: bool = True
    critic_clip: float = 0.01


@dataclass
class TrainSection:
    epochs: int = 200
    batch: int = 8
    base_lr: float = 0.003
    critic_lr: float = 0.0002
    power: float = 0.9
    step_decay_every: int = 50
    step_decay_factor: float = 0.1
    weight_decay: float = 0.0002
    paraphraser_epochs: int = 200


@dataclass
class RunSection:
    seeds: List[int] = field(default_factory=lambda: [0, 1, 2, 3, 4])
    out_dir: str = "runs"


_SECTIONS = {
    "data": DataSection,
    "teacher": NetSection,
    "student": NetSection,
    "distill": DistillSection,
    "train": TrainSection,
    "run": RunSection,
}


@dataclass
class ExperimentConfig:
    data: DataSection = field(default_factory=DataSection)
    teacher: NetSection = field(default_factory=lambda: NetSection(width=32))
    student: NetSection = field(default_factory=lambda: NetSection(width=8))
    distill: DistillSection = field(default_factory=DistillSection)
    train: TrainSection = field(default_factory=TrainSection)
    run: RunSection = field(default_factory=RunSection)

    @property
    def lambdas(self):
        d = self.distill
        return (d.lambda1, d.lambda2, d.lambda3, d.lambda4)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"

    def digest(self) -> str:
        """Hash of everything that influences results (``run.out_dir`` excluded)."""
        doc = self.to_dict()
        doc["run"].pop("out_dir")
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()

    def validate(self) -> "ExperimentConfig":
        d, t = self.distill, self.train
        if min(self.lambdas) < 0:
            raise ConfigError(f"lambda weights must be non-negative, got {self.lambdas}")
        try:
            check_patch(d.patch_size)
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        if d.tau <= 0:
            raise ConfigError("distill.tau must be positive")
        if d.critic_clip <= 0:
            raise ConfigError("distill.critic_clip must be positive")
        if self.teacher.width < 2 or self.student.width < 2:
            raise ConfigError("network widths must be >= 2")
        if d.enable_paraphraser and self.student.width > self.teacher.width:
            raise ConfigError("the paraphraser compresses teacher features: student width must not exceed teacher width")
        if d.enable_graph and not d.enable_paraphraser and self.student.width != self.teacher.width:
            raise ConfigError(
                "graph distillation without the paraphraser needs equal tap channels; "
                f"teacher width {self.teacher.width} != student width {self.student.width}"
            )
        if t.epochs < 1 or t.batch < 1 or t.paraphraser_epochs < 0:
            raise ConfigError("train.epochs and train.batch must be >= 1, paraphraser_epochs >= 0")
        if t.base_lr < 0 or t.critic_lr < 0 or t.weight_decay < 0 or t.power < 0:
            raise ConfigError("learning rates, power and weight decay must be non-negative")
        if t.step_decay_every < 0 or not 0 < t.step_decay_factor <= 1:
            raise ConfigError("step_decay_every must be >= 0 and step_decay_factor in (0, 1]")
        if not self.run.seeds:
            raise ConfigError("run.seeds must list at least one seed")
        from gfkd.data import DatasetSpec

        try:
            DatasetSpec(**asdict(self.data)).validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self


def _coerce(name: str, value: Any, default: Any) -> Any:
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name}: expected a boolean, got {value!r}")
        return value
    if isinstance(default, int) and name != "distill.patch_size":
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name}: expected an integer, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name}: expected a number, got {value!r}")
        return float(value)
    if isinstance(default, list):
        if not isinstance(value, list) or not all(isinstance(v, int) and not isinstance(v, bool) for v in value):
            raise ConfigError(f"{name}: expected a list of integers, got {value!r}")
        return list(value)
    if isinstance(default, str) and name != "distill.patch_size":
        if not isinstance(value, str):
            raise ConfigError(f"{name}: expected a string, got {value!r}")
    return value


def from_dict(doc: Mapping[str, Any]) -> ExperimentConfig:
    """Build a config on top of the defaults; unknown sections or keys are rejected."""
    cfg = ExperimentConfig()
    if not isinstance(doc, Mapping):
        raise ConfigError("config document must be a JSON object")
    for section, body in doc.items():
        if section not in _SECTIONS:
            raise ConfigError(f"unknown config section {section!r}")
        if not isinstance(body, Mapping):
            raise ConfigError(f"section {section!r} must be an object")
        target = getattr(cfg, section)
        known = {f.name for f in fields(target)}
        for key, value in body.items():
            if key not in known:
                raise ConfigError(f"unknown key {section}.{key}")
            setattr(target, key, _coerce(f"{section}.{key}", value, getattr(target, key)))
    return cfg.validate()


def desk_profile() -> ExperimentConfig:
    """Laptop-scale settings used by the acceptance suite."""
    cfg = ExperimentConfig()
    cfg.train.epochs = 30
    cfg.train.paraphraser_epochs = 10
    return cfg.validate()


def paper_profile() -> ExperimentConfig:
    return ExperimentConfig().validate()


PROFILES = {"desk": desk_profile, "paper": paper_profile}


def _parse_value(text: str) -> Any:
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg: ExperimentConfig, overrides: Sequence[str]) -> ExperimentConfig:
    """Apply ``section.key=value`` assignments; values are parsed as JSON when possible."""
    doc = cfg.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form section.key=value")
        path, raw = item.split("=", 1)
        parts = path.strip().split(".")
        if len(parts) != 2:
            raise ConfigError(f"override key {path!r} must be section.key")
        section, key = parts
        if section not in doc or key not in doc[section]:
            raise ConfigError(f"unknown key {path}")
        doc[section][key] = _parse_value(raw.strip())
    return from_dict(doc)


def load_config(path: str = None, overrides: Sequence[str] = (), profile: str = "desk") -> ExperimentConfig:
    """Profile defaults, then the JSON file, then overrides, then ``GFKD_OUT``."""
    if profile not in PROFILES:
        raise ConfigError(f"unknown profile {profile!r}")
    doc = PROFILES[profile]().to_dict()
    if path:
        try:
            with open(path) as fh:
                user = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if not isinstance(user, Mapping):
            raise ConfigError("config document must be a JSON object")
        for section, body in user.items():
            if section not in doc:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(body, Mapping):
                raise ConfigError(f"section {section!r} must be an object")
            for key, value in body.items():
                if key not in doc[section]:
                    raise ConfigError(f"unknown key {section}.{key}")
                doc[section][key] = value
    cfg = apply_overrides(from_dict(doc), overrides)
    env = os.environ.get("GFKD_OUT")
    if env:
        cfg = copy.deepcopy(cfg)
        cfg.run.out_dir = env
    return cfg
