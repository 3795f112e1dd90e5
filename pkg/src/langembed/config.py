"""Run configuration: every hyperparameter, seed and ablation toggle."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field, fields
from pathlib import Path

SCHEMA_VERSION = 1

DOWNSTREAM = "downstream"
STAGE2_ALLOWED = (DOWNSTREAM,)


class ConfigError(ValueError):
    pass


@dataclass
class TrainConfig:
    seed: int = 7
    stage: int = 1

    # corpus
    n_languages: int = 6
    n_unseen_languages: int = 1
    speakers_per_language: int = 8
    train_per_speaker: int = 50
    eval_per_speaker: int = 20
    n_frames: int = 100
    n_bins: int = 24
    n_phonemes: int = 8
    noise_sigma: float = 0.05

    # optimizer
    learning_rate: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 16

    # schedule
    encoder_steps: int = 1000
    encoder_accuracy_gate: float = 0.9
    stage1_steps: int = 3000
    stage2_steps: int = 600

    # paper toggles
    sat_enabled: bool = True
    grl_lambda: float = 1.0
    grl_ramp_steps: int = 0
    projection_enabled: bool = True
    low_resource_budget: int = 20
    stage2_trainable: list = field(default_factory=lambda: [DOWNSTREAM])

    # evaluation
    probe_steps: int = 500
    probe_lr: float = 0.1

    def validate(self) -> TrainConfig:
        if self.stage not in (1, 2):
            raise ConfigError(f"stage must be 1 or 2, got {self.stage}")
        if self.n_languages < 2:
            raise ConfigError("n_languages must be >= 2")
        if self.n_unseen_languages < 1:
            raise ConfigError("n_unseen_languages must be >= 1")
        if self.n_frames < 20:
            raise ConfigError("n_frames must be >= 20")
        if self.grl_lambda < 0:
            raise ConfigError("grl_lambda must be nonnegative")
        if self.batch_size < 1 or self.learning_rate <= 0:
            raise ConfigError("batch_size and learning_rate must be positive")
        if self.low_resource_budget < 1 or self.low_resource_budget > (
            self.speakers_per_language * self.train_per_speaker
        ):
            raise ConfigError(
                f"low_resource_budget {self.low_resource_budget} exceeds the unseen-language train pool"
            )
        bad = [g for g in self.stage2_trainable if g not in STAGE2_ALLOWED]
        if bad:
            raise ConfigError(
                f"stage 2 may only optimize groups after the language embedding {list(STAGE2_ALLOWED)}; "
                f"refusing to unfreeze {bad}"
            )
        return self

    def to_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, **dataclasses.asdict(self)}

    @classmethod
    def from_dict(cls, doc: dict) -> TrainConfig:
        doc = dict(doc)
        version = doc.pop("schema_version", SCHEMA_VERSION)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version}")
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(doc) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        defaults = cls()
        for key, value in doc.items():
            expected = type(getattr(defaults, key))
            ok = isinstance(value, expected) and not (expected is int and isinstance(value, bool))
            if expected is float and isinstance(value, int) and not isinstance(value, bool):
                value = float(value)
                doc[key] = value
                ok = True
            if not ok:
                raise ConfigError(
                    f"config key {key!r} expects {expected.__name__}, got {type(value).__name__}"
                )
        return cls(**doc).validate()

    def replace(self, **changes) -> TrainConfig:
        return dataclasses.replace(self, **changes)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def digest(self) -> bytes:
        return hashlib.sha256(self.to_json().encode()).digest()

    @classmethod
    def load(cls, path) -> TrainConfig:
        try:
            doc = json.loads(Path(path).read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(doc)

    def condition(self) -> str:
        sat = "on" if self.sat_enabled else "off"
        proj = "on" if self.projection_enabled else "off"
        return f"sat-{sat}_proj-{proj}"


def config_keys_help() -> str:
    lines = []
    for f in fields(TrainConfig):
        default = f.default if f.default is not dataclasses.MISSING else f.default_factory()
        lines.append(f"  {f.name} = {default!r}")
    return "\n".join(lines)
