"""Flat ``key = value`` run configuration with a published schema.

Files hold one ``key = value`` per line; ``#`` starts a comment. Lists are
comma separated. Unknown keys are errors. Command-line ``--set key=value``
overrides file values.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import AugmentConfig
from .errors import ConfigError
from .model import ModelConfig
from .train import TrainConfig


def _bool(s: str) -> bool:
    v = s.strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {s!r}")


def _int_list(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _str(s: str) -> str:
    return s.strip()


@dataclass(frozen=True)
class Key:
    section: str
    parse: Callable[[str], Any]
    default: Any
    help: str


SCHEMA: dict[str, Key] = {
    # model
    "input_side": Key("model", int, 256, "input image side in pixels (multiple of 32; of 64 with final_pool)"),
    "p": Key("model", int, 2, "patch side in pixels of each stage map"),
    "hv": Key("model", int, 2, "strip thickness in pixels"),
    "stage_channels": Key("model", _int_list, [4, 8, 16, 32], "channels per stage, doubling"),
    "stage_depths": Key("model", _int_list, [2, 4, 4, 2], "HoVer blocks per stage"),
    "stage_heads": Key("model", _int_list, [2, 4, 8, 16], "attention heads per stage"),
    "num_classes": Key("model", int, 2, "output classes"),
    "variant": Key("model", _str, "full", "full | model_p | model_p_v | model_p_h"),
    "positional": Key("model", _bool, True, "learned positional tables at stage entry"),
    "final_pool": Key("model", _bool, True, "pool after stage 4 (head sees input/64 map)"),
    # training
    "epochs": Key("train", int, 250, "training epochs"),
    "batch_size": Key("train", int, 32, "mini-batch size"),
    "base_lr": Key("train", float, 1e-4, "peak learning rate after warm-up"),
    "weight_decay": Key("train", float, 0.1, "decoupled weight decay (weights only)"),
    "warmup_epochs": Key("train", int, 10, "linear warm-up epochs"),
    "seed": Key("train", int, 0, "global seed"),
    "threshold": Key("train", float, 0.5, "decision threshold on the malignant probability"),
    "deterministic": Key("train", _bool, True, "single-threaded deterministic kernels"),
    # augmentation
    "p_blur": Key("augment", float, 0.2, "probability of Gaussian blur"),
    "p_noise": Key("augment", float, 0.2, "probability of additive Gaussian noise"),
    "p_hflip": Key("augment", float, 0.5, "probability of horizontal flip (vertical flip does not exist)"),
    "p_brightness_contrast": Key("augment", float, 0.3, "probability of brightness/contrast jitter"),
    "blur_sigma_min": Key("augment", float, 0.3, "lower bound of the blur sigma"),
    "blur_sigma_max": Key("augment", float, 1.5, "upper bound of the blur sigma"),
    "noise_sigma": Key("augment", float, 5.0, "noise standard deviation in intensity levels"),
    "brightness_delta": Key("augment", float, 0.2, "max brightness shift as a fraction of full scale"),
    "contrast_delta": Key("augment", float, 0.2, "max relative contrast change"),
    # data / paths
    "manifest": Key("paths", _str, None, "manifest CSV (image_path,label[,patient_id][,birads][,center])"),
    "image_root": Key("paths", _str, None, "directory the manifest's image paths are relative to"),
    "folds": Key("paths", _str, None, "fold CSV (image_id,fold)"),
    "out_dir": Key("paths", _str, None, "output directory"),
    "k": Key("paths", int, 5, "number of cross-validation folds"),
}


@dataclass
class RunConfig:
    values: dict[str, Any] = field(default_factory=lambda: {k: v.default for k, v in SCHEMA.items()})
    explicit: set[str] = field(default_factory=set)

    @classmethod
    def load(cls, path: str | Path | None = None, overrides: list[str] | None = None) -> "RunConfig":
        cfg = cls()
        if path is not None:
            text = Path(path).read_text(encoding="utf-8")
            for lineno, line in enumerate(text.splitlines(), start=1):
                line = line.split("#", 1)[0].strip()
                if not line:
                    continue
                cfg.set_pair(line, where=f"{path}:{lineno}")
        for item in overrides or []:
            cfg.set_pair(item, where="--set")
        return cfg

    def set_pair(self, pair: str, where: str = "") -> None:
        if "=" not in pair:
            raise ConfigError(f"{where}: expected key=value, got {pair!r}")
        key, value = (s.strip() for s in pair.split("=", 1))
        self.set(key, value, where)

    def set(self, key: str, raw: str, where: str = "") -> None:
        if key not in SCHEMA:
            raise ConfigError(f"{where}: unknown config key {key!r}")
        try:
            self.values[key] = SCHEMA[key].parse(raw)
        except ValueError as exc:
            raise ConfigError(f"{where}: bad value for {key!r}: {exc}") from None
        self.explicit.add(key)

    def __getitem__(self, key: str) -> Any:
        return self.values[key]

    def section(self, name: str) -> dict[str, Any]:
        return {k: self.values[k] for k, spec in SCHEMA.items() if spec.section == name}

    def model_config(self) -> ModelConfig:
        return ModelConfig(**self.section("model"))

    def augment_config(self) -> AugmentConfig:
        a = self.section("augment")
        lo, hi = a.pop("blur_sigma_min"), a.pop("blur_sigma_max")
        if not 0 < lo <= hi:
            raise ConfigError(f"blur sigma range must satisfy 0 < min <= max, got ({lo}, {hi})")
        return AugmentConfig(blur_sigma=(lo, hi), **a)

    def train_config(self) -> TrainConfig:
        t = self.section("train")
        t.pop("deterministic")
        return TrainConfig(augment=self.augment_config(), **t)

    def require(self, *keys: str) -> None:
        missing = [k for k in keys if self.values.get(k) is None]
        if missing:
            raise ConfigError(f"missing required config keys: {', '.join(missing)}")

    def dumps(self) -> str:
        lines = []
        for key, spec in SCHEMA.items():
            v = self.values[key]
            if v is None:
                continue
            if isinstance(v, list):
                v = ",".join(str(x) for x in v)
            elif isinstance(v, bool):
                v = str(v).lower()
            lines.append(f"{key} = {v}")
        return "\n".join(lines) + "\n"


def schema_help() -> str:
    lines = ["configuration keys (file: key = value, CLI: --set key=value):"]
    current = None
    for key, spec in SCHEMA.items():
        if spec.section != current:
            current = spec.section
            lines.append(f"  [{current}]")
        default = ",".join(map(str, spec.default)) if isinstance(spec.default, list) else spec.default
        lines.append(f"    {key:<22} {spec.help} (default: {default})")
    return "\n".join(lines)
