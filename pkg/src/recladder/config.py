"""Run configuration: line-based "key = value" files with dotted sections.

'#' starts a comment; keys are dotted (model.sigma = 0.3); unknown keys and
malformed lines are rejected with the offending line number. A fully
resolved config dumps back to the same format, so the header a training run
embeds in its metrics file is itself a valid config that reproduces the run.
"""

from __future__ import annotations

from dataclasses import dataclass

from .errors import ConfigError
from .ladder import LadderConfig
from .layers import NoiseScheme
from .trainer import TrainSettings

# key -> (type tag, default); order fixes the dump layout
SCHEMA = {
    "model.hidden": ("int", 192),
    "model.decoder": ("choice:ND,RD,FFD", "RD"),
    "model.noise": ("choice:FFN,RN", "FFN"),
    "model.sigma": ("float", 0.3),
    "model.sigma_layers": ("floats?", None),
    "model.lambdas": ("floats", (1000.0, 10.0, 0.1)),
    "model.combinator_hidden": ("int", 4),
    "model.dtype": ("choice:float32,float64", "float32"),
    "training.lr": ("float", 0.002),
    "training.batch": ("int", 16),
    "training.min_epochs": ("int", 100),
    "training.max_epochs": ("int", 500),
    "training.patience": ("int", 10),
    "training.seed": ("int", 1),
    "training.grad_clip": ("float", 0.0),
    "training.deterministic_timing": ("bool", False),
    "data.train": ("str?", None),
    "data.valid": ("str?", None),
    "data.valid_fraction": ("float", 0.1),
    "data.label_fraction": ("float", 1.0),
    "data.min_count": ("int", 1),
}


def _parse_value(key: str, raw: str, where: str):
    tag = SCHEMA[key][0]
    raw = raw.strip()
    try:
        if tag == "int":
            return int(raw)
        if tag == "float":
            return float(raw)
        if tag == "bool":
            if raw.lower() in ("true", "1", "yes"):
                return True
            if raw.lower() in ("false", "0", "no"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if tag == "floats":
            return tuple(float(p) for p in raw.split(","))
        if tag == "floats?":
            if raw == "":
                return None
            return tuple(float(p) for p in raw.split(","))
        if tag == "str?":
            return raw or None
        if tag.startswith("choice:"):
            choices = tag.split(":", 1)[1].split(",")
            if raw not in choices:
                raise ValueError(f"must be one of {choices}, got {raw!r}")
            return raw
    except ValueError as exc:
        raise ConfigError(f"{where}: bad value for {key}: {exc}") from exc
    raise AssertionError(f"unhandled schema tag {tag}")


def _format_value(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(repr(float(v)) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass
class RunConfig:
    values: dict

    @classmethod
    def defaults(cls) -> "RunConfig":
        return cls({key: default for key, (_, default) in SCHEMA.items()})

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cfg = cls.defaults()
        for lineno, raw in enumerate(text.splitlines(), start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(
                    f"{source}:{lineno}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in SCHEMA:
                raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
            cfg.values[key] = _parse_value(key, value, f"{source}:{lineno}")
        return cfg

    @classmethod
    def load(cls, path) -> "RunConfig":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.parse(fh.read(), source=str(path))

    def set(self, key: str, raw_value: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown key {key!r}")
        self.values[key] = _parse_value(key, raw_value, f"--set {key}")

    def dump(self) -> str:
        lines = [f"{key} = {_format_value(self.values[key])}"
                 for key in SCHEMA]
        return "\n".join(lines) + "\n"

    def ladder_config(self, input_dim: int, n_classes: int) -> LadderConfig:
        v = self.values
        try:
            return LadderConfig(
                input_dim=input_dim,
                hidden=v["model.hidden"],
                n_classes=n_classes,
                decoder=v["model.decoder"],
                noise=NoiseScheme(v["model.noise"], v["model.sigma"]),
                lambdas=v["model.lambdas"],
                sigma_layers=v["model.sigma_layers"],
                combinator_hidden=v["model.combinator_hidden"],
                dtype=v["model.dtype"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def train_settings(self) -> TrainSettings:
        v = self.values
        try:
            return TrainSettings(
                lr=v["training.lr"],
                batch_size=v["training.batch"],
                min_epochs=v["training.min_epochs"],
                max_epochs=v["training.max_epochs"],
                patience=v["training.patience"],
                seed=v["training.seed"],
                grad_clip=v["training.grad_clip"],
                deterministic_timing=v["training.deterministic_timing"],
            )
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
