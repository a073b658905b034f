"""Line-oriented run configuration: ``section.key = value``.

The format is deliberately dumb so configs diff and round-trip exactly:
one assignment per line, ``#`` comments, blank lines ignored. Every key is
declared in the schema below with its type and default; unknown keys or
malformed values fail at parse time. ``to_text`` writes the canonical form
(schema order), so parse -> serialize -> parse is the identity.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

__all__ = ["RunConfig", "parse_config", "parse_text", "ConfigError"]


class ConfigError(ValueError):
    pass


def _parse_int(s: str) -> int:
    return int(s, 10)


def _parse_optional_int(s: str):
    return None if s.lower() == "none" else int(s, 10)


def _parse_float(s: str) -> float:
    return float(s)


def _parse_str(s: str) -> str:
    return s


def _parse_float_list(s: str) -> tuple[float, ...]:
    items = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(float(p) for p in items)


def _parse_int_list(s: str) -> tuple[int, ...]:
    items = [p.strip() for p in s.split(",") if p.strip()]
    return tuple(int(p) for p in items)


def _fmt(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default)
SCHEMA: dict[str, tuple] = {
    "seed": (_parse_int, 0),
    "model.vocab_size": (_parse_int, 258),
    "model.d_model": (_parse_int, 128),
    "model.n_layers": (_parse_int, 4),
    "model.n_attn_heads": (_parse_int, 4),
    "model.max_positions": (_parse_int, 1024),
    "model.n_pred_heads": (_parse_int, 4),
    "model.leap_stride": (_parse_int, 2),
    "training.window_len": (_parse_int, 256),
    "training.val_fraction": (_parse_float, 0.1),
    "training.warmup.learning_rate": (_parse_float, 1e-3),
    "training.warmup.epochs": (_parse_int, 5),
    "training.warmup.batch_size": (_parse_int, 8),
    "training.warmup.warmup_ratio": (_parse_float, 0.1),
    "training.warmup.max_steps": (_parse_optional_int, None),
    "training.full.learning_rate": (_parse_float, 1e-3),
    "training.full.epochs": (_parse_int, 3),
    "training.full.batch_size": (_parse_int, 8),
    "training.full.warmup_ratio": (_parse_float, 0.1),
    "training.full.beta": (_parse_float, 0.2),
    "training.full.max_steps": (_parse_optional_int, None),
    "decode.max_new": (_parse_int, 64),
    "decode.prompt_len": (_parse_int, 16),
    "decode.top_ranks": (_parse_int, 3),
    "decode.tree_budget": (_parse_int, 25),
    "decode.tree_max_children": (_parse_int, 3),
    "decode.tree_max_depth": (_parse_optional_int, None),
    "theory.gammas": (_parse_float_list, (0.01, 0.05, 0.1, 0.5, 1.0)),
    "theory.strides": (_parse_int_list, (1, 2)),
    "theory.n_heads": (_parse_int, 4),
    "theory.crossover_n_min": (_parse_int, 2),
    "theory.crossover_n_max": (_parse_int, 16),
    "paths.corpus": (_parse_str, "data/corpus.txt"),
    "paths.checkpoint_dir": (_parse_str, "out/checkpoints"),
    "paths.output_dir": (_parse_str, "out"),
}


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __post_init__(self):
        full = {k: default for k, (_, default) in SCHEMA.items()}
        for key, value in self.values.items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}")
            full[key] = value
        self.values = full

    def __getitem__(self, key: str):
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        return self.values[key]

    def override(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise ConfigError(f"unknown config key {key!r}")
        self.values[key] = value

    def model_config(self):
        from .model import ModelConfig

        return ModelConfig(
            vocab_size=self["model.vocab_size"],
            d_model=self["model.d_model"],
            n_layers=self["model.n_layers"],
            n_attn_heads=self["model.n_attn_heads"],
            max_positions=self["model.max_positions"],
            n_pred_heads=self["model.n_pred_heads"],
            leap_stride=self["model.leap_stride"],
        )

    def training_config(self, stage: str):
        from .training import TrainingConfig

        prefix = f"training.{stage}."
        return TrainingConfig(
            stage=stage,
            learning_rate=self[prefix + "learning_rate"],
            epochs=self[prefix + "epochs"],
            batch_size=self[prefix + "batch_size"],
            beta=self["training.full.beta"] if stage == "full" else 0.0,
            warmup_ratio=self[prefix + "warmup_ratio"],
            window_len=self["training.window_len"],
            seed=self["seed"],
            max_steps=self[prefix + "max_steps"],
        )

    def to_text(self) -> str:
        lines = [f"{key} = {_fmt(self.values[key])}" for key in SCHEMA]
        return "\n".join(lines) + "\n"


def parse_text(text: str) -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'section.key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        value = value.strip()
        if key not in SCHEMA:
            raise ConfigError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise ConfigError(f"line {lineno}: duplicate key {key!r}")
        parser, _ = SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as err:
            raise ConfigError(f"line {lineno}: bad value for {key}: {err}") from err
    return RunConfig(values=values)


def parse_config(path) -> RunConfig:
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from err
    return parse_text(text)
