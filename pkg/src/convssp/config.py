"""Flat key = value configuration shared by the CLI commands.

One namespace covers data preparation, the encoder, the objectives, the
trainer, the teacher, evaluation, and the synthetic generator.  Files look
like::

    # training
    learning_rate = 1e-3
    batch_size    = 32
    alpha         = 0.5

Unknown keys are rejected by name; values are parsed to the declared field
type.  Command-line flags override file values.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass

from .encoder import EncoderConfig
from .objectives import LossWeights
from .synthetic import SyntheticSpec
from .training import TrainConfig


class ConfigError(ValueError):
    """Unknown key, malformed line, or unparseable value."""


@dataclass
class Settings:
    # data preparation
    max_len: int = 256
    perturb_prob: float = 1.0
    min_noise_pool: int = 2
    instance_variants: int = 1
    # encoder
    hidden_size: int = 64
    layers: int = 2
    heads: int = 4
    ff_size: int = 128
    max_positions: int = 512
    dropout: float = 0.1
    # objectives
    alpha: float = 1e-2
    beta: float = 1e-3
    gamma: float = 1e-2
    squared_norms: bool = False
    wr_source: str = "cls"
    # trainer
    learning_rate: float = 2e-5
    batch_size: int = 64
    post_train_epochs: int = 2
    fine_tune_epochs: int = 2
    grad_clip: float = 0.0  # 0 disables clipping
    seed: int = 0
    student_init: str = "teacher"  # or "random"
    # teacher pre-training
    teacher_learning_rate: float = 2e-3
    teacher_epochs: int = 3
    teacher_batch_size: int = 32
    # evaluation
    positive_threshold: int = 2
    ndcg_gain: str = "exp"  # or "linear"
    skip_unjudged: bool = True
    top_k: int = 20
    # synthetic generator
    n_topics: int = 8
    entities_per_topic: int = 6
    n_conversations: int = 100
    queries_per_conversation: float = 6.9
    docs_per_entity: int = 6
    omission_rate: float = 0.6
    digression_rate: float = 0.3
    two_token_entity_rate: float = 0.3
    expand_prefixes: bool = True

    def encoder_config(self, vocab_size: int) -> EncoderConfig:
        return EncoderConfig(
            hidden_size=self.hidden_size,
            layers=self.layers,
            heads=self.heads,
            ff_size=self.ff_size,
            max_positions=self.max_positions,
            vocab_size=vocab_size,
            dropout=self.dropout,
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(alpha=self.alpha, beta=self.beta, gamma=self.gamma)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            post_train_epochs=self.post_train_epochs,
            fine_tune_epochs=self.fine_tune_epochs,
            seed=self.seed,
            weights=self.loss_weights(),
            grad_clip=self.grad_clip if self.grad_clip > 0 else None,
        )

    def teacher_train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.teacher_learning_rate,
            batch_size=self.teacher_batch_size,
            seed=self.seed,
            weights=self.loss_weights(),
        )

    def synthetic_spec(self) -> SyntheticSpec:
        return SyntheticSpec(
            n_topics=self.n_topics,
            entities_per_topic=self.entities_per_topic,
            n_conversations=self.n_conversations,
            queries_per_conversation=self.queries_per_conversation,
            docs_per_entity=self.docs_per_entity,
            omission_rate=self.omission_rate,
            seed=self.seed,
            digression_rate=self.digression_rate,
            two_token_entity_rate=self.two_token_entity_rate,
            expand_prefixes=self.expand_prefixes,
        )

    def content_hash(self) -> str:
        blob = json.dumps(dataclasses.asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


_DEFAULTS = Settings()
_FIELD_TYPES = {
    f.name: type(getattr(_DEFAULTS, f.name)) for f in dataclasses.fields(Settings)
}


def _parse_value(key: str, raw: str, target_type: type):
    raw = raw.strip()
    try:
        if target_type is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(f"not a boolean: {raw!r}")
        if target_type is int:
            return int(raw)
        if target_type is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"config key {key!r}: {exc}") from exc


def parse_config_file(path) -> dict:
    """Read a flat key = value file into a {key: typed value} mapping."""
    values: dict = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, _, raw = stripped.partition("=")
            key = key.strip()
            if key not in _FIELD_TYPES:
                raise ConfigError(f"{path}:{lineno}: unknown config key {key!r}")
            values[key] = _parse_value(key, raw, _FIELD_TYPES[key])
    return values


def load_settings(
    config_path=None, overrides: dict | None = None, env: dict | None = None
) -> Settings:
    """Defaults <- config file <- SSP_SEED <- explicit overrides (flags win)."""
    env = os.environ if env is None else env
    values: dict = {}
    if config_path is not None:
        values.update(parse_config_file(config_path))
    if "seed" not in values and "SSP_SEED" in env:
        try:
            values["seed"] = int(env["SSP_SEED"])
        except ValueError as exc:
            raise ConfigError(f"SSP_SEED must be an integer: {env['SSP_SEED']!r}") from exc
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if key not in _FIELD_TYPES:
            raise ConfigError(f"unknown config key {key!r}")
        values[key] = value
    return Settings(**values)


def write_config_file(settings: Settings, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for f in dataclasses.fields(Settings):
            fh.write(f"{f.name} = {getattr(settings, f.name)}\n")
