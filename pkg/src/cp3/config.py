"""Flat ``key = value`` run configuration covering data, generator, training and SCR fields."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Tuple

from cp3.errors import ValidationError
from cp3.generation import GenParams, init_generator
from cp3.scr import ScrConfig, init_scr
from cp3.synthdata import DEFAULT_CATEGORIES, default_specs
from cp3.training import PretrainVariant, TrainConfig


@dataclass
class RunConfig:
    seed: int = 0
    # synthetic data
    per_category: int = 50
    n_points: int = 256
    crop_rate: float = 0.5
    train_fraction: float = 0.8
    kinds: Tuple[str, ...] = DEFAULT_CATEGORIES
    jitter: float = 0.0
    # generator
    num_coarse: int = 128
    encoder_dims: Tuple[int, ...] = (64, 128)
    decoder_hidden: Tuple[int, ...] = (256,)
    # optimisation
    learning_rate: float = 1e-4
    # per-stage overrides; 0 inherits learning_rate
    pretrain_learning_rate: float = 0.0
    finetune_learning_rate: float = 0.0
    refine_learning_rate: float = 0.0
    decay_factor: float = 0.7
    decay_every: int = 40
    batch_size: int = 16
    loss: str = "cd_l2"
    pretrain_epochs: int = 30
    finetune_epochs: int = 30
    refine_epochs: int = 10
    variant: str = "IOI->I"
    gamma: float = 0.9
    # refinement net (num_categories, gen_width, global_width = 0 means "derive")
    num_categories: int = 0
    gen_width: int = 0
    global_width: int = 0
    channels: int = 16
    multipliers: Tuple[int, ...] = (1, 1, 2)
    k_list: Tuple[int, ...] = (8, 16)
    modulation: str = "sgm"
    semantics: str = "category"
    sgm_units: Tuple[bool, ...] = (True, True, True)
    eps: float = 1e-8

    def __post_init__(self):
        try:
            PretrainVariant(self.variant)
        except ValueError:
            raise ValidationError(f"unknown pretraining variant {self.variant!r}") from None
        if not 0 < self.train_fraction < 1:
            raise ValidationError("train_fraction must lie in (0, 1)")
        if self.per_category < 1:
            raise ValidationError("per_category must be >= 1")
        self.train_config("finetune")
        self.scr_config()

    # ---- derived configs

    def train_config(self, stage: str) -> TrainConfig:
        epochs = {"pretrain": self.pretrain_epochs, "finetune": self.finetune_epochs, "refine": self.refine_epochs}
        if stage not in epochs:
            raise ValidationError(f"unknown stage {stage!r}")
        stage_lr = getattr(self, f"{stage}_learning_rate")
        return TrainConfig(
            learning_rate=stage_lr or self.learning_rate,
            decay_factor=self.decay_factor,
            decay_every=self.decay_every,
            epochs=epochs[stage],
            batch_size=self.batch_size,
            seed=self.seed,
            loss=self.loss,
            stage=stage,
            gamma=self.gamma,
        )

    def scr_config(self) -> ScrConfig:
        width = self.encoder_dims[-1]
        for name in ("gen_width", "global_width"):
            value = getattr(self, name)
            if value not in (0, width):
                raise ValidationError(f"{name}={value} disagrees with the generator feature width {width}")
        return ScrConfig(
            num_categories=self.num_categories or len(self.kinds),
            gen_width=width,
            global_width=width,
            channels=self.channels,
            multipliers=self.multipliers,
            k_list=self.k_list,
            modulation=self.modulation,
            semantics=self.semantics,
            sgm_units=self.sgm_units,
            eps=self.eps,
        )

    def shape_specs(self):
        return default_specs(self.seed, self.per_category, self.n_points, self.crop_rate, self.kinds, self.jitter)

    def init_generator(self) -> GenParams:
        return init_generator(self.seed, self.num_coarse, self.encoder_dims, self.decoder_hidden)

    def init_scr(self):
        return init_scr(self.scr_config(), self.seed)


FIELDS = {f.name: f for f in dataclasses.fields(RunConfig)}
_HINTS = typing.get_type_hints(RunConfig)
# "epochs" sets every stage at once
ALIASES = {"epochs": ("pretrain_epochs", "finetune_epochs", "refine_epochs")}


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_value(key: str, text: str):
    """Convert the text of ``key`` to the field's type; tuples are comma separated."""
    hint = _HINTS[key]
    if typing.get_origin(hint) is tuple:
        inner = typing.get_args(hint)[0]
        conv = _parse_bool if inner is bool else inner
        items = [t.strip() for t in text.split(",") if t.strip()]
        if not items:
            raise ValueError("empty list")
        return tuple(conv(t) for t in items)
    if hint is bool:
        return _parse_bool(text)
    return hint(text.strip())


def format_value(value) -> str:
    if isinstance(value, tuple):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)


def parse_config_text(text: str, source: str = "<config>") -> Dict[str, object]:
    values: Dict[str, object] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValidationError(f"{source}:{lineno}: expected 'key = value', got {raw.strip()!r}")
        key, _, val = (s.strip() for s in line.partition("="))
        targets = ALIASES.get(key, (key,))
        for t in targets:
            if t not in FIELDS:
                raise ValidationError(f"{source}:{lineno}: unknown key {key!r}")
            try:
                values[t] = parse_value(t, val)
            except ValueError as exc:
                raise ValidationError(f"{source}:{lineno}: bad value for {key!r}: {exc}") from None
    return values


def load_config(path=None, overrides: Dict[str, object] | None = None, defaults: Dict[str, object] | None = None) -> RunConfig:
    """Defaults, then the file (if any), then explicit overrides such as ``--seed``."""
    values: Dict[str, object] = dict(defaults or {})
    if path is not None:
        p = Path(path)
        try:
            text = p.read_text(encoding="utf-8")
        except OSError as exc:
            raise ValidationError(f"cannot read config {p}: {exc.strerror}") from None
        values.update(parse_config_text(text, str(p)))
    values.update({k: v for k, v in (overrides or {}).items() if v is not None})
    return RunConfig(**values)


def dump_config(cfg: RunConfig) -> str:
    return "".join(f"{f} = {format_value(getattr(cfg, f))}\n" for f in FIELDS)

