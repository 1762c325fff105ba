"""Experiment configuration (JSON).

Top-level keys: ``mode``, ``env`` (:class:`metasg.env.EnvConfig`), ``meta``
(:class:`metasg.meta.MetaConfig`), ``attack_catalog``, ``train_types``,
``eval_types``, ``defense_fixed``, ``policy_path``, ``seeds`` and
``output_dir``. Unknown keys are rejected. Population defaults follow the
usual MNIST-scale setup: 100 clients, 10% sampled per round, 5 backdoor and 20
untargeted attackers, lambda 0.5, one local iteration.
"""

from __future__ import annotations

import json
import math
from pathlib import Path
from typing import Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from .aggregation import CLASSICAL_RULES, DefenseAction
from .attacks import KINDS, AttackTypeSpec
from .env import EnvConfig
from .meta import MetaConfig

MODES = ("pretrain-meta-rl", "pretrain-meta-sg", "pretrain-bse", "adapt", "evaluate", "agg-bench")


class AttackEntry(BaseModel):
    """One named attack type. ``m1`` / ``m2`` default to the environment's population."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    name: str
    kind: Literal["IPM", "LMP", "EB", "BackdoorStatic", "RLUntargeted", "RLBackdoor"]
    m1: Optional[int] = Field(None, ge=0)
    m2: Optional[int] = Field(None, ge=0)
    params: dict[str, Union[float, str]] = Field(default_factory=dict)
    weight: float = Field(1.0, ge=0)
    pretrain_against: Optional[str] = "krum"

    def build(self, env: EnvConfig) -> AttackTypeSpec:
        backdoor = self.kind in ("BackdoorStatic", "RLBackdoor")
        m1 = self.m1 if self.m1 is not None else (env.M1 if backdoor else 0)
        m2 = self.m2 if self.m2 is not None else (0 if backdoor else env.M2)
        return AttackTypeSpec(self.kind, m1, m2, dict(self.params), name=self.name)


class FixedDefense(BaseModel):
    """A fixed aggregation action; infinite bounds are written as ``null``."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["untargeted", "backdoor", "mixed"] = "untargeted"
    trim: float = 0.0
    norm_bound: Optional[float] = None
    cos_threshold: float = 1.0
    noise_var: float = 0.0
    bd_norm_bound: Optional[float] = None
    post: Optional[Literal["clip", "prune"]] = None
    clip_range: Optional[float] = None
    prune_rate: Optional[float] = None

    def build(self) -> DefenseAction:
        kw = self.model_dump()
        for key in ("norm_bound", "bd_norm_bound"):
            if kw[key] is None:
                kw[key] = math.inf
        return DefenseAction(**kw)

    @model_validator(mode="after")
    def _valid(self) -> "FixedDefense":
        self.build()
        return self


def _default_catalog() -> list[AttackEntry]:
    return [
        AttackEntry(name="ipm", kind="IPM"),
        AttackEntry(name="lmp", kind="LMP"),
        AttackEntry(name="rl-vs-krum", kind="RLUntargeted", pretrain_against="krum"),
        AttackEntry(name="rl-vs-clipmed", kind="RLUntargeted", pretrain_against="clipping_median"),
    ]


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    mode: Literal["pretrain-meta-rl", "pretrain-meta-sg", "pretrain-bse", "adapt", "evaluate", "agg-bench"]
    env: EnvConfig = Field(default_factory=EnvConfig)
    meta: MetaConfig = Field(default_factory=MetaConfig)
    attack_catalog: list[AttackEntry] = Field(default_factory=_default_catalog)
    train_types: list[str] = Field(default_factory=list)
    eval_types: list[str] = Field(default_factory=list)
    include_no_attack: bool = True
    defense_fixed: Optional[Union[str, FixedDefense]] = None
    policy_path: Optional[str] = None
    policy_hidden: int = Field(0, ge=0)
    policy_log_std: float = -0.5
    attacker_pretrain_steps: Optional[int] = Field(None, ge=0)
    bench_instances: int = Field(1000, ge=1)
    record_timing: bool = False
    seeds: list[int] = Field(default_factory=lambda: [0], min_length=1)
    output_dir: str = "runs/out"

    @model_validator(mode="after")
    def _resolve(self) -> "ExperimentConfig":
        names = [a.name for a in self.attack_catalog]
        if len(set(names)) != len(names):
            raise ValueError("attack_catalog names must be unique")
        for field_name in ("train_types", "eval_types"):
            for n in getattr(self, field_name):
                if n not in names:
                    raise ValueError(f"{field_name}: unknown attack type {n!r}")
        for a in self.attack_catalog:
            spec = a.build(self.env)
            if spec.m1 + spec.m2 >= self.env.n_clients:
                raise ValueError(f"attack {a.name!r}: m1 + m2 must be smaller than n_clients")
            if a.pretrain_against is not None and a.pretrain_against not in CLASSICAL_RULES:
                raise ValueError(f"attack {a.name!r}: unknown pretrain_against rule {a.pretrain_against!r}")
        if isinstance(self.defense_fixed, str) and self.defense_fixed not in CLASSICAL_RULES:
            raise ValueError(f"defense_fixed: unknown rule {self.defense_fixed!r}")
        if any(s < 0 for s in self.seeds):
            raise ValueError("seeds must be non-negative")
        if self.mode in ("pretrain-meta-rl", "pretrain-meta-sg", "pretrain-bse") and not self.train_entries():
            raise ValueError("training needs at least one attack type with positive weight")
        return self

    def entry(self, name: str) -> AttackEntry:
        return next(a for a in self.attack_catalog if a.name == name)

    def train_entries(self) -> list[AttackEntry]:
        chosen = self.train_types or [a.name for a in self.attack_catalog]
        return [self.entry(n) for n in chosen if self.entry(n).weight > 0]

    def eval_entries(self) -> list[AttackEntry]:
        chosen = self.eval_types or [a.name for a in self.attack_catalog]
        return [self.entry(n) for n in chosen]

    def type_distribution(self) -> list[float]:
        w = [a.weight for a in self.train_entries()]
        total = sum(w)
        return [x / total for x in w]

    def fixed_defense(self) -> DefenseAction | str | None:
        if self.defense_fixed is None or isinstance(self.defense_fixed, str):
            return self.defense_fixed
        return self.defense_fixed.build()


def load_config(path: str | Path) -> ExperimentConfig:
    return ExperimentConfig.model_validate_json(Path(path).read_text(encoding="utf-8"))


def dump_config(cfg: ExperimentConfig) -> str:
    return json.dumps(cfg.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"


def format_validation_error(err: ValidationError) -> list[str]:
    """``field.path: message`` lines."""
    out = []
    for e in err.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        out.append(f"{loc}: {e['msg']}")
    return out
