"""Run configuration: a flat ``key = value`` text file mapped onto a dataclass."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any


def _ints(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in str(text).replace(" ", "").split(",") if x != "")


@dataclass
class RunConfig:
    seed: int = 0
    # corpus
    n_pairs: int = 2000
    heldout_frac: float = 0.2
    n_clusters: int = 24
    n_triples: int = 8
    raw_dim: int = 32
    patch_dim: int = 16
    tokens: int = 16
    teacher_dim: int = 32
    teacher_pca: int = 16
    item_noise: float = 0.35
    modality_noise: float = 0.15
    modality_offset: float = 0.5
    triple_prob: float = 0.75
    # model
    dim: int = 32
    hidden: int = 64
    token_dim: int = 16
    head_dim: int = 32
    # objective
    order: int = 3
    mu_d: float = 0.5
    rho: float = 0.5
    eta2: float = 1e-4
    eta3: float = 1e-3
    temperature: float = 0.07
    # optimisation
    batch_size: int = 32
    epochs: int = 20
    lr: float = 5e-4
    head_lr_scale: float = 4.0  # rank heads and gates only; see train.run_training
    warmup_frac: float = 0.05
    weight_decay: float = 0.2
    # sweep
    orders: tuple[int, ...] = (0, 1, 2, 3, 4, 5)
    seeds: tuple[int, ...] = (0,)
    record_wall_time: bool = False
    out_dir: str = "runs/default"

    def validate(self) -> "RunConfig":
        if self.n_clusters < 3:
            raise ValueError("need at least three clusters to plant triples")
        if self.batch_size < 3 or self.batch_size > self.n_pairs * self.heldout_frac:
            raise ValueError("batch_size must be >= 3 and fit inside the held-out split")
        if not 0.0 < self.heldout_frac < 1.0:
            raise ValueError("heldout_frac must lie in (0, 1)")
        if self.tokens < 8:
            raise ValueError("pyramid pooling needs at least 8 tokens")
        if self.teacher_pca > self.teacher_dim:
            raise ValueError("teacher_pca cannot exceed teacher_dim")
        if self.epochs < 0 or self.order < 0:
            raise ValueError("epochs and order must be non-negative")
        if not 0.0 <= self.triple_prob <= 1.0:
            raise ValueError("triple_prob must lie in [0, 1]")
        if self.eta3 < self.eta2 or self.eta2 < 0:
            raise ValueError("gate penalties must be non-negative and monotone in order")
        if self.lr <= 0 or self.head_lr_scale <= 0:
            raise ValueError("learning rates must be positive")
        if not self.orders or not self.seeds:
            raise ValueError("orders and seeds must be non-empty")
        return self

    def replace(self, **overrides) -> "RunConfig":
        return dataclasses.replace(self, **overrides).validate()

    def manifest(self) -> dict[str, Any]:
        return {f.name: (list(v) if isinstance(v := getattr(self, f.name), tuple) else v)
                for f in fields(self)}


_FIELDS = {f.name: f for f in fields(RunConfig)}


def coerce(key: str, value: Any) -> Any:
    if key not in _FIELDS:
        raise KeyError(f"unknown config key {key!r}")
    kind = _FIELDS[key].type
    if not isinstance(value, str):
        return tuple(value) if kind.startswith("tuple") else value
    if kind.startswith("tuple"):
        return _ints(value)
    if kind == "bool":
        if value.lower() in ("1", "true", "yes", "on"):
            return True
        if value.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"{key}: cannot parse {value!r} as bool")
    if kind == "int":
        return int(value)
    if kind == "float":
        return float(value)
    return value


def parse_config(text: str) -> dict[str, Any]:
    out = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = coerce(key, value)
    return out


def load_config(path=None, **overrides) -> RunConfig:
    values = parse_config(Path(path).read_text()) if path else {}
    values.update({k: coerce(k, v) for k, v in overrides.items() if v is not None})
    return RunConfig(**values).validate()


def dump_config(cfg: RunConfig) -> str:
    lines = []
    for key, value in cfg.manifest().items():
        if isinstance(value, list):
            value = ",".join(str(v) for v in value)
        lines.append(f"{key} = {value}")
    return "\n".join(lines) + "\n"
