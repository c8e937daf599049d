"""Flat run configuration: defaults, JSON file loading, overrides and variant presets."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import types
import typing
from dataclasses import dataclass, field
from pathlib import Path

from . import llltrain, rvae, tinylm

# The six replay variants. Each preset fixes the fields that define the method;
# everything else comes from the config.
VARIANTS: dict[str, dict] = {
    "baseline": {"adapter_position": None, "mode": "naive", "use_id_task": False, "conditional": False},
    "+id": {"adapter_position": None, "mode": "naive", "use_id_task": True, "conditional": False},
    "rvae": {"mode": "alt", "use_id_task": True, "conditional": False},
    "rvae-id": {"mode": "alt", "use_id_task": False, "conditional": False},
    "rcvae": {"mode": "alt", "use_id_task": True, "conditional": True},
    "rcvae-id": {"mode": "alt", "use_id_task": False, "conditional": True},
}
# fields that do not change what a single run computes (grid/sweep plumbing)
NON_SEMANTIC = ("orders", "gammas", "seeds", "variants", "sweep_axis", "sweep_values", "repeats", "workers", "out_dir")


class ConfigError(ValueError):
    pass


def canonical_variant(name: str) -> str:
    """Accept the usual spellings of the minus sign ("rvae−id", "rvae_id")."""
    key = name.strip().lower().replace("−", "-").replace("_", "-")
    if key == "id":
        key = "+id"
    if key not in VARIANTS:
        raise ConfigError(f"variant: unknown variant {name!r}; expected one of {sorted(VARIANTS)}")
    return key


@dataclass
class RunConfig:
    # backbone
    d_model: int = 32
    n_layers: int = 3
    n_heads: int = 4
    max_seq_len: int = 64
    dtype: str = "float32"
    adapter_position: int | None = 2
    # adapter
    latent_dim: int = 100
    alpha: float = 0.5
    rho: float = 0.2
    conditional: bool = False
    # lifelong training
    lambda_lm: float = 0.25
    beta_id: float = 0.5
    gamma: float = 0.2
    epochs_per_task: int = 24
    alt_turns: int = 3
    mode: str = "alt"
    alt_joint_second_half: bool = True
    backbone_phase_adapter: str = "mean"
    use_id_task: bool = True
    recon_mode: str = "mse"
    batch_size: int = 16
    seed: int = 0
    lr: float = 3e-3
    weight_decay: float = 0.01
    grad_clip: float | None = 1.0
    fresh_optimizer: bool = True
    lr_schedule: str = "constant"
    use_task_token: bool = True
    gen_top_k: int = 20
    max_gen_len: int = 40
    max_answer_len: int = 8
    # data
    data_seed: int = 0
    n_train: int = 500
    n_test: int = 200
    order: list[str] = field(default_factory=lambda: ["cls", "span", "slot"])
    variant: str | None = None
    # grid / sweep
    orders: list[str] = field(default_factory=lambda: ["all"])
    gammas: list[float] = field(default_factory=lambda: [0.05, 0.2])
    seeds: list[int] = field(default_factory=lambda: [0, 1, 2])
    variants: list[str] = field(default_factory=lambda: ["baseline", "rvae"])
    sweep_axis: str = "latent_dim"
    sweep_values: list = field(default_factory=lambda: [10, 50, 100, 200])
    repeats: int = 3
    workers: int = 1
    out_dir: str = "runs/default"

    def __post_init__(self):
        if self.variant is not None:
            self.variant = canonical_variant(self.variant)
        self.variants = [canonical_variant(v) for v in self.variants]
        if len(set(self.order)) != len(self.order) or not self.order:
            raise ConfigError("order: must list distinct task names")
        for name in ("n_train", "n_test", "repeats", "workers"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name}: must be >= 1")
        # surface component-level errors now, with the field name where possible
        try:
            self.model_config(1)
            self.rvae_config()
            self.lll_config()
        except ValueError as e:
            raise ConfigError(str(e)) from None

    # -- component configs ----------------------------------------------------

    def model_config(self, vocab_size: int) -> tinylm.ModelConfig:
        return tinylm.ModelConfig(
            vocab_size=vocab_size,
            d_model=self.d_model,
            n_layers=self.n_layers,
            n_heads=self.n_heads,
            max_seq_len=self.max_seq_len,
            adapter_position=self.adapter_position,
            dtype=self.dtype,
        )

    def rvae_config(self, n_tasks: int | None = None) -> rvae.RvaeConfig:
        n = len(self.order) if n_tasks is None else n_tasks
        return rvae.RvaeConfig(
            d_model=self.d_model,
            latent_dim=self.latent_dim,
            alpha=self.alpha,
            rho=self.rho,
            conditional=self.conditional,
            # one slot per task plus the "unobserved" slot
            n_conditions=n + 1 if self.conditional else 0,
        )

    def lll_config(self) -> llltrain.LllConfig:
        names = {f.name for f in dataclasses.fields(llltrain.LllConfig)}
        return llltrain.LllConfig(**{k: getattr(self, k) for k in names})

    # -- serialization ----------------------------------------------------------

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def semantic_dict(self) -> dict:
        d = self.to_dict()
        for k in NON_SEMANTIC:
            d.pop(k)
        return d

    def digest(self) -> str:
        text = json.dumps(self.semantic_dict(), sort_keys=True)
        return hashlib.sha256(text.encode()).hexdigest()

    def with_variant(self, variant: str) -> "RunConfig":
        v = canonical_variant(variant)
        preset = dict(VARIANTS[v])
        if "adapter_position" not in preset and self.adapter_position is None:
            preset["adapter_position"] = RunConfig.adapter_position
        return dataclasses.replace(self, variant=v, **preset)

    def replace(self, **changes) -> "RunConfig":
        return from_dict({**self.to_dict(), **changes})


_HINTS = typing.get_type_hints(RunConfig)
FIELDS = {f.name: _HINTS[f.name] for f in dataclasses.fields(RunConfig)}


def _coerce(name: str, value, hint):
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    optional = origin in (typing.Union, types.UnionType)
    if optional:
        if value is None:
            return None
        (hint,) = [a for a in args if a is not type(None)]
        origin, args = typing.get_origin(hint), typing.get_args(hint)
    if value is None:
        raise ConfigError(f"{name}: required, got null")
    if hint is bool:
        if isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected true/false, got {value!r}")
    if hint is int:
        if isinstance(value, int) and not isinstance(value, bool):
            return value
        raise ConfigError(f"{name}: expected an integer, got {value!r}")
    if hint is float:
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            return float(value)
        raise ConfigError(f"{name}: expected a number, got {value!r}")
    if hint is str:
        if isinstance(value, str):
            return value
        raise ConfigError(f"{name}: expected a string, got {value!r}")
    if origin is list or hint is list:
        if isinstance(value, str):
            value = [v for v in value.split(",") if v]
        if isinstance(value, (int, float)) and not isinstance(value, bool):
            value = [value]
        if not isinstance(value, list):
            raise ConfigError(f"{name}: expected a list, got {value!r}")
        if not args:
            return list(value)
        return [_coerce(f"{name}[{i}]", v, args[0]) for i, v in enumerate(value)]
    raise ConfigError(f"{name}: unsupported type {hint}")


def from_dict(raw: dict) -> RunConfig:
    """Build a config from a flat mapping; unknown keys and ill-typed values are errors.

    A ``variant`` key first applies that variant's preset; explicit keys in
    ``raw`` still win over the preset.
    """
    unknown = sorted(set(raw) - set(FIELDS))
    if unknown:
        raise ConfigError(f"{unknown[0]}: unknown config field")
    values = {}
    variant = raw.get("variant")
    if variant is not None:
        values.update(VARIANTS[canonical_variant(_coerce("variant", variant, str))])
    for k, v in raw.items():
        values[k] = _coerce(k, v, FIELDS[k])
    return RunConfig(**values)


def load(path: str | Path | None, overrides: dict | None = None) -> RunConfig:
    raw: dict = {}
    if path is not None:
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
        try:
            raw = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError(f"{path}: top level must be an object")
    return from_dict({**raw, **(overrides or {})})


def parse_assignment(text: str) -> tuple[str, object]:
    """``key=value`` with the value read as JSON when possible, else as a string."""
    if "=" not in text:
        raise ConfigError(f"--set expects key=value, got {text!r}")
    key, value = text.split("=", 1)
    key = key.strip()
    if key not in FIELDS:
        raise ConfigError(f"{key}: unknown config field")
    try:
        return key, json.loads(value)
    except json.JSONDecodeError:
        return key, value


def defaults_table() -> list[tuple[str, str, str]]:
    """(field, type, default) rows for documentation."""
    d = RunConfig().to_dict()
    return [(k, _type_name(FIELDS[k]), json.dumps(d[k])) for k in FIELDS]


def _type_name(hint) -> str:
    return hint.__name__ if isinstance(hint, type) else str(hint).replace("typing.", "")
