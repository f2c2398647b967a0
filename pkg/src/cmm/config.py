"""Model and training configuration (JSON-backed dataclasses)."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

TERMS = ("lm", "bce", "rep_x", "rep_z", "equil_x", "equil_z", "rh_stable_z", "rh_unstable_x")

# loss weights used in the reference experiments
DEFAULT_LAMBDAS = {
    "lm": 1.0,
    "bce": 0.5,
    "rep_x": 1e3,
    "rep_z": 1e3,
    "equil_x": 1.0,
    "equil_z": 1.0,
    "rh_stable_z": 1e4,
    "rh_unstable_x": 10.0,
}


class ConfigError(ValueError):
    """Config violates the schema; ``field`` names the offending entry."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


@dataclass
class OptimConfig:
    kind: str = "adam_atan2"
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    eps: float = 1e-8
    weight_decay: float = 0.0
    ema_beta: float = 0.999
    # {"kind": "constant"} or {"kind": "exp_decay", "lr_mid", "mid_step", "lr_end", "end_step"}
    schedule: dict = field(default_factory=lambda: {"kind": "constant"})


@dataclass
class GradNormConfig:
    enabled: bool = False
    alpha: float = 1.5
    rho: float = 0.9
    t_reset: int = 1000
    period: int = 1


@dataclass
class CmmConfig:
    D: int = 512
    S: int = 16
    vocab_in: int = 5
    vocab_out: int = 5
    N_H: int = 3
    N_L: int = 6
    activation: str = "silu"
    mixer: str = "mlp"
    identical_layers: bool = False
    # RMS-normalize the output of the update network (keeps latents bounded)
    out_norm: bool = True
    D_expand: int = 4
    token_expand: int = 1
    n_heads: int = 1
    N_super: int = 16
    N_accum: int = 1
    N_grad: int = 1
    batch_size: int = 64
    sigma: float = 0.0
    noise_kind: str = "none"
    stablemax_order: int = 3
    act_variant: str = "trm_halt"
    eps_explore: float = 0.1
    lambdas: dict = field(default_factory=lambda: dict(DEFAULT_LAMBDAS))
    optim: OptimConfig = field(default_factory=OptimConfig)
    gradnorm: GradNormConfig = field(default_factory=GradNormConfig)
    jac_eps: float = 1e-3
    jac_probes: int = 1
    freeze_embed_after: int | None = None
    pad_token: int | None = None
    eval_every: int = 0
    dtype: str = "float32"
    seed: int = 0

    def __post_init__(self):
        self.validate()

    @property
    def M_max(self) -> int:
        return self.N_super

    def active_terms(self) -> list[str]:
        return [t for t in TERMS if self.lambdas.get(t, 0.0) != 0.0]

    def validate(self) -> None:
        for name in ("D", "S", "N_H", "N_L", "N_grad", "N_super", "N_accum", "batch_size",
                     "vocab_in", "vocab_out", "D_expand", "token_expand", "n_heads", "jac_probes"):
            if getattr(self, name) < 1:
                raise ConfigError(name, "must be >= 1")
        if not 1 <= self.N_accum <= self.N_super:
            raise ConfigError("N_accum", f"must satisfy 1 <= N_accum <= N_super ({self.N_super})")
        if self.sigma < 0:
            raise ConfigError("sigma", "must be >= 0")
        _choice("activation", self.activation, ("silu", "tanh"))
        _choice("mixer", self.mixer, ("mlp", "attention"))
        _choice("noise_kind", self.noise_kind, ("none", "additive", "multiplicative"))
        _choice("stablemax_order", self.stablemax_order, (1, 3, 5))
        _choice("act_variant", self.act_variant, ("trm_halt", "hrm_q"))
        _choice("dtype", self.dtype, ("float32", "float64"))
        _choice("optim.kind", self.optim.kind, ("adamw", "adam_atan2"))
        if self.mixer == "attention" and self.D % self.n_heads:
            raise ConfigError("n_heads", "must divide D")
        if not 0 <= self.eps_explore <= 1:
            raise ConfigError("eps_explore", "must lie in [0, 1]")
        if self.jac_eps <= 0:
            raise ConfigError("jac_eps", "must be > 0")
        unknown = set(self.lambdas) - set(TERMS)
        if unknown:
            raise ConfigError("lambdas", f"unknown terms {sorted(unknown)}")
        for k, v in self.lambdas.items():
            if v < 0:
                raise ConfigError(f"lambdas.{k}", "must be >= 0")
        if self.lambdas.get("lm", 0.0) <= 0:
            raise ConfigError("lambdas.lm", "the LM term cannot be disabled")
        o = self.optim
        if o.lr <= 0 or o.eps <= 0 or o.weight_decay < 0:
            raise ConfigError("optim", "lr and eps must be > 0, weight_decay >= 0")
        if not (0 <= o.beta1 < 1 and 0 <= o.beta2 < 1 and 0 <= o.ema_beta < 1):
            raise ConfigError("optim", "betas must lie in [0, 1)")
        _choice("optim.schedule.kind", o.schedule.get("kind"), ("constant", "exp_decay"))
        g = self.gradnorm
        if not 0 <= g.rho < 1:
            raise ConfigError("gradnorm.rho", "must lie in [0, 1)")
        if g.t_reset < 1 or g.period < 1:
            raise ConfigError("gradnorm", "t_reset and period must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CmmConfig":
        d = dict(d)
        known = {f.name for f in dataclasses.fields(cls)}
        for k in d:
            if k not in known:
                raise ConfigError(k, "unknown field")
        if "optim" in d:
            d["optim"] = _sub(OptimConfig, d["optim"], "optim")
        if "gradnorm" in d:
            d["gradnorm"] = _sub(GradNormConfig, d["gradnorm"], "gradnorm")
        if "lambdas" in d:
            lam = dict(DEFAULT_LAMBDAS)
            lam.update(d["lambdas"])
            d["lambdas"] = lam
        for f in dataclasses.fields(cls):
            if f.name in d and f.name not in ("optim", "gradnorm", "lambdas"):
                d[f.name] = _coerce(f.name, f.type, d[f.name])
        return cls(**d)

    @classmethod
    def load(cls, path: str | Path) -> "CmmConfig":
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as e:
            raise ConfigError("<file>", f"invalid JSON ({e})") from None
        if not isinstance(raw, dict):
            raise ConfigError("<file>", "top level must be an object")
        return cls.from_dict(raw)

    def replace(self, **kw) -> "CmmConfig":
        d = self.to_dict()
        d.update(kw)
        return CmmConfig.from_dict(d)


def _choice(name, value, allowed):
    if value not in allowed:
        raise ConfigError(name, f"must be one of {list(allowed)}, got {value!r}")


def _sub(klass, d, prefix):
    if isinstance(d, klass):
        return d
    if not isinstance(d, dict):
        raise ConfigError(prefix, "must be an object")
    known = {f.name: f for f in dataclasses.fields(klass)}
    out = {}
    for k, v in d.items():
        if k not in known:
            raise ConfigError(f"{prefix}.{k}", "unknown field")
        out[k] = v if k == "schedule" else _coerce(f"{prefix}.{k}", known[k].type, v)
    return klass(**out)


def _coerce(name, typ, value):
    typ = str(typ)
    if value is None:
        if "None" in typ:
            return None
        raise ConfigError(name, "must not be null")
    if typ.startswith("bool"):
        if not isinstance(value, bool):
            raise ConfigError(name, "must be a boolean")
        return value
    if typ.startswith("int"):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(name, "must be an integer")
        return value
    if typ.startswith("float"):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(name, "must be a number")
        return float(value)
    if typ.startswith("str"):
        if not isinstance(value, str):
            raise ConfigError(name, "must be a string")
        return value
    return value
