"""Experiment configuration: JSON in, validated dataclasses out."""

from __future__ import annotations

import copy
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

OBJECTIVE_DEFAULTS = {
    "quadratic": {
        "d": 50,
        "shift": 0.0,
        "spread": 0.0,
        "noise": 0.0,
        "samples_per_client": 50,
        "eig_min": 0.5,
        "eig_max": 1.0,
    },
    "logreg": {
        "n_samples": 2000,
        "n_features": 20,
        "l2": 1e-3,
        "data": None,
    },
    "mlp-lora": {
        "n_samples": 1200,
        "dims": [12, 16, 4],
        "rank": 4,
        "alpha": 8.0,
        "n_tasks": 4,
        "data": None,
    },
}

SPLIT_DEFAULTS = {"kind": "iid", "beta": 0.5, "groups": []}
PERSONALIZATION_DEFAULTS = {
    "kind": "disabled",
    "alpha": None,
    "form": "additive",
    "eta_min": None,
    "eta_max": None,
    "normalization": "maxabs",
    "clamp_to_ceiling": False,
}
OPTIMIZERS = ("fedmezo", "bp-fedavg")


class ConfigError(ValueError):
    """Schema violation; the message names the offending key."""


@dataclass
class ExperimentConfig:
    objective: dict
    N: int = 4
    T: int = 500
    H: int = 30
    mu: float = 1e-3
    eta0: float | None = None
    lr_factor: float = 0.5
    batch_size: int = 1
    split: dict = field(default_factory=lambda: dict(SPLIT_DEFAULTS))
    personalization: dict = field(default_factory=lambda: dict(PERSONALIZATION_DEFAULTS))
    optimizer: str = "fedmezo"
    master_seed: int = 0
    problem_seed: int | None = None
    replicates: int = 1
    eval_fraction: float = 0.1
    patience: int | None = None
    c_g: float = 1.0
    bytes_per_param: int = 2
    workers: int = 1
    output_dir: str = "runs/experiment"

    def __post_init__(self):
        self.warnings: list[str] = []

    def to_dict(self) -> dict:
        return asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        d = copy.deepcopy(self.to_dict())
        d.update(changes)
        return from_dict(d)


TOP_KEYS = {f.name for f in fields(ExperimentConfig)}


def _merge(section: str, given, defaults: dict) -> dict:
    if not isinstance(given, dict):
        raise ConfigError(f"'{section}' must be an object")
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise ConfigError(f"unknown key '{section}.{unknown[0]}'")
    out = copy.deepcopy(defaults)
    out.update(given)
    return out


def _require(cond, key, why):
    if not cond:
        raise ConfigError(f"invalid '{key}': {why}")


def from_dict(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(raw) - TOP_KEYS)
    if unknown:
        raise ConfigError(f"unknown key '{unknown[0]}'")
    if "objective" not in raw:
        raise ConfigError("missing required key 'objective'")
    obj = raw["objective"]
    if not isinstance(obj, dict) or obj.get("kind") not in OBJECTIVE_DEFAULTS:
        raise ConfigError(f"invalid 'objective.kind': expected one of {sorted(OBJECTIVE_DEFAULTS)}")
    kind = obj["kind"]
    body = {k: v for k, v in obj.items() if k != "kind"}
    objective = {"kind": kind, **_merge("objective", body, OBJECTIVE_DEFAULTS[kind])}

    vals = {k: v for k, v in raw.items() if k not in ("objective", "split", "personalization")}
    cfg = ExperimentConfig(
        objective=objective,
        split=_merge("split", raw.get("split", {}), SPLIT_DEFAULTS),
        personalization=_merge("personalization", raw.get("personalization", {}), PERSONALIZATION_DEFAULTS),
        **vals,
    )
    _validate(cfg)
    return cfg


def _validate(cfg: ExperimentConfig) -> None:
    for key in ("N", "H", "replicates", "batch_size", "workers", "bytes_per_param"):
        v = getattr(cfg, key)
        _require(isinstance(v, int) and not isinstance(v, bool) and v >= 1, key, "must be an integer >= 1")
    _require(isinstance(cfg.T, int) and cfg.T >= 0, "T", "must be an integer >= 0")
    _require(isinstance(cfg.mu, (int, float)) and cfg.mu > 0, "mu", "must be positive")
    _require(cfg.eta0 is None or cfg.eta0 > 0, "eta0", "must be positive")
    _require(cfg.lr_factor > 0, "lr_factor", "must be positive")
    _require(0 < cfg.eval_fraction < 1, "eval_fraction", "must lie in (0, 1)")
    _require(cfg.patience is None or cfg.patience >= 1, "patience", "must be >= 1")
    _require(cfg.c_g >= 1, "c_g", "must be >= 1")
    _require(cfg.optimizer in OPTIMIZERS, "optimizer", f"expected one of {OPTIMIZERS}")
    _require(isinstance(cfg.master_seed, int) and cfg.master_seed >= 0, "master_seed", "must be a non-negative integer")
    _require(cfg.split["kind"] in ("iid", "dirichlet", "meta"), "split.kind", "expected iid, dirichlet or meta")
    _require(cfg.split["beta"] > 0, "split.beta", "must be positive")
    p = cfg.personalization
    kinds = ("disabled", "random", "round-loss", "five-round-loss", "update-norm-diff")
    _require(p["kind"] in kinds, "personalization.kind", f"expected one of {kinds}")
    _require(p["form"] in ("additive", "multiplicative"), "personalization.form", "expected additive or multiplicative")
    _require(p["normalization"] in ("maxabs", "zscore", "tanh"), "personalization.normalization",
             "expected maxabs, zscore or tanh")
    o = cfg.objective
    if o["kind"] == "quadratic":
        _require(o["d"] >= 1, "objective.d", "must be >= 1")
        _require(0 <= o["spread"] <= 1, "objective.spread", "must lie in [0, 1]")
        _require(o["shift"] >= 0 and o["noise"] >= 0, "objective.shift", "shift and noise must be non-negative")
        _require(0 < o["eig_min"] <= o["eig_max"], "objective.eig_min", "need 0 < eig_min <= eig_max")


def load_config(path, check_lr: bool = True) -> ExperimentConfig:
    """Parse and validate a JSON config.

    With ``check_lr`` the learning rate is compared with the theory ceiling;
    exceeding it is allowed (blow-up studies need it) and recorded in
    ``cfg.warnings``.
    """
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from None
    cfg = from_dict(raw)
    if check_lr:
        from .runner import check_ceiling

        cfg.warnings = check_ceiling(cfg)
    return cfg
