"""Per-client learning rates driven by heterogeneity signals."""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np

from .rng import PURPOSE_LR, RngRecipe, SeedStream, derive_seed

EPS = 1e-12


class SignalKind(str, Enum):
    ROUND_LOSS = "round-loss"
    FIVE_ROUND_LOSS = "five-round-loss"
    UPDATE_NORM_DIFF = "update-norm-diff"
    RANDOM = "random"
    DISABLED = "disabled"


class LrForm(str, Enum):
    ADDITIVE = "additive"
    MULTIPLICATIVE = "multiplicative"


@dataclass(frozen=True)
class LrPolicy:
    eta0: float
    alpha: float
    form: LrForm = LrForm.ADDITIVE
    eta_min: float | None = None
    eta_max: float | None = None
    ceiling: float | None = None  # theory learning-rate ceiling, when known

    def __post_init__(self):
        object.__setattr__(self, "form", LrForm(self.form))
        lo = self.eta_min if self.eta_min is not None else self.eta0 - abs(self.alpha_additive)
        hi = self.eta_max if self.eta_max is not None else self.eta0 + abs(self.alpha_additive)
        object.__setattr__(self, "eta_min", max(lo, 0.0))
        object.__setattr__(self, "eta_max", hi)
        if not (self.eta0 > 0):
            raise ValueError("base learning rate must be positive")
        if not (self.eta_min <= self.eta0 <= self.eta_max):
            raise ValueError(f"need eta_min <= eta0 <= eta_max, got {self.eta_min}, {self.eta0}, {self.eta_max}")

    @property
    def alpha_additive(self) -> float:
        """The additive-form scale equivalent to this policy's alpha."""
        return self.alpha if self.form is LrForm.ADDITIVE else self.eta0 * self.alpha


def raw_signal(kind, clients) -> tuple[np.ndarray, bool]:
    """Mean-centered heterogeneity signal per client; ``(zeros, True)`` during warm-up."""
    kind = SignalKind(kind)
    n = len(clients)
    zeros = np.zeros(n)
    if kind in (SignalKind.RANDOM, SignalKind.DISABLED):
        return zeros, False
    if kind is SignalKind.UPDATE_NORM_DIFF:
        if any(c.last_update is None for c in clients):
            return zeros, True
        deltas = np.array([c.last_update for c in clients])
        dev = np.sum((deltas - deltas.mean(axis=0)) ** 2, axis=1)
        return dev - dev.mean(), False
    need = 1 if kind is SignalKind.ROUND_LOSS else 5
    if any(len(c.loss_history) < need for c in clients):
        return zeros, True
    vals = np.array([np.mean(list(c.loss_history)[-need:]) for c in clients])
    return vals - vals.mean(), False


def normalize_phi(raw, method: str = "maxabs", eps: float = EPS) -> np.ndarray:
    """Map raw signals into (-1, 1), preserving sign."""
    raw = np.asarray(raw, dtype=np.float64)
    if method == "maxabs":
        # relative guard: the bare eps is lost to rounding once max|raw| is large
        m = np.max(np.abs(raw), initial=0.0)
        return raw / (m * (1.0 + eps) + eps)
    if method == "zscore":
        sd = raw.std()
        z = (raw - raw.mean()) / (sd + eps)
        return z / (np.max(np.abs(z), initial=0.0) + 1.0)
    if method == "tanh":
        return np.tanh(raw / (np.max(np.abs(raw), initial=0.0) + eps))
    raise ValueError(f"unknown normalization {method!r}")


def adjust_lr(policy: LrPolicy, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if policy.form is LrForm.ADDITIVE:
        eta = policy.eta0 + policy.alpha * phi
    else:
        eta = policy.eta0 * (1.0 + policy.alpha * phi)
    eta = np.clip(eta, policy.eta_min, policy.eta_max)
    if policy.ceiling is not None:
        eta = np.minimum(eta, policy.ceiling)
    return eta


def random_baseline(eta_min: float, eta_max: float, seed: int, n: int) -> np.ndarray:
    if not eta_min < eta_max:
        raise ValueError("need eta_min < eta_max")
    return eta_min + (eta_max - eta_min) * SeedStream(seed).uniform(n)


class Personalizer:
    """Strategy handle consumed by :func:`fedmezo.federation.run_round`."""

    def __init__(self, kind, policy: LrPolicy, normalization: str = "maxabs"):
        self.kind = SignalKind(kind)
        self.policy = policy
        self.normalization = normalization
        self.last_phi = None
        self.warmup = False

    def rates(self, clients, t, master_seed):
        n = len(clients)
        if self.kind is SignalKind.DISABLED:
            self.last_phi, self.warmup = np.zeros(n), False
            return np.full(n, self.policy.eta0)
        if self.kind is SignalKind.RANDOM:
            seed = derive_seed(RngRecipe(master_seed, t, 0, 0, PURPOSE_LR))
            hi = self.policy.eta_max if self.policy.ceiling is None else min(self.policy.eta_max, self.policy.ceiling)
            self.last_phi, self.warmup = np.zeros(n), False
            return random_baseline(self.policy.eta_min, hi, seed, n)
        raw, self.warmup = raw_signal(self.kind, clients)
        self.last_phi = normalize_phi(raw, self.normalization)
        return adjust_lr(self.policy, self.last_phi)
