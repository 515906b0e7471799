"""Zeroth-order gradient estimators and the seed-replay MeZO step."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import numpy as np

from .linalg import ParamsView
from .objectives import Objective, _as_array
from .rng import GOLDEN, MASK64, gaussian_block, gaussian_matrix, mix64

DEFAULT_CHUNK = 4096  # even, so Box-Muller pairs never straddle chunks


class NumericalOverflowError(FloatingPointError):
    def __init__(self, theta_norm: float, detail: str = ""):
        super().__init__(f"non-finite loss at ||theta|| = {theta_norm:.6g}{': ' + detail if detail else ''}")
        self.theta_norm = theta_norm


class RestoreMode(str, Enum):
    IN_PLACE = "inplace"
    SNAPSHOT = "snapshot"


@dataclass(frozen=True)
class ZooConfig:
    mu: float = 1e-3
    n: int = 1

    def __post_init__(self):
        if not (self.mu > 0 and math.isfinite(self.mu)):
            raise ValueError(f"perturbation scale must be positive, got {self.mu}")
        if self.n < 1:
            raise ValueError(f"need at least one perturbation per step, got {self.n}")


@dataclass(frozen=True)
class StepOutcome:
    projected_grad: float
    loss_plus: float
    loss_minus: float
    seed: int
    lr: float


def sub_seed(seed: int, j: int) -> int:
    """Seed of the j-th extra perturbation when n > 1 (j = 0 is the step seed itself)."""
    if j == 0:
        return seed
    return mix64((seed ^ mix64(j * GOLDEN)) & MASK64)


def perturbation(seed: int, d: int) -> np.ndarray:
    return gaussian_block(seed, 0, d)


def _finite_or_raise(val, theta):
    if not math.isfinite(val):
        raise NumericalOverflowError(float(np.linalg.norm(theta)))
    return val


def two_point_estimate(obj: Objective, params, batch, cfg: ZooConfig, seed: int, z=None):
    """``g = (F(theta + mu z) - F(theta - mu z)) / (2 mu)`` and ``e = g z``.

    With ``cfg.n > 1`` the estimate is the mean of n independent two-point
    estimates and ``g`` is returned as the array of per-direction scalars.
    Parameters are never modified.
    """
    theta = _as_array(params)
    obj._check(theta)
    gs, e = [], np.zeros(obj.d)
    for j in range(cfg.n):
        zj = np.asarray(z, dtype=np.float64) if (z is not None and j == 0) else perturbation(sub_seed(seed, j), obj.d)
        lp = _finite_or_raise(obj.loss(theta + cfg.mu * zj, batch), theta + cfg.mu * zj)
        lm = _finite_or_raise(obj.loss(theta - cfg.mu * zj, batch), theta - cfg.mu * zj)
        g = (lp - lm) / (2.0 * cfg.mu)
        gs.append(g)
        e += g * zj
    if cfg.n == 1:
        return gs[0], e
    return np.array(gs), e / cfg.n


def one_point_estimate(obj: Objective, params, batch, cfg: ZooConfig, seed: int, z=None):
    """``e = z (F(theta + mu z) - F(theta)) / (2 mu)`` -- the biased single-sided form."""
    theta = _as_array(params)
    obj._check(theta)
    zz = np.asarray(z, dtype=np.float64) if z is not None else perturbation(seed, obj.d)
    l0 = _finite_or_raise(obj.loss(theta, batch), theta)
    lp = _finite_or_raise(obj.loss(theta + cfg.mu * zz, batch), theta + cfg.mu * zz)
    g = (lp - l0) / (2.0 * cfg.mu)
    return g, g * zz


def estimates_for_seeds(obj: Objective, theta, batch, mu: float, seeds, one_point=False):
    """Vectorized estimates for many seeds: returns ``(g, Z)`` with ``e_k = g[k] * Z[k]``."""
    theta = np.asarray(theta, dtype=np.float64)
    Z = gaussian_matrix(seeds, obj.d)
    lp = obj.loss_many(theta + mu * Z, batch)
    if one_point:
        lm = np.full_like(lp, obj.loss(theta, batch))
    else:
        lm = obj.loss_many(theta - mu * Z, batch)
    return (lp - lm) / (2.0 * mu), Z


def estimator_second_moment(obj: Objective, params, batch, cfg: ZooConfig, n_samples: int,
                            master_seed: int = 0, chunk: int = 20_000) -> float:
    """Monte-Carlo ``E ||e||^2`` of the two-point estimator (n = 1)."""
    from .rng import derive_seeds

    if n_samples < 1000:
        raise ValueError("use at least 1e3 samples")
    theta = _as_array(params)
    obj._check(theta)
    total = 0.0
    for start in range(0, n_samples, chunk):
        ks = np.arange(start, min(n_samples, start + chunk))
        g, Z = estimates_for_seeds(obj, theta, batch, cfg.mu, derive_seeds(master_seed, 0, 0, ks))
        total += float(np.sum(g * g * np.einsum("ij,ij->i", Z, Z)))
    return total / n_samples


def _axpy_replay(values: np.ndarray, seed: int, scale: float, z, chunk: int) -> None:
    """``values += scale * z(seed)`` regenerating z chunk by chunk (no full-length buffer)."""
    if z is not None:
        values += scale * z
        return
    d = values.size
    for start in range(0, d, chunk):
        blk = gaussian_block(seed, start, min(chunk, d - start))
        blk *= scale
        values[start:start + blk.size] += blk


def mezo_step_inplace(obj: Objective, params: ParamsView, batch, cfg: ZooConfig, lr: float, seed: int,
                      mode=RestoreMode.IN_PLACE, z=None, chunk: int = DEFAULT_CHUNK) -> StepOutcome:
    """One MeZO step that perturbs, evaluates, restores and updates ``params`` in place.

    Phases: (a) theta += mu z, loss_plus; (b) theta -= 2 mu z, loss_minus;
    (c) theta += mu z (or copy-back in snapshot mode); (d) theta -= lr g z.
    z is regenerated from ``seed`` in every phase.
    """
    if lr < 0:
        raise ValueError("learning rate must be non-negative")
    if cfg.n != 1:
        raise ValueError("the in-place step uses a single perturbation")
    if chunk % 2:
        raise ValueError("chunk size must be even")
    mode = RestoreMode(mode)
    vals = params.values
    obj._check(vals)
    if z is not None:
        z = np.asarray(z, dtype=np.float64)
    snap = params.snapshot() if mode is RestoreMode.SNAPSHOT else None
    mu = cfg.mu

    def restore_from(offset):
        # offset is the multiple of mu*z currently added to theta
        if snap is not None:
            params.restore(snap)
        elif offset:
            _axpy_replay(vals, seed, -offset * mu, z, chunk)

    _axpy_replay(vals, seed, mu, z, chunk)
    lp = obj.loss(vals, batch)
    if not math.isfinite(lp):
        norm = float(np.linalg.norm(vals))
        restore_from(1)
        raise NumericalOverflowError(norm, "loss_plus")
    _axpy_replay(vals, seed, -2.0 * mu, z, chunk)
    lm = obj.loss(vals, batch)
    if not math.isfinite(lm):
        norm = float(np.linalg.norm(vals))
        restore_from(-1)
        raise NumericalOverflowError(norm, "loss_minus")
    restore_from(-1)
    g = (lp - lm) / (2.0 * mu)
    if lr != 0.0 and g != 0.0:
        _axpy_replay(vals, seed, -lr * g, z, chunk)
    return StepOutcome(g, lp, lm, seed, lr)


def sgd_step(obj: Objective, params: ParamsView, batch, lr: float) -> float:
    """Backprop baseline: ``theta -= lr * grad F(theta, B)``; returns the pre-step batch loss."""
    loss = obj.loss(params.values, batch)
    if not math.isfinite(loss):
        raise NumericalOverflowError(float(np.linalg.norm(params.values)), "loss")
    g = obj.grad(params.values, batch)
    if not np.all(np.isfinite(g)):
        raise NumericalOverflowError(float(np.linalg.norm(params.values)), "gradient")
    g *= lr
    params.values -= g
    return loss
