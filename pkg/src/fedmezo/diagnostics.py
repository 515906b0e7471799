"""Convergence-theory calculators and estimators for the constants they consume.

Notation: ``d`` parameters, effective Hessian rank ``r``, ``n`` perturbations
per step, ``N`` clients, ``H`` local steps, ``T`` rounds, smoothness ``L``,
mini-batch constants ``(c_g, sigma_g)``, heterogeneity constants
``(c_h, sigma_h)`` and perturbation scale ``mu``.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .linalg import is_symmetric, operator_norm
from .rng import PURPOSE_BATCH, PURPOSE_PROBE, RngRecipe, SeedStream, derive_seed

MAX_DENSE_DIM = 256


class InvalidRegimeError(ValueError):
    pass


class UndefinedRankError(ValueError):
    pass


@dataclass(frozen=True)
class TheoryInputs:
    d: int
    r: float
    n: int = 1
    N: int = 1
    H: int = 1
    T: int = 1
    L: float = 1.0
    c_g: float = 1.0
    sigma_g: float = 0.0
    c_h: float = 0.0
    sigma_h: float = 0.0
    mu: float = 1e-3
    f0: float = 1.0
    f_star: float = 0.0

    def __post_init__(self):
        if self.d < 2 or self.r < 1 or self.n < 1:
            raise ValueError("need d >= 2, r >= 1, n >= 1")
        if min(self.N, self.H, self.T) < 1:
            raise ValueError("N, H, T must be >= 1")
        if not self.L > 0:
            raise ValueError("L must be positive")
        if self.c_g < 1:
            raise ValueError("c_g must be >= 1")
        if self.f0 < self.f_star:
            raise ValueError("f0 must be >= f_star")


@dataclass(frozen=True)
class TheoryConstants:
    gamma: float
    zeta: float
    Gamma: float
    Gamma_tilde: float
    c_h_tilde: float
    sigma_tilde_sq: float
    # the large-d simplifications 1/gamma, reported for comparison
    Gamma_simplified: float
    Gamma_tilde_simplified: float

    def as_dict(self):
        return asdict(self)


def gamma_zeta(d, r, n=1) -> tuple[float, float]:
    if d < 2 or r < 1 or n < 1:
        raise ValueError("need d >= 2, r >= 1, n >= 1")
    a = d * r + d - 2
    if a <= 0:
        raise ValueError("d*r + d - 2 must be positive")
    gamma = a / (n * (d + 2))
    zeta = (d + 2) * n * n / (a * (d + n - 1))
    return gamma, zeta


def theory_constants(inp: TheoryInputs) -> TheoryConstants:
    gamma, zeta = gamma_zeta(inp.d, inp.r, inp.n)
    d, N = inp.d, inp.N
    return TheoryConstants(
        gamma=gamma,
        zeta=zeta,
        Gamma=(d - zeta * gamma) / (d * gamma),
        Gamma_tilde=(d - N * gamma * zeta) / (d * gamma * N),
        c_h_tilde=inp.c_h + N,
        sigma_tilde_sq=3.0 * inp.c_g * inp.sigma_h ** 2 + inp.sigma_g ** 2,
        Gamma_simplified=1.0 / gamma,
        Gamma_tilde_simplified=1.0 / (gamma * N),
    )


def lr_bound_branches(H, L, c_g, d, N) -> tuple[float, float, float]:
    if min(H, L, c_g, d, N) <= 0:
        raise ValueError("all inputs must be positive")
    return (
        1.0 / (3.0 * H * L * math.sqrt(c_g * d)),
        N / (3.0 * H * L * c_g),
        1.0 / (H * H),
    )


def lr_bound(H, L, c_g, d, N) -> float:
    """Largest learning rate for which stepwise descent is guaranteed."""
    return min(lr_bound_branches(H, L, c_g, d, N))


def iid_rate_bound(inp: TheoryInputs, eta: float) -> float:
    """Upper bound on ``min_t E||grad f(theta_t)||^2`` for i.i.d. clients."""
    k = theory_constants(inp)
    if k.Gamma <= 0:
        raise InvalidRegimeError(f"Gamma = {k.Gamma} <= 0")
    L = inp.L
    return (
        (inp.f0 - inp.f_star) / (2.0 * eta * inp.T * k.Gamma)
        + inp.sigma_g ** 2 * k.zeta * L / (inp.N * inp.H * inp.d * k.Gamma)
        + k.zeta * inp.mu ** 2 * L ** 3 / (4.0 * inp.N * inp.H * k.Gamma)
    )


def noniid_rate_bound(inp: TheoryInputs, eta: float) -> float:
    k = theory_constants(inp)
    if k.Gamma_tilde <= 0:
        raise InvalidRegimeError(f"Gamma_tilde = {k.Gamma_tilde} <= 0")
    L, N, H = inp.L, inp.N, inp.H
    den = k.Gamma_tilde * k.c_h_tilde
    return (
        (inp.f0 - inp.f_star) / (2.0 * den * eta * inp.T)
        + k.sigma_tilde_sq * k.zeta * L / (den * N * H * inp.d)
        + k.zeta * inp.mu ** 2 * L ** 3 / (4.0 * den * N * H)
        - inp.sigma_h ** 2 / (den * k.gamma * N)
    )


def rate_scaling(r, N, H, T, c_h_tilde=None) -> float:
    """Dominant convergence-rate term ``r^1.5 (c N H T)^-0.5`` (``c = 1`` for i.i.d.)."""
    if min(r, N, H, T) <= 0 or (c_h_tilde is not None and c_h_tilde <= 0):
        raise ValueError("inputs must be positive")
    c = 1.0 if c_h_tilde is None else c_h_tilde
    return r ** 1.5 / math.sqrt(c * N * H * T)


# -------------------------------------------------------------- measured quantities


def effective_rank(h) -> float:
    """``trace(H) / ||H||_op`` with the operator norm from power iteration."""
    h = np.asarray(h, dtype=np.float64)
    if not is_symmetric(h, atol=1e-12 * max(1.0, float(np.abs(h).max(initial=0.0)))):
        raise ValueError("effective rank needs a symmetric matrix")
    if not np.any(h):
        raise UndefinedRankError("effective rank of the zero matrix is undefined")
    return float(np.trace(h)) / operator_norm(h, tol=1e-12, max_iters=200_000)


def hessian_of(obj, params, h: float = 1e-4) -> np.ndarray:
    """Dense Hessian: exact for quadratics, else symmetrized central differences of the gradient."""
    theta = np.asarray(getattr(params, "values", params), dtype=np.float64)
    d = theta.size
    if d > MAX_DENSE_DIM:
        raise ValueError(f"dense Hessian refused for d = {d} > {MAX_DENSE_DIM}")
    if obj.kind == "quadratic":
        return obj.hessian()
    m = np.empty((d, d))
    work = theta.copy()
    for j in range(d):
        work[j] = theta[j] + h
        gp = obj.grad(work, None)
        work[j] = theta[j] - h
        gm = obj.grad(work, None)
        work[j] = theta[j]
        m[:, j] = (gp - gm) / (2.0 * h)
    return 0.5 * (m + m.T)


def estimate_smoothness(obj, params) -> float:
    return operator_norm(hessian_of(obj, params), tol=1e-10, max_iters=200_000)


def estimate_cg_sigma(obj, probes: int = 20, batch_size: int = 1, n_batches: int = 4000,
                      center=None, radius: float = 1.0, seed: int = 0) -> tuple[float, float]:
    """Fit ``E_B ||grad F(theta, B)||^2 = c_g ||grad f(theta)||^2 + sigma_g^2``.

    Batches are drawn uniformly with replacement; ``batch_size >= n_samples``
    means the whole shard (no stochasticity).  ``c_g`` is clamped at 1, in
    which case ``sigma_g^2`` is refitted with unit slope.
    """
    if probes < 20:
        raise ValueError("use at least 20 probe points")
    n = obj.n_samples
    center = np.zeros(obj.d) if center is None else np.asarray(center, dtype=np.float64)
    full = n == 0 or batch_size >= n
    xs, ys = [], []
    for p in range(probes):
        theta = center + radius * SeedStream(derive_seed(RngRecipe(seed, k=p, purpose=PURPOSE_PROBE))).gaussian(obj.d)
        g = obj.grad(theta, None)
        xs.append(float(g @ g))
        if full:
            ys.append(float(g @ g))
            continue
        st = SeedStream(derive_seed(RngRecipe(seed, k=p, purpose=PURPOSE_BATCH)))
        idx = st.integers(n, n_batches * batch_size).reshape(n_batches, batch_size)
        acc = 0.0
        for b in idx:
            gb = obj.grad(theta, b)
            acc += float(gb @ gb)
        ys.append(acc / n_batches)
    xs, ys = np.array(xs), np.array(ys)
    if np.ptp(xs) <= 1e-14 * max(1.0, np.max(xs)):
        raise ValueError("probe gradients do not vary; cannot fit c_g")
    design = np.column_stack([xs, np.ones_like(xs)])
    (c_g, s2), *_ = np.linalg.lstsq(design, ys, rcond=None)
    if c_g < 1.0:
        c_g, s2 = 1.0, float(np.mean(ys - xs))
    return float(c_g), max(float(s2), 0.0)
