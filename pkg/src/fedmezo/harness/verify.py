"""Self-checks against frozen golden values and quick statistical probes."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from importlib import resources

import numpy as np

from ..diagnostics import TheoryInputs, gamma_zeta, iid_rate_bound, lr_bound, noniid_rate_bound, rate_scaling
from ..federation import ClientState, RoundConfig, ServerState, comm_cost, run_round
from ..linalg import ParamsView
from ..objectives import QuadraticObjective, QuadraticSpec, client_offsets, make_client_quadratics, random_curvature
from ..rng import RngRecipe, derive_seed, derive_seeds
from ..zoo import RestoreMode, ZooConfig, estimates_for_seeds, mezo_step_inplace

GOLDEN_RTOL = 1e-12
BOUND_INPUTS = dict(d=100, r=4, n=1, N=4, H=30, T=500, L=1.0, c_g=1.0, sigma_g=0.1, mu=1e-3, f0=1.0, f_star=0.0)


@dataclass
class Check:
    name: str
    passed: bool
    measured: object
    expected: object
    detail: str = ""


def default_goldens() -> dict:
    return json.loads(resources.files("fedmezo").joinpath("goldens.json").read_text())


def _close(a, b, rtol=GOLDEN_RTOL):
    a, b = np.atleast_1d(np.asarray(a, dtype=float)), np.atleast_1d(np.asarray(b, dtype=float))
    return a.shape == b.shape and bool(np.all(np.abs(a - b) <= rtol * np.abs(b)))


def _golden_values() -> dict:
    """Freshly computed counterparts of every golden key."""
    return {
        "derive_seed_42_1_2_3": lambda: derive_seed(RngRecipe(42, 1, 2, 3)),
        "gamma_zeta_10_2_1": lambda: list(gamma_zeta(10, 2, 1)),
        "gamma_zeta_2_1_1": lambda: list(gamma_zeta(2, 1, 1)),
        "lr_bound_30_1_1_100_4": lambda: lr_bound(30, 1, 1, 100, 4),
        "iid_rate_bound": lambda: iid_rate_bound(TheoryInputs(**BOUND_INPUTS), 1e-3),
        "noniid_rate_bound": lambda: noniid_rate_bound(TheoryInputs(**BOUND_INPUTS, c_h=0.5, sigma_h=0.2), 1e-3),
        "rate_scaling_2_4_30_500": lambda: rate_scaling(2, 4, 30, 500),
        "comm_lora_bytes": lambda: comm_cost(42_598_400, 2),
    }


def _golden_checks(goldens):
    out = []
    for key, fn in _golden_values().items():
        got = fn()
        if key not in goldens:
            out.append(Check(f"golden:{key}", False, got, None, "missing from golden file"))
            continue
        want = goldens[key]
        ok = got == want if isinstance(got, int) else _close(got, want)
        out.append(Check(f"golden:{key}", ok, got, want))
    return out


def _identity_check():
    worst = 0.0
    for d, r, n in [(2, 1, 1), (10, 2, 1), (1000, 37.5, 4), (10**6, 3, 16)]:
        g, z = gamma_zeta(d, r, n)
        worst = max(worst, abs(g * z - n / (d + n - 1)) / (n / (d + n - 1)))
    return Check("identity:gamma_zeta_product", worst <= 1e-12, worst, 1e-12)


def _quad_point(d=10, norm=5.0):
    A = random_curvature(d, 0.5, 1.5, seed=8)
    obj = QuadraticObjective(QuadraticSpec(A, np.zeros(d)))
    v = np.linalg.solve(A, np.ones(d))
    return obj, v * norm / np.linalg.norm(A @ v)


def _unbiasedness_check():
    obj, theta = _quad_point()
    g, Z = estimates_for_seeds(obj, theta, None, 1e-3, derive_seeds(1, 0, 0, np.arange(200_000)))
    grad = obj.grad(theta)
    err = float(np.linalg.norm((g[:, None] * Z).mean(axis=0) - grad) / np.linalg.norm(grad))
    return Check("probe:two_point_unbiased", err <= 0.02, err, 0.02)


def _second_moment_check():
    obj, theta = _quad_point()
    g, Z = estimates_for_seeds(obj, theta, None, 1e-3, derive_seeds(2, 0, 0, np.arange(200_000)))
    m = float(np.mean(g ** 2 * np.sum(Z ** 2, axis=1)))
    expected = 12 * 25.0
    return Check("probe:second_moment", abs(m - expected) <= 0.05 * expected, m, expected)


def _replay_check():
    obj, theta = _quad_point(d=64)
    a, b = ParamsView(theta.copy()), ParamsView(theta.copy())
    for s in derive_seeds(3, 0, 0, np.arange(500)):
        mezo_step_inplace(obj, a, None, ZooConfig(1e-3), 0.01, int(s), RestoreMode.IN_PLACE)
        mezo_step_inplace(obj, b, None, ZooConfig(1e-3), 0.01, int(s), RestoreMode.SNAPSHOT)
    worst = float(np.max(np.abs(a.values - b.values) / np.abs(b.values)))
    return Check("probe:inplace_replay", worst <= 1e-9 and a.allocations == 0, worst, 1e-9,
                 f"allocations={a.allocations}")


def _determinism_check():
    def once(order):
        specs = make_client_quadratics(3, 8, 0.5, 0.2, seed=4)
        clients = [ClientState(i, QuadraticObjective(s, client_offsets(16, 8, 0.1, 4, i)), 5e-3)
                   for i, s in enumerate(specs)]
        server = ServerState(ParamsView(np.zeros(8)), 0, 11)
        for _ in range(5):
            run_round(server, clients, RoundConfig(H=4), order=order)
        return server.global_params.values.tobytes()

    same = once(None) == once(None) == once([2, 0, 1])
    return Check("replay:federation_determinism", same, same, True)


def verify(goldens: dict | None = None) -> list[Check]:
    goldens = default_goldens() if goldens is None else goldens
    return _golden_checks(goldens) + [
        _identity_check(),
        _unbiasedness_check(),
        _second_moment_check(),
        _replay_check(),
        _determinism_check(),
    ]


def report(checks) -> dict:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v

    return {
        "passed": all(c.passed for c in checks),
        "checks": [{k: clean(v) for k, v in asdict(c).items()} for c in checks],
    }
