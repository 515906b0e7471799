import json
import math
from fractions import Fraction
from importlib import resources

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmezo.diagnostics import (
    InvalidRegimeError,
    TheoryInputs,
    UndefinedRankError,
    effective_rank,
    estimate_cg_sigma,
    gamma_zeta,
    hessian_of,
    iid_rate_bound,
    lr_bound,
    lr_bound_branches,
    noniid_rate_bound,
    rate_scaling,
    theory_constants,
)
from fedmezo.objectives import (
    LogRegObjective,
    QuadraticObjective,
    QuadraticSpec,
    client_offsets,
    make_classification,
    random_curvature,
)
from fedmezo.rng import SeedStream

from oracles import frac_gamma_zeta, frac_iid_bound, frac_noniid_bound, jacobi_eigh

GOLDENS = json.loads(resources.files("fedmezo").joinpath("goldens.json").read_text())
IID = dict(d=100, r=4, n=1, N=4, H=30, T=500, L=1.0, sigma_g=0.1, mu=1e-3, f0=1.0, f_star=0.0)
ETA = 1e-3


def rel(a, b):
    return abs(a - b) / abs(b)


def test_gamma_zeta_examples():
    g, z = gamma_zeta(10, 2, 1)
    assert rel(g, 28 / 12) < 1e-12 and rel(z, 12 / 280) < 1e-12
    assert gamma_zeta(2, 1, 1) == (0.5, 1.0)
    for key, args in [("gamma_zeta_10_2_1", (10, 2, 1)), ("gamma_zeta_2_1_1", (2, 1, 1))]:
        assert all(rel(a, b) < 1e-12 for a, b in zip(gamma_zeta(*args), GOLDENS[key]))


@given(st.integers(2, 10**5), st.floats(1, 1e4), st.integers(1, 64))
def test_gamma_zeta_product_identity(d, r, n):
    g, z = gamma_zeta(d, r, n)
    assert rel(g * z, n / (d + n - 1)) < 1e-12


@given(st.integers(2, 500), st.integers(1, 50), st.integers(1, 8))
def test_gamma_zeta_against_exact_rationals(d, r, n):
    fg, fz = frac_gamma_zeta(d, r, n)
    g, z = gamma_zeta(d, r, n)
    assert rel(g, float(fg)) < 1e-12 and rel(z, float(fz)) < 1e-12


def test_gamma_zeta_rejects_bad_inputs():
    for args in [(1, 1, 1), (5, 0.5, 1), (5, 1, 0)]:
        with pytest.raises(ValueError):
            gamma_zeta(*args)


def test_constants_structure():
    k = theory_constants(TheoryInputs(**IID, c_h=0.5, sigma_h=0.2, c_g=2.0))
    assert k.c_h_tilde == 4.5
    assert k.sigma_tilde_sq == pytest.approx(3 * 2.0 * 0.04 + 0.01)
    assert k.Gamma == pytest.approx((100 - k.zeta * k.gamma) / (100 * k.gamma))
    assert k.Gamma_simplified == 1 / k.gamma


def test_lr_bound_example_and_golden():
    assert lr_bound(30, 1, 1, 100, 4) == pytest.approx(1 / 900, rel=1e-12)
    assert rel(lr_bound(30, 1, 1, 100, 4), GOLDENS["lr_bound_30_1_1_100_4"]) < 1e-12
    assert lr_bound(30, 1, 1, 100, 4) == min(lr_bound_branches(30, 1, 1, 100, 4))


@given(st.integers(1, 100), st.floats(0.01, 100), st.floats(1, 10), st.integers(2, 10**6), st.integers(1, 100))
def test_lr_bound_monotone_in_d_and_H(H, L, c_g, d, N):
    base = lr_bound(H, L, c_g, d, N)
    assert lr_bound(H, L, c_g, 2 * d, N) <= base
    assert lr_bound(H + 1, L, c_g, d, N) <= base


def test_lr_bound_tracks_inverse_sqrt_d():
    # H = 1/3 removes the other constants from the first branch
    for d in [10**2, 10**4, 10**6]:
        assert lr_bound(1 / 3, 1.0, 1.0, d, 10**6) * math.sqrt(d) == pytest.approx(1.0, rel=1e-12)


def test_lr_bound_rejects_non_positive():
    with pytest.raises(ValueError):
        lr_bound(0, 1, 1, 10, 1)


def test_iid_bound_golden_and_oracle():
    v = iid_rate_bound(TheoryInputs(**IID), ETA)
    assert rel(v, GOLDENS["iid_rate_bound"]) < 1e-12
    exact = frac_iid_bound(100, 4, 1, 4, 30, 500, 1, Fraction("0.1"), Fraction("0.001"), 1, Fraction("0.001"))
    assert rel(v, float(exact)) < 1e-12


def test_iid_bound_structure():
    inp = TheoryInputs(**IID)
    k = theory_constants(inp)
    floor = (0.01 * k.zeta / (4 * 30 * 100 * k.Gamma)) + k.zeta * 1e-6 / (4 * 4 * 30 * k.Gamma)
    first = iid_rate_bound(inp, ETA) - floor
    doubled = TheoryInputs(**{**IID, "T": 1000})
    assert iid_rate_bound(doubled, ETA) - floor == pytest.approx(first / 2, rel=1e-10)
    huge = TheoryInputs(**{**IID, "T": 10**20})
    assert iid_rate_bound(huge, ETA) == pytest.approx(floor, rel=1e-6)


def test_noniid_bound_golden_and_oracle():
    inp = TheoryInputs(**IID, c_h=0.5, sigma_h=0.2)
    v = noniid_rate_bound(inp, ETA)
    assert rel(v, GOLDENS["noniid_rate_bound"]) < 1e-12
    exact = frac_noniid_bound(100, 4, 1, 4, 30, 500, 1, 1, Fraction("0.1"), Fraction("0.5"), Fraction("0.2"),
                              Fraction("0.001"), 1, Fraction("0.001"))
    assert rel(v, float(exact)) < 1e-12


def test_noniid_bound_decreases_with_sigma_h():
    vals = [noniid_rate_bound(TheoryInputs(**IID, c_h=0.5, sigma_h=s), ETA) for s in (0.0, 0.1, 0.2, 0.4)]
    assert all(b < a for a, b in zip(vals, vals[1:]))


def test_invalid_regime():
    # d = 2, r = 1: Gamma = (2 - 1/(2+1-1)... ) stays positive; large N drives Gamma_tilde negative
    inp = TheoryInputs(d=2, r=1, n=1, N=8)
    with pytest.raises(InvalidRegimeError):
        noniid_rate_bound(inp, 1e-3)


def test_theory_inputs_validation():
    with pytest.raises(ValueError):
        TheoryInputs(d=10, r=1, c_g=0.5)
    with pytest.raises(ValueError):
        TheoryInputs(d=10, r=1, f0=0.0, f_star=1.0)


def test_rate_scaling():
    assert rel(rate_scaling(2, 4, 30, 500), GOLDENS["rate_scaling_2_4_30_500"]) < 1e-12
    assert rel(rate_scaling(2, 4, 30, 500), 2 ** 1.5 / math.sqrt(60000)) < 1e-12
    assert rate_scaling(2, 4, 30, 2000) == pytest.approx(rate_scaling(2, 4, 30, 500) / 2, rel=1e-12)
    assert rate_scaling(8, 4, 30, 500) == pytest.approx(8 * rate_scaling(2, 4, 30, 500), rel=1e-12)
    assert rate_scaling(2, 4, 30, 500, c_h_tilde=4.0) == pytest.approx(rate_scaling(2, 4, 30, 500) / 2)


# ---------------------------------------------------------------- measurements


def test_effective_rank_simple():
    assert effective_rank(np.eye(5)) == 5.0
    assert effective_rank(np.diag([1.0, 0.0, 0.0])) == 1.0
    with pytest.raises(UndefinedRankError):
        effective_rank(np.zeros((3, 3)))


@pytest.mark.parametrize("n", [2, 5, 8, 12, 16])
def test_effective_rank_matches_eigensolver(n):
    g = SeedStream(n).gaussian(n * n).reshape(n, n)
    m = g @ g.T
    w, _ = jacobi_eigh(m)
    expected = w.sum() / w.max()
    r = effective_rank(m)
    assert abs(r - expected) <= 1e-6 * expected
    assert 1 <= r <= n


def test_hessian_of_quadratic_and_logreg():
    A = random_curvature(6, seed=1)
    assert np.array_equal(hessian_of(QuadraticObjective(QuadraticSpec(A, np.zeros(6))), np.zeros(6)), A)
    ds = make_classification(300, 5, seed=3)
    obj = LogRegObjective(ds, l2=0.05)
    h = hessian_of(obj, np.zeros(5))
    X = ds.features
    analytic = 0.25 * X.T @ X / len(ds) + 0.05 * np.eye(5)
    assert np.max(np.abs(h - analytic)) <= 1e-4
    assert np.array_equal(h, h.T)


def test_hessian_refuses_large_dims():
    obj = QuadraticObjective(QuadraticSpec(np.eye(300), np.zeros(300)))
    with pytest.raises(ValueError):
        hessian_of(obj, np.zeros(300))


def _noisy_quadratic(n=40, d=4, noise=0.5):
    A = random_curvature(d, 0.5, 1.5, seed=6)
    return QuadraticObjective(QuadraticSpec(A, np.zeros(d)), client_offsets(n, d, noise, 6, 0))


def test_cg_sigma_full_batch():
    obj = _noisy_quadratic()
    c_g, s2 = estimate_cg_sigma(obj, batch_size=obj.n_samples)
    assert c_g == pytest.approx(1.0, abs=1e-9)
    assert s2 <= 1e-9


def test_cg_sigma_matches_exhaustive_enumeration():
    obj = _noisy_quadratic()
    c_g, s2 = estimate_cg_sigma(obj, batch_size=1, n_batches=4000, seed=1)
    # oracle: mean over every single-sample batch, regressed over fresh probe points
    rng = np.random.default_rng(0)
    xs, ys = [], []
    for _ in range(60):
        th = rng.normal(size=obj.d)
        g = obj.grad(th)
        xs.append(g @ g)
        ys.append(np.mean([np.sum(obj.grad(th, [j]) ** 2) for j in range(obj.n_samples)]))
    slope, icept = np.polyfit(xs, ys, 1)
    slope = max(slope, 1.0)
    if slope == 1.0:
        icept = np.mean(np.array(ys) - np.array(xs))
    assert c_g == pytest.approx(slope, rel=0.1)
    assert s2 == pytest.approx(icept, rel=0.1)


def test_cg_sigma_grows_as_batches_shrink():
    obj = _noisy_quadratic(n=48)
    s = [estimate_cg_sigma(obj, batch_size=b, n_batches=3000, seed=2)[1] for b in (16, 4, 1)]
    assert s[0] <= s[1] <= s[2]


def test_cg_sigma_needs_probes():
    with pytest.raises(ValueError):
        estimate_cg_sigma(_noisy_quadratic(), probes=5)
