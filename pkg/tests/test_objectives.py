import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedmezo.linalg import ParamsView
from fedmezo.objectives import (
    Dataset,
    DimensionMismatchError,
    InvalidRankError,
    LogRegObjective,
    MlpLoraObjective,
    QuadraticObjective,
    QuadraticSpec,
    client_offsets,
    eval_loss,
    global_quadratic,
    init_lora,
    load_csv_dataset,
    lora_param_count,
    make_classification,
    make_client_quadratics,
    make_mlp_lora_spec,
    random_curvature,
    save_csv_dataset,
    true_grad,
)
from fedmezo.rng import SeedStream

from oracles import central_fd_grad


def unit_quadratic(d=2):
    return QuadraticObjective(QuadraticSpec(np.eye(d), np.zeros(d), 0.0))


@pytest.fixture(scope="module")
def logreg():
    ds = make_classification(200, 6, n_classes=2, seed=1)
    return LogRegObjective(ds, l2=1e-2)


@pytest.fixture(scope="module")
def mlp():
    ds = make_classification(120, 8, n_classes=4, n_tasks=3, seed=2)
    spec = make_mlp_lora_spec((8, 12, 12, 4), rank=4, alpha=8.0, seed=2)
    return MlpLoraObjective(spec, ds)


def test_quadratic_values():
    q = unit_quadratic()
    assert eval_loss(q, np.zeros(2)) == 0.0
    assert eval_loss(q, np.array([3.0, 4.0])) == 12.5
    assert np.array_equal(true_grad(q, np.array([3.0, 4.0])), [3.0, 4.0])
    q2 = QuadraticObjective(QuadraticSpec(np.eye(2), np.array([1.0, -1.0]), 2.5))
    assert eval_loss(q2, ParamsView(np.array([1.0, -1.0]))) == 2.5


def test_quadratic_offsets_keep_the_full_data_optimum():
    spec = QuadraticSpec(random_curvature(5, seed=3), np.ones(5), 1.0)
    q = QuadraticObjective(spec, client_offsets(30, 5, 0.3, seed=3, client=0))
    assert q.loss(np.ones(5)) == pytest.approx(1.0, abs=1e-14)
    assert q.loss(np.ones(5), [4]) == pytest.approx(1.0, abs=1e-14)
    assert not np.allclose(q.grad(np.ones(5), [4]), 0.0)


def test_dimension_mismatch():
    with pytest.raises(DimensionMismatchError):
        eval_loss(unit_quadratic(), np.zeros(3))
    with pytest.raises(DimensionMismatchError):
        true_grad(unit_quadratic(), np.zeros(3))


def test_logreg_uninformative_classifier():
    ds = Dataset(np.array([[1.0, 2.0], [-1.0, 0.5], [0.3, 0.3], [2.0, -1.0]]), [0, 1, 0, 1])
    obj = LogRegObjective(ds, l2=0.5)
    assert eval_loss(obj, np.zeros(2)) == pytest.approx(math.log(2.0), abs=1e-15)


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12)


def test_gradients_match_finite_differences(logreg, mlp):
    quad = QuadraticObjective(
        QuadraticSpec(random_curvature(6, seed=1), np.arange(6.0), 0.3),
        client_offsets(20, 6, 0.5, seed=1, client=0),
    )
    for obj in (quad, logreg, mlp):
        stream = SeedStream(11)
        for probe in range(100):
            theta = stream.gaussian(obj.d) * (0.3 if obj.kind == "mlp-lora" else 1.0)
            n = obj.n_samples
            batch = stream.integers(n, 1 + probe % 4)
            fd = central_fd_grad(lambda x: obj.loss(x, batch), theta, h=1e-5)
            assert _rel(obj.grad(theta, batch), fd) <= 1e-5, (obj.kind, probe)


def test_quadratic_smoothness_is_tight():
    A = random_curvature(8, 0.2, 2.0, seed=4)
    q = QuadraticObjective(QuadraticSpec(A, np.zeros(8)))
    w, v = np.linalg.eigh(A)
    x, y = SeedStream(1).gaussian(8), SeedStream(2).gaussian(8)
    assert np.linalg.norm(q.grad(x) - q.grad(y)) <= q.smoothness() * np.linalg.norm(x - y) + 1e-12
    top = v[:, -1]
    assert np.linalg.norm(q.grad(top) - q.grad(np.zeros(8))) == pytest.approx(q.smoothness(), rel=1e-12)


def test_logreg_smoothness_bound(logreg):
    assert np.linalg.eigvalsh(logreg.hessian(np.zeros(logreg.d))).max() <= logreg.smoothness() + 1e-12


def test_lora_count_and_init(mlp):
    spec = make_mlp_lora_spec((20, 10), rank=4)
    assert spec.trainable_dim == 120
    ds = make_classification(50, 20, n_classes=4, seed=0)
    obj = MlpLoraObjective(spec, ds)
    p = init_lora(spec, seed=5)
    assert len(p) == 120
    assert np.array_equal(p.values, init_lora(spec, seed=5).values)
    assert np.all(p.segment("B0") == 0.0)
    assert obj.loss(p.values, [1, 2, 3]) == obj.base_loss([1, 2, 3])
    # at B = 0 no gradient reaches A
    g = obj.grad(p.values)
    assert np.all(g[obj.layout()[0].slc] == 0.0)
    assert np.any(g[obj.layout()[1].slc] != 0.0)


def test_lora_rank_limits():
    with pytest.raises(InvalidRankError):
        make_mlp_lora_spec((20, 3), rank=4)
    with pytest.raises(InvalidRankError):
        make_mlp_lora_spec((20, 10), rank=0)


def test_lora_count_reproduces_reported_adapter_size():
    # 26 blocks, q and v projections 3200x3200, rank 128
    layers = [(3200, 3200)] * (26 * 2)
    assert lora_param_count(layers, 128) == 42_598_400


@given(st.lists(st.integers(1, 40), min_size=2, max_size=6), st.integers(1, 4))
@settings(max_examples=40, deadline=None)
def test_lora_count_property(dims, rank):
    if rank > min(dims):
        with pytest.raises(InvalidRankError):
            make_mlp_lora_spec(dims, rank=rank)
        return
    spec = make_mlp_lora_spec(dims, rank=rank)
    assert spec.trainable_dim == sum(rank * (a + b) for a, b in zip(dims[:-1], dims[1:]))
    assert len(init_lora(spec, 0)) == spec.trainable_dim


def test_eval_is_bit_stable(mlp):
    theta = SeedStream(3).gaussian(mlp.d)
    assert mlp.loss(theta, [0, 5]) == mlp.loss(theta.copy(), [0, 5])


def test_client_quadratics_iid_limit():
    specs = make_client_quadratics(3, 4, 0.0, 0.0, seed=1)
    for s in specs[1:]:
        assert np.array_equal(s.A, specs[0].A)
        assert np.array_equal(s.theta_star, specs[0].theta_star)


def test_global_quadratic_two_clients():
    specs = [QuadraticSpec([[1.0]], [1.0]), QuadraticSpec([[1.0]], [-1.0])]
    g = global_quadratic(specs)
    assert g.theta_star[0] == 0.0
    f0 = np.mean([QuadraticObjective(s).loss(np.zeros(1)) for s in specs])
    assert f0 == 0.5
    assert g.c == 0.5


def test_global_quadratic_matches_mean_of_clients():
    specs = make_client_quadratics(4, 5, 0.7, 0.4, seed=2)
    g = QuadraticObjective(global_quadratic(specs))
    clients = [QuadraticObjective(s) for s in specs]
    x = SeedStream(9).gaussian(5)
    assert g.loss(x) == pytest.approx(np.mean([c.loss(x) for c in clients]), rel=1e-12)
    assert np.allclose(np.mean([c.grad(g.spec.theta_star) for c in clients], axis=0), 0.0, atol=1e-12)


def test_curvature_spread_outside_range_rejected():
    with pytest.raises(ValueError):
        make_client_quadratics(3, 2, 0.0, 1.5, seed=0)
    with pytest.raises(ValueError):
        make_client_quadratics(3, 2, 0.0, -0.1, seed=0)


def test_csv_roundtrip(tmp_path):
    ds = make_classification(30, 3, n_classes=2, n_tasks=3, seed=4)
    path = tmp_path / "data.csv"
    save_csv_dataset(ds, path)
    back = load_csv_dataset(path)
    assert np.array_equal(back.features, ds.features)
    assert np.array_equal(back.labels, ds.labels)
    assert np.array_equal(back.task, ds.task)


def test_csv_without_label_rejected(tmp_path):
    path = tmp_path / "bad.csv"
    path.write_text("a,b\n1,2\n")
    with pytest.raises(ValueError, match="label"):
        load_csv_dataset(path)
