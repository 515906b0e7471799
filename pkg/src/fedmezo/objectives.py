"""Desk-scale losses standing in for LLM fine-tuning.

Each objective exposes ``loss`` (all that the zeroth-order path ever uses)
and ``grad``, an exact gradient kept for verification and for the
backprop baseline.  A batch is an integer index array into the objective's
samples; ``None`` means the whole local dataset.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .linalg import ParamsView, Segment, operator_norm
from .rng import PURPOSE_INIT, RngRecipe, SeedStream, derive_seed


class DimensionMismatchError(ValueError):
    pass


class InvalidRankError(ValueError):
    pass


# --------------------------------------------------------------------------- data


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    task: np.ndarray | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim == 1:
            self.features = self.features.reshape(-1, 1)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.shape[0] != self.labels.shape[0]:
            raise ValueError("features and labels disagree on sample count")
        if self.task is not None:
            self.task = np.asarray(self.task, dtype=np.int64)
            if self.task.shape[0] != self.labels.shape[0]:
                raise ValueError("task tags and labels disagree on sample count")

    def __len__(self):
        return self.labels.shape[0]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(
            self.features[idx],
            self.labels[idx],
            None if self.task is None else self.task[idx],
        )


def load_csv_dataset(path) -> Dataset:
    """Read a header-row CSV: float feature columns, an integer ``label`` column, optional ``task``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader)]
        rows = [r for r in reader if r]
    if "label" not in header:
        raise ValueError(f"{path}: missing 'label' column")
    li = header.index("label")
    ti = header.index("task") if "task" in header else None
    fcols = [j for j in range(len(header)) if j not in (li, ti)]
    if not fcols:
        raise ValueError(f"{path}: no feature columns")
    feats = np.array([[float(r[j]) for j in fcols] for r in rows], dtype=np.float64)
    labels = np.array([int(r[li]) for r in rows], dtype=np.int64)
    task = None if ti is None else np.array([int(r[ti]) for r in rows], dtype=np.int64)
    return Dataset(feats.reshape(len(rows), len(fcols)), labels, task)


def save_csv_dataset(ds: Dataset, path) -> None:
    nf = ds.features.shape[1]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"x{j}" for j in range(nf)] + ["label"] + (["task"] if ds.task is not None else []))
        for s in range(len(ds)):
            row = [repr(float(v)) for v in ds.features[s]] + [int(ds.labels[s])]
            if ds.task is not None:
                row.append(int(ds.task[s]))
            w.writerow(row)


def make_classification(n, n_features, n_classes=2, n_tasks=1, seed=0, separation=1.5, standardize=True) -> Dataset:
    """Gaussian blobs; each task tag also shifts its samples so a meta split is genuinely non-i.i.d."""
    st = SeedStream(derive_seed(RngRecipe(seed, purpose=PURPOSE_INIT, k=101)))
    means = separation * st.gaussian(n_classes * n_features).reshape(n_classes, n_features)
    task_shift = 0.75 * st.gaussian(max(n_tasks, 1) * n_features).reshape(max(n_tasks, 1), n_features)
    labels = st.integers(n_classes, n)
    task = st.integers(n_tasks, n) if n_tasks > 1 else None
    x = st.gaussian(n * n_features).reshape(n, n_features) + means[labels]
    if task is not None:
        x += task_shift[task]
    if standardize:
        x = (x - x.mean(axis=0)) / x.std(axis=0)
    return Dataset(x, labels, task)


# --------------------------------------------------------------------- objectives


def _as_array(params) -> np.ndarray:
    return params.values if isinstance(params, ParamsView) else np.asarray(params, dtype=np.float64)


class Objective:
    kind = "abstract"
    d: int
    n_samples: int = 0

    def _check(self, theta):
        if theta.shape != (self.d,):
            raise DimensionMismatchError(f"expected {self.d} parameters, got shape {theta.shape}")

    def loss(self, theta, batch=None) -> float:
        raise NotImplementedError

    def grad(self, theta, batch=None) -> np.ndarray:
        raise NotImplementedError

    def loss_many(self, thetas, batch=None) -> np.ndarray:
        thetas = np.atleast_2d(thetas)
        return np.array([self.loss(th, batch) for th in thetas])

    def smoothness(self) -> float:
        raise NotImplementedError

    def layout(self) -> tuple[Segment, ...]:
        return (Segment("weights", slice(0, self.d)),)


def eval_loss(obj: Objective, params, batch=None) -> float:
    theta = _as_array(params)
    obj._check(theta)
    return obj.loss(theta, batch)


def true_grad(obj: Objective, params, batch=None) -> np.ndarray:
    theta = _as_array(params)
    obj._check(theta)
    return obj.grad(theta, batch)


@dataclass
class QuadraticSpec:
    A: np.ndarray
    theta_star: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=np.float64))
        self.theta_star = np.atleast_1d(np.asarray(self.theta_star, dtype=np.float64))
        if self.A.shape != (self.theta_star.size, self.theta_star.size):
            raise ValueError("curvature and optimum disagree on dimension")
        if not np.array_equal(self.A, self.A.T):
            raise ValueError("curvature must be exactly symmetric")
        if np.linalg.eigvalsh(self.A).min() < -1e-12 * max(1.0, np.abs(self.A).max()):
            raise ValueError("curvature must be positive semidefinite")

    @property
    def L(self) -> float:
        return float(np.linalg.eigvalsh(self.A).max())


class QuadraticObjective(Objective):
    """``F(theta, B) = c + 1/2 d^T A d - mean_{s in B} u_s^T A d`` with ``d = theta - theta_star``.

    With zero-mean offsets ``u_s`` the full-data loss is the plain quadratic,
    so ``f* = c`` at ``theta_star`` while single-sample losses stay noisy.
    """

    kind = "quadratic"

    def __init__(self, spec: QuadraticSpec, offsets=None):
        self.spec = spec
        self.d = spec.theta_star.size
        self.offsets = None if offsets is None else np.asarray(offsets, dtype=np.float64).reshape(-1, self.d)
        self.n_samples = 0 if self.offsets is None else self.offsets.shape[0]

    def _ubar(self, batch):
        if self.offsets is None:
            return None
        u = self.offsets if batch is None else self.offsets[np.asarray(batch)]
        return u.mean(axis=0)

    def loss(self, theta, batch=None):
        A = self.spec.A
        delta = theta - self.spec.theta_star
        val = self.spec.c + 0.5 * float(delta @ (A @ delta))
        ub = self._ubar(batch)
        if ub is not None:
            val -= float(ub @ (A @ delta))
        return val

    def loss_many(self, thetas, batch=None):
        A = self.spec.A
        D = np.atleast_2d(thetas) - self.spec.theta_star
        out = self.spec.c + 0.5 * np.einsum("ij,ij->i", D @ A, D)
        ub = self._ubar(batch)
        if ub is not None:
            out -= D @ (A @ ub)
        return out

    def grad(self, theta, batch=None):
        delta = theta - self.spec.theta_star
        ub = self._ubar(batch)
        if ub is not None:
            delta = delta - ub
        return self.spec.A @ delta

    def hessian(self):
        return self.spec.A.copy()

    def smoothness(self):
        return self.spec.L


class LogRegObjective(Objective):
    """Binary logistic loss (labels 0/1, no intercept) plus ``l2/2 * ||w||^2``."""

    kind = "logreg"

    def __init__(self, data: Dataset, l2: float = 0.0):
        if l2 < 0:
            raise ValueError("l2 must be non-negative")
        labels = np.unique(data.labels)
        if not np.all(np.isin(labels, (0, 1))):
            raise ValueError("logistic regression needs 0/1 labels")
        self.X = data.features
        self.s = 2.0 * data.labels - 1.0
        self.l2 = float(l2)
        self.d = self.X.shape[1]
        self.n_samples = self.X.shape[0]

    def _xs(self, batch):
        if batch is None:
            return self.X, self.s
        b = np.asarray(batch)
        return self.X[b], self.s[b]

    def loss(self, theta, batch=None):
        X, s = self._xs(batch)
        m = s * (X @ theta)
        return float(np.mean(np.logaddexp(0.0, -m)) + 0.5 * self.l2 * (theta @ theta))

    def loss_many(self, thetas, batch=None):
        X, s = self._xs(batch)
        T = np.atleast_2d(thetas)
        M = (T @ X.T) * s
        return np.logaddexp(0.0, -M).mean(axis=1) + 0.5 * self.l2 * np.einsum("ij,ij->i", T, T)

    def grad(self, theta, batch=None):
        X, s = self._xs(batch)
        m = s * (X @ theta)
        w = -s * 0.5 * (1.0 - np.tanh(0.5 * m))  # -s * sigmoid(-m), overflow-safe
        return X.T @ w / X.shape[0] + self.l2 * theta

    def hessian(self, theta):
        p = 0.5 * (1.0 + np.tanh(0.5 * (self.X @ theta)))
        return (self.X.T * (p * (1 - p))) @ self.X / self.n_samples + self.l2 * np.eye(self.d)

    def smoothness(self):
        return operator_norm(self.X.T @ self.X) / (4.0 * self.n_samples) + self.l2


# ---------------------------------------------------------------------- MLP + LoRA


@dataclass
class MlpLoraSpec:
    dims: tuple[int, ...]
    rank: int = 4
    alpha: float = 8.0
    base_weights: list = field(default_factory=list)
    base_biases: list = field(default_factory=list)

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    @property
    def trainable_dim(self) -> int:
        return lora_param_count(list(zip(self.dims[:-1], self.dims[1:])), self.rank)


def lora_param_count(layers, rank: int) -> int:
    """Adapter parameters for linear layers given as ``(d_in, d_out)`` pairs."""
    return sum(rank * (din + dout) for din, dout in layers)


def make_mlp_lora_spec(dims, rank=4, alpha=8.0, seed=0) -> MlpLoraSpec:
    dims = tuple(int(x) for x in dims)
    if len(dims) < 2:
        raise ValueError("need at least one linear layer")
    if rank < 1:
        raise InvalidRankError("adapter rank must be >= 1")
    for din, dout in zip(dims[:-1], dims[1:]):
        if rank > min(din, dout):
            raise InvalidRankError(f"rank {rank} exceeds min({din}, {dout})")
    st = SeedStream(derive_seed(RngRecipe(seed, purpose=PURPOSE_INIT, k=202)))
    ws, bs = [], []
    for din, dout in zip(dims[:-1], dims[1:]):
        ws.append(st.gaussian(din * dout).reshape(dout, din) / np.sqrt(din))
        bs.append(0.1 * st.gaussian(dout))
    return MlpLoraSpec(dims, rank, float(alpha), ws, bs)


class MlpLoraObjective(Objective):
    """tanh MLP with frozen base weights; only the LoRA factors are trainable.

    Layer ``l`` uses ``W = W0 + s * B @ A`` with ``A`` (rank x d_in) and
    ``B`` (d_out x rank).  Trainable vector layout is ``[A_0, B_0, A_1, B_1, ...]``.
    """

    kind = "mlp-lora"

    def __init__(self, spec: MlpLoraSpec, data: Dataset):
        if data.features.shape[1] != spec.dims[0]:
            raise DimensionMismatchError("feature width does not match the input layer")
        if data.labels.max(initial=0) >= spec.dims[-1]:
            raise ValueError("label outside the output layer")
        self.spec = spec
        self.X = data.features
        self.y = data.labels
        self.n_samples = self.X.shape[0]
        self.d = spec.trainable_dim
        segs, off = [], 0
        r = spec.rank
        for li, (din, dout) in enumerate(zip(spec.dims[:-1], spec.dims[1:])):
            segs.append(Segment(f"A{li}", slice(off, off + r * din), "adapter"))
            off += r * din
            segs.append(Segment(f"B{li}", slice(off, off + dout * r), "adapter"))
            off += dout * r
        self._segments = tuple(segs)

    def layout(self):
        return self._segments

    def _factors(self, theta):
        r = self.spec.rank
        out = []
        for li, (din, dout) in enumerate(zip(self.spec.dims[:-1], self.spec.dims[1:])):
            a = theta[self._segments[2 * li].slc].reshape(r, din)
            b = theta[self._segments[2 * li + 1].slc].reshape(dout, r)
            out.append((a, b))
        return out

    def _forward(self, theta, batch):
        X = self.X if batch is None else self.X[np.asarray(batch)]
        y = self.y if batch is None else self.y[np.asarray(batch)]
        s = self.spec.scale
        acts = [X]
        facs = self._factors(theta)
        nl = len(facs)
        h = X
        for li, (a, b) in enumerate(facs):
            W = self.spec.base_weights[li] + s * (b @ a)
            z = h @ W.T + self.spec.base_biases[li]
            h = np.tanh(z) if li < nl - 1 else z
            acts.append(h)
        return acts, y, facs

    @staticmethod
    def _xent(logits, y):
        zmax = logits.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        return lse - logits[np.arange(y.size), y]

    def loss(self, theta, batch=None):
        acts, y, _ = self._forward(theta, batch)
        return float(np.mean(self._xent(acts[-1], y)))

    def base_loss(self, batch=None):
        """Loss of the frozen base network (adapters absent)."""
        return self.loss(np.zeros(self.d), batch)

    def grad(self, theta, batch=None):
        acts, y, facs = self._forward(theta, batch)
        s = self.spec.scale
        n = y.size
        logits = acts[-1]
        p = np.exp(logits - logits.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        delta = p
        delta[np.arange(n), y] -= 1.0
        delta /= n
        g = np.empty(self.d)
        for li in range(len(facs) - 1, -1, -1):
            a, b = facs[li]
            G = delta.T @ acts[li]  # dL/dW, (d_out, d_in)
            g[self._segments[2 * li].slc] = (s * (b.T @ G)).ravel()
            g[self._segments[2 * li + 1].slc] = (s * (G @ a.T)).ravel()
            if li > 0:
                W = self.spec.base_weights[li] + s * (b @ a)
                delta = (delta @ W) * (1.0 - acts[li] ** 2)
        return g

    def full_vector(self, theta) -> np.ndarray:
        """Frozen base parameters followed by the trainable adapters."""
        parts = [w.ravel() for w in self.spec.base_weights] + [b.ravel() for b in self.spec.base_biases]
        return np.concatenate(parts + [np.asarray(theta, dtype=np.float64)])

    def trainable_mask(self) -> np.ndarray:
        nfrozen = sum(w.size for w in self.spec.base_weights) + sum(b.size for b in self.spec.base_biases)
        mask = np.zeros(nfrozen + self.d, dtype=bool)
        mask[nfrozen:] = True
        return mask

    def smoothness(self, theta=None):
        from .diagnostics import hessian_of

        theta = np.zeros(self.d) if theta is None else theta
        # adapter Hessians have tightly clustered top eigenvalues; a loose
        # residual still pins the norm to ~1e-4 relative, plenty for a step-size ceiling
        return operator_norm(hessian_of(self, theta), tol=1e-4, max_iters=1_000_000)


def init_lora(spec: MlpLoraSpec, seed) -> ParamsView:
    """A ~ 0.01 * N(0, 1), B = 0, so the adapted network equals the base network."""
    if spec.rank < 1:
        raise InvalidRankError("adapter rank must be >= 1")
    for din, dout in zip(spec.dims[:-1], spec.dims[1:]):
        if spec.rank > min(din, dout):
            raise InvalidRankError(f"rank {spec.rank} exceeds min({din}, {dout})")
    st = SeedStream(derive_seed(RngRecipe(seed, purpose=PURPOSE_INIT, k=303)))
    r = spec.rank
    parts, segs, off = [], [], 0
    for li, (din, dout) in enumerate(zip(spec.dims[:-1], spec.dims[1:])):
        parts.append(0.01 * st.gaussian(r * din))
        segs.append(Segment(f"A{li}", slice(off, off + r * din), "adapter"))
        off += r * din
        parts.append(np.zeros(dout * r))
        segs.append(Segment(f"B{li}", slice(off, off + dout * r), "adapter"))
        off += dout * r
    return ParamsView(np.concatenate(parts), tuple(segs))


# ------------------------------------------------------------- quadratic families


def random_curvature(d, eig_min=0.5, eig_max=1.0, seed=0) -> np.ndarray:
    """Symmetric ``Q diag(lam) Q^T`` with eigenvalues evenly spaced on [eig_min, eig_max]."""
    st = SeedStream(derive_seed(RngRecipe(seed, purpose=PURPOSE_INIT, k=404)))
    q, r = np.linalg.qr(st.gaussian(d * d).reshape(d, d))
    q *= np.sign(np.diag(r))
    lam = np.linspace(eig_max, eig_min, d) if d > 1 else np.array([eig_max])
    A = (q * lam) @ q.T
    return 0.5 * (A + A.T)


def make_client_quadratics(n_clients, d, shift_scale=0.0, curvature_spread=0.0, seed=0,
                           eig_min=0.5, eig_max=1.0, base=None) -> list[QuadraticSpec]:
    """Client i gets ``A_i = A (1 + spread_i)`` and ``theta*_i = theta* + shift_i``.

    ``spread_i`` is uniform on ``[-curvature_spread, curvature_spread]`` and
    ``shift_i`` is ``shift_scale`` times a standard Gaussian vector.
    """
    if n_clients < 1 or d < 1:
        raise ValueError("need at least one client and one dimension")
    if shift_scale < 0:
        raise ValueError("shift_scale must be non-negative")
    if curvature_spread < 0 or curvature_spread > 1:
        raise ValueError("curvature_spread outside [0, 1] can make client curvatures indefinite")
    if base is None:
        st = SeedStream(derive_seed(RngRecipe(seed, purpose=PURPOSE_INIT, k=505)))
        base = QuadraticSpec(random_curvature(d, eig_min, eig_max, seed), st.gaussian(d), 0.0)
    out = []
    for i in range(n_clients):
        st = SeedStream(derive_seed(RngRecipe(seed, i=i, purpose=PURPOSE_INIT, k=606)))
        shift = shift_scale * st.gaussian(d)
        spread = curvature_spread * (2.0 * st.uniform(1)[0] - 1.0)
        if 1.0 + spread < 0:
            raise ValueError("negative curvature spread makes a client curvature indefinite")
        Ai = base.A * (1.0 + spread)
        out.append(QuadraticSpec(0.5 * (Ai + Ai.T), base.theta_star + shift, base.c))
    return out


def global_quadratic(specs) -> QuadraticSpec:
    """The mean of client quadratics as one quadratic with its exact optimum and value."""
    Abar = sum(s.A for s in specs) / len(specs)
    Abar = 0.5 * (Abar + Abar.T)
    rhs = sum(s.A @ s.theta_star for s in specs) / len(specs)
    theta = np.linalg.solve(Abar, rhs)
    fstar = float(np.mean([s.c + 0.5 * (theta - s.theta_star) @ s.A @ (theta - s.theta_star) for s in specs]))
    return QuadraticSpec(Abar, theta, fstar)


def client_offsets(n_samples, d, scale, seed, client) -> np.ndarray:
    """Zero-mean per-sample offsets that make single-sample losses noisy."""
    if n_samples <= 0:
        return None
    st = SeedStream(derive_seed(RngRecipe(seed, i=client, purpose=PURPOSE_INIT, k=707)))
    u = scale * st.gaussian(n_samples * d).reshape(n_samples, d)
    return u - u.mean(axis=0)
