"""FedMeZO protocol simulation: splitting, local ZO training, averaging, accounting."""

from __future__ import annotations

import json
import math
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .linalg import ParamsView
from .objectives import Dataset, Objective
from .rng import (
    PURPOSE_BATCH,
    PURPOSE_INIT,
    PURPOSE_PERTURB,
    PURPOSE_PROBE,
    RngRecipe,
    SeedStream,
    derive_seed,
)
from .zoo import NumericalOverflowError, RestoreMode, ZooConfig, mezo_step_inplace, sgd_step

MIB = 1 << 20
GIB = 1 << 30


class RoundError(RuntimeError):
    pass


# ----------------------------------------------------------------------- splitting


class SplitKind(str, Enum):
    IID = "iid"
    DIRICHLET = "dirichlet"
    META = "meta"


@dataclass(frozen=True)
class SplitSpec:
    kind: SplitKind
    n_clients: int
    seed: int = 0
    beta: float = 0.5
    groups: tuple = ()  # meta split: groups[i] is the tuple of task tags owned by client i

    def __post_init__(self):
        object.__setattr__(self, "kind", SplitKind(self.kind))
        if self.n_clients < 1:
            raise ValueError("need at least one client")
        if self.kind is SplitKind.DIRICHLET and not self.beta > 0:
            raise ValueError("Dirichlet concentration must be positive")


def _permutation(n, seed):
    return np.argsort(SeedStream(seed).uniform(n), kind="stable")


def split_dataset(ds: Dataset, spec: SplitSpec) -> list[np.ndarray]:
    """Disjoint cover of ``range(len(ds))`` by ``spec.n_clients`` non-empty, sorted index arrays."""
    n, N = len(ds), spec.n_clients
    if n < N:
        raise ValueError(f"{n} samples cannot feed {N} clients")
    if spec.kind is SplitKind.IID:
        perm = _permutation(n, derive_seed(RngRecipe(spec.seed, purpose=PURPOSE_INIT, k=11)))
        return [np.sort(p) for p in np.array_split(perm, N)]

    if spec.kind is SplitKind.META:
        if ds.task is None:
            raise ValueError("meta split needs task tags")
        tasks = np.unique(ds.task)
        groups = spec.groups or tuple((int(t),) for t in tasks)
        if not spec.groups and len(tasks) != N:
            groups = tuple(tuple(int(t) for t in tasks[i::N]) for i in range(N))
        if len(groups) != N:
            raise ValueError("meta split needs one task group per client")
        owner = {}
        for i, grp in enumerate(groups):
            for tag in grp:
                if tag in owner:
                    raise ValueError(f"task {tag} assigned to two clients")
                owner[tag] = i
        missing = set(int(t) for t in tasks) - set(owner)
        if missing:
            raise ValueError(f"tasks {sorted(missing)} not assigned to any client")
        shards = [np.flatnonzero(np.isin(ds.task, grp)) for grp in groups]
        if any(s.size == 0 for s in shards):
            raise ValueError("meta split produced an empty shard")
        return shards

    classes = np.unique(ds.labels)
    for attempt in range(100):
        rng = np.random.default_rng(derive_seed(RngRecipe(spec.seed, k=attempt, purpose=PURPOSE_INIT)))
        parts = [[] for _ in range(N)]
        for c in classes:
            idx = np.flatnonzero(ds.labels == c)
            idx = idx[rng.permutation(idx.size)]
            p = rng.dirichlet(np.full(N, spec.beta))
            cuts = np.round(np.cumsum(p)[:-1] * idx.size).astype(int)
            for i, chunk in enumerate(np.split(idx, cuts)):
                parts[i].append(chunk)
        shards = [np.sort(np.concatenate(p)) for p in parts]
        if all(s.size > 0 for s in shards):
            return shards
    raise ValueError("Dirichlet split left a client empty after 100 draws")


def export_shards(shards, path) -> None:
    with open(path, "w") as fh:
        json.dump({str(i): [int(x) for x in s] for i, s in enumerate(shards)}, fh)


def load_shards(path) -> list[np.ndarray]:
    with open(path) as fh:
        raw = json.load(fh)
    return [np.asarray(raw[k], dtype=np.int64) for k in sorted(raw, key=int)]


# ------------------------------------------------------------------- communication


def comm_cost(trainable_count: int, bytes_per_param: int = 2) -> int:
    if trainable_count < 0 or bytes_per_param < 0:
        raise ValueError("counts must be non-negative")
    return int(trainable_count) * int(bytes_per_param)


def format_bytes(n: int) -> dict:
    return {"bytes": int(n), "MiB": n / MIB, "GiB": n / GIB, "MB": n / 1e6, "GB": n / 1e9}


def params_for_size(size_gib: float, bytes_per_param: int = 2) -> int:
    """Parameter count whose transmission occupies ``size_gib`` GiB."""
    return int(round(size_gib * GIB / bytes_per_param))


@dataclass
class CommLedger:
    trainable_count: int
    bytes_per_param: int = 2
    cumulative: int = 0

    def record_round(self, n_clients: int) -> tuple[int, int]:
        per = comm_cost(self.trainable_count, self.bytes_per_param)
        up = down = n_clients * per
        self.cumulative += up + down
        return up, down


# ------------------------------------------------------------------------- clients


@dataclass
class ClientState:
    id: int
    objective: Objective
    lr: float
    loss_history: deque = field(default_factory=lambda: deque(maxlen=16))
    last_update: np.ndarray | None = None


@dataclass
class ServerState:
    global_params: ParamsView
    t: int = 0
    master_seed: int = 0


@dataclass
class LocalResult:
    params: np.ndarray
    train_loss: float
    failed: bool = False
    error: str = ""


@dataclass
class RoundConfig:
    H: int = 30
    zoo: ZooConfig = field(default_factory=ZooConfig)
    batch_size: int = 1
    optimizer: str = "fedmezo"  # or "bp-fedavg"
    mode: RestoreMode = RestoreMode.IN_PLACE
    bytes_per_param: int = 2
    workers: int = 1


@dataclass
class RoundRecord:
    t: int
    train_loss: list
    eval_loss: float
    lrs: list
    bytes_up: int
    bytes_down: int
    elapsed: float
    failed_clients: list = field(default_factory=list)


def sample_batch(master_seed, t, i, k, n_samples, batch_size):
    """Uniform with-replacement batch for step k of client i in round t (None if data-free)."""
    if n_samples == 0:
        return None
    st = SeedStream(derive_seed(RngRecipe(master_seed, t, i, k, PURPOSE_BATCH)))
    return st.integers(n_samples, batch_size)


def local_train(client: ClientState, global_params: ParamsView, H: int, cfg: RoundConfig,
                master_seed: int, t: int, lr: float | None = None, trace=None) -> LocalResult:
    """H local steps from the broadcast model; returns final params and the mean train loss."""
    if H < 1:
        raise ValueError("need at least one local step")
    lr = client.lr if lr is None else lr
    obj = client.objective
    work = global_params.copy()
    losses = []
    try:
        for k in range(1, H + 1):
            batch = sample_batch(master_seed, t, client.id, k, obj.n_samples, cfg.batch_size)
            seed = derive_seed(RngRecipe(master_seed, t, client.id, k, PURPOSE_PERTURB))
            if trace is not None:
                trace.append((client.id, k, None if batch is None else tuple(int(b) for b in batch)))
            if cfg.optimizer == "fedmezo":
                out = mezo_step_inplace(obj, work, batch, cfg.zoo, lr, seed, cfg.mode)
                losses.append(out.loss_plus)
            elif cfg.optimizer == "bp-fedavg":
                losses.append(sgd_step(obj, work, batch, lr))
            else:
                raise ValueError(f"unknown optimizer {cfg.optimizer!r}")
        if not np.all(np.isfinite(work.values)):
            raise NumericalOverflowError(float("inf"), "parameters")
    except NumericalOverflowError as exc:
        client.last_update = np.zeros(global_params.values.size)
        return LocalResult(global_params.values.copy(), math.nan, True, str(exc))
    client.last_update = work.values - global_params.values
    return LocalResult(work.values, float(np.mean(losses)))


def aggregate(vecs, ids=None) -> np.ndarray:
    """Equal-weight mean, accumulated in ascending client-id order for bit-reproducibility.

    The running-mean update leaves identical inputs exactly unchanged.
    """
    vecs = [np.asarray(v, dtype=np.float64) for v in vecs]
    if not vecs:
        raise ValueError("nothing to aggregate")
    if any(v.shape != vecs[0].shape for v in vecs):
        raise ValueError("client vectors differ in length")
    order = range(len(vecs)) if ids is None else sorted(range(len(vecs)), key=lambda j: ids[j])
    acc = None
    for k, j in enumerate(order, start=1):
        if acc is None:
            acc = vecs[j].copy()
        else:
            acc += (vecs[j] - acc) / k
    return acc


def run_round(server: ServerState, clients: list[ClientState], cfg: RoundConfig, strategy=None,
              eval_fn=None, order=None, trace=None) -> RoundRecord:
    """Broadcast, personalize learning rates, train locally, average, advance the round.

    ``order`` permutes the client processing order (results never depend on it).
    """
    t0 = time.perf_counter()
    t = server.t
    if strategy is not None:
        lrs = [float(x) for x in strategy.rates(clients, t, server.master_seed)]
    else:
        lrs = [c.lr for c in clients]
    for c, lr in zip(clients, lrs):
        c.lr = lr

    def work(j):
        return local_train(clients[j], server.global_params, cfg.H, cfg, server.master_seed, t, trace=trace)

    idx = list(range(len(clients))) if order is None else list(order)
    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as ex:
            done = dict(zip(idx, ex.map(work, idx)))
    else:
        done = {j: work(j) for j in idx}
    results = [done[j] for j in range(len(clients))]

    ok = [j for j, r in enumerate(results) if not r.failed]
    if not ok:
        raise RoundError(f"round {t}: every client failed ({results[0].error})")
    ids = [clients[j].id for j in ok]
    new = aggregate([results[j].params for j in ok], ids)
    server.global_params.values[...] = new
    server.t += 1

    for c, r in zip(clients, results):
        if not r.failed:
            c.loss_history.append(r.train_loss)
    up = len(clients) * comm_cost(len(new), cfg.bytes_per_param)
    eval_loss = float(eval_fn(server.global_params.values)) if eval_fn is not None else math.nan
    return RoundRecord(
        t=server.t,
        train_loss=[None if r.failed else r.train_loss for r in results],
        eval_loss=eval_loss,
        lrs=lrs,
        bytes_up=up,
        bytes_down=up,
        elapsed=time.perf_counter() - t0,
        failed_clients=[clients[j].id for j, r in enumerate(results) if r.failed],
    )


# ---------------------------------------------------------------- heterogeneity


def _fit_line(x, y):
    design = np.column_stack([x, np.ones_like(x)])
    (slope, icept), *_ = np.linalg.lstsq(design, y, rcond=None)
    return float(slope), float(icept)


def estimate_heterogeneity_constants(objectives, probes: int = 32, center=None, radius: float = 1.0,
                                     seed: int = 0) -> tuple[float, float]:
    """Fit ``mean_i ||grad f_i - grad f||^2 = c_h ||grad f||^2 + sigma_h^2`` over random probe points.

    Gradients are full local-data gradients; a negative slope is clamped to 0
    and the intercept refitted.
    """
    if probes < 20:
        raise ValueError("use at least 20 probe points")
    d = objectives[0].d
    center = np.zeros(d) if center is None else np.asarray(center, dtype=np.float64)
    xs, ys = [], []
    for p in range(probes):
        theta = center + radius * SeedStream(derive_seed(RngRecipe(seed, k=p, purpose=PURPOSE_PROBE))).gaussian(d)
        grads = np.array([o.grad(theta, None) for o in objectives])
        g = grads.mean(axis=0)
        xs.append(float(g @ g))
        ys.append(float(np.mean(np.sum((grads - g) ** 2, axis=1))))
    xs, ys = np.array(xs), np.array(ys)
    if np.max(xs) <= 1e-14 * max(1.0, np.max(ys)):
        raise ValueError("probe gradients vanish; cannot fit heterogeneity constants")
    slope, icept = _fit_line(xs, ys)
    if slope < 0:
        slope, icept = 0.0, float(ys.mean())
    return slope, max(icept, 0.0)
