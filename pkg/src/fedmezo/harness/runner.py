"""Experiment loop, sweeps and the theory report for a config."""

from __future__ import annotations

import csv
import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from ..diagnostics import (
    InvalidRegimeError,
    TheoryInputs,
    effective_rank,
    estimate_cg_sigma,
    hessian_of,
    iid_rate_bound,
    lr_bound,
    lr_bound_branches,
    noniid_rate_bound,
    rate_scaling,
    theory_constants,
)
from ..federation import (
    ClientState,
    CommLedger,
    RoundConfig,
    RoundError,
    ServerState,
    SplitSpec,
    estimate_heterogeneity_constants,
    run_round,
    split_dataset,
)
from ..linalg import ParamsView
from ..objectives import (
    LogRegObjective,
    MlpLoraObjective,
    Objective,
    QuadraticObjective,
    client_offsets,
    global_quadratic,
    init_lora,
    load_csv_dataset,
    make_classification,
    make_client_quadratics,
    make_mlp_lora_spec,
)
from ..personalization import LrPolicy, Personalizer
from ..rng import PURPOSE_INIT, RngRecipe, SeedStream, derive_seed
from ..zoo import ZooConfig
from .config import ConfigError, ExperimentConfig

METRICS_FILE = "metrics.jsonl"
TIMING_FILE = "timing.jsonl"
SUMMARY_FILE = "summary.json"
AXES = ("mu", "H", "N", "splitter", "lr", "strategy")


@dataclass
class Problem:
    clients: list
    eval_obj: Objective
    d: int
    L: float | None
    f_star: float | None
    init: Callable[[int], np.ndarray]
    dataset_sizes: list = field(default_factory=list)


def replicate_seed(master_seed: int, r: int) -> int:
    return derive_seed(RngRecipe(master_seed, i=r, k=1, purpose=PURPOSE_INIT))


def _problem_seed(cfg):
    return cfg.master_seed if cfg.problem_seed is None else cfg.problem_seed


def _holdout(ds, fraction, seed):
    n = len(ds)
    n_eval = max(1, int(round(fraction * n)))
    perm = np.argsort(SeedStream(derive_seed(RngRecipe(seed, k=3, purpose=PURPOSE_INIT))).uniform(n), kind="stable")
    return ds.subset(np.sort(perm[n_eval:])), ds.subset(np.sort(perm[:n_eval]))


def _client_shards(cfg, train):
    s = cfg.split
    spec = SplitSpec(s["kind"], cfg.N, seed=_problem_seed(cfg), beta=s["beta"],
                     groups=tuple(tuple(g) for g in s["groups"]))
    return [train.subset(idx) for idx in split_dataset(train, spec)]


def build_problem(cfg: ExperimentConfig) -> Problem:
    o = cfg.objective
    seed = _problem_seed(cfg)
    if o["kind"] == "quadratic":
        specs = make_client_quadratics(cfg.N, o["d"], o["shift"], o["spread"], seed=seed,
                                       eig_min=o["eig_min"], eig_max=o["eig_max"])
        clients = []
        for i, s in enumerate(specs):
            off = client_offsets(o["samples_per_client"], o["d"], o["noise"], seed, i) if o["noise"] > 0 else None
            clients.append(QuadraticObjective(s, off))
        g = global_quadratic(specs)
        return Problem(clients, QuadraticObjective(g), o["d"], max(s.L for s in specs), g.c,
                       lambda _seed: np.zeros(o["d"]))

    if o["data"]:
        ds = load_csv_dataset(o["data"])
    elif o["kind"] == "logreg":
        ds = make_classification(o["n_samples"], o["n_features"], n_classes=2, seed=seed)
    else:
        dims = o["dims"]
        ds = make_classification(o["n_samples"], dims[0], n_classes=dims[-1], n_tasks=o["n_tasks"], seed=seed)
    train, held = _holdout(ds, cfg.eval_fraction, seed)
    shards = _client_shards(cfg, train)
    sizes = [len(s) for s in shards]
    if o["kind"] == "logreg":
        clients = [LogRegObjective(s, o["l2"]) for s in shards]
        L = max(c.smoothness() for c in clients)
        d = clients[0].d
        return Problem(clients, LogRegObjective(held, o["l2"]), d, L, None, lambda _s: np.zeros(d), sizes)
    spec = make_mlp_lora_spec(o["dims"], rank=o["rank"], alpha=o["alpha"], seed=seed)
    clients = [MlpLoraObjective(spec, s) for s in shards]
    try:
        L = max(c.smoothness(init_lora(spec, seed).values) for c in clients)
    except ValueError:
        L = None  # too large for a dense Hessian; the learning rate must then be explicit
    return Problem(clients, MlpLoraObjective(spec, held), spec.trainable_dim, L, None,
                   lambda s: init_lora(spec, s).values, sizes)


def lr_ceiling(cfg: ExperimentConfig, problem: Problem) -> float | None:
    if problem.L is None or problem.d < 1:
        return None
    return lr_bound(cfg.H, problem.L, cfg.c_g, problem.d, cfg.N)


def resolve_lr(cfg: ExperimentConfig, problem: Problem) -> tuple[float, float | None]:
    ceiling = lr_ceiling(cfg, problem)
    if cfg.eta0 is not None:
        return float(cfg.eta0), ceiling
    if ceiling is None:
        raise ConfigError("invalid 'eta0': required when the smoothness constant cannot be measured")
    return cfg.lr_factor * ceiling, ceiling


def check_ceiling(cfg: ExperimentConfig, problem: Problem | None = None) -> list[str]:
    """Warnings for learning rates above the theory ceiling (allowed, but flagged)."""
    problem = problem or build_problem(cfg)
    eta, ceiling = resolve_lr(cfg, problem)
    if ceiling is not None and eta > ceiling:
        return [f"eta0 = {eta:.6g} exceeds the theory ceiling {ceiling:.6g} ({eta / ceiling:.3g}x)"]
    return []


def make_strategy(cfg: ExperimentConfig, eta0: float, ceiling: float | None):
    p = cfg.personalization
    if p["kind"] == "disabled":
        return None
    alpha = p["alpha"] if p["alpha"] is not None else (0.5 * eta0 if p["form"] == "additive" else 0.5)
    policy = LrPolicy(eta0, alpha, p["form"], p["eta_min"], p["eta_max"],
                      ceiling if p["clamp_to_ceiling"] else None)
    return Personalizer(p["kind"], policy, p["normalization"])


def _finite(x):
    return None if x is None or not math.isfinite(x) else float(x)


def _row(rep, seed, t, eval_loss, train, lrs, ledger, failed, copies, error=None):
    row = {
        "replicate": rep,
        "seed": seed,
        "t": t,
        "eval_loss": _finite(eval_loss),
        "train_loss": [None if v is None else _finite(v) for v in train],
        "lrs": [float(v) for v in lrs],
        "bytes_cum": ledger.cumulative,
        "failed_clients": failed,
        "param_copies": copies,
    }
    if error:
        row["error"] = error
    return row


@dataclass
class RunResult:
    out_dir: Path
    losses: list  # per replicate: eval losses t = 0..T (None where unavailable)
    summary: dict


def run(cfg: ExperimentConfig, out_dir=None, order=None, trace=None, problem: Problem | None = None) -> RunResult:
    """Run every replicate of ``cfg``; metrics are appended one JSON line per (replicate, round)."""
    problem = problem or build_problem(cfg)
    eta0, ceiling = resolve_lr(cfg, problem)
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    rcfg = RoundConfig(H=cfg.H, zoo=ZooConfig(cfg.mu), batch_size=cfg.batch_size, optimizer=cfg.optimizer,
                       bytes_per_param=cfg.bytes_per_param, workers=cfg.workers)
    all_losses, finals, errors = [], [], []
    with open(out / METRICS_FILE, "w") as mf, open(out / TIMING_FILE, "w") as tf:
        def emit(row, elapsed):
            mf.write(json.dumps(row, sort_keys=True) + "\n")
            mf.flush()
            tf.write(json.dumps({"replicate": row["replicate"], "t": row["t"], "elapsed_ms": elapsed}) + "\n")
            tf.flush()

        for r in range(cfg.replicates):
            seed = replicate_seed(cfg.master_seed, r)
            clients = [ClientState(i, obj, eta0) for i, obj in enumerate(problem.clients)]
            server = ServerState(ParamsView(problem.init(seed)), 0, seed)
            strategy = make_strategy(cfg, eta0, ceiling)
            ledger = CommLedger(problem.d, cfg.bytes_per_param)
            loss = problem.eval_obj.loss(server.global_params.values)
            losses = [_finite(loss)]
            emit(_row(r, seed, 0, loss, [None] * cfg.N, [eta0] * cfg.N, ledger, [], 0), 0.0)
            best, stale, err = loss, 0, None
            for _ in range(cfg.T):
                t0 = time.perf_counter()
                try:
                    rec = run_round(server, clients, rcfg, strategy, problem.eval_obj.loss, order, trace)
                except RoundError as exc:
                    err = str(exc)
                    server.t += 1
                    emit(_row(r, seed, server.t, math.nan, [None] * cfg.N, [c.lr for c in clients], ledger,
                              [c.id for c in clients], server.global_params.allocations, err), 0.0)
                    losses.append(None)
                    break
                ledger.record_round(cfg.N)
                emit(_row(r, seed, rec.t, rec.eval_loss, rec.train_loss, rec.lrs, ledger, rec.failed_clients,
                          server.global_params.allocations), 1e3 * (time.perf_counter() - t0))
                losses.append(_finite(rec.eval_loss))
                if cfg.patience is not None:
                    if rec.eval_loss < best:
                        best, stale = rec.eval_loss, 0
                    else:
                        stale += 1
                        if stale >= cfg.patience:
                            break
            all_losses.append(losses)
            finals.append(None if err else losses[-1])
            errors.append(err)

    ok = [f for f in finals if f is not None]
    summary = {
        "replicates": cfg.replicates,
        "seeds": [replicate_seed(cfg.master_seed, r) for r in range(cfg.replicates)],
        "initial_loss": all_losses[0][0],
        "final_losses": finals,
        "final_loss_mean": float(np.mean(ok)) if ok else None,
        "final_loss_std": float(np.std(ok)) if ok else None,
        "rounds_completed": [len(ls) - 1 for ls in all_losses],
        "errors": errors,
        "eta0": eta0,
        "lr_ceiling": ceiling,
        "over_ceiling": bool(ceiling is not None and eta0 > ceiling),
        "trainable_params": problem.d,
        "bytes_per_round_up": cfg.N * problem.d * cfg.bytes_per_param,
        "config": cfg.to_dict(),
    }
    (out / SUMMARY_FILE).write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return RunResult(out, all_losses, summary)


def read_metrics(path) -> list[dict]:
    path = Path(path)
    if path.is_dir():
        path = path / METRICS_FILE
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


# ------------------------------------------------------------------------ sweeps


def parse_values(axis: str, text: str) -> list:
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis '{axis}' (expected one of {', '.join(AXES)})")
    items = [v.strip() for v in text.split(",") if v.strip()]
    if not items:
        raise ConfigError("sweep needs at least one value")
    try:
        if axis in ("H", "N"):
            return [int(v) for v in items]
        if axis == "mu":
            return [float(v) for v in items]
    except ValueError as exc:
        raise ConfigError(f"bad value for axis '{axis}': {exc}") from None
    return items


def apply_axis(cfg: ExperimentConfig, axis: str, value) -> ExperimentConfig:
    if axis == "mu":
        return cfg.replace(mu=float(value))
    if axis == "H":
        return cfg.replace(H=int(value))
    if axis == "N":
        return cfg.replace(N=int(value))
    if axis == "lr":
        v = str(value)
        if v.endswith("x"):
            return cfg.replace(eta0=None, lr_factor=float(v[:-1]))
        return cfg.replace(eta0=float(v))
    if axis == "strategy":
        return cfg.replace(personalization={**cfg.personalization, "kind": str(value)})
    if axis == "splitter":
        if cfg.objective["kind"] == "quadratic":
            raise ConfigError("the splitter axis needs a dataset-backed objective")
        kind, _, beta = str(value).partition(":")
        split = {**cfg.split, "kind": kind}
        if beta:
            split["beta"] = float(beta)
        return cfg.replace(split=split)
    raise ConfigError(f"unknown sweep axis '{axis}'")


def sweep(cfg: ExperimentConfig, axis: str, values, out_dir=None) -> dict:
    """One run per value with the shared master seed; failures are isolated per value."""
    out = Path(out_dir or cfg.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    status, rows = {}, []
    for v in values:
        name = f"{axis}={v}"
        try:
            res = run(apply_axis(cfg, axis, v), out / name)
        except Exception as exc:  # keep the rest of the sweep alive
            status[name] = f"error: {exc}"
            continue
        status[name] = "ok" if not any(res.summary["errors"]) else "round-failure"
        for r, losses in enumerate(res.losses):
            rows.extend((axis, v, r, t, loss) for t, loss in enumerate(losses))
    with open(out / f"sweep_{axis}.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["axis", "value", "replicate", "round", "eval_loss"])
        w.writerows(["" if x is None else x for x in row] for row in rows)
    (out / "sweep.json").write_text(json.dumps({"axis": axis, "values": [str(v) for v in values],
                                                "status": status}, indent=2) + "\n")
    return status


# ------------------------------------------------------------------- diagnostics


def diagnose(cfg: ExperimentConfig, problem: Problem | None = None) -> dict:
    """Theory constants, learning-rate ceilings and predicted rates for ``cfg``."""
    problem = problem or build_problem(cfg)
    eta0, ceiling = resolve_lr(cfg, problem)
    seed = _problem_seed(cfg)
    init = problem.init(replicate_seed(cfg.master_seed, 0))
    report = {"trainable_params": problem.d, "eta0": eta0, "notes": []}

    rank = None
    try:
        rank = effective_rank(hessian_of(problem.eval_obj, init))
    except ValueError as exc:
        report["notes"].append(f"effective rank unavailable: {exc}")
    report["measured_effective_rank"] = rank

    cg = [estimate_cg_sigma(c, batch_size=cfg.batch_size, n_batches=500, center=init, seed=seed)
          if c.n_samples else (1.0, 0.0) for c in problem.clients]
    c_g = max(cfg.c_g, max(c for c, _ in cg))
    sigma_g = math.sqrt(float(np.mean([s for _, s in cg])))
    if cfg.N > 1:
        c_h, s_h2 = estimate_heterogeneity_constants(problem.clients, center=init, seed=seed)
    else:
        c_h, s_h2 = 0.0, 0.0
    f0 = float(problem.eval_obj.loss(init))
    f_star = problem.f_star
    if f_star is None:
        f_star = 0.0
        report["notes"].append("f* unknown for this objective; the non-negative loss floor 0 is used")
    r = max(1.0, math.ceil(rank)) if rank is not None else 1.0
    if rank is None:
        report["notes"].append("r = 1 used in the calculators")
    inp = TheoryInputs(d=max(problem.d, 2), r=r, n=1, N=cfg.N, H=cfg.H, T=max(cfg.T, 1), L=problem.L or 1.0,
                       c_g=c_g, sigma_g=sigma_g, c_h=c_h, sigma_h=math.sqrt(s_h2), mu=cfg.mu,
                       f0=max(f0, f_star), f_star=f_star)
    report["inputs"] = {k: getattr(inp, k) for k in inp.__dataclass_fields__}
    report["inputs"]["L_measured"] = problem.L is not None
    report["constants"] = theory_constants(inp).as_dict()
    if problem.L is not None:
        b = lr_bound_branches(cfg.H, problem.L, c_g, problem.d, cfg.N)
        report["lr_ceiling"] = {"value": min(b), "branches": list(b), "eta0_over_ceiling": eta0 / min(b)}
    else:
        report["lr_ceiling"] = None
    rates = {"rate_scaling_iid": rate_scaling(r, cfg.N, cfg.H, max(cfg.T, 1)),
             "rate_scaling_noniid": rate_scaling(r, cfg.N, cfg.H, max(cfg.T, 1), c_h + cfg.N)}
    for name, fn in (("iid_rate_bound", iid_rate_bound), ("noniid_rate_bound", noniid_rate_bound)):
        try:
            rates[name] = fn(inp, eta0)
        except InvalidRegimeError as exc:
            rates[name] = None
            report["notes"].append(f"{name}: {exc}")
    report["predicted_rates"] = rates
    return report
