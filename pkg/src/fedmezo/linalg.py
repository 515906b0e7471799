"""Dense spectral helpers and the trainable-parameter buffer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (last residual {residual:.3e})")
        self.residual = residual


def is_symmetric(m: np.ndarray, atol: float = 0.0) -> bool:
    m = np.asarray(m)
    return m.ndim == 2 and m.shape[0] == m.shape[1] and bool(np.all(np.abs(m - m.T) <= atol))


def power_iteration(m: np.ndarray, max_iters: int = 10_000, tol: float = 1e-10, v0=None):
    """Dominant eigenpair (by magnitude) of a symmetric matrix.

    Runs until ``||M v - lam v|| <= tol * |lam|``.  Returns ``(lam, v)`` with
    ``v`` unit-norm; ``lam`` carries the sign of the dominant eigenvalue.
    """
    m = np.asarray(m, dtype=np.float64)
    if not is_symmetric(m, atol=1e-12 * max(1.0, float(np.abs(m).max(initial=0.0)))):
        raise ValueError("power_iteration needs a symmetric matrix")
    n = m.shape[0]
    if v0 is None:
        # fixed, non-degenerate start; deterministic and unlikely to be orthogonal to the top vector
        v = 1.0 + np.arange(n) / (3.0 * n)
        v[1::2] *= -0.7
    else:
        v = np.array(v0, dtype=np.float64)
    v /= np.linalg.norm(v)
    lam = 0.0
    resid = np.inf
    for _ in range(max_iters):
        w = m @ v
        lam = float(v @ w) / float(v @ v)
        resid = float(np.linalg.norm(w - lam * v))
        if resid <= tol * abs(lam) or (lam == 0.0 and resid == 0.0):
            return lam, v
        nw = np.linalg.norm(w)
        if nw == 0.0:
            return 0.0, v
        v = w / nw
    raise ConvergenceError("power iteration did not converge", resid)


def operator_norm(m: np.ndarray, **kw) -> float:
    """Spectral norm of a symmetric matrix.

    Iterates on ``M @ M`` so that eigenvalue pairs ``+lam, -lam`` (common in
    Hessians of factorized layers) cannot stall the iteration.
    """
    m = np.asarray(m, dtype=np.float64)
    sq = m @ m
    sq = 0.5 * (sq + sq.T)
    lam, _ = power_iteration(sq, **kw)
    return float(np.sqrt(max(lam, 0.0)))


@dataclass(frozen=True)
class Segment:
    name: str
    slc: slice
    kind: str = "weights"  # "weights" or "adapter"


@dataclass
class ParamsView:
    """Flat trainable vector plus a layout describing which slice is which.

    ``allocations`` counts every parameter-length buffer created through this
    view (copies, snapshots).  The in-place MeZO step is required to leave it
    untouched.
    """

    values: np.ndarray
    layout: tuple[Segment, ...] = ()
    allocations: int = field(default=0, compare=False)

    def __post_init__(self):
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.size == 0:
            raise ValueError("ParamsView needs a non-empty flat vector")
        if not self.layout:
            self.layout = (Segment("weights", slice(0, self.values.size)),)

    def __len__(self):
        return self.values.size

    def segment(self, name: str) -> np.ndarray:
        for seg in self.layout:
            if seg.name == name:
                return self.values[seg.slc]
        raise KeyError(name)

    def copy(self) -> "ParamsView":
        self.allocations += 1
        return ParamsView(self.values.copy(), self.layout)

    def snapshot(self) -> np.ndarray:
        self.allocations += 1
        return self.values.copy()

    def restore(self, snap: np.ndarray) -> None:
        self.values[...] = snap
