"""Brute-force maximiser of the exact one-step objective for tiny problems.

Independent of the QP machinery: it evaluates the nonsmooth objective on a
grid over a search box, then zooms in around the incumbent.  Meant as a
test instrument for up to three assets.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .model import MarketModel
from .qpsolver import ConstraintSpec

MAX_ASSETS = 3
CHUNK = 1 << 18
FEAS_TOL = 1e-12


class OracleError(ValueError):
    pass


@dataclass(frozen=True)
class OracleSpec:
    """Search box over the trade, the first grid step and the number of zooms.

    Each refinement divides the step by ``shrink`` and searches a box of
    ``+-window`` old steps around the incumbent, re-centring until the best
    point is interior.
    """

    bounds: tuple[tuple[float, float], ...]
    step: float
    levels: int = 2
    shrink: float = 10.0
    window: int = 2

    def __post_init__(self):
        b = tuple((float(lo), float(hi)) for lo, hi in self.bounds)
        if any(not (np.isfinite(lo) and np.isfinite(hi) and lo <= hi) for lo, hi in b):
            raise OracleError("every bound must be a finite interval")
        if not self.step > 0:
            raise OracleError("grid step must be positive")
        if self.levels < 0 or self.shrink <= 1 or self.window < 1:
            raise OracleError("need levels >= 0, shrink > 1 and window >= 1")
        object.__setattr__(self, "bounds", b)

    @property
    def final_step(self) -> float:
        return self.step / self.shrink**self.levels

    @classmethod
    def around(cls, centre: Sequence[float], radius: float, step: float, levels: int = 2, **kw):
        c = np.asarray(centre, dtype=float)
        return cls(tuple((x - radius, x + radius) for x in c), step, levels, **kw)


def objective(
    model: MarketModel,
    q: np.ndarray,
    p: np.ndarray,
    x_prev: np.ndarray,
    g: np.ndarray,
    trades: np.ndarray,
    d_prev: np.ndarray | None = None,
) -> np.ndarray:
    """Exact objective for each row of ``trades`` (shape ``m x n``)."""
    t = np.atleast_2d(np.asarray(trades, dtype=float))
    lin = g - p @ x_prev - (0.0 if d_prev is None else d_prev)
    val = t @ lin - 0.5 * np.einsum("mi,ij,mj->m", t, q, t)
    if model.lambda_spread:
        val -= model.lambda_spread * np.abs(t).sum(axis=1)
    if model.lambda_financing:
        val -= model.lambda_financing * np.abs(x_prev + t).sum(axis=1)
    if model.lambda_power32:
        val -= model.lambda_power32 * (np.abs(t) ** 1.5).sum(axis=1)
    return val


def feasible(constraints: Sequence[ConstraintSpec], x_prev: np.ndarray, trades: np.ndarray,
             tol: float = FEAS_TOL) -> np.ndarray:
    t = np.atleast_2d(trades)
    ok = np.ones(t.shape[0], dtype=bool)
    for cs in constraints:
        val = t @ cs.v + (cs.v @ x_prev if cs.kind.is_position else 0.0)
        ok &= (val >= cs.lower - tol) & (val <= cs.upper + tol)
    return ok


def _axes(lo: np.ndarray, hi: np.ndarray, step: float) -> list[np.ndarray]:
    out = []
    for a, b in zip(lo, hi):
        k = int(np.floor((b - a) / step + 1e-9))
        ax = a + step * np.arange(k + 1)
        if b - ax[-1] > 1e-12 * max(1.0, abs(b)):
            ax = np.append(ax, b)
        out.append(ax)
    return out


def _grid_best(evaluate, axes: list[np.ndarray]):
    best_val, best_pt = -np.inf, None
    sizes = [len(a) for a in axes]
    total = int(np.prod(sizes))
    # enumerate in chunks so memory stays bounded
    flat = np.arange(total)
    for start in range(0, total, CHUNK):
        idx = np.unravel_index(flat[start:start + CHUNK], sizes)
        pts = np.column_stack([ax[i] for ax, i in zip(axes, idx)])
        vals = evaluate(pts)
        j = int(np.argmax(vals))
        if vals[j] > best_val:
            best_val, best_pt = float(vals[j]), pts[j]
    return best_pt, best_val


def oracle_solve(
    model: MarketModel,
    q: np.ndarray,
    p: np.ndarray,
    x_prev: np.ndarray,
    g: np.ndarray,
    constraints: Sequence[ConstraintSpec],
    spec: OracleSpec,
    d_prev: np.ndarray | None = None,
) -> tuple[np.ndarray, float]:
    """Best grid trade and its objective.  Infeasible grid points score ``-inf``."""
    x_prev = np.asarray(x_prev, dtype=float)
    g = np.asarray(g, dtype=float)
    n = x_prev.shape[0]
    if n > MAX_ASSETS:
        raise OracleError(f"oracle supports at most {MAX_ASSETS} assets, got {n}")
    if len(spec.bounds) != n:
        raise OracleError(f"{len(spec.bounds)} search intervals for {n} assets")

    def evaluate(pts):
        vals = objective(model, q, p, x_prev, g, pts, d_prev)
        return np.where(feasible(constraints, x_prev, pts), vals, -np.inf)

    box_lo = np.array([b[0] for b in spec.bounds])
    box_hi = np.array([b[1] for b in spec.bounds])
    best, val = _grid_best(evaluate, _axes(box_lo, box_hi, spec.step))
    if not np.isfinite(val):
        raise OracleError("no feasible grid point in the search box")
    step = spec.step
    for _ in range(spec.levels):
        radius = spec.window * step
        step /= spec.shrink
        for _ in range(100):
            lo = np.maximum(best - radius, box_lo)
            hi = np.minimum(best + radius, box_hi)
            cand, cval = _grid_best(evaluate, _axes(lo, hi, step))
            if cval > val:
                best, val = cand, cval
            # re-centre while the incumbent sits on an inner face of the window
            on_face = ((np.abs(best - lo) < 0.5 * step) & (lo > box_lo)) | (
                (np.abs(best - hi) < 0.5 * step) & (hi < box_hi))
            if not np.any(on_face):
                break
    return best, val


def default_spec(model: MarketModel, q: np.ndarray, p: np.ndarray, x_prev: np.ndarray,
                 g: np.ndarray, points: int = 80, final_step: float = 2e-5) -> OracleSpec:
    """Box covering zero, the flat position and twice the cost-free quadratic trade.

    The first grid has about ``points`` cells per axis; zooms continue by
    factors of ten until the step is at most ``final_step``.
    """
    free = np.linalg.solve(q, g - p @ x_prev)
    radius = 2.0 * float(np.max(np.abs(free))) + float(np.max(np.abs(x_prev), initial=0.0)) + 0.1
    step = 2.0 * radius / points
    levels = max(0, int(np.ceil(np.log10(step / final_step) - 1e-12)))
    return OracleSpec.around(np.zeros(len(x_prev)), radius, step, levels)

