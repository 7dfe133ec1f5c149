"""Dense convex QP for the constrained one-step trading problem.

The maximisation is rewritten as ``min 1/2 y.H.y + c.y  s.t.  A y <= b``
where ``y`` stacks the trade and, when the L1 terms are present, the
auxiliary variables ``s`` (spread) and ``u`` (financing).  Multipliers are
reported for every row with the convention ``H y + c + A^T lam = 0``,
``lam >= 0``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import linprog

from .model import MarketModel, ModelValidationError, check_psd

logger = logging.getLogger(__name__)

DEFAULT_TOL = 1e-9


class QpError(RuntimeError):
    """Base class for solver failures."""


class InfeasibleError(QpError):
    pass


class MaxIterationsError(QpError):
    pass


class NumericalBreakdownError(QpError):
    pass


class UnboundedError(NumericalBreakdownError):
    pass


class ConstraintError(ValueError):
    """Malformed constraint (bad bounds, zero direction, wrong kind)."""


class ConstraintKind(str, Enum):
    TRADE_BOUND = "trade_bound"
    POSITION_BOUND = "position_bound"
    TRADE_EXPOSURE = "trade_exposure"
    POSITION_EXPOSURE = "position_exposure"
    L1_TRADE_AUX = "l1_trade_aux"
    L1_POSITION_AUX = "l1_position_aux"
    POWER32_AUX = "power32_aux"

    @property
    def is_position(self) -> bool:
        return self in (
            ConstraintKind.POSITION_BOUND,
            ConstraintKind.POSITION_EXPOSURE,
            ConstraintKind.L1_POSITION_AUX,
        )

    @property
    def is_auxiliary(self) -> bool:
        return self in (
            ConstraintKind.L1_TRADE_AUX,
            ConstraintKind.L1_POSITION_AUX,
            ConstraintKind.POWER32_AUX,
        )


USER_KINDS = (
    ConstraintKind.TRADE_BOUND,
    ConstraintKind.POSITION_BOUND,
    ConstraintKind.TRADE_EXPOSURE,
    ConstraintKind.POSITION_EXPOSURE,
)


@dataclass(frozen=True, eq=False)
class ConstraintSpec:
    """``lower <= v.q <= upper`` with ``q`` the trade or the new position.

    ``schedule`` optionally overrides the bounds at given step indices.
    ``group`` names the constraint portfolio the row feeds in the
    Grinold-Easton split; it defaults to the label.
    """

    kind: ConstraintKind
    v: np.ndarray
    lower: float = -np.inf
    upper: float = np.inf
    label: str = ""
    group: str | None = None
    schedule: Mapping[int, tuple[float, float]] | None = None

    def __post_init__(self):
        kind = ConstraintKind(self.kind)
        object.__setattr__(self, "kind", kind)
        v = np.atleast_1d(np.array(self.v, dtype=float))
        object.__setattr__(self, "v", v)
        object.__setattr__(self, "lower", float(self.lower))
        object.__setattr__(self, "upper", float(self.upper))
        if self.group is None:
            object.__setattr__(self, "group", self.label)
        if self.schedule is not None:
            sched = {int(t): (float(lo), float(hi)) for t, (lo, hi) in self.schedule.items()}
            object.__setattr__(self, "schedule", sched)

    def problems(self) -> list[str]:
        """Invariant violations as messages (empty when valid)."""
        out = []
        if self.v.ndim != 1 or not np.all(np.isfinite(self.v)):
            out.append(f"constraint {self.label!r}: direction must be a finite vector")
        elif not np.any(self.v):
            out.append(f"constraint {self.label!r}: direction is zero")
        elif self.kind in (ConstraintKind.TRADE_BOUND, ConstraintKind.POSITION_BOUND):
            nz = np.flatnonzero(self.v)
            if len(nz) != 1 or self.v[nz[0]] != 1.0:
                out.append(f"constraint {self.label!r}: bound kinds need a basis vector")
        bounds = [(self.lower, self.upper)]
        if self.schedule:
            bounds += list(self.schedule.values())
        for lo, hi in bounds:
            if np.isnan(lo) or np.isnan(hi):
                out.append(f"constraint {self.label!r}: NaN bound")
            elif lo > hi:
                out.append(f"constraint {self.label!r}: lower {lo} > upper {hi}")
        return out

    def validate(self, n: int | None = None) -> None:
        msgs = self.problems()
        if n is not None and self.v.shape != (n,):
            msgs.append(f"constraint {self.label!r}: direction has {self.v.shape[0]} entries, expected {n}")
        if msgs:
            raise ConstraintError("; ".join(msgs))

    def at(self, t: int) -> "ConstraintSpec":
        """The constraint with bounds in force at step ``t``."""
        if self.schedule and t in self.schedule:
            lo, hi = self.schedule[t]
            return replace(self, lower=lo, upper=hi, schedule=None)
        if self.schedule:
            return replace(self, schedule=None)
        return self

    def same_as(self, other: "ConstraintSpec") -> bool:
        return (
            self.kind == other.kind
            and np.array_equal(self.v, other.v)
            and self.lower == other.lower
            and self.upper == other.upper
            and self.label == other.label
            and self.group == other.group
            and (self.schedule or {}) == (other.schedule or {})
        )

    @classmethod
    def trade_bound(cls, i: int, n: int, lower=-np.inf, upper=np.inf, label=None, group=None):
        return cls(ConstraintKind.TRADE_BOUND, np.eye(n)[i], lower, upper,
                   label or f"trade[{i}]", group)

    @classmethod
    def position_bound(cls, i: int, n: int, lower=-np.inf, upper=np.inf, label=None, group=None):
        return cls(ConstraintKind.POSITION_BOUND, np.eye(n)[i], lower, upper,
                   label or f"position[{i}]", group)

    @classmethod
    def trade_exposure(cls, v, lower=-np.inf, upper=np.inf, label="trade_exposure", group=None):
        return cls(ConstraintKind.TRADE_EXPOSURE, v, lower, upper, label, group)

    @classmethod
    def position_exposure(cls, v, lower=-np.inf, upper=np.inf, label="exposure", group=None):
        return cls(ConstraintKind.POSITION_EXPOSURE, v, lower, upper, label, group)


def long_only(n: int, benchmark: Sequence[float] | None = None, group: str = "long_only"):
    """Per-asset lower bounds ``x_i >= -benchmark_i`` (positions relative to benchmark)."""
    bench = np.zeros(n) if benchmark is None else np.asarray(benchmark, dtype=float)
    return [
        ConstraintSpec.position_bound(i, n, lower=-bench[i], label=f"long_only[{i}]", group=group)
        for i in range(n)
    ]


@dataclass(frozen=True)
class RowInfo:
    """Provenance of one inequality row.

    ``source`` is ``"user"`` (``index`` is the constraint position),
    ``"spread"`` or ``"financing"`` (``index`` is the asset).  ``side`` is
    ``"upper"`` or ``"lower"``.
    """

    source: str
    index: int
    side: str


@dataclass(frozen=True, eq=False)
class QpProblem:
    h: np.ndarray
    c: np.ndarray
    a: np.ndarray
    b: np.ndarray
    rows: tuple[RowInfo, ...] = ()
    var_map: tuple[tuple[str, int], ...] = ()
    n_assets: int = 0
    x_prev: np.ndarray | None = None
    constraints: tuple[ConstraintSpec, ...] = ()
    start: np.ndarray | None = None

    def __post_init__(self):
        h = np.atleast_2d(np.array(self.h, dtype=float))
        c = np.atleast_1d(np.array(self.c, dtype=float))
        m = c.shape[0]
        a = np.array(self.a, dtype=float).reshape(-1, m)
        b = np.atleast_1d(np.array(self.b, dtype=float)).reshape(-1)
        if h.shape != (m, m):
            raise ModelValidationError("h must be m x m")
        if a.shape[0] != b.shape[0]:
            raise ModelValidationError("a and b disagree on the number of rows")
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b)) and np.all(np.isfinite(c))):
            raise ModelValidationError("problem data must be finite")
        check_psd(h, "h")
        if not np.any(h):
            raise ModelValidationError("h is zero: the problem has no curvature")
        if np.any(np.linalg.norm(a, axis=1) == 0):
            raise ModelValidationError("zero constraint row")
        object.__setattr__(self, "h", 0.5 * (h + h.T))
        object.__setattr__(self, "c", c)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "b", b)
        if not self.var_map:
            object.__setattr__(self, "var_map", tuple(("trade", i) for i in range(m)))
        if not self.n_assets:
            object.__setattr__(
                self, "n_assets", sum(1 for kind, _ in self.var_map if kind == "trade")
            )

    @property
    def n_vars(self) -> int:
        return self.c.shape[0]

    @property
    def n_rows(self) -> int:
        return self.b.shape[0]

    def objective(self, y: np.ndarray) -> float:
        return float(0.5 * y @ self.h @ y + self.c @ y)


@dataclass(frozen=True, eq=False)
class QpSolution:
    y: np.ndarray
    trade: np.ndarray
    multipliers: np.ndarray
    active_set: tuple[int, ...]
    kkt_residual: float
    objective: float
    iterations: int = 0
    diagnostics: tuple[str, ...] = field(default_factory=tuple)

    @property
    def max_objective(self) -> float:
        """Optimal value of the original maximisation."""
        return -self.objective


def assemble_problem(
    model: MarketModel,
    q: np.ndarray,
    p: np.ndarray,
    x_prev: np.ndarray,
    g: np.ndarray,
    constraints: Iterable[ConstraintSpec] = (),
    d_prev: np.ndarray | None = None,
) -> QpProblem:
    """Build the minimisation form of the one-step problem.

    ``constraints`` must already carry the bounds of the current step (see
    :meth:`ConstraintSpec.at`).  ``d_prev`` is the price distortion, which
    enters linearly like the previous position.
    """
    n = model.n_assets
    x_prev = np.asarray(x_prev, dtype=float)
    g = np.asarray(g, dtype=float)
    if x_prev.shape != (n,) or g.shape != (n,) or np.shape(q) != (n, n) or np.shape(p) != (n, n):
        raise ModelValidationError("dimension mismatch in problem data")
    constraints = tuple(constraints)
    for cs in constraints:
        cs.validate(n)

    lam0, lam_l = model.lambda_spread, model.lambda_financing
    var_map = [("trade", i) for i in range(n)]
    if lam0 > 0:
        var_map += [("spread", i) for i in range(n)]
    if lam_l > 0:
        var_map += [("financing", i) for i in range(n)]
    m = len(var_map)
    off_s = n
    off_u = n + (n if lam0 > 0 else 0)

    h = np.zeros((m, m))
    h[:n, :n] = q
    c = np.zeros(m)
    c[:n] = p @ x_prev - g
    if d_prev is not None:
        c[:n] += d_prev
    rows_a, rows_b, info = [], [], []

    def add(row, bound, ri):
        rows_a.append(row)
        rows_b.append(bound)
        info.append(ri)

    if lam0 > 0:
        c[off_s:off_s + n] = lam0
        for i in range(n):
            up = np.zeros(m)
            up[i], up[off_s + i] = 1.0, -1.0
            lo = np.zeros(m)
            lo[i], lo[off_s + i] = -1.0, -1.0
            add(up, 0.0, RowInfo("spread", i, "upper"))
            add(lo, 0.0, RowInfo("spread", i, "lower"))
    if lam_l > 0:
        c[off_u:off_u + n] = lam_l
        for i in range(n):
            up = np.zeros(m)
            up[i], up[off_u + i] = 1.0, -1.0
            lo = np.zeros(m)
            lo[i], lo[off_u + i] = -1.0, -1.0
            add(up, -x_prev[i], RowInfo("financing", i, "upper"))
            add(lo, x_prev[i], RowInfo("financing", i, "lower"))
    for ci, cs in enumerate(constraints):
        shift = float(cs.v @ x_prev) if cs.kind.is_position else 0.0
        row = np.zeros(m)
        row[:n] = cs.v
        if np.isfinite(cs.upper):
            add(row, cs.upper - shift, RowInfo("user", ci, "upper"))
        if np.isfinite(cs.lower):
            add(-row, shift - cs.lower, RowInfo("user", ci, "lower"))

    start = np.zeros(m)
    if lam_l > 0:
        start[off_u:off_u + n] = np.abs(x_prev)
    return QpProblem(
        h=h,
        c=c,
        a=np.array(rows_a).reshape(-1, m),
        b=np.array(rows_b, dtype=float),
        rows=tuple(info),
        var_map=tuple(var_map),
        n_assets=n,
        x_prev=x_prev.copy(),
        constraints=constraints,
        start=start,
    )


def kkt_residual(problem: QpProblem, solution: QpSolution) -> float:
    """Largest of the stationarity, primal, dual and complementarity violations."""
    y, lam = solution.y, solution.multipliers
    a, b = problem.a, problem.b
    stat = problem.h @ y + problem.c
    if len(b):
        stat = stat + a.T @ lam
        slack = b - a @ y
        primal = max(0.0, float(-slack.min()))
        dual = max(0.0, float(-lam.min()))
        comp = float(np.max(np.abs(lam * slack)))
    else:
        primal = dual = comp = 0.0
    return max(float(np.max(np.abs(stat))), primal, dual, comp)


def _independent_subset(a: np.ndarray, candidates: Iterable[int], tol: float = 1e-10) -> list[int]:
    """Greedy lowest-index-first selection of linearly independent rows."""
    chosen: list[int] = []
    basis = np.zeros((0, a.shape[1]))
    for r in candidates:
        row = a[r]
        resid = row - basis.T @ (basis @ row) if len(chosen) else row
        nrm = np.linalg.norm(resid)
        if nrm > tol * max(1.0, np.linalg.norm(row)):
            chosen.append(r)
            basis = np.vstack([basis, resid / nrm])
    return chosen


class _Workspace:
    """Scaled copy of a problem plus the mutable state of one solve."""

    def __init__(self, problem: QpProblem, tol: float):
        self.problem = problem
        self.tol = tol
        h = problem.h
        self.rho = float(np.max(np.abs(np.linalg.eigvalsh(h))))
        self.h = h / self.rho
        self.c = problem.c / self.rho
        if problem.n_rows:
            self.norms = np.linalg.norm(problem.a, axis=1)
        else:
            self.norms = np.zeros(0)
        self.a = problem.a / self.norms[:, None] if problem.n_rows else problem.a
        self.b = problem.b / self.norms if problem.n_rows else problem.b
        # natural scales of the gradient and of the variables
        self.gscale = max(float(np.max(np.abs(self.c), initial=0.0)), 1e-300)
        y_free = np.linalg.lstsq(self.h, -self.c, rcond=None)[0]
        self.yscale = max(float(np.max(np.abs(self.b), initial=0.0)),
                          float(np.max(np.abs(y_free), initial=0.0)), 1e-300)
        self.feas_tol = tol * self.yscale

    def violation(self, y: np.ndarray) -> float:
        if not len(self.b):
            return 0.0
        return float(np.max(self.a @ y - self.b))

    def active_rows(self, y: np.ndarray) -> list[int]:
        if not len(self.b):
            return []
        slack = self.b - self.a @ y
        return [int(r) for r in np.flatnonzero(np.abs(slack) <= self.feas_tol)]

    def null_space(self, w: list[int]):
        m = len(self.c)
        if not w:
            return np.eye(m), None, None
        qf, rf = np.linalg.qr(self.a[w].T, mode="complete")
        k = len(w)
        return qf[:, k:], qf[:, :k], rf[:k, :k]

    def eqp(self, w: list[int]) -> np.ndarray | None:
        """Minimiser of the objective on ``{A_w y = b_w}``; None if unbounded there."""
        m = len(self.c)
        if w:
            y0 = np.linalg.lstsq(self.a[w], self.b[w], rcond=None)[0]
        else:
            y0 = np.zeros(m)
        z, _, _ = self.null_space(w)
        if z.shape[1] == 0:
            return y0
        g = self.h @ y0 + self.c
        rh = z.T @ self.h @ z
        zg = z.T @ g
        ev, u = np.linalg.eigh(rh)
        pos = ev > 1e-11 * max(1.0, float(ev.max(initial=0.0)))
        zn = u[:, ~pos].T @ zg
        if np.linalg.norm(zn) > 1e-10 * max(self.gscale, np.linalg.norm(g)):
            return None
        up = u[:, pos]
        return y0 - z @ (up @ ((up.T @ zg) / ev[pos]))

    def step(self, y: np.ndarray, z: np.ndarray):
        """Newton step in the null space, or a zero-curvature descent ray."""
        g = self.h @ y + self.c
        if z.shape[1] == 0:
            return np.zeros_like(y), False
        rh = z.T @ self.h @ z
        zg = z.T @ g
        try:
            chol = np.linalg.cholesky(rh)
            d = np.diag(chol)
            if d.min() ** 2 > 1e-11 * max(1.0, float(np.max(np.diag(rh)))):
                w = solve_triangular(chol, zg, lower=True)
                w = solve_triangular(chol.T, w, lower=False)
                return -z @ w, False
        except np.linalg.LinAlgError:
            pass
        ev, u = np.linalg.eigh(rh)
        pos = ev > 1e-11 * max(1.0, float(ev.max(initial=0.0)))
        un = u[:, ~pos]
        zn = un.T @ zg
        if np.linalg.norm(zn) > 1e-10 * max(self.gscale, np.linalg.norm(g)):
            return -z @ (un @ zn), True
        up = u[:, pos]
        return -z @ (up @ ((up.T @ zg) / ev[pos])), False


def _phase_one(ws: _Workspace) -> np.ndarray:
    m = len(ws.c)
    res = linprog(np.zeros(m), A_ub=ws.a, b_ub=ws.b, bounds=[(None, None)] * m, method="highs")
    if res.status == 2:
        raise InfeasibleError("no point satisfies the constraints")
    if res.status != 0:
        raise NumericalBreakdownError(f"phase-one LP failed: {res.message}")
    return np.asarray(res.x, dtype=float)


def _initial_point(ws: _Workspace, working_set: Sequence[int] | None):
    diagnostics = []
    if working_set is not None:
        w = _independent_subset(ws.a, sorted(set(int(r) for r in working_set)))
        y = ws.eqp(w)
        if y is not None and ws.violation(y) <= ws.feas_tol:
            return y, w, diagnostics
        diagnostics.append("working-set guess rejected")
    start = ws.problem.start
    if start is not None and ws.violation(start) <= ws.feas_tol:
        y = np.array(start, dtype=float)
    else:
        y = _phase_one(ws)
        if ws.violation(y) > 10 * ws.feas_tol:
            raise InfeasibleError("phase one returned an infeasible point")
    return y, _independent_subset(ws.a, ws.active_rows(y)), diagnostics


def solve(
    problem: QpProblem,
    tol: float = DEFAULT_TOL,
    max_iter: int | None = None,
    working_set: Sequence[int] | None = None,
) -> QpSolution:
    """Primal active-set solve.

    ``working_set`` is an optional guess of the binding rows (for instance
    the active set of the previous date); it is used only if the
    corresponding equality-constrained minimiser is feasible.
    """
    ws = _Workspace(problem, tol)
    m = problem.n_vars
    max_iter = 50 * m if max_iter is None else max_iter
    y, w, diagnostics = _initial_point(ws, working_set)
    bland_after = 5 * m + 10

    lam_w = np.zeros(0)
    for it in range(1, max_iter + 1):
        z, yb, rb = ws.null_space(w)
        p, ray = ws.step(y, z)
        scale_y = max(ws.yscale, float(np.max(np.abs(y))))
        if not ray and np.max(np.abs(p), initial=0.0) <= 1e-12 * scale_y:
            g = ws.h @ y + ws.c
            if w:
                lam_w = solve_triangular(rb, -(yb.T @ g), lower=False)
            else:
                lam_w = np.zeros(0)
            dual_tol = tol * max(ws.gscale, float(np.max(np.abs(g))))
            neg = np.flatnonzero(lam_w < -dual_tol)
            if not len(neg):
                break
            if it > bland_after:
                drop = neg[np.argmin([w[j] for j in neg])]
            else:
                drop = neg[np.argmin(lam_w[neg])]
            w = w[:drop] + w[drop + 1:]
            continue
        if len(ws.b):
            outside = np.ones(len(ws.b), dtype=bool)
            outside[w] = False
            ap = ws.a @ p
            moving = outside & (ap > 1e-13 * np.linalg.norm(p))
        else:
            moving = np.zeros(0, dtype=bool)
        alpha = np.inf if ray else 1.0
        block = -1
        if np.any(moving):
            idx = np.flatnonzero(moving)
            slack = np.maximum(ws.b[idx] - ws.a[idx] @ y, 0.0)
            ratios = slack / ap[idx]
            rmin = float(ratios.min())
            if rmin < alpha:
                near = idx[ratios <= rmin * (1 + 1e-12) + 1e-15]
                block = int(near.min())
                alpha = float(ratios[np.flatnonzero(idx == block)[0]])
        if not np.isfinite(alpha):
            raise UnboundedError("objective unbounded along a zero-curvature direction")
        y = y + alpha * p
        if block >= 0:
            w = w + [block]
    else:
        raise MaxIterationsError(f"no convergence after {max_iter} iterations")

    y = _pin_kinks(problem, y, w)
    lam = np.zeros(problem.n_rows)
    if w:
        lam_s = np.where(lam_w < 0, 0.0, lam_w)
        lam[w] = lam_s * ws.rho / ws.norms[w]
    scaled_resid = _scaled_residual(ws, y, lam_s if w else np.zeros(0), w)
    if scaled_resid > max(1e3 * tol, 1e-7):
        raise NumericalBreakdownError(f"KKT residual {scaled_resid:.3g} after solve")
    sol = QpSolution(
        y=y,
        trade=y[: problem.n_assets].copy(),
        multipliers=lam,
        active_set=tuple(sorted(w)),
        kkt_residual=0.0,
        objective=problem.objective(y),
        iterations=it,
        diagnostics=tuple(diagnostics),
    )
    return replace(sol, kkt_residual=kkt_residual(problem, sol))


def _pin_kinks(problem: QpProblem, y: np.ndarray, w: Sequence[int]) -> np.ndarray:
    """Place trades sitting on an L1 kink exactly on it.

    When both rows of a spread or financing pair bind, the trade is pinned
    to the kink (no trade, or a flat position) and its auxiliary is zero;
    the iterate only approximates that point up to rounding.
    """
    if len(problem.rows) != problem.n_rows:
        return y
    pairs = {}
    for r in w:
        info = problem.rows[r]
        if info.source in ("spread", "financing"):
            pairs.setdefault((info.source, info.index), {})[info.side] = r
    if not pairs:
        return y
    y = y.copy()
    aux = {key: j for j, key in enumerate(problem.var_map) if key[0] != "trade"}
    for key, sides in pairs.items():
        if len(sides) == 2:
            y[key[1]] = problem.b[sides["upper"]]
            y[aux[key]] = 0.0
    return y


def _scaled_residual(ws: _Workspace, y, lam_w, w) -> float:
    g = ws.h @ y + ws.c
    if w:
        g = g + ws.a[w].T @ lam_w
    hy = float(np.max(np.abs(ws.h @ y), initial=0.0))
    stat = float(np.max(np.abs(g))) / max(ws.gscale, hy)
    return max(stat, max(0.0, ws.violation(y)) / ws.yscale)
