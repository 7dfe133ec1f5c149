"""Exact attribution of trades, positions, pnl, risk and costs to signals.

Two splits are available.  The signal-wise split solves, for every signal
``k``, ``Q_bar dx_k + P_bar x_k = g_k`` with the effective matrices of the
date, so constraints are absorbed into each signal portfolio.  The
constraint-portfolio split (Grinold-Easton) keeps the original ``Q, P`` and
gives every constraint group its own source ``-sum lam_c a_c``.  Both
reproduce the constrained optimum exactly.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import TYPE_CHECKING, Mapping, Sequence

import numpy as np

from . import closedform
from .effective import (
    AttributionMultiplier,
    Classification,
    EffectiveMatrices,
    attribution_multipliers,
    effective_matrices,
    solve_effective_steps,
    verify_reconstruction,
)
from .model import MarketModel, PortfolioState, build_static_matrices, scale_signals_dynamic
from .qpsolver import (
    DEFAULT_TOL,
    ConstraintKind,
    ConstraintSpec,
    NumericalBreakdownError,
    QpError,
    QpProblem,
    QpSolution,
    RowInfo,
    assemble_problem,
    solve,
)

if TYPE_CHECKING:
    from .scenarios import Scenario

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    SIGNALWISE = "signalwise"
    CONSTRAINT_PORTFOLIOS = "constraint-portfolios"
    UNCONSTRAINED = "unconstrained"


class StepError(RuntimeError):
    """A failure inside the time loop, tagged with the step index."""

    def __init__(self, step: int, cause: Exception):
        super().__init__(f"step {step}: {cause}")
        self.step = step
        self.cause = cause


class UndefinedTransferError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class StepResult:
    problem: QpProblem
    solution: QpSolution
    trade: np.ndarray
    multipliers: tuple[AttributionMultiplier, ...]
    matrices: EffectiveMatrices
    reconstruction: float
    power32_gradient: np.ndarray | None = None


def _separable_bounds(constraints: Sequence[ConstraintSpec], n: int, x_prev: np.ndarray):
    lo = np.full(n, -np.inf)
    hi = np.full(n, np.inf)
    for cs in constraints:
        if cs.kind not in (ConstraintKind.TRADE_BOUND, ConstraintKind.POSITION_BOUND):
            raise ValueError("power-3/2 costs support only per-asset trade/position bounds")
        i = int(np.flatnonzero(cs.v)[0])
        shift = x_prev[i] if cs.kind is ConstraintKind.POSITION_BOUND else 0.0
        lo[i] = max(lo[i], cs.lower - shift)
        hi[i] = min(hi[i], cs.upper - shift)
    return lo, hi


def power32_trade(
    model: MarketModel,
    q: np.ndarray,
    p: np.ndarray,
    x_prev: np.ndarray,
    g: np.ndarray,
    constraints: Sequence[ConstraintSpec] = (),
    d_prev: np.ndarray | None = None,
) -> np.ndarray:
    """Exact optimum with power-3/2 costs when the problem splits by asset."""
    n = model.n_assets
    if np.any(np.abs(q - np.diag(np.diag(q))) > 0):
        raise ValueError("power-3/2 costs need a diagonal Q (separable problem)")
    lo, hi = _separable_bounds(constraints, n, x_prev)
    src = g - p @ x_prev - (0.0 if d_prev is None else d_prev)
    out = np.zeros(n)
    for i in range(n):
        pii = p[i, i] if p[i, i] > 0 else q[i, i]
        step = closedform.SingleAssetStep(
            g=src[i] + pii * x_prev[i],
            x_prev=x_prev[i],
            gamma_sigma2=pii,
            lambda_quad=q[i, i] - pii,
            lambda_spread=model.lambda_spread,
            lambda_fin=model.lambda_financing,
            lambda_p32=model.lambda_power32,
        )
        out[i] = closedform.solve_single_asset(step, lo[i], hi[i])
    # dust trades (closing a rounding-level position) would give an
    # astronomically large effective cost; treat them as no trade
    scale = max(float(np.max(np.abs(out), initial=0.0)), float(np.max(np.abs(x_prev), initial=0.0)))
    out[np.abs(out) <= 1e-13 * scale] = 0.0
    return out


def solve_step(
    model: MarketModel,
    q: np.ndarray,
    p: np.ndarray,
    x_prev: np.ndarray,
    g: np.ndarray,
    constraints: Sequence[ConstraintSpec] = (),
    d_prev: np.ndarray | None = None,
    tol: float = DEFAULT_TOL,
    warm_rows: set[RowInfo] | None = None,
    hard_as_large: bool = False,
) -> StepResult:
    """Solve one date and convert its multipliers into effective matrices."""
    n = model.n_assets
    extra: list[AttributionMultiplier] = []
    q_solve = q
    p32_grad = None
    if model.lambda_power32 > 0:
        t = power32_trade(model, q, p, x_prev, g, constraints, d_prev)
        eta = np.where(t != 0, 0.75 * model.lambda_power32 / np.sqrt(np.abs(t) + (t == 0)), 0.0)
        q_solve = q + np.diag(2.0 * eta)
        p32_grad = 1.5 * model.lambda_power32 * np.sign(t) * np.sqrt(np.abs(t))
        eye = np.eye(n)
        extra = [
            AttributionMultiplier(f"power32[{i}]", Classification.TRADE_LIKE, float(eta[i]),
                                  float(abs(t[i])), 1, eye[i], 0.0, "power32", i)
            for i in range(n)
        ]
    problem = assemble_problem(model, q_solve, p, x_prev, g, constraints, d_prev)
    guess = None
    if warm_rows:
        guess = [r for r, info in enumerate(problem.rows) if info in warm_rows]
    solution = solve(problem, tol=tol, working_set=guess)
    mults = attribution_multipliers(solution, problem) + extra
    em = effective_matrices(q, p, mults, hard_as_large=hard_as_large)
    source = g - (0.0 if d_prev is None else d_prev)
    recon = verify_reconstruction(em, x_prev, source, solution.trade)
    if p32_grad is not None:
        tq = solution.trade
        gap = np.max(np.abs(tq - t)) if n else 0.0
        if gap > 1e-7 * max(1.0, float(np.max(np.abs(t)))):
            raise NumericalBreakdownError(f"power-3/2 QP disagrees with the separable solve by {gap:.3g}")
    return StepResult(problem, solution, solution.trade, tuple(mults), em, recon, p32_grad)


def step_signalwise(
    state: PortfolioState, em: EffectiveMatrices, g: np.ndarray
) -> tuple[np.ndarray, PortfolioState]:
    """Per-signal trades from the effective optimality equation.

    Price distortion components (when present) enter every source the same
    way as in the total problem.
    """
    sources = np.asarray(g, dtype=float)
    if state.per_signal_d is not None:
        sources = sources - state.per_signal_d
    trades = solve_effective_steps(em, state.per_signal_x, sources)
    new_x = state.per_signal_x + trades
    return trades, PortfolioState(new_x.sum(axis=0), new_x, state.d, state.per_signal_d)


def constraint_sources(
    problem: QpProblem,
    solution: QpSolution,
    groups: Sequence[str],
    power32_gradient: np.ndarray | None = None,
) -> np.ndarray:
    """Source term of each constraint group, ``-sum_c lam_c a_c`` (trade part)."""
    n = problem.n_assets
    index = {gname: j for j, gname in enumerate(groups)}
    out = np.zeros((len(groups), n))
    for r in solution.active_set:
        lam = solution.multipliers[r]
        if lam == 0:
            continue
        info = problem.rows[r]
        gname = problem.constraints[info.index].group if info.source == "user" else info.source
        out[index[gname]] -= lam * problem.a[r, :n]
    if power32_gradient is not None:
        out[index["power32"]] -= power32_gradient
    return out


def step_constraint_portfolios(
    state: PortfolioState,
    q: np.ndarray,
    p: np.ndarray,
    g: np.ndarray,
    solution: QpSolution,
    problem: QpProblem,
    groups: Sequence[str],
    power32_gradient: np.ndarray | None = None,
) -> tuple[np.ndarray, PortfolioState]:
    """Grinold-Easton split: signals and constraint groups with the original Q, P.

    ``state`` has one row per signal followed by one row per group.
    """
    cons = constraint_sources(problem, solution, groups, power32_gradient)
    sources = np.vstack([np.asarray(g, dtype=float), cons])
    if state.per_signal_d is not None:
        sources = sources - state.per_signal_d
    rhs = sources - state.per_signal_x @ p.T
    trades = np.linalg.solve(q, rhs.T).T
    new_x = state.per_signal_x + trades
    return trades, PortfolioState(new_x.sum(axis=0), new_x, state.d, state.per_signal_d)


def update_price_distortion(
    state: PortfolioState, per_signal_dx: np.ndarray, impact: tuple[np.ndarray, np.ndarray]
) -> PortfolioState:
    """``D_k <- (I - R)(D_k + C dx_k)`` for every component and the total."""
    r, c = impact
    n = state.x.shape[0]
    per_signal_dx = np.asarray(per_signal_dx, dtype=float)
    if r.shape != (n, n) or c.shape != (n, n) or per_signal_dx.shape != state.per_signal_x.shape:
        raise ValueError("dimension mismatch in price-distortion update")
    decay = np.eye(n) - r
    d = state.d if state.d is not None else np.zeros(n)
    pd_ = state.per_signal_d if state.per_signal_d is not None else np.zeros_like(state.per_signal_x)
    new_pd = (pd_ + per_signal_dx @ c.T) @ decay.T
    new_d = decay @ (d + c @ per_signal_dx.sum(axis=0))
    return PortfolioState(state.x, state.per_signal_x, new_d, new_pd)


def attribute_risk(per_signal_x: np.ndarray, x: np.ndarray, sigma: np.ndarray) -> np.ndarray:
    """Euler split ``R_k = x_k . Sigma . x``; components may be negative."""
    return np.asarray(per_signal_x) @ (sigma @ x)


def attribute_quadratic_cost(per_signal_dx: np.ndarray, dx: np.ndarray, cost: np.ndarray) -> np.ndarray:
    """``C_k = 1/2 dx_k . Lambda . dx``."""
    return 0.5 * np.asarray(per_signal_dx) @ (cost @ dx)


def _sign(y: np.ndarray) -> np.ndarray:
    y = np.asarray(y, dtype=float)
    snap = 1e-13 * max(1.0, float(np.max(np.abs(y), initial=0.0)))
    return np.where(np.abs(y) <= snap, 0.0, np.sign(y))


def attribute_l1_costs(
    per_signal_dx: np.ndarray,
    dx: np.ndarray,
    per_signal_x_new: np.ndarray,
    x_new: np.ndarray,
    lambda_spread: float,
    lambda_financing: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Spread and financing costs signed by the total trade / total position."""
    spread = lambda_spread * (np.asarray(per_signal_dx) @ _sign(dx))
    financing = lambda_financing * (np.asarray(per_signal_x_new) @ _sign(x_new))
    return spread, financing


def attribute_power32_cost(per_signal_dx: np.ndarray, dx: np.ndarray, lambda_p32: float) -> np.ndarray:
    """``lambda * sum_i dx_ki sgn(dx_i) |dx_i|^(1/2)``, which sums to ``lambda |dx|^(3/2)``."""
    return lambda_p32 * (np.asarray(per_signal_dx) @ (_sign(dx) * np.sqrt(np.abs(dx))))


def attribute_pnl(per_signal_x: np.ndarray, realized_returns: np.ndarray) -> np.ndarray:
    """``pnl[t, k] = x_k,t . r_{t+1}`` where ``realized_returns[t]`` holds r_{t+1}."""
    per_signal_x = np.asarray(per_signal_x, dtype=float)
    r = np.asarray(realized_returns, dtype=float)
    if per_signal_x.shape[0] != r.shape[0] or per_signal_x.shape[2] != r.shape[1]:
        raise ValueError("positions and returns have mismatched shapes")
    return np.einsum("tkn,tn->tk", per_signal_x, r)


def transfer_coefficient(constrained: np.ndarray, unconstrained: np.ndarray, sigma: np.ndarray) -> float:
    """Risk-metric cosine between two T x n position histories."""
    xc = np.asarray(constrained, dtype=float).reshape(-1, sigma.shape[0])
    xu = np.asarray(unconstrained, dtype=float).reshape(-1, sigma.shape[0])
    if xc.shape != xu.shape:
        raise ValueError("histories have different shapes")
    cross = float(np.einsum("ti,ij,tj->", xc, sigma, xu))
    nc = float(np.einsum("ti,ij,tj->", xc, sigma, xc))
    nu = float(np.einsum("ti,ij,tj->", xu, sigma, xu))
    if nc <= 0 or nu <= 0:
        raise UndefinedTransferError("transfer coefficient undefined for a zero-risk history")
    return float(np.clip(cross / math.sqrt(nc * nu), -1.0, 1.0))


@dataclass(frozen=True)
class BacktestOptions:
    tol: float = DEFAULT_TOL
    warm_start: bool = True
    hard_as_large: bool = False


@dataclass(eq=False)
class AttributionHistory:
    """Per-source time series.  Sources are the signals, then (in
    constraint-portfolio mode) the constraint groups."""

    mode: Mode
    times: list
    signal_names: tuple[str, ...]
    group_names: tuple[str, ...]
    trades: np.ndarray
    positions: np.ndarray
    pnl: np.ndarray
    risk: np.ndarray
    quad_cost: np.ndarray
    spread_cost: np.ndarray
    financing_cost: np.ndarray
    power32_cost: np.ndarray
    total_trades: np.ndarray
    total_positions: np.ndarray
    total_pnl: np.ndarray
    total_risk: np.ndarray
    total_quad_cost: np.ndarray
    total_spread_cost: np.ndarray
    total_financing_cost: np.ndarray
    total_power32_cost: np.ndarray
    kkt_residuals: np.ndarray
    reconstruction_residuals: np.ndarray
    constrained_steps: np.ndarray
    step_multipliers: list = field(default_factory=list)
    hard_directions: list = field(default_factory=list)
    effective: list = field(default_factory=list)

    @property
    def source_names(self) -> tuple[str, ...]:
        return self.signal_names + self.group_names

    @property
    def k_signals(self) -> int:
        return len(self.signal_names)

    def _signal(self, a):
        return a[:, : self.k_signals]

    @property
    def per_signal_trades(self):
        return self._signal(self.trades)

    @property
    def per_signal_positions(self):
        return self._signal(self.positions)

    @property
    def per_signal_pnl(self):
        return self._signal(self.pnl)

    @property
    def per_signal_risk(self):
        return self._signal(self.risk)

    @property
    def per_signal_quad_cost(self):
        return self._signal(self.quad_cost)

    @property
    def per_signal_spread_cost(self):
        return self._signal(self.spread_cost)

    @property
    def per_signal_financing_cost(self):
        return self._signal(self.financing_cost)

    @property
    def constraint_portfolios(self) -> dict[str, np.ndarray] | None:
        if not self.group_names:
            return None
        k = self.k_signals
        return {gname: self.positions[:, k + j] for j, gname in enumerate(self.group_names)}

    def quantities(self) -> dict[str, tuple[np.ndarray, np.ndarray]]:
        """``name -> (per-source array, total)`` for every attributed quantity."""
        return {
            "trade": (self.trades, self.total_trades),
            "position": (self.positions, self.total_positions),
            "pnl": (self.pnl, self.total_pnl),
            "risk": (self.risk, self.total_risk),
            "quad_cost": (self.quad_cost, self.total_quad_cost),
            "spread_cost": (self.spread_cost, self.total_spread_cost),
            "financing_cost": (self.financing_cost, self.total_financing_cost),
            "power32_cost": (self.power32_cost, self.total_power32_cost),
        }

    def sum_residuals(self) -> dict[str, float]:
        """Largest gap between the summed sources and the total.

        Gaps are relative to the largest magnitude the quantity (total or
        any single source) reaches over the history, so steps where the
        total is zero are judged at the quantity's natural scale.
        """
        out = {}
        for name, (parts, total) in self.quantities().items():
            gap = float(np.max(np.abs(parts.sum(axis=1) - total), initial=0.0))
            scale = max(float(np.max(np.abs(total), initial=0.0)),
                        float(np.max(np.abs(parts), initial=0.0)))
            out[name] = gap / scale if scale > 0 else gap
        return out


def _group_names(model: MarketModel, constraints: Sequence[ConstraintSpec]) -> tuple[str, ...]:
    names: list[str] = []
    for cs in constraints:
        if cs.group not in names:
            names.append(cs.group)
    for flag, name in ((model.lambda_spread, "spread"), (model.lambda_financing, "financing"),
                       (model.lambda_power32, "power32")):
        if flag > 0:
            if name in names:
                raise ValueError(f"constraint group name {name!r} is reserved")
            names.append(name)
    return tuple(names)


def run_backtest(
    scenario: "Scenario",
    mode: Mode | str = Mode.SIGNALWISE,
    options: BacktestOptions | None = None,
    q: np.ndarray | None = None,
    p: np.ndarray | None = None,
) -> AttributionHistory:
    """Time loop from zero positions: solve, convert multipliers, attribute.

    ``q`` and ``p`` default to the static-model matrices of the scenario's
    market model.
    """
    mode = Mode(mode)
    options = options or BacktestOptions()
    model = scenario.model
    if q is None or p is None:
        q, p = build_static_matrices(model)
    signals = scenario.signals
    if scenario.dynamic_params is not None:
        signals = scale_signals_dynamic(signals, scenario.dynamic_params, model.gamma)
    g_all = signals.g
    t_steps, k, n = g_all.shape
    constraints = [] if mode is Mode.UNCONSTRAINED else list(scenario.constraints)
    groups = _group_names(model, constraints) if mode is Mode.CONSTRAINT_PORTFOLIOS else ()
    s = k + len(groups)
    impact = model.impact
    returns = np.asarray(scenario.realized_returns, dtype=float)
    cost = model.cost_matrix

    trades = np.zeros((t_steps, s, n))
    positions = np.zeros((t_steps, s, n))
    tot_trades = np.zeros((t_steps, n))
    tot_pos = np.zeros((t_steps, n))
    kkt = np.zeros(t_steps)
    recon = np.zeros(t_steps)
    constrained = np.zeros(t_steps, dtype=bool)
    step_mults, hard_dirs, effs = [], [], []

    state = PortfolioState.zero(s, n, impact=impact is not None)
    # the solver total is tracked apart from the split so that a broken
    # sum identity shows up in the residuals instead of aborting the run
    x_tot = np.zeros(n)
    warm: set[RowInfo] | None = None
    for t in range(t_steps):
        cons_t = [cs.at(t) for cs in constraints]
        g_t = g_all[t]
        g_tot = g_t.sum(axis=0)
        try:
            res = solve_step(model, q, p, x_tot, g_tot, cons_t, state.d, options.tol,
                             warm if options.warm_start else None, options.hard_as_large)
            if mode is Mode.CONSTRAINT_PORTFOLIOS:
                dx, comp = step_constraint_portfolios(
                    state, q, p, g_t, res.solution, res.problem, groups, res.power32_gradient)
            else:
                dx, comp = step_signalwise(state, res.matrices, g_t)
            total_dx = res.trade
            x_new = x_tot + total_dx
            new_state = comp
            if impact is not None:
                new_state = update_price_distortion(new_state, dx, impact)
        except (QpError, ValueError, RuntimeError, np.linalg.LinAlgError) as exc:
            raise StepError(t, exc) from exc
        warm = {res.problem.rows[r] for r in res.solution.active_set}
        trades[t] = dx
        positions[t] = new_state.per_signal_x
        tot_trades[t] = total_dx
        tot_pos[t] = x_new
        kkt[t] = res.solution.kkt_residual
        recon[t] = res.reconstruction
        active = [mu for mu in res.multipliers if mu.active]
        constrained[t] = bool(active)
        step_mults.append(active)
        hard_dirs.append(res.matrices.hard_directions)
        effs.append((res.matrices.q_bar, res.matrices.p_bar))
        state = new_state
        x_tot = x_new

    pnl = attribute_pnl(positions, returns) if len(returns) else np.zeros((t_steps, s))
    total_pnl = np.einsum("tn,tn->t", tot_pos, returns)
    risk = np.einsum("tkn,tn->tk", positions, tot_pos @ model.sigma.T)
    total_risk = np.einsum("tn,tn->t", tot_pos, tot_pos @ model.sigma.T)
    quad = 0.5 * np.einsum("tkn,tn->tk", trades, tot_trades @ cost.T)
    total_quad = 0.5 * np.einsum("tn,tn->t", tot_trades, tot_trades @ cost.T)
    spread = np.zeros((t_steps, s))
    fin = np.zeros((t_steps, s))
    p32 = np.zeros((t_steps, s))
    for t in range(t_steps):
        spread[t], fin[t] = attribute_l1_costs(trades[t], tot_trades[t], positions[t], tot_pos[t],
                                               model.lambda_spread, model.lambda_financing)
        p32[t] = attribute_power32_cost(trades[t], tot_trades[t], model.lambda_power32)
    total_spread = model.lambda_spread * np.abs(tot_trades).sum(axis=1)
    total_fin = model.lambda_financing * np.abs(tot_pos).sum(axis=1)
    total_p32 = model.lambda_power32 * (np.abs(tot_trades) ** 1.5).sum(axis=1)

    return AttributionHistory(
        mode=mode,
        times=list(scenario.times) if scenario.times is not None else list(range(t_steps)),
        signal_names=tuple(signals.names),
        group_names=tuple(groups),
        trades=trades,
        positions=positions,
        pnl=pnl,
        risk=risk,
        quad_cost=quad,
        spread_cost=spread,
        financing_cost=fin,
        power32_cost=p32,
        total_trades=tot_trades,
        total_positions=tot_pos,
        total_pnl=total_pnl,
        total_risk=total_risk,
        total_quad_cost=total_quad,
        total_spread_cost=total_spread,
        total_financing_cost=total_fin,
        total_power32_cost=total_p32,
        kkt_residuals=kkt,
        reconstruction_residuals=recon,
        constrained_steps=constrained,
        step_multipliers=step_mults,
        hard_directions=hard_dirs,
        effective=effs,
    )


@dataclass(frozen=True)
class TransferReport:
    coefficients: dict[str, float]
    constrained_pnl: dict[str, float]
    unconstrained_pnl: dict[str, float]
    costs: dict[str, float]


def transfer_report(
    constrained: AttributionHistory, unconstrained: AttributionHistory, sigma: np.ndarray
) -> TransferReport:
    """Per-signal transfer coefficients between a run and its unconstrained twin."""
    if constrained.signal_names != unconstrained.signal_names:
        raise ValueError("runs have different signals")
    coefs, cpnl, upnl, costs = {}, {}, {}, {}
    for k, name in enumerate(constrained.signal_names):
        coefs[name] = transfer_coefficient(
            constrained.positions[:, k], unconstrained.positions[:, k], sigma)
        cpnl[name] = float(constrained.pnl[:, k].sum())
        upnl[name] = float(unconstrained.pnl[:, k].sum())
        costs[name] = float(
            constrained.quad_cost[:, k].sum() + constrained.spread_cost[:, k].sum()
            + constrained.financing_cost[:, k].sum() + constrained.power32_cost[:, k].sum()
        )
    return TransferReport(coefs, cpnl, upnl, costs)


def asset_contributions(
    history: AttributionHistory, model: MarketModel, realized_returns: np.ndarray
) -> dict[str, tuple[np.ndarray, np.ndarray]]:
    """Per-asset terms ``(T x S x n, T x n)`` of every scalar attribution.

    Summing over assets recovers the per-source series of ``history``.
    """
    r = np.asarray(realized_returns, dtype=float)
    pos, trd = history.positions, history.trades
    xt, dxt = history.total_positions, history.total_trades
    marg_risk = xt @ model.sigma.T
    marg_quad = 0.5 * dxt @ model.cost_matrix.T
    sgn_dx = np.stack([_sign(row) for row in dxt])
    sgn_x = np.stack([_sign(row) for row in xt])
    marg_spread = model.lambda_spread * sgn_dx
    marg_fin = model.lambda_financing * sgn_x
    marg_p32 = model.lambda_power32 * sgn_dx * np.sqrt(np.abs(dxt))
    out = {
        "trade": (trd, dxt),
        "position": (pos, xt),
        "pnl": (pos * r[:, None, :], xt * r),
        "risk_contrib": (pos * marg_risk[:, None, :], xt * marg_risk),
        "quad_cost": (trd * marg_quad[:, None, :], dxt * marg_quad),
        "spread_cost": (trd * marg_spread[:, None, :], model.lambda_spread * np.abs(dxt)),
        "financing_cost": (pos * marg_fin[:, None, :], model.lambda_financing * np.abs(xt)),
        "power32_cost": (trd * marg_p32[:, None, :], model.lambda_power32 * np.abs(dxt) ** 1.5),
    }
    return out
