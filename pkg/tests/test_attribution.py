from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from sigattr.attribution import (
    Mode,
    StepError,
    UndefinedTransferError,
    asset_contributions,
    attribute_l1_costs,
    attribute_pnl,
    attribute_quadratic_cost,
    attribute_risk,
    run_backtest,
    solve_step,
    step_constraint_portfolios,
    step_signalwise,
    transfer_coefficient,
    transfer_report,
    update_price_distortion,
)
from sigattr.effective import Classification
from sigattr.model import MarketModel, PortfolioState, SignalSet, build_static_matrices
from sigattr.qpsolver import ConstraintKind, ConstraintSpec
from sigattr.scenarios import Scenario, SignalGenSpec, generate_case_study, random_scenario


def _worked(constrained: bool):
    m = MarketModel(1, [[1.0]], gamma=1.0, lambda_quad=1.0)
    q, p = build_static_matrices(m)
    cons = [ConstraintSpec.position_bound(0, 1, upper=0.5, label="cap")] if constrained else []
    g = np.array([[1.5], [0.5]])
    res = solve_step(m, q, p, np.zeros(1), g.sum(axis=0), cons)
    return m, q, p, g, res


def test_worked_signalwise_step():
    _, _, _, g, res = _worked(True)
    assert res.multipliers[0].eta == pytest.approx(1.0, abs=1e-12)
    dx, state = step_signalwise(PortfolioState.zero(2, 1), res.matrices, g)
    assert_allclose(dx[:, 0], [0.375, 0.125], atol=1e-12)
    assert_allclose(state.x, [0.5], atol=1e-12)
    # the constrained total from a direct grid search of the objective
    grid = np.linspace(-1.0, 0.5, 150001)
    assert grid[np.argmax(2 * grid - grid**2)] == pytest.approx(0.5)


def test_worked_unconstrained_step():
    _, _, _, g, res = _worked(False)
    dx, _ = step_signalwise(PortfolioState.zero(2, 1), res.matrices, g)
    assert_allclose(dx[:, 0], [0.75, 0.25], atol=1e-12)
    # exponential smoothing toward the Markowitz position 2
    assert dx.sum() == pytest.approx(1.0 / 2.0 * (2.0 - 0.0))


def test_worked_constraint_portfolio_step():
    _, q, p, g, res = _worked(True)
    dx, state = step_constraint_portfolios(PortfolioState.zero(3, 1), q, p, g, res.solution,
                                           res.problem, ["cap"])
    assert_allclose(dx[:, 0], [0.75, 0.25, -0.5], atol=1e-12)
    assert_allclose(state.x, [0.5], atol=1e-12)


def test_constraint_portfolio_inactive_is_zero():
    _, q, p, g, res = _worked(False)
    dx, _ = step_constraint_portfolios(PortfolioState.zero(2, 1), q, p, g, res.solution,
                                       res.problem, [])
    assert_allclose(dx[:, 0], [0.75, 0.25], atol=1e-12)


def _scenario(g, returns=None, constraints=(), model=None, names=None):
    g = np.asarray(g, dtype=float)
    t, k, n = g.shape
    model = model or MarketModel(n, np.eye(n), gamma=1.0, lambda_quad=1.0)
    names = names or tuple(f"s{j}" for j in range(k))
    returns = np.zeros((t, n)) if returns is None else returns
    return Scenario(model, SignalSet(names, g), returns, list(constraints))


def test_zero_signals_give_zero_history():
    h = run_backtest(_scenario(np.zeros((5, 2, 3)), np.ones((5, 3))))
    for parts, total in h.quantities().values():
        assert not np.any(parts) and not np.any(total)


def test_single_signal_smoothing_recursion():
    rng = np.random.default_rng(1)
    g = rng.normal(size=(30, 1, 1))
    m = MarketModel(1, [[0.5]], gamma=2.0, lambda_quad=3.0)
    h = run_backtest(_scenario(g, model=m))
    gs2, lam = 2.0 * 0.5, 3.0 * 0.5
    x = 0.0
    for t in range(30):
        x = x + gs2 / (gs2 + lam) * (g[t, 0, 0] / gs2 - x)
        assert h.total_positions[t, 0] == pytest.approx(x, rel=1e-12, abs=1e-14)
    assert_array_equal(h.positions[:, 0], h.total_positions)


def test_risk_examples():
    assert_allclose(attribute_risk(np.eye(2), np.ones(2), np.eye(2)), [1.0, 1.0])
    assert_allclose(attribute_risk(np.array([[1.0], [-0.5]]), np.array([0.5]), np.eye(1)),
                    [0.5, -0.25])
    x = np.array([[0.3, -0.2]])
    sigma = np.array([[1.0, 0.2], [0.2, 2.0]])
    assert attribute_risk(x, x[0], sigma)[0] == pytest.approx(x[0] @ sigma @ x[0])


def test_quadratic_cost_examples():
    assert_allclose(attribute_quadratic_cost(np.eye(2), np.ones(2), np.eye(2)), [0.5, 0.5])
    c = attribute_quadratic_cost(np.array([[0.375], [0.125]]), np.array([0.5]), np.eye(1))
    assert_allclose(c, [0.09375, 0.03125])
    assert c.sum() == pytest.approx(0.5 * 0.5**2)


def test_l1_cost_examples():
    spread, fin = attribute_l1_costs(np.array([[0.6], [-0.1]]), np.array([0.5]),
                                     np.zeros((2, 1)), np.zeros(1), 1.0, 1.0)
    assert_allclose(spread, [0.6, -0.1])
    assert_allclose(fin, [0.0, 0.0])
    spread, _ = attribute_l1_costs(np.array([[0.3, -0.2], [-0.3, 0.2]]), np.zeros(2),
                                   np.zeros((2, 2)), np.zeros(2), 1.0, 0.0)
    assert not np.any(spread)
    dx = np.array([[0.4, -0.7]])
    spread, _ = attribute_l1_costs(dx, dx[0], dx, dx[0], 0.3, 0.0)
    assert spread[0] == pytest.approx(0.3 * 1.1)


def test_pnl_examples():
    pnl = attribute_pnl(np.array([[[0.375], [0.125]]]), np.array([[0.02]]))
    assert_allclose(pnl, [[0.0075, 0.0025]])
    assert not np.any(attribute_pnl(np.zeros((3, 2, 2)), np.ones((3, 2))))
    with pytest.raises(ValueError):
        attribute_pnl(np.zeros((3, 2, 2)), np.ones((2, 2)))


def test_transfer_coefficient_examples():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(10, 3))
    sigma = np.diag([1.0, 2.0, 0.5])
    assert transfer_coefficient(x, x, sigma) == pytest.approx(1.0)
    assert transfer_coefficient(x, -x, sigma) == pytest.approx(-1.0)
    xc = np.tile([1.0, 0.0], (5, 1))
    xu = np.tile([1.0, 1.0], (5, 1))
    assert transfer_coefficient(xc, xu, np.eye(2)) == pytest.approx(1 / math.sqrt(2))
    with pytest.raises(UndefinedTransferError):
        transfer_coefficient(np.zeros((5, 2)), xu, np.eye(2))


def test_price_distortion_examples():
    state = PortfolioState(np.zeros(1), np.zeros((1, 1)), np.array([0.2]), np.array([[0.2]]))
    out = update_price_distortion(state, np.array([[0.1]]), (np.array([[0.5]]), np.eye(1)))
    assert_allclose(out.per_signal_d, [[0.15]])
    assert_allclose(out.d, [0.15])
    out = update_price_distortion(state, np.array([[0.1]]), (np.eye(1), np.eye(1)))
    assert not np.any(out.per_signal_d)
    zero = PortfolioState.zero(1, 1, impact=True)
    out = update_price_distortion(zero, np.array([[1.0]]), (np.zeros((1, 1)), np.eye(1)))
    assert_allclose(out.per_signal_d, [[1.0]])
    with pytest.raises(ValueError):
        update_price_distortion(zero, np.ones((1, 2)), (np.zeros((1, 1)), np.eye(1)))


def _check_sums(h, rel=1e-8):
    for name, r in h.sum_residuals().items():
        assert r <= rel, (name, r)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 10_000), n=st.sampled_from([1, 2, 3, 5]), k=st.integers(1, 3))
def test_sum_identities_in_every_mode(seed, n, k):
    s = random_scenario(seed, n, k, 30)
    totals = {}
    for mode in Mode:
        h = run_backtest(s, mode)
        _check_sums(h)
        totals[mode] = h.total_positions
    # signal-wise and constraint-portfolio runs reproduce the same optimum
    scale = max(1.0, np.abs(totals[Mode.SIGNALWISE]).max())
    assert_allclose(totals[Mode.CONSTRAINT_PORTFOLIOS], totals[Mode.SIGNALWISE],
                    atol=1e-7 * scale)


@pytest.mark.parametrize("seed", range(5))
def test_single_signal_equals_total(seed):
    h = run_backtest(random_scenario(seed, 3, 1, 30))
    for name, (parts, total) in h.quantities().items():
        assert_allclose(parts[:, 0], total, rtol=1e-9, atol=1e-12 * max(1.0, np.abs(total).max()))


def test_permutation_equivariance():
    s = random_scenario(7, 3, 3, 40)
    perm = [2, 0, 1]
    g = s.signals.g[:, perm]
    names = tuple(s.signals.names[j] for j in perm)
    swapped = Scenario(s.model, SignalSet(names, g), s.realized_returns, s.constraints,
                       s.dynamic_params)
    a, b = run_backtest(s), run_backtest(swapped)
    for name in ("trades", "positions", "pnl", "risk", "quad_cost"):
        x, y = getattr(a, name), getattr(b, name)
        assert_allclose(y, x[:, perm], atol=1e-10 * max(1.0, np.abs(x).max()))


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-5, 5))
def test_scaling_linearity_with_fixed_effective_matrices(seed, c):
    s = random_scenario(seed, 3, 2, 5)
    q, p = build_static_matrices(s.model)
    x_prev = np.zeros(3)
    g = s.signals.g[0]
    res = solve_step(s.model, q, p, x_prev, g.sum(axis=0), [cs.at(0) for cs in s.constraints])
    base, _ = step_signalwise(PortfolioState.zero(2, 3), res.matrices, g)
    scaled_g = g.copy()
    scaled_g[0] *= c
    scaled, _ = step_signalwise(PortfolioState.zero(2, 3), res.matrices, scaled_g)
    assert_allclose(scaled[0], c * base[0], atol=1e-12 * max(1.0, abs(c)) * max(1.0, np.abs(base).max()))
    assert_allclose(scaled[1], base[1], atol=1e-14)


def test_case_study_invariants():
    s = generate_case_study(SignalGenSpec(), 10, 250, seed=5)
    h = run_backtest(s, Mode.SIGNALWISE)
    _check_sums(h)
    lower = -s.benchmark
    assert np.all(h.total_positions >= lower - 1e-9)
    assert h.constrained_steps.any()
    cp = run_backtest(s, Mode.CONSTRAINT_PORTFOLIOS)
    assert cp.group_names == ("long_only",)
    assert_allclose(cp.total_positions, h.total_positions, atol=1e-7)


def test_case_study_zero_benchmark_hits_hard_directions():
    s = generate_case_study(SignalGenSpec(), 4, 60, seed=9, benchmark=0.0)
    h = run_backtest(s)
    hard = [(t, v) for t, dirs in enumerate(h.hard_directions) for v, kind in dirs
            if kind is Classification.POSITION_LIKE]
    assert hard
    for t, v in hard:
        assert_allclose(h.positions[t] @ v, 0.0, atol=1e-10)
    assert np.all(h.total_positions >= -1e-12)


def test_transfer_report_range():
    s = generate_case_study(SignalGenSpec(), 5, 80, seed=3)
    rep = transfer_report(run_backtest(s), run_backtest(s, Mode.UNCONSTRAINED), s.model.sigma)
    assert set(rep.coefficients) == {"value", "momentum"}
    assert all(-1 - 1e-12 <= c <= 1 + 1e-12 for c in rep.coefficients.values())
    unc = run_backtest(s, Mode.UNCONSTRAINED)
    same = transfer_report(unc, unc, s.model.sigma)
    assert all(c == pytest.approx(1.0) for c in same.coefficients.values())


def test_asset_contributions_sum_to_history():
    s = random_scenario(4, 3, 2, 20)
    h = run_backtest(s)
    per_asset = asset_contributions(h, s.model, s.realized_returns)
    pairs = {"pnl": h.pnl, "risk_contrib": h.risk, "quad_cost": h.quad_cost,
             "spread_cost": h.spread_cost, "financing_cost": h.financing_cost,
             "power32_cost": h.power32_cost}
    for name, series in pairs.items():
        parts, total = per_asset[name]
        assert_allclose(parts.sum(axis=2), series, atol=1e-12)
        assert_allclose(parts.sum(axis=1), total, atol=1e-10)


def test_step_error_reports_step():
    floor = ConstraintSpec(ConstraintKind.TRADE_BOUND, [1.0], -1.0, 1.0, "floor",
                           schedule={1: (0.5, 0.6)})
    cap = ConstraintSpec.trade_bound(0, 1, lower=-1.0, upper=0.1, label="cap")
    # the scheduled floor of 0.5 clashes with the 0.1 cap at step 1
    with pytest.raises(StepError) as info:
        run_backtest(_scenario(np.ones((3, 1, 1)), constraints=[floor, cap]))
    assert info.value.step == 1
