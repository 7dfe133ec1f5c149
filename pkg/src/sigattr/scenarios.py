"""Scenario construction, synthetic signal generation and file I/O.

Random numbers come from SplitMix64 so that fixtures are reproducible
across implementations:

    state <- state + 0x9E3779B97F4A7C15            (mod 2^64)
    z <- state
    z <- (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9      (mod 2^64)
    z <- (z ^ (z >> 27)) * 0x94D049BB133111EB      (mod 2^64)
    output z ^ (z >> 31)

Uniforms use the top 53 bits, ``u = (z >> 11) * 2^-53``.  Normals use
Box-Muller on consecutive uniform pairs ``(u1, u2)``:
``r = sqrt(-2 log(1 - u1))`` gives ``r cos(2 pi u2)`` then ``r sin(2 pi u2)``.

Run configuration is JSON; the schema is documented in the README.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

import numpy as np

from .model import (
    DynamicModelParams,
    MarketModel,
    ModelValidationError,
    SignalSet,
    check_psd,
)
from .qpsolver import ConstraintKind, ConstraintSpec, long_only

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
MIX_1 = 0xBF58476D1CE4E5B9
MIX_2 = 0x94D049BB133111EB
MASK64 = (1 << 64) - 1

SIGNALS_COLUMNS = ("time", "asset", "signal_name", "value")
RETURNS_COLUMNS = ("time", "asset", "return")
CONSTRAINT_COLUMNS = ("label", "group", "kind", "lower", "upper", "weights", "time")


class ScenarioError(ValueError):
    """Malformed scenario input (bad config, CSV content or generator spec)."""


class SplitMix64:
    """Counter-based SplitMix64; ``draw(m)`` equals ``m`` sequential calls."""

    def __init__(self, seed: int):
        if isinstance(seed, bool) or not isinstance(seed, (int, np.integer)):
            raise ScenarioError(f"seed must be an integer, got {type(seed).__name__}")
        self.state = int(seed) & MASK64

    def draw(self, count: int) -> np.ndarray:
        count = int(count)
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(GOLDEN_GAMMA)
            z = (z ^ (z >> np.uint64(30))) * np.uint64(MIX_1)
            z = (z ^ (z >> np.uint64(27))) * np.uint64(MIX_2)
        self.state = (self.state + count * GOLDEN_GAMMA) & MASK64
        return z ^ (z >> np.uint64(31))

    def uniform(self, count: int) -> np.ndarray:
        """Uniforms on ``[0, 1)``."""
        return (self.draw(count) >> np.uint64(11)).astype(np.float64) * 2.0**-53

    def normal(self, count: int) -> np.ndarray:
        pairs = (int(count) + 1) // 2
        u = self.uniform(2 * pairs).reshape(pairs, 2)
        r = np.sqrt(-2.0 * np.log1p(-u[:, 0]))
        theta = 2.0 * np.pi * u[:, 1]
        return np.column_stack([r * np.cos(theta), r * np.sin(theta)]).ravel()[:count]


@dataclass(frozen=True)
class SignalGenSpec:
    """AR(1) signal generator: ``f_t = rho f_{t-1} + scale * eps_t``.

    ``eps_t`` is correlated across signals by ``correlation`` and independent
    across assets.  Return noise is ``noise_scale * L z`` with ``L`` the
    Cholesky factor of the model covariance.
    """

    rho: Sequence[float] = (0.98, 0.9)
    innovation_scale: Sequence[float] = (0.002, 0.004)
    correlation: Any = ((1.0, -0.5), (-0.5, 1.0))
    noise_scale: float = 1.0
    names: Sequence[str] = ("value", "momentum")

    def __post_init__(self):
        rho = np.atleast_1d(np.array(self.rho, dtype=float))
        scale = np.atleast_1d(np.array(self.innovation_scale, dtype=float))
        k = rho.shape[0]
        if scale.shape != (k,) or len(self.names) != k:
            raise ScenarioError("rho, innovation_scale and names must have one entry per signal")
        if np.any(~np.isfinite(rho)) or np.any(rho < 0) or np.any(rho >= 1):
            raise ScenarioError("persistence rho must lie in [0, 1)")
        if np.any(~np.isfinite(scale)) or np.any(scale < 0):
            raise ScenarioError("innovation scales must be nonnegative")
        if not (math.isfinite(self.noise_scale) and self.noise_scale >= 0):
            raise ScenarioError("noise_scale must be nonnegative")
        corr = np.array(self.correlation, dtype=float)
        if corr.shape != (k, k) or not np.all(np.isfinite(corr)):
            raise ScenarioError(f"correlation must be a finite {k}x{k} matrix")
        if not np.allclose(np.diag(corr), 1.0, rtol=0, atol=1e-12):
            raise ScenarioError("correlation must have a unit diagonal")
        try:
            check_psd(corr, "correlation")
        except ModelValidationError as exc:
            raise ScenarioError(str(exc)) from exc
        object.__setattr__(self, "rho", rho)
        object.__setattr__(self, "innovation_scale", scale)
        object.__setattr__(self, "correlation", corr)
        object.__setattr__(self, "noise_scale", float(self.noise_scale))
        object.__setattr__(self, "names", tuple(str(s) for s in self.names))

    @property
    def k_signals(self) -> int:
        return self.rho.shape[0]


@dataclass(eq=False)
class Scenario:
    """Everything a backtest needs.  ``realized_returns[t]`` is the return
    earned by the position held after trading at step ``t``."""

    model: MarketModel
    signals: SignalSet
    realized_returns: np.ndarray
    constraints: list[ConstraintSpec] = field(default_factory=list)
    dynamic_params: DynamicModelParams | None = None
    benchmark: np.ndarray | None = None
    seed: int = 0
    times: tuple[str, ...] | None = None
    asset_names: tuple[str, ...] | None = None
    name: str = "scenario"
    mode: str = "signalwise"
    tol: float = 1e-9

    def __post_init__(self):
        self.realized_returns = np.array(self.realized_returns, dtype=float)
        t, _, n = self.signals.g.shape
        if self.times is None:
            self.times = tuple(str(i) for i in range(t))
        else:
            self.times = tuple(str(s) for s in self.times)
        if self.asset_names is None:
            self.asset_names = tuple(f"A{i}" for i in range(n))
        else:
            self.asset_names = tuple(str(s) for s in self.asset_names)
        if self.benchmark is not None:
            self.benchmark = np.array(self.benchmark, dtype=float)
        self.constraints = list(self.constraints)

    @property
    def n_assets(self) -> int:
        return self.signals.n_assets

    @property
    def n_steps(self) -> int:
        return self.signals.n_steps

    def equals(self, other: "Scenario") -> bool:
        """Field-by-field equality, exact on every number."""
        return not scenario_differences(self, other)


def _same_array(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    a, b = np.asarray(a), np.asarray(b)
    return a.shape == b.shape and np.array_equal(a, b)


def scenario_differences(a: Scenario, b: Scenario) -> list[str]:
    """Names of the fields on which two scenarios differ."""
    out = []
    ma, mb = a.model, b.model
    if ma.n_assets != mb.n_assets or not _same_array(ma.sigma, mb.sigma):
        out.append("model.sigma")
    for name in ("gamma", "lambda_spread", "lambda_financing", "lambda_power32"):
        if getattr(ma, name) != getattr(mb, name):
            out.append(f"model.{name}")
    if np.ndim(ma.lambda_quad) != np.ndim(mb.lambda_quad) or not _same_array(
        ma.lambda_quad, mb.lambda_quad
    ):
        out.append("model.lambda_quad")
    if (ma.impact is None) != (mb.impact is None) or (
        ma.impact is not None
        and not all(_same_array(x, y) for x, y in zip(ma.impact, mb.impact))
    ):
        out.append("model.impact")
    if a.signals.names != b.signals.names or not _same_array(a.signals.g, b.signals.g):
        out.append("signals")
    if not _same_array(a.realized_returns, b.realized_returns):
        out.append("realized_returns")
    if len(a.constraints) != len(b.constraints) or not all(
        x.same_as(y) for x, y in zip(a.constraints, b.constraints)
    ):
        out.append("constraints")
    da, db = a.dynamic_params, b.dynamic_params
    if (da is None) != (db is None) or (
        da is not None and (da.a != db.a or not _same_array(da.phi, db.phi))
    ):
        out.append("dynamic_params")
    if not _same_array(a.benchmark, b.benchmark):
        out.append("benchmark")
    for name in ("seed", "times", "asset_names", "name", "mode", "tol"):
        if getattr(a, name) != getattr(b, name):
            out.append(name)
    return out


def _matrix_sqrt(m: np.ndarray) -> np.ndarray:
    """Lower factor ``L`` with ``L L' = m``; falls back to eigh when singular."""
    try:
        return np.linalg.cholesky(m)
    except np.linalg.LinAlgError:
        w, v = np.linalg.eigh(m)
        return v * np.sqrt(np.clip(w, 0.0, None))


def case_study_model(n: int, gamma: float = 5.0, lambda_quad: float = 2.0) -> MarketModel:
    """One-factor covariance: 1% market vol plus 2% idiosyncratic vol."""
    sigma = 1e-4 * np.ones((n, n)) + 4e-4 * np.eye(n)
    return MarketModel(n, sigma, gamma, lambda_quad)


def simulate_signals(spec: SignalGenSpec, n: int, t_steps: int, rng: SplitMix64) -> np.ndarray:
    """``T x K x n`` AR(1) paths started from the stationary distribution."""
    k = spec.k_signals
    chol = _matrix_sqrt(spec.correlation)
    eps = rng.normal(t_steps * n * k).reshape(t_steps, n, k) @ chol.T
    eps = np.transpose(eps, (0, 2, 1))
    f = np.empty((t_steps, k, n))
    stationary = spec.innovation_scale / np.sqrt(1.0 - spec.rho**2)
    f[0] = stationary[:, None] * eps[0]
    scale = spec.innovation_scale[:, None]
    rho = spec.rho[:, None]
    for t in range(1, t_steps):
        f[t] = rho * f[t - 1] + scale * eps[t]
    return f


def generate_case_study(
    spec: SignalGenSpec,
    n: int,
    t_steps: int,
    seed: int,
    model: MarketModel | None = None,
    benchmark: float | Sequence[float] = 0.1,
) -> Scenario:
    """Value/momentum style backtest with long-only bounds ``x_i >= -benchmark_i``.

    Realized returns are ``r_{t+1} = G_t + u_{t+1}`` by construction.
    """
    n, t_steps = int(n), int(t_steps)
    if n < 1 or t_steps < 1:
        raise ScenarioError("need at least one asset and one step")
    model = model or case_study_model(n)
    if model.n_assets != n:
        raise ScenarioError(f"model has {model.n_assets} assets, expected {n}")
    rng = SplitMix64(seed)
    g = simulate_signals(spec, n, t_steps, rng)
    noise = rng.normal(t_steps * n).reshape(t_steps, n) @ _matrix_sqrt(model.sigma).T
    returns = g.sum(axis=1) + spec.noise_scale * noise
    bench = np.broadcast_to(np.asarray(benchmark, dtype=float), (n,)).copy()
    return Scenario(
        model=model,
        signals=SignalSet(spec.names, g),
        realized_returns=returns,
        constraints=long_only(n, bench),
        benchmark=bench,
        seed=int(seed),
        name="case_study",
    )


def random_scenario(
    seed: int,
    n: int,
    k: int,
    t_steps: int = 100,
    allow_power32: bool = True,
) -> Scenario:
    """Randomised backtest with a mixed constraint set.

    Every bound admits a zero trade from any feasible position, so each
    step is feasible.  Time-varying bounds are only drawn when there are no
    trade limits (a zero-trade start could otherwise be infeasible).
    """
    rng = SplitMix64(seed)
    u = lambda m=1: rng.uniform(m)  # noqa: E731
    a = rng.normal(n * n).reshape(n, n)
    use_p32 = allow_power32 and u()[0] < 0.15
    if use_p32:
        sigma = np.diag(0.02 + 0.08 * u(n))
    else:
        sigma = 0.05 * (a @ a.T) / n + np.diag(0.01 + 0.02 * u(n))
    gamma = float(1.0 + 4.0 * u()[0])
    flags = u(4)
    lambda_quad = float(0.5 + 2.5 * flags[0])
    lam0 = float(0.002 + 0.01 * u()[0]) if flags[1] < 0.3 else 0.0
    lam_l = float(0.002 + 0.01 * u()[0]) if flags[2] < 0.3 else 0.0
    lam_p = float(0.005 + 0.03 * u()[0]) if use_p32 else 0.0
    model = MarketModel(n, sigma, gamma, lambda_quad, lam0, lam_l, lam_p)

    names = tuple(f"s{j}" for j in range(k))
    spec = SignalGenSpec(
        rho=0.5 + 0.45 * u(k),
        innovation_scale=0.01 + 0.04 * u(k),
        correlation=np.eye(k),
        noise_scale=1.0,
        names=names,
    )
    g = simulate_signals(spec, n, t_steps, rng)
    returns = g.sum(axis=1) + rng.normal(t_steps * n).reshape(t_steps, n) @ _matrix_sqrt(sigma).T

    cons: list[ConstraintSpec] = []
    pick = u(6)
    trade_limits = pick[1] < 0.4
    if pick[0] < 0.6:
        for i in range(n):
            lo = -float(0.2 + 0.8 * u()[0])
            hi = float(0.2 + 0.8 * u()[0])
            if u()[0] < 0.2:
                lo = 0.0
            cons.append(ConstraintSpec.position_bound(i, n, lo, hi, group="position_bounds"))
    if trade_limits:
        for i in range(n):
            tau = float(0.05 + 0.3 * u()[0])
            cons.append(ConstraintSpec.trade_bound(i, n, -tau, tau, group="trade_bounds"))
    if pick[2] < 0.4:
        c = float(0.1 + 0.5 * u()[0])
        cons.append(ConstraintSpec.position_exposure(np.ones(n), -c, c, label="net_exposure"))
    if pick[3] < 0.3 and not use_p32:
        w = np.sign(rng.normal(n)) + 0.0
        c = float(0.05 + 0.2 * u()[0])
        cons.append(ConstraintSpec.trade_exposure(w, -c, c, label="trade_tilt"))
    if use_p32:
        # the separable power-3/2 path accepts bound constraints only
        cons = [cs for cs in cons if cs.kind in (ConstraintKind.TRADE_BOUND, ConstraintKind.POSITION_BOUND)]
    elif cons and pick[4] < 0.5 and all(cs.kind.is_position for cs in cons):
        vary = cons[0]
        sched = {}
        for t in range(t_steps):
            if u()[0] < 0.3:
                shrink = float(0.3 + 0.7 * u()[0])
                sched[t] = (vary.lower * shrink, vary.upper * shrink)
        cons[0] = ConstraintSpec(vary.kind, vary.v, vary.lower, vary.upper, vary.label, vary.group, sched)

    dyn = None
    if pick[5] < 0.3:
        dyn = DynamicModelParams(1.0 - spec.rho, float(0.5 + 2.0 * u()[0]))
    return Scenario(
        model=model,
        signals=SignalSet(names, g),
        realized_returns=returns,
        constraints=cons,
        dynamic_params=dyn,
        seed=int(seed),
        name=f"random_{seed}",
    )


# ----------------------------------------------------------------------------
# diagnostics


@dataclass(frozen=True)
class Diagnostic:
    severity: str
    location: str
    message: str

    def __str__(self) -> str:
        return f"{self.severity}: {self.location}: {self.message}"


def _matrix_diagnostics(m, n: int, where: str) -> list[Diagnostic]:
    try:
        m = np.array(m, dtype=float)
        if m.ndim == 0:
            m = m * np.eye(n)
    except (TypeError, ValueError):
        return [Diagnostic("error", where, "not a numeric matrix")]
    if m.shape != (n, n):
        return [Diagnostic("error", where, f"shape {m.shape}, expected {(n, n)}")]
    if not np.all(np.isfinite(m)):
        return [Diagnostic("error", where, "non-finite entries")]
    try:
        check_psd(m, where)
    except ModelValidationError as exc:
        return [Diagnostic("error", where, str(exc))]
    return []


def validate_scenario(s: Scenario) -> list[Diagnostic]:
    """All invariant violations; an empty list means the scenario is usable."""
    out: list[Diagnostic] = []
    model = s.model
    g = np.asarray(s.signals.g)
    t_steps, k, n = g.shape
    if model.n_assets != n:
        out.append(Diagnostic("error", "model.n_assets", f"{model.n_assets} assets, signals have {n}"))
    out += _matrix_diagnostics(model.sigma, n, "model.sigma")
    if not (np.isfinite(model.gamma) and model.gamma > 0):
        out.append(Diagnostic("error", "model.gamma", "risk aversion must be positive"))
    if np.ndim(model.lambda_quad) == 0:
        if not model.lambda_quad >= 0:
            out.append(Diagnostic("error", "model.lambda_quad", "must be nonnegative"))
    else:
        out += _matrix_diagnostics(model.lambda_quad, n, "model.lambda_quad")
    for name in ("lambda_spread", "lambda_financing", "lambda_power32"):
        val = getattr(model, name)
        if not (np.isfinite(val) and val >= 0):
            out.append(Diagnostic("error", f"model.{name}", "must be nonnegative"))
    if model.impact is not None:
        for label, mat in zip(("R", "C"), model.impact):
            mat = np.asarray(mat, dtype=float)
            if mat.shape != (n, n) or not np.all(np.isfinite(mat)):
                out.append(Diagnostic("error", f"model.impact.{label}", f"must be a finite {n}x{n} matrix"))

    rr = np.asarray(s.realized_returns, dtype=float)
    if rr.shape != (t_steps, n):
        out.append(Diagnostic("error", "realized_returns", f"shape {rr.shape}, expected {(t_steps, n)}"))
    else:
        bad = np.argwhere(~np.isfinite(rr))
        for t, i in bad[:5]:
            out.append(Diagnostic("error", f"realized_returns[{t},{i}]", "non-finite return"))

    labels: set[str] = set()
    for j, cs in enumerate(s.constraints):
        where = f"constraints[{j}] {cs.label!r}"
        for msg in cs.problems():
            out.append(Diagnostic("error", where, msg))
        if cs.v.shape != (n,):
            out.append(Diagnostic("error", where, f"direction has {cs.v.shape[0]} entries, expected {n}"))
        if cs.label in labels:
            out.append(Diagnostic("error", where, "duplicate constraint label"))
        labels.add(cs.label)
        if cs.group in ("spread", "financing", "power32"):
            out.append(Diagnostic("error", where, f"group name {cs.group!r} is reserved"))
        if cs.schedule and any(not 0 <= t < t_steps for t in cs.schedule):
            out.append(Diagnostic("error", where, "schedule refers to a step outside the horizon"))

    dyn = s.dynamic_params
    if dyn is not None:
        if dyn.phi.shape != (k,):
            out.append(Diagnostic("error", "dynamic_params.phi", f"{dyn.phi.shape[0]} entries for {k} signals"))
        elif np.any(1.0 + dyn.phi * dyn.a / model.gamma <= 0):
            out.append(Diagnostic("error", "dynamic_params", "1 + phi*a/gamma must be positive"))
    if s.benchmark is not None:
        b = np.asarray(s.benchmark, dtype=float)
        if b.shape != (n,) or not np.all(np.isfinite(b)):
            out.append(Diagnostic("error", "benchmark", f"must be a finite {n}-vector"))
    if s.times is not None and len(s.times) != t_steps:
        out.append(Diagnostic("error", "times", f"{len(s.times)} labels for {t_steps} steps"))
    if s.times is not None and len(set(s.times)) != len(s.times):
        out.append(Diagnostic("error", "times", "duplicate time labels"))
    if s.asset_names is not None and (len(s.asset_names) != n or len(set(s.asset_names)) != n):
        out.append(Diagnostic("error", "asset_names", f"need {n} unique asset names"))
    if isinstance(s.seed, bool) or not isinstance(s.seed, (int, np.integer)):
        out.append(Diagnostic("error", "seed", "seed must be an integer"))
    return out


# ----------------------------------------------------------------------------
# file formats


def fmt(x: float) -> str:
    """17 significant digits; parses back to the same double."""
    x = float(x) + 0.0  # drops the sign of zero
    if math.isinf(x):
        return "inf" if x > 0 else "-inf"
    return format(x, ".17g")


def _read_csv(path: str, columns: Sequence[str], optional: Sequence[str] = ()):
    name = os.path.basename(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in columns if c not in header]
        if missing:
            raise ScenarioError(f"{name}: missing column(s) {', '.join(missing)}")
        # header is row 1
        rows = [(line, row) for line, row in enumerate(reader, start=2)]
    return name, rows


def _parse_float(text: str | None, where: str, allow_inf: bool = False) -> float:
    if text is None:
        raise ScenarioError(f"{where}: missing value")
    text = text.strip()
    try:
        val = float(text)
    except ValueError:
        raise ScenarioError(f"{where}: cannot parse {text!r} as a number") from None
    if math.isnan(val) or (math.isinf(val) and not allow_inf):
        raise ScenarioError(f"{where}: non-finite value {text!r}")
    return val


def _read_panel(path: str, key_col: str | None, value_col: str, columns: Sequence[str]):
    """``{(time, key, asset): value}`` plus first-appearance orderings."""
    name, rows = _read_csv(path, columns)
    cells: dict[tuple, float] = {}
    times: list[str] = []
    assets: list[str] = []
    keys: list[str] = []
    for line, row in rows:
        where = f"{name} row {line}"
        t = (row["time"] or "").strip()
        a = (row["asset"] or "").strip()
        if not t or not a:
            raise ScenarioError(f"{where}: empty time or asset")
        key = (row[key_col] or "").strip() if key_col else ""
        if key_col and not key:
            raise ScenarioError(f"{where}: empty {key_col}")
        val = _parse_float(row[value_col], where)
        if (t, key, a) in cells:
            raise ScenarioError(f"{where}: duplicate entry for time {t}, asset {a}")
        cells[(t, key, a)] = val
        for seq, item in ((times, t), (assets, a), (keys, key)):
            if item not in seq:
                seq.append(item)
    if not cells:
        raise ScenarioError(f"{name}: no data rows")
    return cells, times, assets, keys


def model_from_config(cfg: Mapping, n: int) -> MarketModel:
    try:
        sigma = np.array(cfg["sigma"], dtype=float)
        if sigma.ndim == 1:
            sigma = np.diag(sigma)
        impact = cfg.get("impact")
        if impact is not None:
            impact = (np.array(impact["R"], dtype=float), np.array(impact["C"], dtype=float))
        lq = cfg.get("lambda_quad", 0.0)
        lq = float(lq) if np.ndim(lq) == 0 else np.array(lq, dtype=float)
        return MarketModel(
            n,
            sigma,
            float(cfg["gamma"]),
            lq,
            float(cfg.get("lambda_spread", 0.0)),
            float(cfg.get("lambda_financing", 0.0)),
            float(cfg.get("lambda_power32", 0.0)),
            impact,
        )
    except KeyError as exc:
        raise ScenarioError(f"config model: missing key {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise ScenarioError(f"config model: {exc}") from None


def _model_to_config(model: MarketModel) -> dict:
    out: dict[str, Any] = {"sigma": model.sigma.tolist(), "gamma": model.gamma}
    lq = model.lambda_quad
    out["lambda_quad"] = lq.tolist() if isinstance(lq, np.ndarray) else lq
    out["lambda_spread"] = model.lambda_spread
    out["lambda_financing"] = model.lambda_financing
    out["lambda_power32"] = model.lambda_power32
    if model.impact is not None:
        out["impact"] = {"R": model.impact[0].tolist(), "C": model.impact[1].tolist()}
    return out


def _parse_weights(text: str, assets: Sequence[str], where: str) -> np.ndarray:
    index = {a: i for i, a in enumerate(assets)}
    v = np.zeros(len(assets))
    for part in (text or "").split(";"):
        part = part.strip()
        if not part:
            continue
        asset, sep, w = part.rpartition(":")
        if not sep or asset not in index:
            raise ScenarioError(f"{where}: bad weight entry {part!r}")
        v[index[asset]] += _parse_float(w, where)
    return v


def _format_weights(v: np.ndarray, assets: Sequence[str]) -> str:
    return ";".join(f"{assets[i]}:{fmt(v[i])}" for i in np.flatnonzero(v))


def _constraint_from_mapping(item: Mapping, assets: Sequence[str], where: str) -> ConstraintSpec:
    try:
        kind = ConstraintKind(item["kind"])
    except (KeyError, ValueError):
        raise ScenarioError(f"{where}: unknown constraint kind {item.get('kind')!r}") from None
    label = str(item.get("label") or "")
    if not label:
        raise ScenarioError(f"{where}: constraint needs a label")
    w = item.get("weights", "")
    if isinstance(w, Mapping):
        w = ";".join(f"{a}:{x!r}" for a, x in w.items())
    v = _parse_weights(str(w), assets, where)

    def bound(key, default):
        val = item.get(key, "")
        if val in ("", None):
            return default
        return _parse_float(str(val), where, allow_inf=True)

    group = item.get("group") or None
    return ConstraintSpec(kind, v, bound("lower", -np.inf), bound("upper", np.inf), label, group)


def load_constraints_csv(path: str, assets: Sequence[str], times: Sequence[str]) -> list[ConstraintSpec]:
    """Rows without a time define constraints; rows with a time override bounds at that step."""
    name, rows = _read_csv(path, CONSTRAINT_COLUMNS[:6])
    step_of = {t: i for i, t in enumerate(times)}
    base: dict[str, ConstraintSpec] = {}
    order: list[str] = []
    overrides: dict[str, dict[int, tuple[float, float]]] = {}
    for line, row in rows:
        where = f"{name} row {line}"
        t = (row.get("time") or "").strip()
        if not t:
            cs = _constraint_from_mapping(row, assets, where)
            if cs.label in base:
                raise ScenarioError(f"{where}: duplicate constraint label {cs.label!r}")
            base[cs.label] = cs
            order.append(cs.label)
            continue
        label = (row.get("label") or "").strip()
        if t not in step_of:
            raise ScenarioError(f"{where}: unknown time {t!r}")
        lo = _parse_float(row.get("lower") or "-inf", where, allow_inf=True)
        hi = _parse_float(row.get("upper") or "inf", where, allow_inf=True)
        overrides.setdefault(label, {})[step_of[t]] = (lo, hi)
    out = []
    for label in order:
        cs = base[label]
        if label in overrides:
            cs = ConstraintSpec(cs.kind, cs.v, cs.lower, cs.upper, cs.label, cs.group, overrides.pop(label))
        out.append(cs)
    if overrides:
        raise ScenarioError(f"{name}: bound overrides for undefined constraint(s) {sorted(overrides)}")
    return out


def load_scenario_csv(signals_path: str, returns_path: str, config_path: str) -> Scenario:
    """Build a scenario from the two CSV panels and a JSON run config."""
    cfg = read_config(config_path)
    base = os.path.dirname(os.path.abspath(config_path))
    s_cells, times, assets, sig_names = _read_panel(signals_path, "signal_name", "value", SIGNALS_COLUMNS)
    r_cells, r_times, r_assets, _ = _read_panel(returns_path, None, "return", RETURNS_COLUMNS)
    sname, rname = os.path.basename(signals_path), os.path.basename(returns_path)

    if "assets" in cfg:
        declared = [str(a) for a in cfg["assets"]]
        extra = sorted(set(assets) - set(declared))
        if extra:
            raise ScenarioError(f"{sname}: assets {extra} not declared in the config")
        assets = declared
    if set(r_assets) != set(assets):
        raise ScenarioError(
            f"asset sets differ between {sname} and {rname}: "
            f"{sorted(set(assets) ^ set(r_assets))}"
        )
    if set(r_times) != set(times):
        raise ScenarioError(f"time sets differ between {sname} and {rname}")
    if "signal_names" in cfg:
        declared = [str(s) for s in cfg["signal_names"]]
        unknown = sorted(set(sig_names) - set(declared))
        if unknown:
            raise ScenarioError(f"{sname}: unknown signal name(s) {unknown}")
        sig_names = declared

    t_steps, k, n = len(times), len(sig_names), len(assets)
    g = np.empty((t_steps, k, n))
    for ti, t in enumerate(times):
        for ki, sn in enumerate(sig_names):
            for ai, a in enumerate(assets):
                try:
                    g[ti, ki, ai] = s_cells[(t, sn, a)]
                except KeyError:
                    raise ScenarioError(f"{sname}: no value for time {t}, asset {a}, signal {sn}") from None
    r = np.empty((t_steps, n))
    for ti, t in enumerate(times):
        for ai, a in enumerate(assets):
            try:
                r[ti, ai] = r_cells[(t, "", a)]
            except KeyError:
                raise ScenarioError(f"{rname}: no return for time {t}, asset {a}") from None

    if "model" not in cfg:
        raise ScenarioError("config: missing 'model' section")
    model = model_from_config(cfg["model"], n)
    constraints: list[ConstraintSpec] = []
    if cfg.get("constraints_file"):
        constraints += load_constraints_csv(os.path.join(base, cfg["constraints_file"]), assets, times)
    for j, item in enumerate(cfg.get("constraints", [])):
        constraints.append(_constraint_from_mapping(item, assets, f"config constraints[{j}]"))
    bench = cfg.get("benchmark")
    if bench is not None:
        bench = np.broadcast_to(np.asarray(bench, dtype=float), (n,)).copy()
    if cfg.get("long_only"):
        constraints += long_only(n, bench)
    dyn = None
    if cfg.get("dynamic") is not None:
        try:
            dyn = DynamicModelParams(np.array(cfg["dynamic"]["phi"], dtype=float), float(cfg["dynamic"]["a"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ScenarioError(f"config dynamic: {exc}") from None
    seed = cfg.get("seed", 0)
    if isinstance(seed, bool) or not isinstance(seed, int):
        raise ScenarioError("config: seed must be an integer")
    mode = str(cfg.get("mode", "signalwise"))
    try:
        tol = float(cfg.get("tol", 1e-9))
    except (TypeError, ValueError):
        raise ScenarioError("config: tol must be a number") from None
    try:
        signals = SignalSet(tuple(sig_names), g)
    except ModelValidationError as exc:
        raise ScenarioError(f"{sname}: {exc}") from None
    scenario = Scenario(
        model=model,
        signals=signals,
        realized_returns=r,
        constraints=constraints,
        dynamic_params=dyn,
        benchmark=bench,
        seed=seed,
        times=tuple(times),
        asset_names=tuple(assets),
        name=str(cfg.get("name", "scenario")),
        mode=mode,
        tol=tol,
    )
    errors = [d for d in validate_scenario(scenario) if d.severity == "error"]
    if errors:
        raise ScenarioError("; ".join(str(d) for d in errors))
    return scenario


def read_config(path: str) -> dict:
    with open(path, encoding="utf-8") as fh:
        try:
            cfg = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{os.path.basename(path)}: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ScenarioError(f"{os.path.basename(path)}: top level must be an object")
    return cfg


def load_scenario(config_path: str) -> Scenario:
    """Load using the file names recorded in the config."""
    cfg = read_config(config_path)
    base = os.path.dirname(os.path.abspath(config_path))
    try:
        sig, ret = cfg["signals_file"], cfg["returns_file"]
    except KeyError as exc:
        raise ScenarioError(f"config: missing key {exc.args[0]!r}") from None
    return load_scenario_csv(os.path.join(base, sig), os.path.join(base, ret), config_path)


def scenario_config(s: Scenario, extra: Mapping | None = None) -> dict:
    """JSON-ready config that reloads to ``s`` given the CSVs written by ``save_scenario``."""
    cfg: dict[str, Any] = {
        "name": s.name,
        "seed": int(s.seed),
        "mode": s.mode,
        "tol": s.tol,
        "assets": list(s.asset_names),
        "signal_names": list(s.signals.names),
        "signals_file": "signals.csv",
        "returns_file": "returns.csv",
        "constraints_file": "constraints.csv",
        "model": _model_to_config(s.model),
    }
    if s.benchmark is not None:
        cfg["benchmark"] = s.benchmark.tolist()
    if s.dynamic_params is not None:
        cfg["dynamic"] = {"phi": s.dynamic_params.phi.tolist(), "a": s.dynamic_params.a}
    if extra:
        cfg.update(extra)
    return cfg


def save_scenario(s: Scenario, out_dir: str, config_name: str = "scenario.json",
                  extra: Mapping | None = None) -> dict[str, str]:
    """Write ``signals.csv``, ``returns.csv``, ``constraints.csv`` and the config."""
    os.makedirs(out_dir, exist_ok=True)
    paths = {k: os.path.join(out_dir, f"{k}.csv") for k in ("signals", "returns", "constraints")}
    assets, times = s.asset_names, s.times
    with open(paths["signals"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SIGNALS_COLUMNS)
        g = s.signals.g
        for ti, t in enumerate(times):
            for ki, sn in enumerate(s.signals.names):
                for ai, a in enumerate(assets):
                    w.writerow((t, a, sn, fmt(g[ti, ki, ai])))
    with open(paths["returns"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RETURNS_COLUMNS)
        for ti, t in enumerate(times):
            for ai, a in enumerate(assets):
                w.writerow((t, a, fmt(s.realized_returns[ti, ai])))
    with open(paths["constraints"], "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(CONSTRAINT_COLUMNS)
        for cs in s.constraints:
            w.writerow((cs.label, cs.group, cs.kind.value, fmt(cs.lower), fmt(cs.upper),
                        _format_weights(cs.v, assets), ""))
        for cs in s.constraints:
            for t in sorted(cs.schedule or {}):
                lo, hi = cs.schedule[t]
                w.writerow((cs.label, cs.group, cs.kind.value, fmt(lo), fmt(hi), "", times[t]))
    paths["config"] = os.path.join(out_dir, config_name)
    with open(paths["config"], "w", encoding="utf-8") as fh:
        json.dump(scenario_config(s, extra), fh, indent=2, sort_keys=True)
        fh.write("\n")
    return paths
