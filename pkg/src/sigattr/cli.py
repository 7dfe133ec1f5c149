"""Batch entry point: ``sigattr simulate | attribute | verify``.

Exit codes: 0 ok, 1 a verification check failed, 2 bad configuration,
3 file I/O failure, 4 solver failure.  Reports use 17 significant digits
and a fixed row order, so identical inputs give byte-identical files.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, Sequence

import numpy as np

from .attribution import (
    AttributionHistory,
    BacktestOptions,
    Mode,
    StepError,
    UndefinedTransferError,
    asset_contributions,
    run_backtest,
    transfer_coefficient,
)
from .model import ModelValidationError, build_static_matrices, scale_signals_dynamic
from .oracle import MAX_ASSETS, default_spec, oracle_solve
from .oracle import objective as exact_objective
from .qpsolver import ConstraintError
from .scenarios import (
    Scenario,
    ScenarioError,
    SignalGenSpec,
    case_study_model,
    fmt,
    generate_case_study,
    load_scenario,
    model_from_config,
    read_config,
    save_scenario,
)

EXIT_OK = 0
EXIT_VERIFY = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_SOLVER = 4

OUT_ENV = "SIGATTR_OUT"
DEFAULT_OUT = "sigattr_out"
REPORT_QUANTITIES = ("trade", "position", "pnl", "risk_contrib", "quad_cost", "spread_cost",
                     "financing_cost", "power32_cost")
ALL_MODES = (Mode.SIGNALWISE, Mode.CONSTRAINT_PORTFOLIOS, Mode.UNCONSTRAINED)
VERIFY_TOL = 1e-7
ORACLE_STEPS = 5

CONFIG_ERRORS = (ScenarioError, ModelValidationError, ConstraintError, KeyError, TypeError)


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"sigattr: {msg}", file=sys.stderr)


# ----------------------------------------------------------------------------
# deterministic serialisation


def _json_value(obj: Any, indent: int, level: int) -> str:
    pad = " " * (indent * (level + 1))
    end = " " * (indent * level)
    if obj is None or isinstance(obj, bool):
        return json.dumps(obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        return fmt(x) if math.isfinite(x) else "null"
    if isinstance(obj, str):
        return json.dumps(obj)
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {_json_value(v, indent, level + 1)}" for k, v in obj.items()]
        return "{\n" + ",\n".join(items) + "\n" + end + "}"
    if isinstance(obj, (list, tuple, np.ndarray)):
        seq = list(obj)
        if not seq:
            return "[]"
        items = [f"{pad}{_json_value(v, indent, level + 1)}" for v in seq]
        return "[\n" + ",\n".join(items) + "\n" + end + "]"
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def dumps_json(obj: Any) -> str:
    """JSON text with every float at 17 significant digits (non-finite become null)."""
    return _json_value(obj, 2, 0) + "\n"


def _cell(x: Any) -> str:
    if isinstance(x, (float, np.floating)):
        return fmt(x) if not math.isnan(x) else "nan"
    return str(x)


def _write_text(path: str, text: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(text)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_cell(x) for x in row])
    return buf.getvalue()


# ----------------------------------------------------------------------------
# reports


def _transfer_coefficients(run: AttributionHistory, free: AttributionHistory, sigma) -> dict:
    out = {}
    for k, name in enumerate(run.signal_names):
        try:
            out[name] = transfer_coefficient(run.positions[:, k], free.positions[:, k], sigma)
        except UndefinedTransferError:
            out[name] = None
    return out


def attribution_rows(scenario: Scenario, hist: AttributionHistory):
    contrib = asset_contributions(hist, scenario.model, scenario.realized_returns)
    sources = hist.source_names
    assets = scenario.asset_names
    for t, time in enumerate(scenario.times):
        for s, src in enumerate(sources):
            for i, asset in enumerate(assets):
                yield [time, src, asset] + [float(contrib[qn][0][t, s, i]) for qn in REPORT_QUANTITIES]
        for i, asset in enumerate(assets):
            yield [time, "total", asset] + [float(contrib[qn][1][t, i]) for qn in REPORT_QUANTITIES]


def diagnostics_rows(scenario: Scenario, hist: AttributionHistory):
    for t, mults in enumerate(hist.step_multipliers):
        for mu in mults:
            yield [scenario.times[t], mu.constraint_label, mu.source, mu.classification.value,
                   float(mu.lagrange), float(mu.eta), float(mu.bound_used), int(mu.is_hard), mu.note]


def summary(scenario: Scenario, hist: AttributionHistory, free: AttributionHistory) -> dict:
    per_source = {}
    series = {
        "pnl": hist.pnl, "risk_contrib": hist.risk, "quad_cost": hist.quad_cost,
        "spread_cost": hist.spread_cost, "financing_cost": hist.financing_cost,
        "power32_cost": hist.power32_cost,
    }
    for s, name in enumerate(hist.source_names):
        per_source[name] = {q: float(a[:, s].sum()) for q, a in series.items()}
        per_source[name]["final_position"] = hist.positions[-1, s].tolist()
    totals = {
        "pnl": float(hist.total_pnl.sum()),
        "risk_contrib": float(hist.total_risk.sum()),
        "quad_cost": float(hist.total_quad_cost.sum()),
        "spread_cost": float(hist.total_spread_cost.sum()),
        "financing_cost": float(hist.total_financing_cost.sum()),
        "power32_cost": float(hist.total_power32_cost.sum()),
        "final_position": hist.total_positions[-1].tolist(),
    }
    sums = hist.sum_residuals()
    return {
        "scenario": scenario.name,
        "mode": hist.mode.value,
        "n_steps": scenario.n_steps,
        "n_assets": scenario.n_assets,
        "sources": list(hist.source_names),
        "per_source": per_source,
        "total": totals,
        "transfer_coefficients": _transfer_coefficients(hist, free, scenario.model.sigma),
        "max_kkt_residual": float(hist.kkt_residuals.max(initial=0.0)),
        "max_reconstruction_residual": float(hist.reconstruction_residuals.max(initial=0.0)),
        "max_sum_residual": float(max(sums.values())),
        "sum_residuals": sums,
        "constrained_steps": int(hist.constrained_steps.sum()),
    }


def _run_modes(scenario: Scenario, modes: Sequence[Mode], tol: float) -> dict[Mode, AttributionHistory]:
    opts = BacktestOptions(tol=tol)
    out = {}
    for mode in list(modes) + ([Mode.UNCONSTRAINED] if Mode.UNCONSTRAINED not in modes else []):
        out[mode] = run_backtest(scenario, mode, opts)
    return out


def write_reports(scenario: Scenario, runs: dict[Mode, AttributionHistory], modes: Sequence[Mode],
                  out_dir: str) -> list[str]:
    written = []
    free = runs[Mode.UNCONSTRAINED]
    for mode in modes:
        hist = runs[mode]
        d = os.path.join(out_dir, mode.value)
        os.makedirs(d, exist_ok=True)
        files = {
            "attribution.csv": _csv_text(("time", "signal", "asset") + REPORT_QUANTITIES,
                                         attribution_rows(scenario, hist)),
            "diagnostics.csv": _csv_text(("time", "constraint", "source", "classification", "lagrange",
                                          "eta", "bound", "hard", "note"),
                                         diagnostics_rows(scenario, hist)),
            "summary.json": dumps_json(summary(scenario, hist, free)),
        }
        for name, text in files.items():
            path = os.path.join(d, name)
            _write_text(path, text)
            written.append(path)
    return written


# ----------------------------------------------------------------------------
# commands


def _load(path: str, tol: float | None) -> Scenario:
    try:
        s = load_scenario(path)
    except FileNotFoundError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc.strerror}: {exc.filename}") from exc
    except OSError as exc:
        raise CliError(EXIT_IO, f"{path}: {exc}") from exc
    except CONFIG_ERRORS as exc:
        raise CliError(EXIT_CONFIG, f"{path}: {exc}") from exc
    if tol is not None:
        s.tol = tol
    return s


def _resolve_modes(flag: str | None, scenario: Scenario) -> list[Mode]:
    name = flag or scenario.mode
    if name == "all":
        return list(ALL_MODES)
    try:
        return [Mode(name)]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"unknown mode {name!r}") from None


def _out_dirs(base: str, scenarios: Sequence[Scenario]) -> list[str]:
    if len(scenarios) == 1:
        return [base]
    return [os.path.join(base, f"{j:03d}_{s.name}") for j, s in enumerate(scenarios)]


def _fan_out(fn: Callable, items: Sequence, jobs: int) -> list:
    """Apply ``fn`` to every item, in worker threads when ``jobs > 1``; order preserved."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(fn, x) for x in items]
        return [f.result() for f in futures]


def cmd_simulate(config_path: str, out_dir: str, seed_override: int | None = None) -> int:
    try:
        cfg = read_config(config_path)
    except OSError as exc:
        raise CliError(EXIT_IO, f"{config_path}: {exc}") from exc
    except ScenarioError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from exc
    try:
        seed = cfg.get("seed", 0) if seed_override is None else seed_override
        if isinstance(seed, bool) or not isinstance(seed, int):
            raise ScenarioError(f"seed must be an integer, got {seed!r}")
        n = cfg.get("n_assets", 10)
        t_steps = cfg.get("n_steps", 250)
        for key, val in (("n_assets", n), ("n_steps", t_steps)):
            if isinstance(val, bool) or not isinstance(val, int) or val < 1:
                raise ScenarioError(f"{key} must be a positive integer")
        gen = dict(cfg.get("generator", {}))
        spec = SignalGenSpec(**gen)
        model = model_from_config(cfg["model"], n) if "model" in cfg else case_study_model(n)
        scenario = generate_case_study(spec, n, t_steps, seed, model, cfg.get("benchmark", 0.1))
        scenario.name = str(cfg.get("name", scenario.name))
        scenario.mode = str(cfg.get("mode", scenario.mode))
        scenario.tol = float(cfg.get("tol", scenario.tol))
    except CONFIG_ERRORS + (ValueError,) as exc:
        raise CliError(EXIT_CONFIG, f"{config_path}: {exc}") from exc
    generator = {
        "rho": spec.rho.tolist(),
        "innovation_scale": spec.innovation_scale.tolist(),
        "correlation": spec.correlation.tolist(),
        "noise_scale": spec.noise_scale,
        "names": list(spec.names),
    }
    extra = {"generator": generator, "n_assets": n, "n_steps": t_steps}
    try:
        paths = save_scenario(scenario, out_dir, "manifest.json", extra)
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot write to {out_dir}: {exc.strerror or exc}") from exc
    print(f"wrote scenario {scenario.name!r} (n={n}, T={t_steps}, seed={seed}) to {out_dir}")
    for key in ("signals", "returns", "constraints", "config"):
        print(f"  {paths[key]}")
    return EXIT_OK


def cmd_attribute(scenario_paths: Sequence[str], mode: str | None, out_dir: str,
                  tol: float | None = None, jobs: int = 1) -> int:
    scenarios = [_load(p, tol) for p in scenario_paths]
    plans = [(s, _resolve_modes(mode, s), d) for s, d in zip(scenarios, _out_dirs(out_dir, scenarios))]

    def work(plan):
        s, modes, d = plan
        try:
            runs = _run_modes(s, modes, s.tol)
        except StepError as exc:
            time = s.times[exc.step] if exc.step < len(s.times) else exc.step
            raise CliError(EXIT_SOLVER, f"{s.name}: solver failure at step {exc.step} "
                                        f"(time {time}): {exc.cause}") from exc
        for m in modes:
            worst = max(runs[m].sum_residuals().values())
            if worst > VERIFY_TOL:
                _err(f"warning: {s.name}: {m.value} attribution sums off by {worst:.3g} (relative)")
        try:
            return write_reports(s, runs, modes, d)
        except OSError as exc:
            raise CliError(EXIT_IO, f"cannot write reports to {d}: {exc.strerror or exc}") from exc

    results = _fan_out(work, plans, jobs)
    for paths in results:
        for p in paths:
            print(p)
    return EXIT_OK


@dataclass(frozen=True)
class Check:
    scenario: str
    name: str
    value: float
    threshold: float
    passed: bool
    note: str = ""


def _oracle_checks(s: Scenario, hist: AttributionHistory) -> list[Check]:
    model = s.model
    q, p = build_static_matrices(model)
    signals = s.signals
    if s.dynamic_params is not None:
        signals = scale_signals_dynamic(signals, s.dynamic_params, model.gamma)
    g_all = signals.total()
    t_steps = s.n_steps
    steps = sorted(set(np.linspace(0, t_steps - 1, min(ORACLE_STEPS, t_steps)).round().astype(int)))
    d_hist = None
    if model.impact is not None:
        # rebuild D along the engine path
        r, c = model.impact
        d_hist, d = [], np.zeros(s.n_assets)
        for t in range(t_steps):
            d_hist.append(d)
            d = (np.eye(s.n_assets) - r) @ (d + c @ hist.total_trades[t])
    worst = 0.0
    for t in steps:
        x_prev = hist.total_positions[t - 1] if t > 0 else np.zeros(s.n_assets)
        cons = [cs.at(t) for cs in s.constraints]
        d_prev = d_hist[t] if d_hist is not None else None
        spec = default_spec(model, q, p, x_prev, g_all[t])
        _, best = oracle_solve(model, q, p, x_prev, g_all[t], cons, spec, d_prev)
        mine = float(exact_objective(model, q, p, x_prev, g_all[t], hist.total_trades[t], d_prev)[0])
        # the engine is exact, so it must not lose to any grid point
        gap = (best - mine) / max(1e-12, abs(best), abs(mine))
        worst = max(worst, gap)
    return [Check(s.name, "oracle_objective_gap", worst, 1e-9, worst <= 1e-9,
                  f"{len(steps)} steps")]


def verify_scenario(s: Scenario, oracle: bool = True) -> list[Check]:
    runs = _run_modes(s, list(ALL_MODES), s.tol)
    checks = []
    g_scale = max(float(np.max(np.abs(s.signals.total()), initial=0.0)), 1e-300)
    for mode in ALL_MODES:
        h = runs[mode]
        sums = h.sum_residuals()
        worst = max(sums.values())
        checks.append(Check(s.name, f"{mode.value}:attribution_sum", worst, VERIFY_TOL, worst <= VERIFY_TOL))
        rec = float(h.reconstruction_residuals.max(initial=0.0)) / g_scale
        checks.append(Check(s.name, f"{mode.value}:reconstruction", rec, VERIFY_TOL, rec <= VERIFY_TOL))
        kkt = float(h.kkt_residuals.max(initial=0.0)) / g_scale
        checks.append(Check(s.name, f"{mode.value}:kkt", kkt, VERIFY_TOL, kkt <= VERIFY_TOL))
        neg = [mu.eta for ms in h.step_multipliers for mu in ms if mu.eta < 0 or mu.lagrange < 0]
        checks.append(Check(s.name, f"{mode.value}:multiplier_signs", float(len(neg)), 0.0, not neg))
    a, b = runs[Mode.SIGNALWISE], runs[Mode.CONSTRAINT_PORTFOLIOS]
    scale = max(float(np.max(np.abs(a.total_positions), initial=0.0)), 1e-300)
    gap = float(np.max(np.abs(a.total_positions - b.total_positions), initial=0.0)) / scale
    for name, hist in (("signalwise", a), ("constraint-portfolios", b)):
        g2 = float(np.max(np.abs(hist.positions.sum(axis=1) - a.total_positions), initial=0.0)) / scale
        gap = max(gap, g2)
    checks.append(Check(s.name, "mode_consistency", gap, VERIFY_TOL, gap <= VERIFY_TOL))
    viol = 0.0
    for t in range(s.n_steps):
        for cs in s.constraints:
            cs = cs.at(t)
            val = cs.v @ (a.total_positions[t] if cs.kind.is_position else a.total_trades[t])
            viol = max(viol, cs.lower - val, val - cs.upper)
    viol = max(viol, 0.0) / max(1.0, scale)
    checks.append(Check(s.name, "constraints_satisfied", viol, VERIFY_TOL, viol <= VERIFY_TOL))
    if oracle:
        if s.n_assets > MAX_ASSETS:
            _err(f"warning: {s.name}: oracle skipped (n={s.n_assets} > {MAX_ASSETS})")
            checks.append(Check(s.name, "oracle_objective_gap", float("nan"), 1e-9, True, "skipped"))
        else:
            checks += _oracle_checks(s, a)
    return checks


def cmd_verify(scenario_paths: Sequence[str], tol: float | None = None, oracle: bool = True,
               jobs: int = 1) -> int:
    scenarios = [_load(p, tol) for p in scenario_paths]

    def work(s):
        try:
            return verify_scenario(s, oracle)
        except StepError as exc:
            raise CliError(EXIT_SOLVER, f"{s.name}: solver failure at step {exc.step}: {exc.cause}") from exc

    checks = [c for group in _fan_out(work, scenarios, jobs) for c in group]
    width = max(len(c.name) for c in checks)
    print(f"{'scenario':<20} {'check':<{width}} {'value':>12} {'limit':>9}  result")
    for c in checks:
        status = "SKIP" if c.note == "skipped" else ("PASS" if c.passed else "FAIL")
        print(f"{c.scenario:<20} {c.name:<{width}} {c.value:>12.3e} {c.threshold:>9.1e}  {status}")
    failed = [c for c in checks if not c.passed]
    print(f"{len(checks) - len(failed)}/{len(checks)} checks passed")
    return EXIT_VERIFY if failed else EXIT_OK


# ----------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    default_out = os.environ.get(OUT_ENV, DEFAULT_OUT)
    parser = argparse.ArgumentParser(prog="sigattr", description="Signal-wise attribution of constrained portfolios.")
    sub = parser.add_subparsers(dest="command", required=True)

    sim = sub.add_parser("simulate", help="generate a synthetic value/momentum scenario")
    sim.add_argument("--config", required=True, help="generator config (JSON)")
    sim.add_argument("--out", default=default_out, help=f"output directory (default ${OUT_ENV} or {DEFAULT_OUT})")
    sim.add_argument("--seed-override", type=int, default=None, help="replace the seed in the config")

    att = sub.add_parser("attribute", help="run backtests and write attribution reports")
    att.add_argument("scenarios", nargs="*", help="scenario config files")
    att.add_argument("--config", action="append", default=[], help="scenario config (repeatable)")
    att.add_argument("--mode", choices=[m.value for m in Mode] + ["all"], default=None,
                     help="attribution mode (default: the config's mode)")
    att.add_argument("--out", default=default_out)
    att.add_argument("--tol", type=float, default=None, help="solver tolerance")
    att.add_argument("--jobs", type=int, default=1, help="worker threads across scenarios")

    ver = sub.add_parser("verify", help="run the invariant suite and print a pass/fail table")
    ver.add_argument("scenarios", nargs="*")
    ver.add_argument("--config", action="append", default=[])
    ver.add_argument("--tol", type=float, default=None)
    ver.add_argument("--no-oracle", dest="oracle", action="store_false",
                     help="skip the brute-force comparison")
    ver.add_argument("--jobs", type=int, default=1)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "simulate":
            return cmd_simulate(args.config, args.out, args.seed_override)
        paths = list(args.config) + list(args.scenarios)
        if not paths:
            raise CliError(EXIT_CONFIG, "no scenario given")
        if args.jobs < 1:
            raise CliError(EXIT_CONFIG, "--jobs must be at least 1")
        if args.command == "attribute":
            return cmd_attribute(paths, args.mode, args.out, args.tol, args.jobs)
        return cmd_verify(paths, args.tol, args.oracle, args.jobs)
    except CliError as exc:
        _err(str(exc))
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
