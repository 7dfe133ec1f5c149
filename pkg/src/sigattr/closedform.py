"""Single-asset static-model analytics.

All functions work on one stock with total signal ``g``, previous position
``x_prev``, risk ``gamma_sigma2`` and quadratic cost ``lambda_quad``; the
objective maximised over the trade ``t`` is::

    t*(g - gamma_sigma2*x_prev) - 1/2 (gamma_sigma2 + lambda_quad) t^2
      - lambda_spread |t| - lambda_fin |x_prev + t| - lambda_p32 |t|^(3/2)
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

BISECTION_MAX_ITER = 200


class BisectionError(RuntimeError):
    pass


@dataclass(frozen=True)
class SingleAssetStep:
    g: float
    x_prev: float
    gamma_sigma2: float
    lambda_quad: float = 0.0
    lambda_spread: float = 0.0
    lambda_fin: float = 0.0
    lambda_p32: float = 0.0

    def __post_init__(self):
        if not self.gamma_sigma2 > 0:
            raise ValueError("gamma_sigma2 must be positive")
        for name in ("lambda_quad", "lambda_spread", "lambda_fin", "lambda_p32"):
            if not getattr(self, name) >= 0:
                raise ValueError(f"{name} must be nonnegative")

    @property
    def source(self) -> float:
        """``g - gamma_sigma2 * x_prev``: what the trade has to absorb."""
        return self.g - self.gamma_sigma2 * self.x_prev

    @property
    def curvature(self) -> float:
        return self.gamma_sigma2 + self.lambda_quad


def objective(step: SingleAssetStep, t):
    """Exact (nonsmooth) objective; vectorised over ``t``."""
    t = np.asarray(t, dtype=float)
    return (
        t * step.source
        - 0.5 * step.curvature * t * t
        - step.lambda_spread * np.abs(t)
        - step.lambda_fin * np.abs(step.x_prev + t)
        - step.lambda_p32 * np.abs(t) ** 1.5
    )


def spread_threshold_active(step: SingleAssetStep) -> bool:
    """True iff a nonzero trade is optimal under spread costs."""
    return abs(step.g / step.gamma_sigma2 - step.x_prev) > step.lambda_spread / step.gamma_sigma2


def solve_spread_step(step: SingleAssetStep) -> tuple[float, float]:
    """Optimal trade and effective quadratic cost ``eta`` for spread costs.

    Below the threshold the trade is 0 and ``eta`` is infinite.
    """
    s = step.source
    if step.lambda_spread == 0:
        return s / step.curvature, 0.0
    if not spread_threshold_active(step):
        return 0.0, math.inf
    trade = math.copysign(abs(s) - step.lambda_spread, s) / step.curvature
    return trade, step.lambda_spread / (2.0 * abs(trade))


def spread_ratio(step: SingleAssetStep, eta: float) -> float:
    """``|dx| / s`` as a function of the effective cost; equals 1 at saturation."""
    return (
        2.0 * eta / (step.curvature + 2.0 * eta) * abs(step.source) / step.lambda_spread
    )


def financing_keep_position(step: SingleAssetStep) -> bool:
    """True iff the next position is nonzero under financing costs."""
    return abs(step.g + step.lambda_quad * step.x_prev) > step.lambda_fin


def solve_financing_step(step: SingleAssetStep) -> tuple[float, float]:
    """Optimal trade and effective quadratic risk ``eta`` for financing costs."""
    if step.lambda_fin == 0:
        return step.source / step.curvature, 0.0
    if not financing_keep_position(step):
        return -step.x_prev, math.inf
    drive = step.g + step.lambda_quad * step.x_prev
    new_pos = math.copysign(abs(drive) - step.lambda_fin, drive) / step.curvature
    return new_pos - step.x_prev, step.lambda_fin / (2.0 * abs(new_pos))


def power32_ratio(step: SingleAssetStep, eta: float) -> float:
    """``|dx| / s^(2/3)`` at effective cost ``eta``; the saturated solution has ratio 1.

    From ``(4/3) eta s^(1/3) = lambda_p32`` we get
    ``s^(2/3) = 9 lambda_p32^2 / (16 eta^2)``.
    """
    r = eta / step.lambda_p32
    return 16.0 / 9.0 * r * r * abs(step.source) / (step.curvature + 2.0 * eta)


def solve_power32_step(step: SingleAssetStep) -> tuple[float, float]:
    """Trade and effective cost for power-3/2 impact, by bisection on ``eta``.

    The ratio is increasing in ``eta`` from 0 to infinity, so there is no
    threshold: any nonzero source produces a nonzero trade.
    """
    s = step.source
    if s == 0:
        return 0.0, 0.0
    if step.lambda_p32 == 0:
        return s / step.curvature, 0.0
    lo = 1e-12
    if power32_ratio(step, lo) >= 1.0:
        return s / (step.curvature + 2.0 * lo), lo
    # for eta >= curvature the ratio exceeds (16/27) eta |s| / lambda_p32^2
    hi = 2.0 * max(1.0, step.curvature, 27.0 * step.lambda_p32**2 / (16.0 * abs(s)))
    if not (math.isfinite(hi) and power32_ratio(step, hi) > 1.0):
        raise BisectionError("could not bracket the power-3/2 effective cost")
    for _ in range(BISECTION_MAX_ITER):
        # geometric midpoint while the bracket spans orders of magnitude
        mid = math.sqrt(lo * hi) if hi > 4.0 * lo else 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if power32_ratio(step, mid) > 1.0:
            hi = mid
        else:
            lo = mid
    else:
        raise BisectionError("power-3/2 bisection did not converge")
    eta = lo if abs(power32_ratio(step, lo) - 1) <= abs(power32_ratio(step, hi) - 1) else hi
    return s / (step.curvature + 2.0 * eta), eta


def power32_foc_residual(step: SingleAssetStep, trade: float) -> float:
    """First-order condition of the original power-3/2 problem at ``trade``."""
    return (
        step.source
        - step.curvature * trade
        - 1.5 * step.lambda_p32 * math.copysign(math.sqrt(abs(trade)), trade)
    )


def solve_mixed_step(step: SingleAssetStep) -> tuple[float, float, float]:
    """Spread plus power-3/2 costs (experimental).

    Returns ``(trade, eta_spread, eta_p32)``.  The spread threshold is applied
    first; if trading, ``|dx|`` solves
    ``curvature*|dx| + lambda_spread + 1.5*lambda_p32*sqrt|dx| = |source|``
    by bisection, and each cost is then converted to its effective
    quadratic cost.
    """
    s = step.source
    if abs(s) <= step.lambda_spread:
        return 0.0, (math.inf if step.lambda_spread > 0 else 0.0), 0.0
    excess = abs(s) - step.lambda_spread
    lo, hi = 0.0, excess / step.curvature
    for _ in range(BISECTION_MAX_ITER):
        mid = 0.5 * (lo + hi)
        if mid <= lo or mid >= hi:
            break
        if step.curvature * mid + 1.5 * step.lambda_p32 * math.sqrt(mid) > excess:
            hi = mid
        else:
            lo = mid
    size = hi
    eta0 = step.lambda_spread / (2.0 * size)
    eta_p = 0.75 * step.lambda_p32 / math.sqrt(size)
    return math.copysign(size, s), eta0, eta_p


def solve_single_asset(step: SingleAssetStep, lower: float = -math.inf, upper: float = math.inf) -> float:
    """Exact maximiser over ``lower <= t <= upper`` with every cost term.

    The objective is concave and smooth between the kinks at ``t = 0`` and
    ``t = -x_prev``; on each smooth piece the stationary point solves a
    quadratic in ``sqrt|t|``.  The best of the piecewise stationary points
    and the breakpoints is the global maximiser.
    """
    if lower > upper:
        raise ValueError("empty trade interval")
    kinks = {0.0}
    if step.lambda_fin > 0:
        kinks.add(-step.x_prev)
    inner = sorted(k for k in kinks if lower < k < upper)
    edges = [lower] + inner + [upper]
    candidates = [e for e in edges if math.isfinite(e)]
    q, lp = step.curvature, step.lambda_p32
    for a, b in zip(edges[:-1], edges[1:]):
        if a == b:
            continue
        if math.isinf(a) and math.isinf(b):
            mid = 0.0
        elif math.isinf(a):
            mid = b - 1.0
        elif math.isinf(b):
            mid = a + 1.0
        else:
            mid = 0.5 * (a + b)
        sg0 = 1.0 if mid > 0 else -1.0
        sgl = 1.0 if step.x_prev + mid > 0 else -1.0
        rhs = step.source - step.lambda_spread * sg0 - step.lambda_fin * sgl
        if sg0 * rhs <= 0:
            continue
        w = 2.0 * sg0 * rhs / (1.5 * lp + math.sqrt(2.25 * lp * lp + 4.0 * q * sg0 * rhs))
        t = sg0 * w * w
        if a < t < b:
            candidates.append(t)
    vals = objective(step, np.array(candidates))
    return float(candidates[int(np.argmax(vals))])
