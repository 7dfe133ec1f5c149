"""Domain types and the quadratic objective of the one-step trading problem.

Positions are in currency, returns are fractional.  The one-step problem
maximised at every date is::

    -1/2 dx.Q.dx - dx.P.x_prev + dx.G
      - lambda_spread * |dx|_1 - lambda_financing * |x_prev + dx|_1
      - lambda_power32 * sum |dx_i|^(3/2)
"""

from __future__ import annotations

from dataclasses import InitVar, dataclass
from typing import Sequence

import numpy as np

PSD_RTOL = 1e-10
SUM_RTOL = 1e-8


class ModelValidationError(ValueError):
    """Raised when a model, signal set or state violates its invariants."""


def _as_matrix(a, n: int, name: str) -> np.ndarray:
    m = np.array(a, dtype=float)
    if m.ndim == 0:
        m = m * np.eye(n)
    if m.shape != (n, n):
        raise ModelValidationError(f"{name} must be {n}x{n}, got shape {m.shape}")
    if not np.all(np.isfinite(m)):
        raise ModelValidationError(f"{name} has non-finite entries")
    return m


def check_psd(m: np.ndarray, name: str, rtol: float = PSD_RTOL) -> None:
    """Raise unless ``m`` is symmetric PSD up to ``rtol`` of its spectral radius."""
    scale = max(1.0, float(np.max(np.abs(m)))) if m.size else 1.0
    if not np.allclose(m, m.T, rtol=0.0, atol=1e-12 * scale):
        raise ModelValidationError(f"{name} is not symmetric")
    if m.size == 0:
        return
    eig = np.linalg.eigvalsh(0.5 * (m + m.T))
    radius = float(np.max(np.abs(eig)))
    if eig[0] < -rtol * radius:
        raise ModelValidationError(
            f"{name} is not positive semidefinite (smallest eigenvalue {eig[0]:.3g})"
        )


@dataclass(frozen=True)
class MarketModel:
    """Risk, costs and risk aversion for an ``n_assets`` universe.

    ``lambda_quad`` is either a scalar ``lam`` (quadratic costs ``lam * sigma``)
    or an explicit ``n x n`` PSD cost matrix.  ``impact`` is an optional
    ``(R, C)`` pair driving the persistent price distortion
    ``D' = (I - R)(D + C dx)``.  ``check=False`` skips validation so that a
    faulty model can still be inspected.
    """

    n_assets: int
    sigma: np.ndarray
    gamma: float
    lambda_quad: float | np.ndarray = 0.0
    lambda_spread: float = 0.0
    lambda_financing: float = 0.0
    lambda_power32: float = 0.0
    impact: tuple[np.ndarray, np.ndarray] | None = None
    check: InitVar[bool] = True

    def __post_init__(self, check: bool = True):
        if not check:
            # raw container for diagnostics (see scenarios.validate_scenario)
            object.__setattr__(self, "sigma", np.array(self.sigma, dtype=float))
            return
        n = int(self.n_assets)
        if n < 1:
            raise ModelValidationError("n_assets must be a positive integer")
        object.__setattr__(self, "n_assets", n)
        sigma = _as_matrix(self.sigma, n, "sigma")
        check_psd(sigma, "sigma")
        object.__setattr__(self, "sigma", sigma)
        if not (np.isfinite(self.gamma) and self.gamma > 0):
            raise ModelValidationError("gamma must be positive")
        lq = self.lambda_quad
        if np.ndim(lq) == 0:
            lq = float(lq)
            if not lq >= 0:
                raise ModelValidationError("lambda_quad must be nonnegative")
        else:
            lq = _as_matrix(lq, n, "lambda_quad")
            check_psd(lq, "lambda_quad")
        object.__setattr__(self, "lambda_quad", lq)
        for name in ("lambda_spread", "lambda_financing", "lambda_power32"):
            val = float(getattr(self, name))
            if not (np.isfinite(val) and val >= 0):
                raise ModelValidationError(f"{name} must be nonnegative")
            object.__setattr__(self, name, val)
        if self.impact is not None:
            r, c = self.impact
            object.__setattr__(
                self, "impact", (_as_matrix(r, n, "impact R"), _as_matrix(c, n, "impact C"))
            )

    @property
    def cost_matrix(self) -> np.ndarray:
        """Quadratic cost matrix Lambda."""
        if isinstance(self.lambda_quad, np.ndarray):
            return self.lambda_quad
        return self.lambda_quad * self.sigma

    @property
    def has_impact(self) -> bool:
        return self.impact is not None


@dataclass(frozen=True)
class DynamicModelParams:
    """Mean-reversion speeds per signal and the value-function coefficient ``a``."""

    phi: np.ndarray
    a: float

    def __post_init__(self):
        phi = np.atleast_1d(np.array(self.phi, dtype=float))
        if phi.ndim != 1 or not np.all(np.isfinite(phi)):
            raise ModelValidationError("phi must be a finite 1-d vector")
        if np.any(phi < 0):
            raise ModelValidationError("phi must be nonnegative")
        if not (np.isfinite(self.a) and self.a >= 0):
            raise ModelValidationError("a must be nonnegative")
        object.__setattr__(self, "phi", phi)
        object.__setattr__(self, "a", float(self.a))


@dataclass(frozen=True)
class SignalSet:
    """``g[t, k, i]``: expected excess return of asset ``i`` due to signal ``k``.

    Loadings are already folded into the values, so the total expected
    return is ``g.sum(axis=1)``.
    """

    names: tuple[str, ...]
    g: np.ndarray

    def __post_init__(self):
        g = np.array(self.g, dtype=float)
        if g.ndim != 3:
            raise ModelValidationError("g must be a T x K x n array")
        names = tuple(str(s) for s in self.names)
        if len(names) != g.shape[1]:
            raise ModelValidationError(
                f"{len(names)} signal names for {g.shape[1]} signal components"
            )
        if len(set(names)) != len(names):
            raise ModelValidationError("signal names must be unique")
        if g.shape[0] < 1 or g.shape[1] < 1:
            raise ModelValidationError("need at least one step and one signal")
        if not np.all(np.isfinite(g)):
            raise ModelValidationError("signal values must be finite")
        object.__setattr__(self, "g", g)
        object.__setattr__(self, "names", names)

    @property
    def k_signals(self) -> int:
        return self.g.shape[1]

    @property
    def n_steps(self) -> int:
        return self.g.shape[0]

    @property
    def n_assets(self) -> int:
        return self.g.shape[2]

    def total(self) -> np.ndarray:
        """T x n total prediction G."""
        return self.g.sum(axis=1)


def _check_sum(parts: np.ndarray, total: np.ndarray, name: str) -> None:
    scale = max(1.0, float(np.max(np.abs(total))) if total.size else 1.0)
    if np.max(np.abs(parts.sum(axis=0) - total), initial=0.0) > SUM_RTOL * scale:
        raise ModelValidationError(f"{name} components do not sum to the total")


@dataclass(frozen=True)
class PortfolioState:
    """Total position and its split across sources (rows of ``per_signal_x``)."""

    x: np.ndarray
    per_signal_x: np.ndarray
    d: np.ndarray | None = None
    per_signal_d: np.ndarray | None = None

    def __post_init__(self):
        x = np.array(self.x, dtype=float)
        px = np.array(self.per_signal_x, dtype=float)
        if px.ndim != 2 or px.shape[1] != x.shape[0]:
            raise ModelValidationError("per_signal_x must be K x n")
        _check_sum(px, x, "position")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "per_signal_x", px)
        if (self.d is None) != (self.per_signal_d is None):
            raise ModelValidationError("d and per_signal_d must be given together")
        if self.d is not None:
            d = np.array(self.d, dtype=float)
            pd_ = np.array(self.per_signal_d, dtype=float)
            if pd_.shape != px.shape:
                raise ModelValidationError("per_signal_d must match per_signal_x")
            _check_sum(pd_, d, "distortion")
            object.__setattr__(self, "d", d)
            object.__setattr__(self, "per_signal_d", pd_)

    @classmethod
    def zero(cls, k: int, n: int, impact: bool = False) -> "PortfolioState":
        if impact:
            return cls(np.zeros(n), np.zeros((k, n)), np.zeros(n), np.zeros((k, n)))
        return cls(np.zeros(n), np.zeros((k, n)))


def build_static_matrices(model: MarketModel) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(Q, P) = (Lambda + gamma*Sigma, gamma*Sigma)``."""
    p = model.gamma * model.sigma
    q = model.cost_matrix + p
    return 0.5 * (q + q.T), 0.5 * (p + p.T)


def scale_signals_dynamic(
    signals: SignalSet, params: DynamicModelParams, gamma: float
) -> SignalSet:
    """Shrink each signal by ``1 / (1 + phi_k * a / gamma)``."""
    if params.phi.shape[0] != signals.k_signals:
        raise ModelValidationError(
            f"{params.phi.shape[0]} mean-reversion speeds for {signals.k_signals} signals"
        )
    denom = 1.0 + params.phi * params.a / gamma
    if np.any(denom <= 0):
        raise ModelValidationError("1 + phi*a/gamma must be positive")
    return SignalSet(signals.names, signals.g / denom[None, :, None])


def markowitz_aim(g: Sequence[float] | np.ndarray, model: MarketModel) -> np.ndarray:
    """Cost-free aim position ``(gamma*Sigma)^-1 G``."""
    g = np.asarray(g, dtype=float)
    return np.linalg.solve(model.gamma * model.sigma, g)
