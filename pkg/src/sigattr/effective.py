"""Constraints as effective quadratic costs and risk.

A binding constraint ``v.q <= M`` with Lagrange multiplier ``lam`` is
equivalent to its squared form ``(v.q)^2 <= M^2`` whose multiplier is
``eta = eps * lam / (2 M)``.  Trade-like constraints add ``2 eta v v^T``
to Q; position-like ones add it to both Q and P.  Zero bounds give an
infinite ``eta``, handled exactly as a hard linear restriction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Sequence

import numpy as np

from .qpsolver import ConstraintKind, ConstraintSpec, QpProblem, QpSolution

MULTIPLIER_TOL = 1e-10
ZERO_BOUND_TOL = 1e-12


class ClassificationError(ValueError):
    """A binding constraint yields a negative attribution multiplier."""


class EffectiveSolveError(RuntimeError):
    pass


class Classification(str, Enum):
    TRADE_LIKE = "trade"
    POSITION_LIKE = "position"


def classify_constraint(spec: ConstraintSpec | ConstraintKind) -> Classification:
    kind = spec.kind if isinstance(spec, ConstraintSpec) else ConstraintKind(spec)
    return Classification.POSITION_LIKE if kind.is_position else Classification.TRADE_LIKE


@dataclass(frozen=True, eq=False)
class AttributionMultiplier:
    constraint_label: str
    classification: Classification
    eta: float
    bound_used: float
    epsilon: int
    v: np.ndarray
    lagrange: float = 0.0
    source: str = "user"
    index: int = -1
    note: str = ""

    @property
    def is_hard(self) -> bool:
        return math.isinf(self.eta)

    @property
    def active(self) -> bool:
        return self.eta != 0.0


@dataclass(frozen=True, eq=False)
class EffectiveMatrices:
    q_bar: np.ndarray
    p_bar: np.ndarray
    hard_directions: tuple[tuple[np.ndarray, Classification], ...] = ()

    def hard_system(self, x_prev: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """``(V, r)`` such that the hard directions impose ``V dx = r``."""
        n = self.q_bar.shape[0]
        if not self.hard_directions:
            return np.zeros((0, n)), np.zeros(0)
        vs = np.array([v for v, _ in self.hard_directions])
        r = np.array(
            [-(v @ x_prev) if kind is Classification.POSITION_LIKE else 0.0
             for v, kind in self.hard_directions]
        )
        return vs, r


def _eta_from(lam: float, bound: float, eps: int, scale: float) -> float:
    if abs(bound) <= ZERO_BOUND_TOL * scale:
        return math.inf
    return eps * lam / (2.0 * bound)


def attribution_multipliers(
    solution: QpSolution,
    problem: QpProblem,
    lam_tol: float = MULTIPLIER_TOL,
    allow_reclassify: bool = True,
) -> list[AttributionMultiplier]:
    """One entry per user constraint and per auxiliary L1 asset row.

    Rows whose multiplier is below ``lam_tol`` (relative to the largest
    multiplier, floor 1) count as inactive and get ``eta = 0``.
    """
    n = problem.n_assets
    x_prev = problem.x_prev if problem.x_prev is not None else np.zeros(n)
    lam = solution.multipliers
    active = set(solution.active_set)
    thresh = lam_tol * max(1.0, float(np.max(lam, initial=0.0)))
    scale = max(1.0, float(np.max(np.abs(solution.y), initial=0.0)))
    eye = np.eye(n)

    by_key: dict[tuple[str, int], list[int]] = {}
    for r, info in enumerate(problem.rows):
        by_key.setdefault((info.source, info.index), []).append(r)

    out: list[AttributionMultiplier] = []
    for ci, cs in enumerate(problem.constraints):
        rows = by_key.get(("user", ci), [])
        live = [r for r in rows if r in active and lam[r] > thresh]
        cls = classify_constraint(cs)
        if not live:
            out.append(AttributionMultiplier(cs.label, cls, 0.0, math.nan, 1, cs.v, 0.0, "user", ci,
                                             "degenerate" if any(r in active for r in rows) else ""))
            continue
        note = "both bounds reported active" if len(live) > 1 else ""
        r = max(live, key=lambda rr: (lam[rr], -rr))
        side = problem.rows[r].side
        eps = 1 if side == "upper" else -1
        bound = cs.upper if side == "upper" else cs.lower
        mult = float(lam[r])
        eta = _eta_from(mult, bound, eps, max(scale, abs(bound)))
        if eta < 0 and allow_reclassify:
            shift = float(cs.v @ x_prev)
            alt_bound = bound - shift if cls is Classification.POSITION_LIKE else bound + shift
            alt_eta = _eta_from(mult, alt_bound, eps, max(scale, abs(alt_bound)))
            if alt_eta >= 0:
                cls = (Classification.TRADE_LIKE if cls is Classification.POSITION_LIKE
                       else Classification.POSITION_LIKE)
                bound, eta = alt_bound, alt_eta
                note = (note + "; " if note else "") + f"reclassified as {cls.value}"
        if eta < 0:
            raise ClassificationError(
                f"constraint {cs.label!r} binds with negative attribution multiplier {eta:.3g}"
            )
        out.append(AttributionMultiplier(cs.label, cls, eta, bound, eps, cs.v, mult, "user", ci, note))

    for source, cls in (("spread", Classification.TRADE_LIKE),
                        ("financing", Classification.POSITION_LIKE)):
        try:
            off = problem.var_map.index((source, 0))
        except ValueError:
            continue
        for i in range(n):
            rows = by_key.get((source, i), [])
            live = [r for r in rows if r in active and lam[r] > thresh]
            label = f"{source}[{i}]"
            if not live:
                out.append(AttributionMultiplier(label, cls, 0.0, math.nan, 1, eye[i], 0.0, source, i))
                continue
            aux = float(solution.y[off + i])
            mult = float(sum(lam[r] for r in live))
            both = sum(1 for r in rows if r in active) == 2
            side = problem.rows[max(live, key=lambda rr: lam[rr])].side
            eps = 1 if side == "upper" else -1
            if both or aux <= ZERO_BOUND_TOL * scale:
                eta = math.inf
            else:
                eta = mult / (2.0 * aux)
            out.append(AttributionMultiplier(label, cls, eta, eps * aux, eps, eye[i], mult, source, i))
    return out


def _independent(vectors: Sequence[np.ndarray], tol: float = 1e-10) -> list[int]:
    keep: list[int] = []
    basis = []
    for j, v in enumerate(vectors):
        resid = v.astype(float).copy()
        for b in basis:
            resid -= (b @ resid) * b
        nrm = np.linalg.norm(resid)
        if nrm > tol * max(1.0, np.linalg.norm(v)):
            keep.append(j)
            basis.append(resid / nrm)
    return keep


def effective_matrices(
    q: np.ndarray,
    p: np.ndarray,
    mults: Iterable[AttributionMultiplier],
    hard_as_large: bool = False,
) -> EffectiveMatrices:
    """Add ``2 eta v v^T`` terms; infinite ``eta`` becomes a hard direction.

    Hard directions that are linearly dependent on earlier ones are dropped
    (position-like ones are taken first).  With ``hard_as_large`` infinite
    multipliers are replaced by ``1e8 * trace(Q) / n`` instead, a
    cross-check of the exact treatment.
    """
    n = q.shape[0]
    q_bar = np.array(q, dtype=float, copy=True)
    p_bar = np.array(p, dtype=float, copy=True)
    eta_max = 1e8 * float(np.trace(q)) / n
    hard: list[tuple[np.ndarray, Classification]] = []
    for mu in mults:
        if mu.eta == 0.0:
            continue
        if mu.eta < 0:
            raise ClassificationError(f"negative attribution multiplier for {mu.constraint_label!r}")
        eta = mu.eta
        if math.isinf(eta):
            if not hard_as_large:
                hard.append((np.asarray(mu.v, dtype=float), mu.classification))
                continue
            eta = eta_max
        a = 2.0 * eta * np.outer(mu.v, mu.v)
        q_bar += a
        if mu.classification is Classification.POSITION_LIKE:
            p_bar += a
    hard.sort(key=lambda hv: 0 if hv[1] is Classification.POSITION_LIKE else 1)
    keep = _independent([v for v, _ in hard])
    return EffectiveMatrices(q_bar, p_bar, tuple(hard[j] for j in keep))


def solve_effective_steps(em: EffectiveMatrices, x_prev: np.ndarray, sources: np.ndarray) -> np.ndarray:
    """Batched :func:`solve_effective_step`: rows of ``x_prev``/``sources`` are sources."""
    x_prev = np.atleast_2d(x_prev)
    sources = np.atleast_2d(sources)
    rhs = (sources - x_prev @ em.p_bar.T).T
    n = em.q_bar.shape[0]
    try:
        if not em.hard_directions:
            return np.linalg.solve(em.q_bar, rhs).T
        vs = np.array([v for v, _ in em.hard_directions])
        is_pos = np.array([kind is Classification.POSITION_LIKE for _, kind in em.hard_directions])
        h = vs.shape[0]
        kkt = np.zeros((n + h, n + h))
        kkt[:n, :n] = em.q_bar
        kkt[:n, n:] = vs.T
        kkt[n:, :n] = vs
        cons = -(x_prev @ vs.T) * is_pos[None, :]
        full = np.vstack([rhs, cons.T])
        sol = np.linalg.solve(kkt, full)
    except np.linalg.LinAlgError as exc:
        raise EffectiveSolveError(f"singular effective system: {exc}") from exc
    return sol[:n].T


def solve_effective_step(em: EffectiveMatrices, x_prev: np.ndarray, source: np.ndarray) -> np.ndarray:
    """Trade solving ``Q_bar dx + P_bar x_prev = source`` under the hard directions."""
    return solve_effective_steps(em, np.asarray(x_prev, float)[None, :],
                                 np.asarray(source, float)[None, :])[0]


@dataclass(frozen=True)
class ProjectionSplit:
    alpha: float
    unconstrained: np.ndarray
    projected: np.ndarray
    position_correction: np.ndarray

    @property
    def trade(self) -> np.ndarray:
        return (1.0 - self.alpha) * self.unconstrained + self.alpha * self.projected + self.position_correction


def projection_split(
    q: np.ndarray,
    p: np.ndarray,
    v: np.ndarray,
    eta: float,
    x_prev: np.ndarray,
    source: np.ndarray,
    kind: Classification,
) -> ProjectionSplit:
    """Sherman-Morrison view of a single rank-one constraint.

    The trade is ``(1-alpha)`` times the unconstrained trade plus ``alpha``
    times its projection onto ``{v.dx = 0}`` along ``Q^-1 v``; a position
    constraint adds the trade projecting ``x_prev`` the same way.
    """
    v = np.asarray(v, dtype=float)
    x_prev = np.asarray(x_prev, dtype=float)
    qinv_v = np.linalg.solve(q, v)
    c = float(v @ qinv_v)
    if c <= 0:
        raise ValueError("v.Q^-1.v must be positive")
    if math.isinf(eta):
        alpha = 1.0
    else:
        alpha = 2.0 * eta * c / (1.0 + 2.0 * eta * c)
    unc = np.linalg.solve(q, np.asarray(source, dtype=float) - p @ x_prev)
    projected = unc - qinv_v * (v @ unc) / c
    if Classification(kind) is Classification.POSITION_LIKE:
        corr = -alpha * qinv_v * (v @ x_prev) / c
    else:
        corr = np.zeros_like(unc)
    return ProjectionSplit(alpha, unc, projected, corr)


def verify_reconstruction(
    em: EffectiveMatrices, x_prev: np.ndarray, source: np.ndarray, trade_star: np.ndarray
) -> float:
    """``|Q_bar dx* + P_bar x_prev - source|_inf`` off the span of the hard directions."""
    resid = em.q_bar @ trade_star + em.p_bar @ x_prev - source
    if em.hard_directions:
        vs = np.array([v for v, _ in em.hard_directions])
        coef = np.linalg.lstsq(vs.T, resid, rcond=None)[0]
        resid = resid - vs.T @ coef
    return float(np.max(np.abs(resid), initial=0.0))

