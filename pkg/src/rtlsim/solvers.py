"""Position solvers for range (TWR) and range-difference (TDOA) measurements.

Three solvers share one objective family:

* ``lm_multilaterate``: Levenberg-Marquardt on the range residuals
  ``||p - a_i|| - d_i``.
* ``larsson_multilaterate``: global solver that reduces trilateration to a
  7x7 eigenvalue problem, finds the rightmost real eigenvalue by power
  iteration on a shifted inverse, refines the eigenvector by inverse
  iteration and finally polishes the point on the range residuals.
* ``lm_tdoa``: Levenberg-Marquardt for a passive listener that hears the
  poll of an initiator at ``q`` and the delayed replies of the anchors.

All functions are pure; inputs are never mutated.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

# Distances below this are clamped before dividing (anchor-coincident iterate).
MIN_DISTANCE = 1e-9


class SolverError(ValueError):
    """Raised when a problem violates a solver precondition."""


class SingularGeometryError(SolverError):
    """Raised when anchor geometry does not constrain all three axes."""


@dataclass(frozen=True)
class Position:
    x: float
    y: float
    z: float

    def __post_init__(self):
        if not all(math.isfinite(c) for c in (self.x, self.y, self.z)):
            raise ValueError(f"non-finite coordinate in {self!r}")

    @classmethod
    def from_array(cls, arr) -> "Position":
        a = np.asarray(arr, dtype=float).reshape(3)
        return cls(float(a[0]), float(a[1]), float(a[2]))

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=float)

    def distance_to(self, other: "Position") -> float:
        return float(np.linalg.norm(self.as_array() - other.as_array()))


def _anchor_array(anchors) -> np.ndarray:
    rows = [a.as_array() if isinstance(a, Position) else np.asarray(a, dtype=float) for a in anchors]
    if not rows:
        return np.zeros((0, 3))
    arr = np.vstack(rows).astype(float)
    if arr.ndim != 2 or arr.shape[1] != 3:
        raise SolverError("anchors must be 3D points")
    if not np.all(np.isfinite(arr)):
        raise SolverError("anchor coordinates must be finite")
    return arr


@dataclass(frozen=True)
class MultilaterationProblem:
    """Anchor positions with one measured range per anchor."""

    anchors: tuple
    distances: tuple

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(self.anchors))
        object.__setattr__(self, "distances", tuple(float(d) for d in self.distances))
        if len(self.anchors) != len(self.distances):
            raise SolverError("anchors and distances differ in length")
        if len(self.anchors) < 4:
            raise SolverError(f"need at least 4 anchors for a 3D fix, got {len(self.anchors)}")
        if not all(math.isfinite(d) and d >= 0 for d in self.distances):
            raise SolverError("distances must be finite and non-negative")
        _anchor_array(self.anchors)

    def anchor_array(self) -> np.ndarray:
        return _anchor_array(self.anchors)

    def distance_array(self) -> np.ndarray:
        return np.asarray(self.distances, dtype=float)


@dataclass(frozen=True)
class TdoaProblem:
    """Passive-listener problem.

    ``range_differences[i]`` is ``c * (tau_i - reply_delay_i)``: the extra path
    the reply of anchor ``i`` travelled compared to the direct poll, i.e.
    ``||a_i - q|| + ||p - a_i|| - ||p - q||`` for listener ``p`` and
    initiator ``q``.
    """

    initiator: Position
    anchors: tuple
    range_differences: tuple

    def __post_init__(self):
        object.__setattr__(self, "anchors", tuple(self.anchors))
        object.__setattr__(self, "range_differences", tuple(float(m) for m in self.range_differences))
        if len(self.anchors) != len(self.range_differences):
            raise SolverError("anchors and range_differences differ in length")
        if len(self.anchors) < 4:
            raise SolverError(f"need at least 4 anchors for TDOA, got {len(self.anchors)}")
        if not all(math.isfinite(m) for m in self.range_differences):
            raise SolverError("range differences must be finite")
        _anchor_array(self.anchors)

    def anchor_array(self) -> np.ndarray:
        return _anchor_array(self.anchors)


@dataclass(frozen=True)
class SolverResult:
    position: Position
    converged: bool
    iterations: int
    residual_norm: float


@dataclass(frozen=True)
class SolverConfig:
    tolerance: float = 1e-2
    max_lm_iterations: int = 20
    max_power_iterations: int = 1000
    lm_damping_init: float = 1e-3

    def __post_init__(self):
        if not self.tolerance > 0:
            raise ValueError("tolerance must be positive")
        if self.max_lm_iterations < 1 or self.max_power_iterations < 1:
            raise ValueError("iteration caps must be >= 1")
        if not self.lm_damping_init > 0:
            raise ValueError("lm_damping_init must be positive")


DEFAULT_CONFIG = SolverConfig()


# ---------------------------------------------------------------------------
# residual models


def range_residuals(p: np.ndarray, anchors: np.ndarray, distances: np.ndarray) -> np.ndarray:
    return np.linalg.norm(anchors - p, axis=1) - distances


def range_objective(p, anchors, distances) -> float:
    """Sum of squared range residuals at ``p``."""
    r = range_residuals(np.asarray(p, dtype=float), np.asarray(anchors, dtype=float),
                        np.asarray(distances, dtype=float))
    return float(r @ r)


def _range_model(anchors, distances):
    def fun(p):
        diff = p - anchors
        norms = np.maximum(np.linalg.norm(diff, axis=1), MIN_DISTANCE)
        return norms - distances, diff / norms[:, None]
    return fun


def tdoa_residuals(p, initiator, anchors, range_differences) -> np.ndarray:
    p = np.asarray(p, dtype=float)
    q = np.asarray(initiator, dtype=float)
    a = np.asarray(anchors, dtype=float)
    predicted = (np.linalg.norm(a - q, axis=1) + np.linalg.norm(p - a, axis=1)
                 - np.linalg.norm(p - q))
    return np.asarray(range_differences, dtype=float) - predicted


def tdoa_objective(p, initiator, anchors, range_differences) -> float:
    r = tdoa_residuals(p, initiator, anchors, range_differences)
    return float(r @ r)


def _tdoa_model(q, anchors, m):
    base = np.linalg.norm(anchors - q, axis=1)

    def fun(p):
        diff = p - anchors
        norms = np.maximum(np.linalg.norm(diff, axis=1), MIN_DISTANCE)
        dq = p - q
        nq = max(float(np.linalg.norm(dq)), MIN_DISTANCE)
        r = m - (base + norms - nq)
        jac = -(diff / norms[:, None] - dq / nq)
        return r, jac
    return fun


# ---------------------------------------------------------------------------
# Levenberg-Marquardt


@dataclass
class LmTrace:
    """Per-iteration record used by tests to audit the damping schedule."""

    costs: list = field(default_factory=list)
    accepted: list = field(default_factory=list)
    damping: list = field(default_factory=list)


def _exact_fit_floor(scale: float) -> float:
    return (1e-10 * (1.0 + scale)) ** 2


# Relative cost changes below this are rounding noise; near a minimum with
# non-zero residuals a genuine step can look like a tiny increase.
COST_RESOLUTION = 1e-13
MAX_DAMPING = 1e16


def _improves(cost: float, cost_new: float, grad: np.ndarray, grad_new: np.ndarray) -> bool:
    """Strict decrease, or a tie within rounding that shrinks the gradient."""
    if cost_new < cost:
        return True
    return (cost_new <= cost * (1.0 + COST_RESOLUTION)
            and float(np.linalg.norm(grad_new)) < float(np.linalg.norm(grad)))


def levenberg_marquardt(fun: Callable, x0: np.ndarray, config: SolverConfig, scale: float = 1.0,
                        trace: LmTrace | None = None) -> tuple[np.ndarray, bool, int, float]:
    """Minimise ``sum(r**2)`` for ``r, J = fun(x)``.

    Returns ``(x, converged, iterations, cost)``. Every pass through the loop
    counts as one iteration, accepted or rejected. An iteration is the
    last one when the undamped Gauss-Newton step is at most ``tolerance``
    times the RMS residual (both in metres); that step is still taken if it
    lowers the cost. An exact fit (residual at the floating-point floor)
    also converges. Hitting ``max_lm_iterations`` always reports
    ``converged=False``. A step whose cost change is within rounding of
    zero is accepted when it reduces the gradient.
    """
    x = np.array(x0, dtype=float)
    r, jac = fun(x)
    cost = float(r @ r)
    lam = config.lm_damping_init
    tol = config.tolerance
    floor = _exact_fit_floor(scale)
    cap = config.max_lm_iterations

    if cost <= floor:
        return x, True, 0, cost

    for it in range(1, cap + 1):
        grad = jac.T @ r
        jtj = jac.T @ jac
        gn_step = np.linalg.lstsq(jac, -r, rcond=None)[0]
        if float(np.linalg.norm(gn_step)) <= tol * math.sqrt(cost / len(r)):
            x_new = x + gn_step
            r_new, jac_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            accepted = _improves(cost, cost_new, grad, jac_new.T @ r_new)
            if accepted:
                x, cost = x_new, cost_new
            if trace is not None:
                trace.costs.append(cost)
                trace.accepted.append(accepted)
                trace.damping.append(0.0)
            return x, it < cap, it, cost

        diag = np.diag(np.maximum(np.diag(jtj), 1e-12))
        try:
            step = np.linalg.solve(jtj + lam * diag, -grad)
        except np.linalg.LinAlgError:
            step = None
        if step is not None and np.all(np.isfinite(step)):
            x_new = x + step
            r_new, jac_new = fun(x_new)
            cost_new = float(r_new @ r_new)
            accepted = _improves(cost, cost_new, grad, jac_new.T @ r_new)
        else:
            accepted = False
        if trace is not None:
            trace.costs.append(cost_new if accepted else cost)
            trace.accepted.append(accepted)
            trace.damping.append(lam)
        if accepted:
            x, r, jac, cost = x_new, r_new, jac_new, cost_new
            lam /= 10.0
            if cost <= floor:
                return x, it < cap, it, cost
        else:
            lam = min(lam * 10.0, MAX_DAMPING)
    return x, False, cap, cost


def _initial_guess(initial, anchors: np.ndarray) -> np.ndarray:
    if initial is None:
        return anchors.mean(axis=0)
    if isinstance(initial, Position):
        return initial.as_array()
    arr = np.asarray(initial, dtype=float).reshape(3)
    if not np.all(np.isfinite(arr)):
        raise SolverError("initial guess must be finite")
    return arr


def tdoa_linear_guess(problem: TdoaProblem) -> np.ndarray | None:
    """Closed-form start for ``lm_tdoa``.

    With ``R = |p - q|`` and ``r_i = m_i - |a_i - q|`` each anchor gives
    ``2 (a_i - q).p + 2 r_i R = |a_i|^2 - |q|^2 - r_i^2``, linear in
    ``(p, R)``. Exact for noise-free data; ``None`` when rank-deficient.
    """
    a = problem.anchor_array()
    q = problem.initiator.as_array()
    r = np.asarray(problem.range_differences, dtype=float) - np.linalg.norm(a - q, axis=1)
    lhs = np.column_stack([2.0 * (a - q), 2.0 * r])
    rhs = np.sum(a * a, axis=1) - q @ q - r * r
    sol, _, rank, sv = np.linalg.lstsq(lhs, rhs, rcond=None)
    if rank < 4 or sv[-1] <= 1e-9 * sv[0] or not np.all(np.isfinite(sol)):
        return None
    return sol[:3]


def lm_multilaterate(problem: MultilaterationProblem, initial: Position | None = None,
                     config: SolverConfig = DEFAULT_CONFIG, trace: LmTrace | None = None) -> SolverResult:
    """Range-residual least squares by Levenberg-Marquardt.

    ``initial`` defaults to the anchor centroid.
    """
    anchors = problem.anchor_array()
    d = problem.distance_array()
    x0 = _initial_guess(initial, anchors)
    scale = float(np.max(d)) if len(d) else 1.0
    x, ok, its, cost = levenberg_marquardt(_range_model(anchors, d), x0, config, scale, trace)
    return SolverResult(Position.from_array(x), ok, its, math.sqrt(cost))


def lm_tdoa(problem: TdoaProblem, initial: Position | None = None,
            config: SolverConfig = DEFAULT_CONFIG, trace: LmTrace | None = None) -> SolverResult:
    """Passive-listener position from range differences by Levenberg-Marquardt.

    Without ``initial`` the closed-form linear estimate is used, falling back
    to the anchor centroid when that system is rank-deficient.
    """
    anchors = problem.anchor_array()
    q = problem.initiator.as_array()
    m = np.asarray(problem.range_differences, dtype=float)
    if initial is None:
        guess = tdoa_linear_guess(problem)
        x0 = guess if guess is not None else anchors.mean(axis=0)
    else:
        x0 = _initial_guess(initial, anchors)
    scale = float(np.max(np.linalg.norm(anchors - q, axis=1)))
    x, ok, its, cost = levenberg_marquardt(_tdoa_model(q, anchors, m), x0, config, scale, trace)
    return SolverResult(Position.from_array(x), ok, its, math.sqrt(cost))


# ---------------------------------------------------------------------------
# eigenvalue formulation


def trilateration_matrix(anchors: np.ndarray, distances: np.ndarray, weights: np.ndarray):
    """Build the 7x7 matrix whose rightmost real eigenvalue solves trilateration.

    With weights normalised to one and anchors translated so their weighted
    mean is zero, ``sum w_i (|x|^2 - 2 s_i.x - b_i)^2`` is stationary where
    ``(D + lam I) x = -g`` and ``|x|^2 = lam + b``, ``D = 2 sum w s s^T``,
    ``g = sum w b_i s_i``. Writing ``u = (D + lam I)^-1 g`` and
    ``v = (D + lam I)^-1 u`` turns this into ``lam z = M z`` for
    ``z = (1, u, v)``, and ``x = -u``.

    Returns ``(M, shift, D, g, b)`` where ``shift`` is the translation.
    """
    w = np.asarray(weights, dtype=float)
    w = w / w.sum()
    shift = w @ anchors
    s = anchors - shift
    b_i = distances ** 2 - np.sum(s * s, axis=1)
    b = float(w @ b_i)
    D = 2.0 * (s * w[:, None]).T @ s
    g = (w * b_i) @ s
    M = np.zeros((7, 7))
    M[0, 0] = -b
    M[0, 4:] = g
    M[1:4, 0] = g
    M[1:4, 1:4] = -D
    M[4:, 1:4] = np.eye(3)
    M[4:, 4:] = -D
    return M, shift, D, g, b


def _secular(D: np.ndarray, g: np.ndarray, b: float, lam: float) -> float:
    # decreasing on (-lambda_min(D), inf); its root there is the wanted eigenvalue
    u = np.linalg.solve(D + lam * np.eye(3), g)
    return float(u @ u) - lam - b


@dataclass(frozen=True)
class EigenResult:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


def rightmost_eigenpair(M: np.ndarray, D: np.ndarray, g: np.ndarray, b: float,
                        max_iterations: int = 1000, tolerance: float = 1e-2,
                        reshift_every: int = 5) -> EigenResult:
    """Rightmost real eigenpair of the trilateration matrix.

    Power iteration runs on ``(sigma I - M)^-1`` with ``sigma`` an upper bound
    of the wanted eigenvalue, so that eigenvalue is the dominant one. The
    shift starts from the secular-function bound and is tightened every
    ``reshift_every`` iterations when a tighter bound can be certified.
    The eigenvalue counts as settled once consecutive estimates agree to
    1e-10 relative. Inverse iteration at the settled shift then refines the
    eigenvector until it changes by less than ``tolerance``.
    """
    n = M.shape[0]
    eye = np.eye(n)
    v = np.full(n, 1.0 / math.sqrt(n))
    d_min = float(np.linalg.eigvalsh(D)[0])
    failed = EigenResult(math.nan, v, False, max_iterations)
    if d_min <= 1e-12 * max(float(np.trace(D)), 1e-300):
        # coplanar anchors: no unique rightmost root to isolate
        return failed
    margin = 1e-2 * d_min
    try:
        sigma = max(_secular(D, g, b, 0.0), 0.0) + margin
        inv = np.linalg.inv(sigma * eye - M)
    except np.linalg.LinAlgError:
        return failed

    history: list[float] = []
    lam = sigma
    settled = False
    k = 0
    while k < max_iterations:
        k += 1
        w = inv @ v
        mu = float(v @ w)
        nrm = float(np.linalg.norm(w))
        if mu == 0.0 or not math.isfinite(nrm) or nrm == 0.0:
            return failed
        v = w / nrm
        lam = sigma - 1.0 / mu
        history.append(lam)
        if len(history) > 1 and abs(lam - history[-2]) <= 1e-10 * max(1.0, abs(lam)):
            settled = True
            break
        if k % reshift_every == 0 and len(history) > reshift_every:
            drift = abs(lam - history[-1 - reshift_every])
            cand = lam + 4.0 * drift + 1e-12 * max(1.0, abs(lam))
            if -d_min < cand < sigma:
                try:
                    if _secular(D, g, b, cand) <= 0.0:
                        sigma = cand
                        inv = np.linalg.inv(sigma * eye - M)
                except np.linalg.LinAlgError:
                    pass

    if settled:
        # eigenvector refinement; shift just right of the eigenvalue
        delta = 1e-9 * max(1.0, abs(lam))
        try:
            inv = np.linalg.inv((lam + delta) * eye - M)
            for _ in range(50):
                w = inv @ v
                w /= np.linalg.norm(w)
                if w @ v < 0:
                    w = -w
                change = float(np.linalg.norm(w - v))
                v = w
                if change < tolerance:
                    break
        except np.linalg.LinAlgError:
            pass
    converged = settled and k < max_iterations
    return EigenResult(lam, v, converged, k)


def _polish(x: np.ndarray, anchors: np.ndarray, d: np.ndarray, max_steps: int = 50) -> np.ndarray:
    """Gauss-Newton with step halving on the range residuals."""
    fun = _range_model(anchors, d)
    r, jac = fun(x)
    cost = float(r @ r)
    for _ in range(max_steps):
        try:
            step = np.linalg.lstsq(jac, -r, rcond=None)[0]
        except np.linalg.LinAlgError:
            break
        grad = jac.T @ r
        t = 1.0
        while t > 1e-6:
            r_new, jac_new = fun(x + t * step)
            cost_new = float(r_new @ r_new)
            if _improves(cost, cost_new, grad, jac_new.T @ r_new):
                break
            t *= 0.5
        else:
            break
        x = x + t * step
        r, jac, cost = r_new, jac_new, cost_new
        if np.linalg.norm(t * step) <= 1e-13 * (1.0 + np.linalg.norm(x)):
            break
    return x


def larsson_multilaterate(problem: MultilaterationProblem,
                          config: SolverConfig = DEFAULT_CONFIG) -> SolverResult:
    """Globally optimal trilateration via the eigenvalue reduction.

    The squared-distance residuals are weighted by ``1/d_i^2`` so that their
    global minimiser approximates the range-residual optimum; the result
    is then polished on the range residuals. ``iterations`` counts power
    iterations.
    """
    anchors = problem.anchor_array()
    d = problem.distance_array()
    weights = 1.0 / np.maximum(d, 1e-3) ** 2
    M, shift, D, g, b = trilateration_matrix(anchors, d, weights)
    eig = rightmost_eigenpair(M, D, g, b, config.max_power_iterations, config.tolerance)

    z = eig.vector
    if abs(z[0]) > 1e-12 * float(np.linalg.norm(z)):
        x = shift - z[1:4] / z[0]
    else:
        x = anchors.mean(axis=0)
    if eig.converged:
        x = _polish(x, anchors, d)
    cost = range_objective(x, anchors, d)
    return SolverResult(Position.from_array(x), eig.converged, eig.iterations, math.sqrt(cost))


# ---------------------------------------------------------------------------
# geometry quality


def compute_gdop(anchors: Sequence, tag: Position) -> float:
    """sqrt(trace((H^T H)^-1)) with H the tag-to-anchor unit vectors."""
    a = _anchor_array(anchors)
    if len(a) < 4:
        raise SolverError("GDOP needs at least 4 anchors")
    p = tag.as_array() if isinstance(tag, Position) else np.asarray(tag, dtype=float)
    diff = a - p
    norms = np.linalg.norm(diff, axis=1)
    if np.any(norms < MIN_DISTANCE):
        raise SolverError("tag coincides with an anchor")
    h = diff / norms[:, None]
    hth = h.T @ h
    if np.linalg.matrix_rank(hth, tol=1e-10 * max(1.0, float(np.max(np.abs(hth))))) < 3:
        raise SingularGeometryError("geometry matrix is rank-deficient")
    return float(math.sqrt(np.trace(np.linalg.inv(hth))))
