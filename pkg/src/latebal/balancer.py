"""Exactly balancing instrument propensity scores via a tailored concave loss.

The loss is built so that its first-order conditions are the empirical
balancing constraints: at the optimum, inverse-probability-weighted means of
every basis column agree across the two instrument groups. A logistic link is
used throughout, which makes the per-observation contribution

    S(z, eta) = (2z - 1) * eta - (z - L) * (1/L - 1/(1 - L)),   L = expit(eta)

globally concave in the coefficient vector. The gradient of the sample mean
of S equals the balance-residual vector, and the Hessian is negative
semidefinite everywhere.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg
from scipy.special import expit

from .model import (
    DEFAULT_BALANCE_TOLERANCE,
    DEFAULT_GRADIENT_TOLERANCE,
    DEFAULT_MAX_ITERATIONS,
    BasisMatrix,
    FittedPropensity,
    Penalty,
    ValidationError,
)

__all__ = [
    "SolverOptions",
    "Penalty",
    "tailored_loss",
    "tailored_loss_gradient",
    "tailored_loss_hessian",
    "fit",
    "fit_regularized",
    "dual_objective",
    "weight_variance_proxy",
    "balance_residuals",
    "select_lambda",
]

# Index magnitudes beyond this put logistic scores within 1e-16 of {0, 1};
# iteration stops there and the fit is flagged instead of silently clipped.
SEPARATION_INDEX_BOUND = 36.0

# The condition-number threshold beyond which a balancing fit is treated as
# numerically meaningless (near-collinear basis columns).
CONDITION_LIMIT = 1e10


@dataclass(frozen=True)
class SolverOptions:
    """Tolerances and line-search parameters shared by all solvers.

    ``score_clip`` guards logarithms and divisions only; reported scores are
    never clipped.
    """

    gradient_tolerance: float = DEFAULT_GRADIENT_TOLERANCE
    balance_tolerance: float = DEFAULT_BALANCE_TOLERANCE
    max_iterations: int = DEFAULT_MAX_ITERATIONS
    line_search_shrink: float = 0.5
    line_search_slope: float = 1e-4
    score_clip: float = 1e-12

    def __post_init__(self):
        if min(self.gradient_tolerance, self.balance_tolerance, self.score_clip) <= 0:
            raise ValidationError("tolerances must be positive")
        if self.max_iterations < 1:
            raise ValidationError("max_iterations must be >= 1")


def _as_matrix(basis) -> np.ndarray:
    if isinstance(basis, BasisMatrix):
        return basis.values
    return np.asarray(basis, dtype=float)


def _check_index(eta: np.ndarray) -> None:
    if not np.all(np.isfinite(eta)):
        raise ValidationError("non-finite index phi(x)'theta")


def _loss_value(z: np.ndarray, eta: np.ndarray, clip: float) -> float:
    # ln(L / (1 - L)) equals the index itself under the logistic link, so the
    # log term needs no numerical guard at all.
    scores = expit(eta)
    guarded = np.clip(scores, clip, 1.0 - clip)
    barrier = 1.0 / guarded - 1.0 / (1.0 - guarded)
    return float(np.mean((2.0 * z - 1.0) * eta - (z - scores) * barrier))


def _loss_gradient(phi: np.ndarray, z: np.ndarray, eta: np.ndarray, clip: float) -> np.ndarray:
    scores = np.clip(expit(eta), clip, 1.0 - clip)
    resid = z / scores - (1.0 - z) / (1.0 - scores)
    return phi.T @ resid / phi.shape[0]


def _loss_hessian(phi: np.ndarray, z: np.ndarray, eta: np.ndarray, clip: float) -> np.ndarray:
    scores = expit(eta)
    guarded = np.clip(scores, clip, 1.0 - clip)
    curve = z * (1.0 - scores) / guarded + (1.0 - z) * scores / (1.0 - guarded)
    return -(phi * curve[:, None]).T @ phi / phi.shape[0]


def tailored_loss(theta, basis, z, options: Optional[SolverOptions] = None) -> float:
    """Sample mean of the tailored (negative) loss at ``theta``.

    Zero at ``theta = 0`` for any basis: scores of one half annihilate both
    summands.
    """
    opts = options or SolverOptions()
    phi = _as_matrix(basis)
    eta = phi @ np.asarray(theta, dtype=float)
    _check_index(eta)
    return _loss_value(np.asarray(z, dtype=float), eta, opts.score_clip)


def tailored_loss_gradient(theta, basis, z, options: Optional[SolverOptions] = None) -> np.ndarray:
    """Gradient of :func:`tailored_loss`; identical to the balance residuals."""
    opts = options or SolverOptions()
    phi = _as_matrix(basis)
    eta = phi @ np.asarray(theta, dtype=float)
    _check_index(eta)
    return _loss_gradient(phi, np.asarray(z, dtype=float), eta, opts.score_clip)


def tailored_loss_hessian(theta, basis, z, options: Optional[SolverOptions] = None) -> np.ndarray:
    """Hessian of :func:`tailored_loss`; negative semidefinite everywhere."""
    opts = options or SolverOptions()
    phi = _as_matrix(basis)
    eta = phi @ np.asarray(theta, dtype=float)
    _check_index(eta)
    return _loss_hessian(phi, np.asarray(z, dtype=float), eta, opts.score_clip)


def balance_residuals(scores: np.ndarray, basis, z) -> np.ndarray:
    """Per-column balance residuals implied by arbitrary propensity scores."""
    phi = _as_matrix(basis)
    z = np.asarray(z, dtype=float)
    resid = z / scores - (1.0 - z) / (1.0 - scores)
    return phi.T @ resid / phi.shape[0]


def _check_rank(phi: np.ndarray, label: str = "basis") -> None:
    """Raise naming the first linearly dependent column, if any."""
    n, r = phi.shape
    if r >= n:
        raise ValidationError(f"{label} has {r} columns but only {n} rows; need r < n")
    _, rdiag, pivots = scipy.linalg.qr(phi, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rdiag))
    tol = max(n, r) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < r:
        dependent = int(np.sort(pivots[rank:])[0])
        raise ValidationError(
            f"{label} column {dependent} is linearly dependent on the others"
        )


@dataclass
class _NewtonInfo:
    converged: bool = False
    iterations: int = 0
    final_gradient_norm: float = np.inf
    separation: bool = False
    note: str = ""


def _newton_ascent(
    value: Callable[[np.ndarray], float],
    gradient: Callable[[np.ndarray], np.ndarray],
    hessian: Callable[[np.ndarray], np.ndarray],
    index_of: Callable[[np.ndarray], np.ndarray],
    theta0: np.ndarray,
    opts: SolverOptions,
    index_bound: float = SEPARATION_INDEX_BOUND,
) -> tuple[np.ndarray, _NewtonInfo]:
    """Damped Newton ascent with a separation guard on the linear index.

    After the gradient tolerance is met, up to three full polishing steps are
    taken while they keep shrinking the gradient, which drives the residual to
    machine precision essentially for free (quadratic convergence).
    """
    theta = np.array(theta0, dtype=float)
    info = _NewtonInfo()
    f = value(theta)
    g = gradient(theta)
    for it in range(opts.max_iterations):
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        info.final_gradient_norm = gnorm
        info.iterations = it
        if gnorm <= opts.gradient_tolerance:
            info.converged = True
            break
        h = hessian(theta)
        try:
            direction = np.linalg.solve(-h, g)
        except np.linalg.LinAlgError:
            info.note = "singular curvature"
            return theta, info
        slope = float(g @ direction)
        if not np.isfinite(slope) or slope <= 0:
            info.note = "no ascent direction"
            return theta, info
        accepted = False
        # Full Newton step first: near the optimum the objective change falls
        # below float resolution while the gradient still contracts
        # quadratically, so gradient-norm decrease is the usable criterion.
        full = theta + direction
        if np.max(np.abs(index_of(full))) <= index_bound:
            g_full = gradient(full)
            if float(np.max(np.abs(g_full))) <= 0.5 * gnorm:
                theta, f, g = full, value(full), g_full
                accepted = True
        if not accepted:
            step = 1.0
            guard_hits = 0
            trials = 0
            for _ in range(60):
                trials += 1
                candidate = theta + step * direction
                if np.max(np.abs(index_of(candidate))) > index_bound:
                    guard_hits += 1
                    step *= opts.line_search_shrink
                    continue
                f_new = value(candidate)
                if f_new >= f + opts.line_search_slope * step * slope:
                    theta, f = candidate, f_new
                    g = gradient(theta)
                    accepted = True
                    break
                step *= opts.line_search_shrink
            if not accepted:
                if guard_hits == trials:
                    info.separation = True
                    info.note = "possible separation"
                else:
                    info.note = "line search stalled"
                return theta, info
            if guard_hits and step <= 1e-8:
                # Pinned against the index bound: the maximizer lies beyond
                # scores of 1 - 1e-16, where weights are meaningless.
                info.separation = True
                info.note = "possible separation"
                info.final_gradient_norm = float(np.max(np.abs(g)))
                return theta, info
            if step <= 1e-12:
                info.note = "line search stalled"
                info.final_gradient_norm = float(np.max(np.abs(g)))
                return theta, info
    else:
        info.iterations = opts.max_iterations
        info.final_gradient_norm = float(np.max(np.abs(gradient(theta))))
        info.note = "max iterations reached"
        return theta, info

    for _ in range(3):
        g = gradient(theta)
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        if gnorm < 8.0 * np.finfo(float).eps:
            break
        try:
            direction = np.linalg.solve(-hessian(theta), g)
        except np.linalg.LinAlgError:
            break
        candidate = theta + direction
        if np.max(np.abs(index_of(candidate))) > index_bound:
            break
        if float(np.max(np.abs(gradient(candidate)))) < gnorm:
            theta = candidate
        else:
            break
    info.final_gradient_norm = float(np.max(np.abs(gradient(theta)))) if theta.size else 0.0
    return theta, info


def _condition_estimate(h: np.ndarray) -> float:
    try:
        cond = float(np.linalg.cond(-h))
    except np.linalg.LinAlgError:
        return np.inf
    return cond if np.isfinite(cond) else np.inf


def _build_result(
    phi: np.ndarray,
    z: np.ndarray,
    theta: np.ndarray,
    info: _NewtonInfo,
    opts: SolverOptions,
    penalty: Optional[Penalty] = None,
) -> FittedPropensity:
    eta = phi @ theta
    scores = expit(eta)
    weights = z / scores + (1.0 - z) / (1.0 - scores)
    residual = float(np.max(np.abs(_loss_gradient(phi, z, eta, opts.score_clip))))
    cond = _condition_estimate(_loss_hessian(phi, z, eta, opts.score_clip))
    return FittedPropensity(
        theta=theta,
        scores=scores,
        weights=weights,
        converged=info.converged,
        iterations=info.iterations,
        final_gradient_norm=info.final_gradient_norm,
        hessian_condition_estimate=cond,
        balance_residual_max=residual,
        penalty=penalty,
        separation=info.separation,
        note=info.note,
    )


def fit(basis, z, options: Optional[SolverOptions] = None) -> FittedPropensity:
    """Maximize the tailored loss; exact balance holds at convergence.

    Parameters
    ----------
    basis : BasisMatrix or array of shape (n, r)
        Full-column-rank balancing functions with r < n.
    z : array of shape (n,)
        Binary instrument indicator with both values present.

    Returns
    -------
    FittedPropensity
        With ``converged`` true iff the max-abs gradient fell below the
        gradient tolerance; in that case the max-abs balance residual is
        below the balance tolerance as well.
    """
    opts = options or SolverOptions()
    phi = _as_matrix(basis)
    z = np.asarray(z, dtype=float)
    if z.shape[0] != phi.shape[0]:
        raise ValidationError("basis and instrument lengths differ")
    if z.min() == z.max():
        raise ValidationError("instrument has no variation")
    _check_rank(phi)
    clip = opts.score_clip
    theta, info = _newton_ascent(
        value=lambda t: _loss_value(z, phi @ t, clip),
        gradient=lambda t: _loss_gradient(phi, z, phi @ t, clip),
        hessian=lambda t: _loss_hessian(phi, z, phi @ t, clip),
        index_of=lambda t: phi @ t,
        theta0=np.zeros(phi.shape[1]),
        opts=opts,
    )
    result = _build_result(phi, z, theta, info, opts)
    if result.converged and result.balance_residual_max > opts.balance_tolerance:
        raise AssertionError(
            "converged fit violates the balance tolerance; this is a bug"
        )
    return result


def dual_objective(weights) -> float:
    """Average dual loss of the implied weights, (w-1)ln(w-1) - w.

    The convention 0 ln 0 = 0 applies at w = 1, giving -1 there; equal
    weights of two give exactly -2.
    """
    w = np.asarray(weights, dtype=float)
    if np.any(w < 1.0):
        raise ValidationError("dual objective requires weights >= 1")
    t = w - 1.0
    terms = np.where(t > 0.0, t * np.log(np.where(t > 0.0, t, 1.0)), 0.0) - w
    return float(np.mean(terms))


def weight_variance_proxy(weights) -> float:
    """Average squared inverse probability weight, the variance proxy."""
    w = np.asarray(weights, dtype=float)
    return float(np.mean(w * w))


def _penalized_mask(r: int, has_intercept: bool, penalty: Penalty) -> np.ndarray:
    mask = np.ones(r, dtype=bool)
    if has_intercept and not penalty.intercept_penalized:
        mask[0] = False
    return mask


def _soft_threshold(v: np.ndarray, t) -> np.ndarray:
    return np.sign(v) * np.maximum(np.abs(v) - t, 0.0)


def fit_regularized(
    basis,
    z,
    penalty: Penalty,
    options: Optional[SolverOptions] = None,
) -> FittedPropensity:
    """Maximize the tailored loss minus a parameter-norm penalty.

    The l2 case stays smooth and is solved by Newton ascent. The l1 and
    elastic-net cases run an accelerated proximal gradient method on the
    smooth part, stopping when the stationarity (dual feasibility) residual
    falls below the balance tolerance: inactive penalized columns then satisfy
    the relaxed balance bound and active ones meet it with equality.

    A standardized basis is required whenever ``penalty.lam > 0``.
    """
    opts = options or SolverOptions()
    phi = _as_matrix(basis)
    z = np.asarray(z, dtype=float)
    has_intercept = basis.has_intercept if isinstance(basis, BasisMatrix) else True
    if penalty.lam == 0.0:
        exact = fit(basis, z, opts)
        return replace(exact, penalty=penalty)
    if isinstance(basis, BasisMatrix) and not basis.spec.standardized:
        raise ValidationError(
            "penalized fitting requires a standardized basis; "
            "apply basis.standardize first"
        )
    _check_rank(phi)
    clip = opts.score_clip
    mask = _penalized_mask(phi.shape[1], has_intercept, penalty)
    lam1, lam2 = penalty.l1_weight(), penalty.l2_weight()

    if lam1 == 0.0:
        # Smooth ridge case: Newton on the penalized objective.
        def value(t):
            return _loss_value(z, phi @ t, clip) - 0.5 * lam2 * float(t[mask] @ t[mask])

        def gradient(t):
            g = _loss_gradient(phi, z, phi @ t, clip)
            g = g.copy()
            g[mask] -= lam2 * t[mask]
            return g

        def hessian(t):
            h = _loss_hessian(phi, z, phi @ t, clip).copy()
            h[mask, mask] -= lam2
            return h

        theta, info = _newton_ascent(
            value, gradient, hessian, lambda t: phi @ t, np.zeros(phi.shape[1]), opts
        )
        return _build_result(phi, z, theta, info, opts, penalty=penalty)

    # Proximal gradient (FISTA with function-value restart) on
    #   minimize  -mean S + lam2/2 ||theta_pen||^2 + lam1 ||theta_pen||_1.
    r = phi.shape[1]
    theta = np.zeros(r)
    momentum = theta.copy()
    t_mom = 1.0
    lip = float(np.linalg.norm(phi, 2) ** 2) / phi.shape[0] + lam2
    step = 1.0 / max(lip, 1e-12)
    max_prox = 200 * opts.max_iterations

    def smooth_neg(t):
        return -_loss_value(z, phi @ t, clip) + 0.5 * lam2 * float(t[mask] @ t[mask])

    def smooth_neg_grad(t):
        g = -_loss_gradient(phi, z, phi @ t, clip)
        g = g.copy()
        g[mask] += lam2 * t[mask]
        return g

    def total(t):
        return smooth_neg(t) + lam1 * float(np.sum(np.abs(t[mask])))

    def kkt_residual(t):
        g = smooth_neg_grad(t)
        res = np.abs(g.copy())
        pen = mask
        active = pen & (t != 0.0)
        inactive = pen & (t == 0.0)
        res[active] = np.abs(g[active] + lam1 * np.sign(t[active]))
        res[inactive] = np.maximum(np.abs(g[inactive]) - lam1, 0.0)
        return float(np.max(res)) if res.size else 0.0

    info = _NewtonInfo()
    f_prev = total(theta)
    for it in range(max_prox):
        grad_at_mom = smooth_neg_grad(momentum)
        f_mom = smooth_neg(momentum)
        while True:
            candidate = momentum - step * grad_at_mom
            candidate[mask] = _soft_threshold(candidate[mask], step * lam1)
            diff = candidate - momentum
            quad = f_mom + float(grad_at_mom @ diff) + float(diff @ diff) / (2.0 * step)
            if smooth_neg(candidate) <= quad + 1e-14 * max(1.0, abs(quad)):
                break
            step *= 0.5
            if step < 1e-18:
                info.note = "proximal step underflow"
                info.iterations = it
                return _build_result(phi, z, theta, info, opts, penalty=penalty)
        eta = phi @ candidate
        if np.max(np.abs(eta)) > SEPARATION_INDEX_BOUND:
            info.separation = True
            info.note = "possible separation"
            info.iterations = it
            return _build_result(phi, z, theta, info, opts, penalty=penalty)
        f_new = total(candidate)
        if f_new > f_prev + 1e-12 * max(1.0, abs(f_prev)):
            # Restart the momentum sequence when acceleration overshoots. The
            # slack keeps float noise at the optimum from looping forever.
            momentum = theta.copy()
            t_mom = 1.0
            continue
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_mom * t_mom))
        momentum = candidate + ((t_mom - 1.0) / t_next) * (candidate - theta)
        theta, f_prev, t_mom = candidate, f_new, t_next
        res = kkt_residual(theta)
        info.iterations = it + 1
        info.final_gradient_norm = res
        if res <= opts.balance_tolerance:
            info.converged = True
            break
    else:
        info.note = "max iterations reached"
    result = _build_result(phi, z, theta, info, opts, penalty=penalty)
    if result.converged and lam2 == 0.0:
        # Dual feasibility of the relaxed balance constraints must hold at a
        # converged l1 solution; a violation here is a solver bug.
        dual = phi.T @ ((2.0 * z - 1.0) * result.weights) / phi.shape[0]
        pen_dual = np.abs(dual[mask])
        if pen_dual.size and float(np.max(pen_dual)) > lam1 + opts.balance_tolerance:
            raise AssertionError(
                "converged penalized fit violates the relaxed balance bound; "
                "this is a bug"
            )
    return result


def standardized_imbalance(basis, z, weights=None) -> np.ndarray:
    """Weighted instrument-group mean differences in units of column SD.

    With no weights this is the raw standardized difference; with inverse
    probability weights the group means are weight-normalized first. Constant
    columns are reported relative to an SD of one.
    """
    phi = _as_matrix(basis)
    z = np.asarray(z, dtype=float)
    w = np.ones_like(z) if weights is None else np.asarray(weights, dtype=float)
    w1 = z * w
    w0 = (1.0 - z) * w
    mean1 = phi.T @ w1 / np.sum(w1)
    mean0 = phi.T @ w0 / np.sum(w0)
    sd = phi.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    return (mean1 - mean0) / sd


def select_lambda(
    basis,
    z,
    kind: str = "l1",
    alpha: float = 1.0,
    grid: Optional[Sequence[float]] = None,
    n_folds: int = 5,
    seed: int = 0,
    options: Optional[SolverOptions] = None,
) -> tuple[float, list[dict]]:
    """Pick a penalty strength from a log-scale grid by held-out imbalance.

    Every candidate is refit on each training fold and scored by the max-abs
    standardized imbalance of its weights on the validation fold; the lambda
    with the smallest average held-out imbalance wins (first on ties).
    """
    opts = options or SolverOptions()
    phi = _as_matrix(basis)
    z = np.asarray(z, dtype=float)
    has_intercept = basis.has_intercept if isinstance(basis, BasisMatrix) else True
    spec = basis.spec if isinstance(basis, BasisMatrix) else None
    lam_grid = np.logspace(-4, 2, 13) if grid is None else np.asarray(grid, dtype=float)
    n = phi.shape[0]
    rng = np.random.default_rng(seed)
    order = rng.permutation(n)
    folds = np.array_split(order, n_folds)
    table = []
    best_lam, best_score = float(lam_grid[0]), np.inf
    for lam in lam_grid:
        scores = []
        failed = False
        for hold in folds:
            train = np.setdiff1d(order, hold, assume_unique=True)
            sub = BasisMatrix(phi[train], has_intercept, spec) if spec else phi[train]
            try:
                fitted = fit_regularized(
                    sub, z[train], Penalty(kind, float(lam), alpha), opts
                )
            except (ValidationError, np.linalg.LinAlgError):
                failed = True
                break
            if not fitted.converged:
                failed = True
                break
            eta = phi[hold] @ fitted.theta
            s = expit(eta)
            w = z[hold] / s + (1.0 - z[hold]) / (1.0 - s)
            imb = standardized_imbalance(phi[hold], z[hold], w)
            start = 1 if has_intercept else 0
            scores.append(float(np.max(np.abs(imb[start:]))) if imb.size > start else 0.0)
        mean_score = np.inf if failed else float(np.mean(scores))
        table.append({"lambda": float(lam), "held_out_imbalance": mean_score})
        if mean_score < best_score:
            best_score, best_lam = mean_score, float(lam)
    if not np.isfinite(best_score):
        raise ValidationError("no penalty level produced a usable fit")
    return best_lam, table
