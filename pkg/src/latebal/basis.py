"""Construction, scaling, and cross-validation of balancing-function matrices."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Optional, Sequence

import numpy as np
import scipy.linalg

from . import balancer
from .model import BasisMatrix, BasisSpec, Dataset, ValidationError, is_binary_column

__all__ = [
    "raw_basis",
    "power_series_basis",
    "power_multi_indices",
    "spline_basis",
    "orthonormalize",
    "standardize",
    "build_basis",
    "cross_validate",
    "CrossValidationResult",
]

# Spline knots must leave at least this many observations per interval.
MIN_OBS_PER_KNOT_INTERVAL = 5


def _covariates(x) -> np.ndarray:
    arr = np.asarray(x, dtype=float)
    if arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    if arr.ndim != 2:
        raise ValidationError("covariates must form an n x p matrix")
    if not np.all(np.isfinite(arr)):
        raise ValidationError("covariates contain non-finite values")
    return arr


def _reject_constant_columns(x: np.ndarray) -> None:
    # A constant covariate is an intercept in disguise; refuse it instead of
    # guessing what was meant.
    for j in range(x.shape[1]):
        if x[:, j].min() == x[:, j].max():
            raise ValidationError(
                f"covariate column {j} is constant; drop it or use an intercept"
            )


def raw_basis(x, intercept: bool = True) -> BasisMatrix:
    """Optional intercept column followed by the covariates verbatim."""
    x = _covariates(x)
    _reject_constant_columns(x)
    n = x.shape[0]
    cols = [np.ones((n, 1))] if intercept else []
    cols.append(x)
    values = np.hstack(cols) if cols else np.empty((n, 0))
    if values.shape[1] == 0:
        raise ValidationError("raw basis with no intercept needs p >= 1")
    names = (("intercept",) if intercept else ()) + tuple(
        f"x{j + 1}" for j in range(x.shape[1])
    )
    return BasisMatrix(values, intercept, BasisSpec("raw", intercept=intercept), names)


def power_multi_indices(p: int, count: int) -> list[tuple[int, ...]]:
    """First ``count`` exponent vectors, by total degree then graded order.

    Within one total degree, exponents on earlier covariates come first
    (so for p = 2 the degree-one terms are x1 then x2, and the degree-two
    terms run x1^2, x1 x2, x2^2).
    """
    if p == 0:
        if count != 1:
            raise ValidationError("a zero-covariate power basis has only the intercept")
        return [()]

    def compositions(total: int, parts: int):
        if parts == 1:
            yield (total,)
            return
        for head in range(total, -1, -1):
            for tail in compositions(total - head, parts - 1):
                yield (head,) + tail

    out: list[tuple[int, ...]] = []
    degree = 0
    while len(out) < count:
        for lam in compositions(degree, p):
            out.append(lam)
            if len(out) == count:
                break
        degree += 1
    return out


def power_series_basis(x, order: int) -> BasisMatrix:
    """The first ``order`` multi-index power functions of the covariates.

    The leading exponent vector is all zeros, so column one is always the
    intercept, and the columns for any smaller order are a prefix of the
    columns for a larger one.
    """
    if order < 1:
        raise ValidationError("power basis order must be >= 1")
    x = _covariates(x)
    n, p = x.shape
    if order >= n:
        raise ValidationError(f"power basis order {order} must be below n = {n}")
    if p > 0:
        _reject_constant_columns(x)
    indices = power_multi_indices(p, order)
    values = np.ones((n, order))
    for k, lam in enumerate(indices):
        for j, exponent in enumerate(lam):
            if exponent:
                values[:, k] *= x[:, j] ** exponent
    names = tuple(
        "intercept" if sum(lam) == 0 else "*".join(
            f"x{j + 1}^{e}" if e > 1 else f"x{j + 1}" for j, e in enumerate(lam) if e
        )
        for lam in indices
    )
    return BasisMatrix(values, True, BasisSpec("power", power_order=order), names)


@dataclass(frozen=True)
class _SplinePlan:
    """Per-covariate layout learned from a training sample."""

    binary: tuple[bool, ...]
    knots: tuple[tuple[float, ...], ...]
    degree: int
    interactions: bool

    def column_blocks(self, x: np.ndarray) -> tuple[np.ndarray, tuple[str, ...]]:
        n, p = x.shape
        cols = [np.ones((n, 1))]
        names = ["intercept"]
        for j in range(p):
            col = x[:, j]
            if self.binary[j]:
                cols.append(col.reshape(-1, 1))
                names.append(f"x{j + 1}")
                continue
            for power in range(1, self.degree + 1):
                cols.append((col ** power).reshape(-1, 1))
                names.append(f"x{j + 1}^{power}" if power > 1 else f"x{j + 1}")
            for knot in self.knots[j]:
                cols.append(
                    (np.maximum(col - knot, 0.0) ** self.degree).reshape(-1, 1)
                )
                names.append(f"(x{j + 1}-{knot:.6g})+^{self.degree}")
        if self.interactions:
            binary_idx = [j for j in range(p) if self.binary[j]]
            for a in range(len(binary_idx)):
                for b in range(a + 1, len(binary_idx)):
                    ja, jb = binary_idx[a], binary_idx[b]
                    prod = x[:, ja] * x[:, jb]
                    if prod.min() == prod.max():
                        continue  # degenerate pair, e.g. mutually exclusive dummies
                    cols.append(prod.reshape(-1, 1))
                    names.append(f"x{ja + 1}*x{jb + 1}")
        return np.hstack(cols), tuple(names)


def _fit_spline_plan(x: np.ndarray, degree: int, n_knots: int, interactions: bool) -> _SplinePlan:
    n, p = x.shape
    if degree not in (1, 2, 3):
        raise ValidationError("spline degree must be 1, 2, or 3")
    if n_knots < 0:
        raise ValidationError("number of knots must be >= 0")
    if n < MIN_OBS_PER_KNOT_INTERVAL * (n_knots + 1):
        raise ValidationError(
            f"{n_knots} knots leave fewer than {MIN_OBS_PER_KNOT_INTERVAL} "
            f"observations per interval at n = {n}"
        )
    binary = tuple(is_binary_column(x[:, j]) for j in range(p))
    knots: list[tuple[float, ...]] = []
    for j in range(p):
        if binary[j] or n_knots == 0:
            knots.append(())
            continue
        probs = np.arange(1, n_knots + 1) / (n_knots + 1)
        located = np.quantile(x[:, j], probs)
        if np.any(np.diff(located) <= 0):
            raise ValidationError(
                f"knot sequence for covariate column {j} is not strictly increasing"
            )
        knots.append(tuple(float(k) for k in located))
    return _SplinePlan(binary, tuple(knots), degree, interactions)


def spline_basis(
    x,
    degree: int,
    n_knots: int,
    binary_interactions: bool = False,
) -> BasisMatrix:
    """Additive truncated-power spline basis with quantile-placed knots.

    Each continuous covariate contributes polynomial columns up to ``degree``
    plus one truncated term per interior knot; binary covariates enter
    linearly (optionally with their pairwise products). No tensor products.
    """
    x = _covariates(x)
    _reject_constant_columns(x)
    plan = _fit_spline_plan(x, degree, n_knots, binary_interactions)
    values, names = plan.column_blocks(x)
    spec = BasisSpec(
        "spline", degree=degree, n_knots=n_knots, binary_interactions=binary_interactions
    )
    return BasisMatrix(values, True, spec, names)


def standardize(basis: BasisMatrix) -> BasisMatrix:
    """Center and scale every non-intercept column to mean 0, variance 1."""
    if not basis.has_intercept:
        raise ValidationError("standardization requires an intercept column")
    values = basis.values.copy()
    for j in range(1, basis.r):
        col = values[:, j]
        sd = col.std()
        if sd == 0.0:
            raise ValidationError(f"basis column {j} is constant and cannot be scaled")
        values[:, j] = (col - col.mean()) / sd
    return BasisMatrix(
        values,
        basis.has_intercept,
        replace(basis.spec, standardized=True),
        basis.column_names,
    )


def orthonormalize(basis: BasisMatrix) -> BasisMatrix:
    """Right-multiply by an invertible matrix so the mean cross-product is I.

    The column span (hence every achievable fitted score) is unchanged;
    already-orthonormal inputs pass through exactly. A rank-deficient input
    raises, naming the first dependent column found by pivoted factorization.
    """
    phi = basis.values
    n, r = phi.shape
    scaled = phi / np.sqrt(n)
    _, rdiag, pivots = scipy.linalg.qr(scaled, mode="economic", pivoting=True)
    diag = np.abs(np.diag(rdiag))
    tol = max(n, r) * np.finfo(float).eps * (diag[0] if diag.size else 0.0)
    rank = int(np.sum(diag > tol))
    if rank < r:
        dependent = int(np.sort(pivots[rank:])[0])
        raise ValidationError(
            f"basis column {dependent} is linearly dependent on the others"
        )
    q, rmat = np.linalg.qr(scaled)
    signs = np.sign(np.diag(rmat))
    signs[signs == 0] = 1.0
    q = q * signs
    return BasisMatrix(
        q * np.sqrt(n),
        basis.has_intercept,
        replace(basis.spec, orthonormalized=True),
        basis.column_names,
    )


def build_basis(x, spec: BasisSpec) -> BasisMatrix:
    """Construct the basis described by ``spec`` on covariates ``x``."""
    if spec.kind == "raw":
        built = raw_basis(x, intercept=spec.intercept)
    elif spec.kind == "power":
        built = power_series_basis(x, spec.power_order)
    elif spec.kind == "spline":
        built = spline_basis(x, spec.degree, spec.n_knots, spec.binary_interactions)
    else:
        raise ValidationError("custom bases must be constructed by the caller")
    if spec.standardized:
        built = standardize(built)
    if spec.orthonormalized:
        built = orthonormalize(built)
    return built


def _feature_map(x_train: np.ndarray, spec: BasisSpec) -> Callable[[np.ndarray], np.ndarray]:
    """Learn any data-dependent pieces (knots) on the training sample only."""
    if spec.kind == "raw":
        def apply_raw(xs):
            n = xs.shape[0]
            cols = [np.ones((n, 1))] if spec.intercept else []
            cols.append(xs)
            return np.hstack(cols)

        return apply_raw
    if spec.kind == "power":
        indices = power_multi_indices(x_train.shape[1], spec.power_order)

        def apply_power(xs):
            values = np.ones((xs.shape[0], len(indices)))
            for k, lam in enumerate(indices):
                for j, exponent in enumerate(lam):
                    if exponent:
                        values[:, k] *= xs[:, j] ** exponent
            return values

        return apply_power
    if spec.kind == "spline":
        plan = _fit_spline_plan(
            x_train, spec.degree, spec.n_knots, spec.binary_interactions
        )

        def apply_spline(xs):
            return plan.column_blocks(xs)[0]

        return apply_spline
    raise ValidationError("custom bases cannot be cross-validated")


@dataclass(frozen=True)
class CrossValidationResult:
    """Held-out tailored-loss scores for every candidate basis recipe."""

    best: BasisSpec
    scores: tuple[float, ...]
    flags: tuple[str, ...]
    fold_method: str
    n_folds: int
    seed: int

    def to_dict(self) -> dict:
        return {
            "best": self.best.to_dict(),
            "best_description": self.best.describe(),
            "scores": list(self.scores),
            "flags": list(self.flags),
            "fold_method": self.fold_method,
            "n_folds": self.n_folds,
            "seed": self.seed,
        }


# Exact leave-one-out refits are full solves; beyond this sample size the
# procedure switches to 10-fold splits, which is recorded in the result.
LOO_SAMPLE_LIMIT = 500


def cross_validate(
    dataset: Dataset,
    candidates: Sequence[BasisSpec],
    seed: int = 0,
    options: Optional[balancer.SolverOptions] = None,
) -> CrossValidationResult:
    """Score candidate recipes by out-of-sample tailored loss; larger wins.

    Knots and other data-dependent pieces are learned on the training folds
    only. A candidate whose fit fails (or is infeasible) on any fold scores
    minus infinity and is flagged rather than raising. Ties keep the first
    candidate. Deterministic for a given seed.
    """
    if len(candidates) < 2:
        raise ValidationError("cross-validation needs at least 2 candidates")
    opts = options or balancer.SolverOptions()
    n = dataset.n
    x, z = dataset.x, dataset.z
    if n <= LOO_SAMPLE_LIMIT:
        fold_method = "exact-loo"
        folds = [np.array([i]) for i in range(n)]
    else:
        fold_method = "10-fold"
        order = np.random.default_rng(seed).permutation(n)
        folds = np.array_split(order, 10)
    all_rows = np.arange(n)
    scores: list[float] = []
    flags: list[str] = []
    for spec in candidates:
        held_total = 0.0
        held_count = 0
        flag = ""
        for hold in folds:
            train = np.setdiff1d(all_rows, hold, assume_unique=True)
            try:
                mapping = _feature_map(x[train], spec)
                phi_train = mapping(x[train])
            except ValidationError:
                flag = "infeasible"
                break
            if phi_train.shape[1] >= train.size:
                flag = "infeasible"
                break
            if z[train].min() == z[train].max():
                flag = "fit_failed"
                break
            try:
                fitted = balancer.fit(phi_train, z[train], opts)
            except (ValidationError, np.linalg.LinAlgError):
                flag = "fit_failed"
                break
            if not fitted.converged:
                flag = "fit_failed"
                break
            phi_hold = mapping(x[hold])
            eta = phi_hold @ fitted.theta
            if not np.all(np.isfinite(eta)):
                flag = "fit_failed"
                break
            held_total += balancer._loss_value(z[hold], eta, opts.score_clip) * hold.size
            held_count += hold.size
        if flag:
            scores.append(-np.inf)
            flags.append(flag)
        else:
            scores.append(held_total / held_count)
            flags.append("")
    best_idx = int(np.argmax(scores))
    if not np.isfinite(scores[best_idx]):
        raise ValidationError("every candidate failed cross-validation")
    return CrossValidationResult(
        best=candidates[best_idx],
        scores=tuple(scores),
        flags=tuple(flags),
        fold_method=fold_method,
        n_folds=len(folds),
        seed=seed,
    )
