"""Treatment-effect estimators: balanced IPW, likelihood IPW, Wald, and 2SLS.

All estimators target the complier average effect as a ratio of two
inverse-probability-weighted reduced forms (outcome over treatment). Failures
are raised as tagged :class:`EstimationError` so a simulation harness or CLI
can count them per method instead of propagating silent numbers.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Optional

import numpy as np
import scipy.linalg
from scipy.special import expit
from scipy.stats import norm

from . import balancer
from .balancer import CONDITION_LIMIT, SolverOptions, _newton_ascent
from .model import (
    BasisMatrix,
    BasisSpec,
    Dataset,
    FittedPropensity,
    LateEstimate,
    ValidationError,
)

__all__ = [
    "EstimationError",
    "MethodSpec",
    "method_from_label",
    "estimate_ipw",
    "estimate_wald",
    "estimate_tsls",
    "fit_mle_propensity",
    "selection_augment",
    "SelectionColumn",
    "estimate_method",
    "estimate_method_detailed",
    "asymptotic_variance",
    "bootstrap_se",
    "BootstrapResult",
]

PROBIT_INDEX_BOUND = 8.2
PREDICTION_CLIP = 1e-12


class EstimationError(RuntimeError):
    """A method failed on the given data; carries the method label."""

    def __init__(self, method: str, reason: str):
        super().__init__(f"{method}: {reason}")
        self.method = method
        self.reason = reason


@dataclass(frozen=True, eq=False)
class MethodSpec:
    """Configuration of one estimation method.

    ``label`` uses the standard vocabulary (Wald, IV, MLE, MLE2, B(X), B(D),
    B(D,X), B(Dhat), B(Dhat_m), custom). Oracle selection probabilities may
    only be supplied in simulations, where the generating process is known.
    """

    label: str
    basis: Optional[BasisSpec] = None
    normalize: Optional[bool] = None
    selection: str = "none"
    oracle_d0: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.selection not in ("none", "probit", "logit", "oracle"):
            raise ValidationError(f"unknown selection kind: {self.selection!r}")
        if self.selection == "oracle" and self.oracle_d0 is None:
            raise ValidationError(
                "oracle selection requires oracle selection probabilities"
            )
        if self.oracle_d0 is not None:
            arr = np.asarray(self.oracle_d0, dtype=float)
            arr.setflags(write=False)
            object.__setattr__(self, "oracle_d0", arr)


_LABEL_ALIASES = {"MLE(2)": "MLE2", "B(DHAT)": "B(Dhat)", "B(DHAT_M)": "B(Dhat_m)"}


def method_from_label(
    label: str,
    oracle_d0=None,
    basis: Optional[BasisSpec] = None,
) -> MethodSpec:
    """Build the MethodSpec for a vocabulary label."""
    label = _LABEL_ALIASES.get(label.upper(), label)
    if label in ("Wald", "IV"):
        return MethodSpec(label)
    if label == "MLE":
        return MethodSpec(label, basis=basis or BasisSpec("raw"), normalize=False)
    if label == "MLE2":
        return MethodSpec(label, basis=basis or BasisSpec("raw"), normalize=True)
    if label == "B(X)":
        return MethodSpec(label, basis=basis or BasisSpec("raw"))
    if label == "B(D)":
        return MethodSpec(label, selection="oracle", oracle_d0=oracle_d0)
    if label == "B(D,X)":
        return MethodSpec(label, selection="oracle", oracle_d0=oracle_d0)
    if label == "B(Dhat)":
        return MethodSpec(label, selection="probit")
    if label == "B(Dhat_m)":
        return MethodSpec(label, selection="logit")
    if label == "custom":
        if basis is None:
            raise ValidationError("custom methods need a basis recipe")
        return MethodSpec(label, basis=basis)
    raise ValidationError(f"unknown method label: {label!r}")


def estimate_ipw(
    dataset: Dataset,
    fitted: FittedPropensity,
    normalize: bool = False,
    force: bool = False,
    method: str = "custom",
) -> LateEstimate:
    """Ratio of inverse-probability-weighted reduced forms.

    With ``normalize`` each of the four weighted sums is divided by the mean
    of its own weights. For a balanced fit whose basis contains an intercept
    the two versions coincide to machine precision.
    """
    if not fitted.converged and not force:
        raise EstimationError(method, "propensity fit did not converge")
    y, d, z = dataset.y, dataset.d, dataset.z
    pi = fitted.scores
    a1 = float(np.mean(z * y / pi))
    a0 = float(np.mean((1.0 - z) * y / (1.0 - pi)))
    g1 = float(np.mean(z * d / pi))
    g0 = float(np.mean((1.0 - z) * d / (1.0 - pi)))
    if normalize:
        s1 = float(np.mean(z / pi))
        s0 = float(np.mean((1.0 - z) / (1.0 - pi)))
        delta = a1 / s1 - a0 / s0
        gamma = g1 / s1 - g0 / s0
    else:
        delta = a1 - a0
        gamma = g1 - g0
    if gamma == 0.0:
        raise EstimationError(method, "zero first stage")
    diagnostics = {
        "normalized": normalize,
        "forced": force and not fitted.converged,
        **fitted.convergence_report(),
    }
    return LateEstimate(
        method=method,
        delta_hat=delta,
        gamma_hat=gamma,
        tau_hat=delta / gamma,
        weight_variance_proxy=balancer.weight_variance_proxy(fitted.weights),
        diagnostics=diagnostics,
    )


def _iv_point(y, d, z, x, label: str) -> LateEstimate:
    """Just-identified 2SLS of y on (1, x, d) with instruments (1, x, z).

    The reported components are the reduced-form and first-stage coefficients
    on the instrument, whose ratio equals the 2SLS coefficient on the
    treatment. The standard error is the HC0 sandwich.
    """
    n = y.shape[0]
    instruments = np.column_stack([np.ones(n), x, z])
    regressors = np.column_stack([np.ones(n), x, d])
    a = instruments.T @ regressors / n
    if not np.all(np.isfinite(a)) or np.linalg.cond(a) > 1e12:
        raise EstimationError(label, "rank-deficient design after projection")
    coef = np.linalg.solve(a, instruments.T @ y / n)
    resid = y - regressors @ coef
    a_inv = np.linalg.inv(a)
    meat = (instruments * (resid ** 2)[:, None]).T @ instruments / n
    cov = a_inv @ meat @ a_inv.T / n
    se = float(np.sqrt(max(cov[-1, -1], 0.0)))
    gram = instruments.T @ instruments / n
    delta = float(np.linalg.solve(gram, instruments.T @ y / n)[-1])
    gamma = float(np.linalg.solve(gram, instruments.T @ d / n)[-1])
    if gamma == 0.0:
        raise EstimationError(label, "zero first stage")
    return LateEstimate(
        method=label,
        delta_hat=delta,
        gamma_hat=gamma,
        tau_hat=delta / gamma,
        se=se,
        se_method="asymptotic",
        diagnostics={
            "converged": True,
            "robust_se": "HC0",
            "coefficient_on_treatment": float(coef[-1]),
        },
    )


def estimate_wald(dataset: Dataset) -> LateEstimate:
    """Ratio of instrument-group mean differences; no covariates used."""
    empty = np.empty((dataset.n, 0))
    est = _iv_point(dataset.y, dataset.d, dataset.z, empty, "Wald")
    # Recompute the reduced forms as literal group means: identical up to
    # roundoff, but exact in degenerate cases (constant outcomes).
    treated = dataset.z == 1.0
    delta = float(dataset.y[treated].mean() - dataset.y[~treated].mean())
    gamma = float(dataset.d[treated].mean() - dataset.d[~treated].mean())
    if gamma == 0.0:
        raise EstimationError("Wald", "zero first stage")
    return replace(est, delta_hat=delta, gamma_hat=gamma, tau_hat=delta / gamma)


def estimate_tsls(dataset: Dataset) -> LateEstimate:
    """Two-stage least squares with the covariates as exogenous controls."""
    return _iv_point(dataset.y, dataset.d, dataset.z, dataset.x, "IV")


def fit_mle_propensity(
    basis,
    z,
    options: Optional[SolverOptions] = None,
) -> FittedPropensity:
    """Standard logistic maximum likelihood on the same basis columns."""
    opts = options or SolverOptions()
    phi = basis.values if isinstance(basis, BasisMatrix) else np.asarray(basis, dtype=float)
    z = np.asarray(z, dtype=float)
    if z.min() == z.max():
        raise ValidationError("instrument has no variation")
    balancer._check_rank(phi)

    def loglik(t):
        eta = phi @ t
        return float(np.mean(z * eta - np.logaddexp(0.0, eta)))

    def score(t):
        eta = phi @ t
        return phi.T @ (z - expit(eta)) / phi.shape[0]

    def hess(t):
        scores = expit(phi @ t)
        return -(phi * (scores * (1.0 - scores))[:, None]).T @ phi / phi.shape[0]

    theta, info = _newton_ascent(
        loglik, score, hess, lambda t: phi @ t, np.zeros(phi.shape[1]), opts
    )
    return balancer._build_result(phi, z, theta, info, opts)


@dataclass(frozen=True, eq=False)
class SelectionColumn:
    """Predicted treatment-take-up probabilities at a fixed instrument level."""

    values: np.ndarray
    at_z: int
    link: str
    coef: np.ndarray
    converged: bool
    separation: bool
    degenerate_groups: bool
    clipped: int

    def flags(self) -> dict:
        return {
            "selection_link": self.link,
            "selection_at_z": self.at_z,
            "selection_converged": self.converged,
            "selection_separation": self.separation,
            "selection_degenerate_groups": self.degenerate_groups,
            "selection_clipped": self.clipped,
        }


def _binary_ml(xmat: np.ndarray, outcome: np.ndarray, link: str, opts: SolverOptions):
    """Maximum likelihood for a binary response with logit or probit link."""
    if link == "logit":
        bound = balancer.SEPARATION_INDEX_BOUND

        def loglik(t):
            eta = xmat @ t
            return float(np.mean(outcome * eta - np.logaddexp(0.0, eta)))

        def score(t):
            eta = xmat @ t
            return xmat.T @ (outcome - expit(eta)) / xmat.shape[0]

        def hess(t):
            mu = expit(xmat @ t)
            return -(xmat * (mu * (1.0 - mu))[:, None]).T @ xmat / xmat.shape[0]

    elif link == "probit":
        bound = PROBIT_INDEX_BOUND

        def loglik(t):
            eta = xmat @ t
            return float(np.mean(outcome * norm.logcdf(eta) + (1.0 - outcome) * norm.logcdf(-eta)))

        def score(t):
            eta = xmat @ t
            # pdf / cdf ratios computed in log space for tail stability
            r1 = np.exp(norm.logpdf(eta) - norm.logcdf(eta))
            r0 = np.exp(norm.logpdf(eta) - norm.logcdf(-eta))
            lam = outcome * r1 - (1.0 - outcome) * r0
            return xmat.T @ lam / xmat.shape[0]

        def hess(t):
            # Fisher information; exact for the expected Hessian and always
            # negative definite on a full-rank design.
            eta = xmat @ t
            r1 = np.exp(norm.logpdf(eta) - norm.logcdf(eta))
            r0 = np.exp(norm.logpdf(eta) - norm.logcdf(-eta))
            w = r1 * r0
            return -(xmat * w[:, None]).T @ xmat / xmat.shape[0]

    else:
        raise ValidationError(f"unknown link: {link!r}")

    theta, info = _newton_ascent(
        loglik, score, hess, lambda t: xmat @ t, np.zeros(xmat.shape[1]), opts,
        index_bound=bound,
    )
    return theta, info


def selection_augment(
    dataset: Dataset,
    kind: str,
    at_z: int,
    options: Optional[SolverOptions] = None,
) -> SelectionColumn:
    """Predicted take-up probability at instrument level ``at_z`` per unit.

    Fits a binary maximum likelihood model of the treatment on an intercept,
    the covariates, and the instrument, with the requested link, then
    evaluates every unit's prediction at the fixed instrument level.
    Predictions are clipped 1e-12 away from {0, 1}, counting the clips.
    """
    if at_z not in (0, 1):
        raise ValidationError("at_z must be 0 or 1")
    if kind not in ("probit", "logit"):
        raise ValidationError("selection model kind must be probit or logit")
    opts = options or SolverOptions()
    n = dataset.n
    degenerate = False
    for level in (0.0, 1.0):
        group = dataset.d[dataset.z == level]
        if group.size == 0 or group.min() == group.max():
            degenerate = True
    xmat = np.column_stack([np.ones(n), dataset.x, dataset.z])
    theta, info = _binary_ml(xmat, dataset.d, kind, opts)
    eval_mat = np.column_stack([np.ones(n), dataset.x, np.full(n, float(at_z))])
    eta = eval_mat @ theta
    raw = expit(eta) if kind == "logit" else norm.cdf(eta)
    clipped = int(np.sum((raw < PREDICTION_CLIP) | (raw > 1.0 - PREDICTION_CLIP)))
    values = np.clip(raw, PREDICTION_CLIP, 1.0 - PREDICTION_CLIP)
    return SelectionColumn(
        values=values,
        at_z=at_z,
        link=kind,
        coef=theta,
        converged=info.converged,
        separation=info.separation or degenerate,
        degenerate_groups=degenerate,
        clipped=clipped,
    )


def _drop_dependent_columns(columns: list[np.ndarray], names: list[str], tol: float = 1e-13):
    """Greedily drop columns numerically inside the span of earlier ones.

    The tolerance is tight on purpose: only numerically exact duplicates
    (such as a constant take-up probability next to the intercept) collapse;
    merely near-collinear columns stay in and surface as a condition-number
    failure instead of being silently repaired.
    """
    kept: list[np.ndarray] = []
    kept_names: list[str] = []
    dropped: list[str] = []
    for col, name in zip(columns, names):
        if kept:
            basis_mat = np.column_stack(kept)
            proj, *_ = np.linalg.lstsq(basis_mat, col, rcond=None)
            resid = col - basis_mat @ proj
            scale = np.linalg.norm(col)
            if np.linalg.norm(resid) <= tol * max(scale, 1.0):
                dropped.append(name)
                continue
        kept.append(col)
        kept_names.append(name)
    return kept, kept_names, dropped


def _balancing_basis_for(dataset: Dataset, spec: MethodSpec, opts: SolverOptions):
    """Assemble the basis for a B(.) method, dropping collinear columns.

    Exactly dependent appended columns (for instance a constant take-up
    probability next to the intercept) are removed so the fit degenerates to
    the informative sub-basis instead of failing outright.
    """
    n = dataset.n
    columns: list[np.ndarray] = [np.ones(n)]
    names: list[str] = ["intercept"]
    flags: dict = {}
    if spec.selection == "oracle":
        d0 = np.asarray(spec.oracle_d0, dtype=float)
        if d0.shape[0] != n:
            raise ValidationError("oracle selection probabilities have wrong length")
        columns.append(d0)
        names.append("E[D(0)|X]")
    elif spec.selection in ("probit", "logit"):
        sel = selection_augment(dataset, spec.selection, at_z=0, options=opts)
        columns.append(sel.values)
        names.append("Ehat[D(0)|X]")
        flags.update(sel.flags())
    if spec.label in ("B(X)", "B(D,X)") or (
        spec.label == "custom" and spec.selection == "none"
    ):
        for j in range(dataset.p):
            columns.append(dataset.x[:, j])
            names.append(f"x{j + 1}")
    kept, kept_names, dropped = _drop_dependent_columns(columns, names)
    if dropped:
        flags["dropped_columns"] = dropped
    values = np.column_stack(kept)
    return BasisMatrix(values, True, BasisSpec("custom"), tuple(kept_names)), flags


def estimate_method(
    dataset: Dataset,
    method,
    options: Optional[SolverOptions] = None,
    compute_se: bool = False,
) -> LateEstimate:
    """Dispatch one estimation method on one dataset.

    Raises :class:`EstimationError` on any failure (non-convergence,
    separation, a near-collinear balancing basis, or a zero first stage); a
    failed method never returns a silent number.
    """
    est, _, _ = estimate_method_detailed(dataset, method, options, compute_se)
    return est


def estimate_method_detailed(
    dataset: Dataset,
    method,
    options: Optional[SolverOptions] = None,
    compute_se: bool = False,
) -> tuple[LateEstimate, Optional[FittedPropensity], Optional[BasisMatrix]]:
    """Like :func:`estimate_method` but also returns the propensity fit and
    basis for score exports and balance reports (None for Wald and IV)."""
    spec = method if isinstance(method, MethodSpec) else method_from_label(method)
    opts = options or SolverOptions()
    label = spec.label
    if label == "Wald":
        return estimate_wald(dataset), None, None
    if label == "IV":
        return estimate_tsls(dataset), None, None

    if label in ("MLE", "MLE2"):
        basis_spec = spec.basis or BasisSpec("raw")
        from .basis import build_basis

        built = build_basis(dataset.x, basis_spec)
        fitted = fit_mle_propensity(built, dataset.z, opts)
        if not fitted.converged:
            raise EstimationError(label, fitted.note or "likelihood fit did not converge")
        normalize = spec.normalize if spec.normalize is not None else (label == "MLE2")
        est = estimate_ipw(dataset, fitted, normalize=normalize, method=label)
        if compute_se:
            est = _attach_asymptotic_se(dataset, est, fitted, built)
        return est, fitted, built

    # Balancing family: B(X), B(D), B(D,X), B(Dhat), B(Dhat_m), custom.
    if spec.selection == "none" and spec.basis is not None:
        from .basis import build_basis

        built = build_basis(dataset.x, spec.basis)
        flags: dict = {}
    else:
        built, flags = _balancing_basis_for(dataset, spec, opts)
    try:
        fitted = balancer.fit(built, dataset.z, opts)
    except ValidationError as err:
        raise EstimationError(label, str(err)) from err
    if fitted.separation:
        raise EstimationError(label, "possible separation")
    if fitted.hessian_condition_estimate > CONDITION_LIMIT:
        raise EstimationError(
            label,
            "near-collinear balancing basis "
            f"(condition estimate {fitted.hessian_condition_estimate:.3g})",
        )
    if not fitted.converged:
        raise EstimationError(label, fitted.note or "balancing fit did not converge")
    normalize = bool(spec.normalize) if spec.normalize is not None else False
    est = estimate_ipw(dataset, fitted, normalize=normalize, method=label)
    if flags:
        diag = dict(est.diagnostics)
        diag.update(flags)
        est = replace(est, diagnostics=diag)
    if compute_se:
        est = _attach_asymptotic_se(dataset, est, fitted, built)
    return est, fitted, built


def asymptotic_variance(
    dataset: Dataset,
    fitted: FittedPropensity,
    basis,
    tau_hat: Optional[float] = None,
) -> tuple[float, float]:
    """Plug-in variance from the asymptotically linear representation.

    The four conditional means entering the influence term are estimated by
    weighted linear projections on the basis columns; the variance is the
    sample second moment of the plug-in influence values and the standard
    error is ``sqrt(variance / n)``.
    """
    phi = basis.values if isinstance(basis, BasisMatrix) else np.asarray(basis, dtype=float)
    y, d, z = dataset.y, dataset.d, dataset.z
    n = dataset.n
    pi = fitted.scores
    gram = phi.T @ phi
    try:
        factor = scipy.linalg.cho_factor(gram)
    except scipy.linalg.LinAlgError as err:
        raise ValidationError(
            "singular projection matrix; use a smaller basis"
        ) from err

    def project(target: np.ndarray) -> np.ndarray:
        coef = scipy.linalg.cho_solve(factor, phi.T @ target)
        return phi @ coef

    m1 = project(y * z / pi)
    m0 = project(y * (1.0 - z) / (1.0 - pi))
    mu1 = project(d * z / pi)
    mu0 = project(d * (1.0 - z) / (1.0 - pi))
    delta = float(np.mean(z * y / pi) - np.mean((1.0 - z) * y / (1.0 - pi)))
    gamma = float(np.mean(z * d / pi) - np.mean((1.0 - z) * d / (1.0 - pi)))
    if gamma == 0.0:
        raise ValidationError("zero first stage")
    tau = float(tau_hat) if tau_hat is not None else delta / gamma
    psi = (
        z * (y - m1 - tau * (d - mu1)) / pi
        - (1.0 - z) * (y - m0 - tau * (d - mu0)) / (1.0 - pi)
        + m1
        - m0
        - tau * (mu1 - mu0)
    ) / gamma
    vhat = float(np.mean(psi ** 2))
    return vhat, float(np.sqrt(vhat / n))


def _attach_asymptotic_se(dataset, est, fitted, built) -> LateEstimate:
    _, se = asymptotic_variance(dataset, fitted, built, est.tau_hat)
    return replace(est, se=se, se_method="asymptotic")


@dataclass(frozen=True)
class BootstrapResult:
    """Standard error and percentile interval from pairs resampling."""

    se: float
    interval: tuple[float, float]
    n_boot: int
    n_failed: int
    seed: int


def bootstrap_se(
    dataset: Dataset,
    method,
    n_boot: int = 500,
    seed: int = 0,
    options: Optional[SolverOptions] = None,
) -> BootstrapResult:
    """Nonparametric pairs bootstrap of the full estimation pipeline.

    Rows are resampled with replacement; the propensity fit and, when
    present, the selection model are refit on every replicate so generated
    regressor uncertainty is captured. Replicates with failed fits are
    dropped and counted; more than 20 percent failures raises. Deterministic
    per-replicate generators are derived from (seed, replicate index).
    """
    if n_boot < 2:
        raise ValidationError("bootstrap needs at least 2 replications")
    spec = method if isinstance(method, MethodSpec) else method_from_label(method)
    n = dataset.n
    taus = np.full(n_boot, np.nan)
    for rep in range(n_boot):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), rep)))
        idx = rng.integers(0, n, n)
        sample = Dataset(
            y=dataset.y[idx],
            d=dataset.d[idx],
            z=dataset.z[idx],
            x=dataset.x[idx],
            covariate_names=dataset.covariate_names,
        )
        rep_spec = spec
        if spec.oracle_d0 is not None:
            rep_spec = replace(spec, oracle_d0=np.asarray(spec.oracle_d0)[idx])
        try:
            if sample.z.min() == sample.z.max():
                raise EstimationError(spec.label, "instrument has no variation")
            taus[rep] = estimate_method(sample, rep_spec, options).tau_hat
        except (EstimationError, ValidationError):
            continue
    ok = np.isfinite(taus)
    n_failed = int(n_boot - ok.sum())
    if n_failed > 0.2 * n_boot:
        raise EstimationError(
            spec.label, f"bootstrap unreliable: {n_failed}/{n_boot} replicates failed"
        )
    good = taus[ok]
    se = float(np.std(good, ddof=1))
    lo, hi = np.percentile(good, [2.5, 97.5])
    return BootstrapResult(se, (float(lo), float(hi)), n_boot, n_failed, int(seed))
