"""Generalized Roy-model data generator and Monte Carlo harness.

The generator draws covariates uniformly, assigns the instrument by a
logistic score bounded inside [delta, 1 - delta], and selects treatment by a
latent normal index correlated with the treated potential outcome. Truth for
the complier effect comes from adaptive quadrature of the closed-form
conditional moments, so simulation estimates can be checked against an
independent target.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
from scipy.integrate import quad
from scipy.special import expit
from scipy.stats import norm

from .late import EstimationError, MethodSpec, estimate_method, method_from_label
from .model import Dataset, McMethodRow, McResult, ValidationError

__all__ = [
    "RoyDesign",
    "RoyOracle",
    "McCell",
    "TrueLate",
    "generate",
    "true_late",
    "true_late_detail",
    "run_mc",
    "mc_results_to_csv",
    "DEFAULT_MC_METHODS",
]

# The treated-outcome mean constant is stored as printed, not recomputed.
MU_Y1_CONSTANT = 0.3989
TREATMENT_SHIFT = 2.122

DEFAULT_MC_METHODS = (
    "IV",
    "MLE",
    "MLE2",
    "B(X)",
    "B(D)",
    "B(D,X)",
    "B(Dhat)",
    "B(Dhat_m)",
)


@dataclass(frozen=True)
class RoyDesign:
    """One simulation design: treatment index and treated-outcome mean.

    ``delta`` bounds the instrument score inside [delta, 1 - delta] through
    the index slope ``theta0 = ln((1 - delta) / delta)``; ``rho`` correlates
    the treated-outcome shock with the selection shock.
    """

    label: str
    delta: float
    rho: float = 0.5

    def __post_init__(self):
        if self.label not in ("A", "B", "C"):
            raise ValidationError(f"unknown design label: {self.label!r}")
        if not 0.0 < self.delta < 0.5:
            raise ValidationError("delta must lie in (0, 0.5)")
        if not -1.0 < self.rho < 1.0:
            raise ValidationError("rho must lie in (-1, 1)")

    @property
    def theta0(self) -> float:
        return float(np.log((1.0 - self.delta) / self.delta))

    def instrument_score(self, x):
        return expit((2.0 * np.asarray(x, dtype=float) - 1.0) * self.theta0)

    def mu_d(self, x, z):
        x = np.asarray(x, dtype=float)
        if self.label == "A":
            return 4.0 * z + 0.0 * x
        return -1.0 + 2.0 * x + TREATMENT_SHIFT * z

    def mu_y1(self, x):
        x = np.asarray(x, dtype=float)
        if self.label == "C":
            return 9.0 * (x + 3.0) ** 2
        return MU_Y1_CONSTANT + 0.0 * x


@dataclass(frozen=True, eq=False)
class RoyOracle:
    """Generator-side truths returned next to each simulated dataset."""

    pi: np.ndarray
    ed1: np.ndarray
    ed0: np.ndarray
    d1: np.ndarray
    d0: np.ndarray
    eps1: np.ndarray
    eps0: np.ndarray
    v: np.ndarray


def generate(design: RoyDesign, n: int, seed) -> tuple[Dataset, RoyOracle]:
    """Draw one sample of size n from the design; deterministic per seed.

    The three outcome/selection shocks are built from independent standard
    normals through the explicit Cholesky factor of their correlation matrix.
    Oracle extras carry the true instrument scores and the true take-up
    probabilities at both instrument levels.
    """
    if n < 2:
        raise ValidationError("need n >= 2")
    rng = np.random.default_rng(seed)
    x = rng.uniform(size=n)
    pi = design.instrument_score(x)
    u = rng.uniform(size=n)
    z = (u < pi).astype(float)
    rho = design.rho
    chol = np.array(
        [
            [1.0, 0.0, 0.0],
            [0.0, 1.0, 0.0],
            [rho, 0.0, np.sqrt(1.0 - rho * rho)],
        ]
    )
    shocks = rng.standard_normal((n, 3)) @ chol.T
    eps1, eps0, v = shocks[:, 0], shocks[:, 1], shocks[:, 2]
    d1 = (design.mu_d(x, 1.0) > v).astype(float)
    d0 = (design.mu_d(x, 0.0) > v).astype(float)
    d = z * d1 + (1.0 - z) * d0
    y = d * (design.mu_y1(x) + eps1) + (1.0 - d) * eps0
    dataset = Dataset(y=y, d=d, z=z, x=x.reshape(-1, 1), covariate_names=("x1",))
    oracle = RoyOracle(
        pi=pi,
        ed1=norm.cdf(design.mu_d(x, 1.0)),
        ed0=norm.cdf(design.mu_d(x, 0.0)),
        d1=d1,
        d0=d0,
        eps1=eps1,
        eps0=eps0,
        v=v,
    )
    return dataset, oracle


@dataclass(frozen=True)
class TrueLate:
    """Quadrature value of the complier effect and its two components."""

    value: float
    outcome_component: float
    selection_component: float
    complier_share: float


def true_late_detail(design: RoyDesign, tol: float = 1e-12) -> TrueLate:
    """Complier effect by adaptive quadrature over the uniform covariate.

    The effect splits into the weighted treated-outcome mean and a control
    function term proportional to ``rho``; both are reported along with the
    complier share (the denominator of both)."""

    def take_up_gap(x):
        return norm.cdf(design.mu_d(x, 1.0)) - norm.cdf(design.mu_d(x, 0.0))

    share = quad(take_up_gap, 0.0, 1.0, epsabs=tol, epsrel=tol)[0]
    outcome_num = quad(
        lambda x: design.mu_y1(x) * take_up_gap(x), 0.0, 1.0, epsabs=tol, epsrel=tol
    )[0]
    selection_num = design.rho * quad(
        lambda x: norm.pdf(design.mu_d(x, 0.0)) - norm.pdf(design.mu_d(x, 1.0)),
        0.0,
        1.0,
        epsabs=tol,
        epsrel=tol,
    )[0]
    outcome_term = outcome_num / share
    selection_term = selection_num / share
    return TrueLate(outcome_term + selection_term, outcome_term, selection_term, share)


def true_late(design: RoyDesign) -> float:
    """Complier effect for the design, to quadrature accuracy."""
    return true_late_detail(design).value


@dataclass(frozen=True)
class McCell:
    """One Monte Carlo cell: design x sample size x overlap bound."""

    design: str
    n: int
    delta: float
    replications: int
    methods: tuple[str, ...] = DEFAULT_MC_METHODS
    seed: int = 0
    rho: float = 0.5

    def __post_init__(self):
        if self.replications < 2:
            raise ValidationError("need at least 2 replications")
        if not self.methods:
            raise ValidationError("method list must not be empty")
        if "IV" not in self.methods:
            raise ValidationError("IV must be included as the relative-MSE anchor")
        object.__setattr__(self, "methods", tuple(self.methods))

    def design_spec(self) -> RoyDesign:
        return RoyDesign(self.design, self.delta, self.rho)


def _method_spec_for(label: str, oracle: RoyOracle) -> MethodSpec:
    if label in ("B(D)", "B(D,X)"):
        return method_from_label(label, oracle_d0=oracle.ed0)
    return method_from_label(label)


def run_mc(cell: McCell, replicate_seeds: Optional[Sequence] = None) -> McResult:
    """Run every method over every replicate and summarize against truth.

    Per-replicate seeds derive from (cell seed, replicate index) so results
    do not depend on execution order. A replicate where the IV anchor fails
    is dropped for every method to keep the relative MSEs coherent; any other
    failure only removes that method's replicate, and all removals are
    counted.
    """
    design = cell.design_spec()
    truth = true_late(design)
    methods = cell.methods
    reps = cell.replications
    taus = {m: np.full(reps, np.nan) for m in methods}
    for rep in range(reps):
        if replicate_seeds is not None:
            seed = replicate_seeds[rep]
        else:
            seed = np.random.SeedSequence((int(cell.seed), rep))
        data, oracle = generate(design, cell.n, seed)
        for label in methods:
            try:
                spec = _method_spec_for(label, oracle)
                taus[label][rep] = estimate_method(data, spec).tau_hat
            except (EstimationError, ValidationError):
                continue
    iv_ok = np.isfinite(taus["IV"])
    dropped = int(reps - iv_ok.sum())
    iv_err = taus["IV"][iv_ok] - truth
    iv_mse = float(np.mean(iv_err ** 2)) if iv_ok.any() else np.nan
    rows = []
    for label in methods:
        ok = np.isfinite(taus[label]) & iv_ok
        n_ok = int(ok.sum())
        failures = reps - n_ok
        if n_ok == 0:
            rows.append(McMethodRow(label, np.nan, np.nan, failures))
            continue
        err = taus[label][ok] - truth
        mse = float(np.mean(err ** 2))
        bias = float(abs(np.mean(taus[label][ok]) - truth))
        rel = 1.0 if label == "IV" else mse / iv_mse
        rows.append(McMethodRow(label, rel, bias, failures))
    return McResult(
        design=cell.design,
        n=cell.n,
        delta=cell.delta,
        replications=reps,
        rows=tuple(rows),
        true_late=truth,
        seed=cell.seed,
        iv_mse=iv_mse,
        dropped_replicates=dropped,
    )


def mc_results_to_csv(results: Sequence[McResult]) -> str:
    """Render results in the two-row-per-cell table layout as CSV text.

    Rows alternate relative MSE and absolute bias per cell; columns are the
    methods. Numbers use four decimals so the IV anchor prints as 1.0000.
    """
    if not results:
        raise ValidationError("no results to render")
    methods: list[str] = []
    for res in results:
        for row in res.rows:
            if row.method not in methods:
                methods.append(row.method)
    header = ["design", "delta", "n", "stat"] + methods
    lines = [",".join(header)]
    for res in results:
        by_method = {r.method: r for r in res.rows}
        mse_cells = []
        bias_cells = []
        for m in methods:
            row = by_method.get(m)
            if row is None or not np.isfinite(row.relative_mse):
                mse_cells.append("")
                bias_cells.append("")
            else:
                mse_cells.append(f"{row.relative_mse:.4f}")
                bias_cells.append(f"{row.absolute_bias:.4f}")
        prefix = [res.design, f"{res.delta:g}", str(res.n)]
        lines.append(",".join(prefix + ["MSE"] + mse_cells))
        lines.append(",".join(prefix + ["|BIAS|"] + bias_cells))
    return "\n".join(lines) + "\n"
