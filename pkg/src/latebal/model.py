"""Shared data containers, validation, and dataset CSV input/output.

Every other module builds on the types defined here. All containers are
immutable after construction (arrays are stored read-only), so instances can
be shared freely across concurrent workers.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

__all__ = [
    "DEFAULT_BALANCE_TOLERANCE",
    "DEFAULT_GRADIENT_TOLERANCE",
    "DEFAULT_MAX_ITERATIONS",
    "ValidationError",
    "Dataset",
    "BasisSpec",
    "BasisMatrix",
    "Penalty",
    "FittedPropensity",
    "LateEstimate",
    "McMethodRow",
    "McResult",
    "validate",
    "dataset_from_csv",
    "dataset_to_csv",
    "is_binary_column",
]

# Central numerical tolerances. The balancing objective is smooth and globally
# concave, so Newton converges quadratically and tight tolerances are cheap.
DEFAULT_BALANCE_TOLERANCE = 1e-8
DEFAULT_GRADIENT_TOLERANCE = 1e-10
DEFAULT_MAX_ITERATIONS = 100

METHOD_LABELS = (
    "Wald",
    "IV",
    "MLE",
    "MLE2",
    "B(X)",
    "B(D)",
    "B(D,X)",
    "B(Dhat)",
    "B(Dhat_m)",
    "custom",
)


class ValidationError(ValueError):
    """An input violates a documented invariant."""


def _frozen_array(values, dtype=float, ndim=1) -> np.ndarray:
    arr = np.array(values, dtype=dtype, copy=True)
    if arr.ndim != ndim:
        if ndim == 2 and arr.ndim == 1:
            arr = arr.reshape(-1, 1)
        else:
            raise ValidationError(
                f"expected a {ndim}-dimensional array, got {arr.ndim} dimensions"
            )
    arr.setflags(write=False)
    return arr


def is_binary_column(col: np.ndarray) -> bool:
    """True when every entry of ``col`` is exactly 0 or 1."""
    return bool(np.all((col == 0.0) | (col == 1.0)))


@dataclass(frozen=True, eq=False)
class Dataset:
    """One observed sample: outcome, treatment, instrument, covariates.

    Parameters
    ----------
    y : array of shape (n,)
        Real-valued outcome.
    d : array of shape (n,)
        Binary treatment indicator (entries exactly 0 or 1).
    z : array of shape (n,)
        Binary instrument indicator (entries exactly 0 or 1).
    x : array of shape (n, p)
        Predetermined covariates; ``p`` may be zero.
    covariate_names : tuple of str, optional
        Column labels used when reading from / writing to CSV.
    """

    y: np.ndarray
    d: np.ndarray
    z: np.ndarray
    x: np.ndarray
    covariate_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "y", _frozen_array(self.y))
        object.__setattr__(self, "d", _frozen_array(self.d))
        object.__setattr__(self, "z", _frozen_array(self.z))
        x = self.x if self.x is not None else np.empty((len(self.y), 0))
        object.__setattr__(self, "x", _frozen_array(x, ndim=2))
        if self.covariate_names is not None:
            names = tuple(str(c) for c in self.covariate_names)
            if len(names) != self.p:
                raise ValidationError(
                    f"{len(names)} covariate names supplied for {self.p} columns"
                )
            object.__setattr__(self, "covariate_names", names)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def p(self) -> int:
        return self.x.shape[1]


def validate(dataset: Dataset) -> Dataset:
    """Check every Dataset invariant; return the dataset unchanged if valid.

    Raises
    ------
    ValidationError
        Naming the first violated invariant, with the offending row index
        where one exists.
    """
    y, d, z, x = dataset.y, dataset.d, dataset.z, dataset.x
    n = y.shape[0]
    for name, arr in (("d", d), ("z", z)):
        if arr.shape[0] != n:
            raise ValidationError(f"{name} has length {arr.shape[0]}, expected {n}")
    if x.shape[0] != n:
        raise ValidationError(f"x has {x.shape[0]} rows, expected {n}")
    if n < 2:
        raise ValidationError("need at least 2 observations")
    for name, arr in (("y", y), ("d", d), ("z", z)):
        bad = np.flatnonzero(~np.isfinite(arr))
        if bad.size:
            raise ValidationError(
                f"{name} contains a non-finite value at row {bad[0]}"
            )
    if x.size:
        rows, cols = np.nonzero(~np.isfinite(x))
        if rows.size:
            raise ValidationError(
                f"covariate column {cols[0]} contains a non-finite value at row {rows[0]}"
            )
    for name, arr, label in (("d", d, "treatment"), ("z", z, "instrument")):
        bad = np.flatnonzero((arr != 0.0) & (arr != 1.0))
        if bad.size:
            raise ValidationError(f"{label} is not binary (0/1) at row {bad[0]}")
    if z.min() == z.max():
        raise ValidationError("instrument has no variation")
    return dataset


def dataset_from_csv(path) -> Dataset:
    """Read a dataset from CSV.

    The file must have a header row with columns ``y``, ``d``, ``z``; every
    remaining column is taken as a covariate, in file order. Decimal points
    use ``.`` and no thousands separators are allowed.
    """
    frame = pd.read_csv(path, float_precision="round_trip")
    for required in ("y", "d", "z"):
        if required not in frame.columns:
            raise ValidationError(f"required column {required} not found")
    covariates = [c for c in frame.columns if c not in ("y", "d", "z")]
    for col in frame.columns:
        if not np.issubdtype(frame[col].dtype, np.number):
            raise ValidationError(f"column {col} is not numeric")
    dataset = Dataset(
        y=frame["y"].to_numpy(dtype=float),
        d=frame["d"].to_numpy(dtype=float),
        z=frame["z"].to_numpy(dtype=float),
        x=frame[covariates].to_numpy(dtype=float).reshape(len(frame), len(covariates)),
        covariate_names=tuple(covariates),
    )
    return validate(dataset)


def dataset_to_csv(dataset: Dataset, path) -> None:
    """Write a dataset to CSV with the schema read by :func:`dataset_from_csv`.

    Reals are written with round-trip precision; the binary columns are
    written as integers.
    """
    names = dataset.covariate_names or tuple(f"x{j + 1}" for j in range(dataset.p))
    frame = pd.DataFrame({"y": dataset.y})
    frame["d"] = dataset.d.astype(int)
    frame["z"] = dataset.z.astype(int)
    for j, name in enumerate(names):
        frame[name] = dataset.x[:, j]
    frame.to_csv(path, index=False)


@dataclass(frozen=True)
class BasisSpec:
    """Recipe for constructing a matrix of balancing functions.

    kind is one of ``raw`` (optional intercept plus covariates verbatim),
    ``power`` (the first ``power_order`` multi-index power functions),
    ``spline`` (additive truncated-power spline per continuous covariate),
    or ``custom`` (columns supplied by the caller).
    """

    kind: str = "raw"
    intercept: bool = True
    power_order: Optional[int] = None
    degree: Optional[int] = None
    n_knots: Optional[int] = None
    binary_interactions: bool = False
    standardized: bool = False
    orthonormalized: bool = False

    def __post_init__(self):
        if self.kind not in ("raw", "power", "spline", "custom"):
            raise ValidationError(f"unknown basis kind: {self.kind!r}")
        if self.kind == "power":
            if self.power_order is None or self.power_order < 1:
                raise ValidationError("power basis requires power_order >= 1")
        if self.kind == "spline":
            if self.degree is None or self.degree < 1:
                raise ValidationError("spline basis requires degree >= 1")
            if self.n_knots is None or self.n_knots < 0:
                raise ValidationError("spline basis requires n_knots >= 0")

    def describe(self) -> str:
        if self.kind == "raw":
            core = "raw"
        elif self.kind == "power":
            core = f"power:{self.power_order}"
        elif self.kind == "spline":
            core = f"spline:{self.degree},{self.n_knots}"
        else:
            core = "custom"
        tags = []
        if not self.intercept:
            tags.append("no-intercept")
        if self.binary_interactions:
            tags.append("interactions")
        if self.standardized:
            tags.append("standardized")
        if self.orthonormalized:
            tags.append("orthonormalized")
        return core if not tags else core + "[" + ",".join(tags) + "]"

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "intercept": self.intercept,
            "power_order": self.power_order,
            "degree": self.degree,
            "n_knots": self.n_knots,
            "binary_interactions": self.binary_interactions,
            "standardized": self.standardized,
            "orthonormalized": self.orthonormalized,
        }


@dataclass(frozen=True, eq=False)
class BasisMatrix:
    """An n x r evaluation of balancing functions plus its construction recipe."""

    values: np.ndarray
    has_intercept: bool
    spec: BasisSpec = field(default_factory=BasisSpec)
    column_names: Optional[tuple[str, ...]] = None

    def __post_init__(self):
        object.__setattr__(self, "values", _frozen_array(self.values, ndim=2))
        if not np.all(np.isfinite(self.values)):
            raise ValidationError("basis matrix contains non-finite entries")
        if self.values.shape[1] < 1:
            raise ValidationError("basis matrix needs at least one column")
        if self.column_names is not None:
            names = tuple(str(c) for c in self.column_names)
            if len(names) != self.r:
                raise ValidationError(
                    f"{len(names)} column names supplied for {self.r} columns"
                )
            object.__setattr__(self, "column_names", names)

    @property
    def n(self) -> int:
        return self.values.shape[0]

    @property
    def r(self) -> int:
        return self.values.shape[1]

    def names(self) -> tuple[str, ...]:
        if self.column_names is not None:
            return self.column_names
        return tuple(f"phi{j}" for j in range(self.r))


@dataclass(frozen=True)
class Penalty:
    """Parameter-norm penalty for approximate balancing.

    ``lam`` scales the penalty; ``alpha`` mixes the l1 and squared-l2 parts
    for the elastic net (alpha = 1 is pure l1). The intercept is left
    unpenalized by default.
    """

    kind: str
    lam: float
    alpha: float = 1.0
    intercept_penalized: bool = False

    def __post_init__(self):
        if self.kind not in ("none", "l1", "l2", "elastic_net"):
            raise ValidationError(f"unknown penalty kind: {self.kind!r}")
        if not np.isfinite(self.lam) or self.lam < 0:
            raise ValidationError("penalty strength must be >= 0")
        if not 0.0 <= self.alpha <= 1.0:
            raise ValidationError("elastic-net mix must lie in [0, 1]")

    def l1_weight(self) -> float:
        if self.kind == "l1":
            return self.lam
        if self.kind == "elastic_net":
            return self.lam * self.alpha
        return 0.0

    def l2_weight(self) -> float:
        if self.kind == "l2":
            return self.lam
        if self.kind == "elastic_net":
            return self.lam * (1.0 - self.alpha)
        return 0.0

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "lambda": self.lam,
            "alpha": self.alpha,
            "intercept_penalized": self.intercept_penalized,
        }


@dataclass(frozen=True, eq=False)
class FittedPropensity:
    """A fitted instrument propensity model and its implied weights.

    ``scores`` lie strictly inside (0, 1); ``weights`` are
    ``z / score + (1 - z) / (1 - score)`` and are therefore >= 1.
    """

    theta: np.ndarray
    scores: np.ndarray
    weights: np.ndarray
    converged: bool
    iterations: int
    final_gradient_norm: float
    hessian_condition_estimate: float
    balance_residual_max: float
    penalty: Optional[Penalty] = None
    separation: bool = False
    note: str = ""

    def __post_init__(self):
        object.__setattr__(self, "theta", _frozen_array(self.theta))
        object.__setattr__(self, "scores", _frozen_array(self.scores))
        object.__setattr__(self, "weights", _frozen_array(self.weights))
        if self.scores.size and (self.scores.min() <= 0.0 or self.scores.max() >= 1.0):
            raise ValidationError("fitted scores must lie strictly inside (0, 1)")
        if self.weights.size and self.weights.min() < 1.0:
            raise ValidationError("inverse probability weights must be >= 1")

    def convergence_report(self) -> dict:
        return {
            "converged": self.converged,
            "iterations": self.iterations,
            "final_gradient_norm": self.final_gradient_norm,
            "balance_residual_max": self.balance_residual_max,
            "hessian_condition_estimate": self.hessian_condition_estimate,
            "separation": self.separation,
            "note": self.note,
            "penalty": self.penalty.to_dict() if self.penalty else None,
        }


@dataclass(frozen=True, eq=False)
class LateEstimate:
    """A treatment-effect estimate with its two reduced-form components."""

    method: str
    delta_hat: float
    gamma_hat: float
    tau_hat: float
    se: Optional[float] = None
    se_method: str = "none"
    weight_variance_proxy: Optional[float] = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.method not in METHOD_LABELS:
            raise ValidationError(f"unknown method label: {self.method!r}")
        if self.se_method not in ("none", "asymptotic", "bootstrap"):
            raise ValidationError(f"unknown se_method: {self.se_method!r}")
        if self.se is not None and self.se < 0:
            raise ValidationError("standard error must be >= 0")
        if self.gamma_hat != 0.0:
            ratio = self.delta_hat / self.gamma_hat
            if abs(self.tau_hat - ratio) > 1e-10 * max(1.0, abs(ratio)):
                raise ValidationError("tau_hat must equal delta_hat / gamma_hat")

    def to_dict(self) -> dict:
        return {
            "method": self.method,
            "tau_hat": self.tau_hat,
            "delta_hat": self.delta_hat,
            "gamma_hat": self.gamma_hat,
            "se": self.se,
            "se_method": self.se_method,
            "weight_variance_proxy": self.weight_variance_proxy,
            "diagnostics": _jsonable(self.diagnostics),
        }


@dataclass(frozen=True)
class McMethodRow:
    """One method's row in a simulation summary."""

    method: str
    relative_mse: float
    absolute_bias: float
    failures: int


@dataclass(frozen=True)
class McResult:
    """Summary of one (design, n, delta) simulation cell.

    ``relative_mse`` entries are method MSEs divided by the MSE of the IV
    anchor, whose own entry is exactly 1.
    """

    design: str
    n: int
    delta: float
    replications: int
    rows: tuple[McMethodRow, ...]
    true_late: float
    seed: int
    iv_mse: float
    dropped_replicates: int = 0

    def row(self, method: str) -> McMethodRow:
        for row in self.rows:
            if row.method == method:
                return row
        raise KeyError(method)

    def to_dict(self) -> dict:
        return {
            "design": self.design,
            "n": self.n,
            "delta": self.delta,
            "replications": self.replications,
            "true_late": self.true_late,
            "seed": self.seed,
            "iv_mse_absolute": self.iv_mse,
            "dropped_replicates": self.dropped_replicates,
            "rows": [
                {
                    "method": r.method,
                    "relative_mse": r.relative_mse,
                    "absolute_bias": r.absolute_bias,
                    "failures": r.failures,
                }
                for r in self.rows
            ],
        }


def _jsonable(obj):
    """Recursively convert numpy scalars/arrays so json.dumps accepts them."""
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer, np.bool_)):
        return obj.item()
    return obj
