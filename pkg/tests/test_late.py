import numpy as np
import pytest
from scipy.special import expit

from latebal import (
    BasisSpec,
    Dataset,
    EstimationError,
    MethodSpec,
    RoyDesign,
    ValidationError,
    asymptotic_variance,
    bootstrap_se,
    estimate_ipw,
    estimate_method,
    estimate_tsls,
    estimate_wald,
    fit,
    fit_mle_propensity,
    generate,
    method_from_label,
    raw_basis,
    selection_augment,
    true_late,
)
from latebal.model import FittedPropensity

from conftest import random_logistic_dataset


def constant_score_fit(z, score):
    n = z.shape[0]
    scores = np.full(n, score)
    return FittedPropensity(
        theta=np.array([np.log(score / (1 - score))]),
        scores=scores,
        weights=z / scores + (1 - z) / (1 - scores),
        converged=True,
        iterations=0,
        final_gradient_norm=0.0,
        hessian_condition_estimate=1.0,
        balance_residual_max=0.0,
    )


# ------------------------------------------------------------ balanced IPW

def test_ipw_half_scores_on_perfect_compliers(perfect_complier_data):
    est = estimate_ipw(
        perfect_complier_data, constant_score_fit(perfect_complier_data.z, 0.5)
    )
    assert (est.delta_hat, est.gamma_hat, est.tau_hat) == (1.0, 1.0, 1.0)


def test_ipw_misscaled_scores_keep_ratio(perfect_complier_data):
    est = estimate_ipw(
        perfect_complier_data, constant_score_fit(perfect_complier_data.z, 0.25)
    )
    assert est.delta_hat == pytest.approx(2.0)
    assert est.gamma_hat == pytest.approx(2.0)
    assert est.tau_hat == pytest.approx(1.0)


def test_ipw_requires_convergence_unless_forced(perfect_complier_data):
    fitted = constant_score_fit(perfect_complier_data.z, 0.5)
    broken = FittedPropensity(
        theta=fitted.theta,
        scores=fitted.scores,
        weights=fitted.weights,
        converged=False,
        iterations=3,
        final_gradient_norm=1.0,
        hessian_condition_estimate=1.0,
        balance_residual_max=1.0,
    )
    with pytest.raises(EstimationError, match="did not converge"):
        estimate_ipw(perfect_complier_data, broken)
    est = estimate_ipw(perfect_complier_data, broken, force=True)
    assert est.diagnostics["forced"]


def test_ipw_zero_first_stage():
    z = np.array([1.0, 1.0, 0.0, 0.0])
    data = Dataset(y=np.ones(4), d=np.zeros(4), z=z, x=np.empty((4, 0)))
    with pytest.raises(EstimationError, match="zero first stage"):
        estimate_ipw(data, constant_score_fit(z, 0.5))


def test_balanced_ipw_is_automatically_weight_normalized():
    data = random_logistic_dataset(21, n=400, p=2)
    fitted = fit(raw_basis(data.x), data.z)
    plain = estimate_ipw(data, fitted, normalize=False)
    normalized = estimate_ipw(data, fitted, normalize=True)
    assert abs(plain.tau_hat - normalized.tau_hat) <= 1e-12


def test_likelihood_ipw_is_not_weight_normalized():
    data, _ = generate(RoyDesign("B", 0.05), 500, seed=11)
    fitted = fit_mle_propensity(raw_basis(data.x), data.z)
    plain = estimate_ipw(data, fitted, normalize=False, method="MLE")
    normalized = estimate_ipw(data, fitted, normalize=True, method="MLE2")
    assert abs(plain.tau_hat - normalized.tau_hat) > 1e-6


# ------------------------------------------------------------------- Wald

def test_wald_on_perfect_compliers(perfect_complier_data):
    est = estimate_wald(perfect_complier_data)
    assert est.tau_hat == pytest.approx(1.0, abs=1e-14)
    assert est.se == 0.0


def test_wald_equals_intercept_only_balanced_ipw():
    data = random_logistic_dataset(22, n=300)
    fitted = fit(np.ones((data.n, 1)), data.z)
    ipw = estimate_ipw(data, fitted, normalize=True)
    wald = estimate_wald(data)
    assert abs(ipw.tau_hat - wald.tau_hat) <= 1e-12


def test_wald_matches_two_group_means():
    data = random_logistic_dataset(23, n=250)
    z = data.z
    expected = (data.y[z == 1].mean() - data.y[z == 0].mean()) / (
        data.d[z == 1].mean() - data.d[z == 0].mean()
    )
    assert estimate_wald(data).tau_hat == pytest.approx(expected, rel=1e-12)


# ------------------------------------------------------------------- 2SLS

def test_tsls_reduces_to_ols_under_perfect_compliance():
    rng = np.random.default_rng(24)
    n = 500
    x = rng.standard_normal((n, 2))
    z = (rng.uniform(size=n) < 0.5).astype(float)
    d = z.copy()
    y = 2.0 * d + x @ [1.0, -1.0] + rng.standard_normal(n)
    data = Dataset(y=y, d=d, z=z, x=x)
    est = estimate_tsls(data)
    design = np.column_stack([np.ones(n), x, d])
    ols = np.linalg.lstsq(design, y, rcond=None)[0][-1]
    assert est.tau_hat == pytest.approx(ols, rel=1e-10)


def test_tsls_ratio_equals_treatment_coefficient():
    data = random_logistic_dataset(25, n=400, p=3)
    est = estimate_tsls(data)
    assert est.tau_hat == pytest.approx(
        est.diagnostics["coefficient_on_treatment"], rel=1e-9
    )


def test_tsls_close_to_target_on_large_favorable_design():
    # The linear-IV estimand differs from the complier effect by a small
    # approximation gap in this design, so the check uses a loose absolute
    # band rather than sampling error alone.
    design = RoyDesign("B", 0.05)
    data, _ = generate(design, 100_000, seed=321)
    est = estimate_tsls(data)
    assert abs(est.tau_hat - true_late(design)) <= 0.1


def test_tsls_rejects_rank_deficient_design():
    rng = np.random.default_rng(26)
    n = 60
    x = rng.standard_normal(n)
    data = Dataset(
        y=rng.standard_normal(n),
        d=(rng.uniform(size=n) < 0.5).astype(float),
        z=(rng.uniform(size=n) < 0.5).astype(float),
        x=np.column_stack([x, x]),
    )
    with pytest.raises(EstimationError, match="rank"):
        estimate_tsls(data)


def test_wald_equals_tsls_without_covariates():
    data = random_logistic_dataset(27, n=350, p=0)
    wald = estimate_wald(data)
    iv = estimate_tsls(data)
    assert wald.tau_hat == pytest.approx(iv.tau_hat, rel=1e-12)
    assert wald.se == pytest.approx(iv.se, rel=1e-12)


# ------------------------------------------------------------ MLE propensity

def test_mle_intercept_only_closed_form():
    z = np.array([1.0] * 3 + [0.0] * 7)
    fitted = fit_mle_propensity(np.ones((10, 1)), z)
    np.testing.assert_allclose(fitted.scores, 0.3, atol=1e-12)


def test_mle_score_equations_hold():
    data = random_logistic_dataset(28, n=400)
    basis = raw_basis(data.x)
    fitted = fit_mle_propensity(basis, data.z)
    score = basis.values.T @ (data.z - fitted.scores) / data.n
    assert np.max(np.abs(score)) <= 1e-10


def test_mle_recovers_logistic_truth():
    rng = np.random.default_rng(29)
    n = 5000
    x = rng.uniform(size=n)
    z = (rng.uniform(size=n) < expit(2.0 * x - 1.0)).astype(float)
    basis = raw_basis(x.reshape(-1, 1))
    fitted = fit_mle_propensity(basis, z)
    info = (basis.values * (fitted.scores * (1 - fitted.scores))[:, None]).T @ basis.values
    ses = np.sqrt(np.diag(np.linalg.inv(info)))
    np.testing.assert_array_less(np.abs(fitted.theta - [-1.0, 2.0]), 3.0 * ses)


# -------------------------------------------------------- selection augment

def test_selection_augment_deterministic_compliance_extreme():
    rng = np.random.default_rng(30)
    n = 200
    x = rng.uniform(size=(n, 1))
    z = (rng.uniform(size=n) < 0.5).astype(float)
    data = Dataset(y=np.zeros(n), d=z.copy(), z=z, x=x)
    at0 = selection_augment(data, "probit", at_z=0)
    at1 = selection_augment(data, "probit", at_z=1)
    assert at0.separation
    assert np.max(at0.values) <= 1e-6
    assert np.min(at1.values) >= 1.0 - 1e-6


def test_selection_probit_beats_logit_on_probit_truth():
    data, oracle = generate(RoyDesign("B", 0.05), 10_000, seed=31)
    probit = selection_augment(data, "probit", at_z=0)
    logit = selection_augment(data, "logit", at_z=0)
    msd_probit = float(np.mean((probit.values - oracle.ed0) ** 2))
    msd_logit = float(np.mean((logit.values - oracle.ed0) ** 2))
    assert msd_probit < msd_logit


def test_selection_at_z_monotone_in_instrument_coefficient():
    data, _ = generate(RoyDesign("B", 0.05), 2000, seed=32)
    at0 = selection_augment(data, "probit", at_z=0)
    at1 = selection_augment(data, "probit", at_z=1)
    assert at1.coef[-1] >= 0.0
    assert np.all(at1.values >= at0.values)


def test_selection_rejects_bad_arguments(perfect_complier_data):
    with pytest.raises(ValidationError):
        selection_augment(perfect_complier_data, "probit", at_z=2)
    with pytest.raises(ValidationError):
        selection_augment(perfect_complier_data, "cauchit", at_z=0)


# ---------------------------------------------------------- method dispatch

def test_design_a_oracle_selection_collapses_to_wald():
    design = RoyDesign("A", 0.05)
    for seed in (0, 1, 2):
        data, oracle = generate(design, 800, seed=seed)
        wald = estimate_wald(data)
        bd = estimate_method(data, method_from_label("B(D)", oracle_d0=oracle.ed0))
        assert abs(bd.tau_hat - wald.tau_hat) <= 1e-10
        assert bd.diagnostics["dropped_columns"] == ["E[D(0)|X]"]


def test_design_a_oracle_with_covariates_collapses_onto_bx():
    # the constant take-up column drops, leaving the same basis as B(X)
    data, oracle = generate(RoyDesign("A", 0.05), 600, seed=3)
    bdx = estimate_method(data, method_from_label("B(D,X)", oracle_d0=oracle.ed0))
    bx = estimate_method(data, "B(X)")
    assert bdx.tau_hat == bx.tau_hat
    assert bdx.diagnostics["dropped_columns"] == ["E[D(0)|X]"]


def test_mle2_equals_balanced_on_intercept_only_basis():
    data = random_logistic_dataset(33, n=300, p=0)
    mle2 = estimate_method(data, "MLE2")
    bx = estimate_method(data, "B(X)")
    assert mle2.tau_hat == pytest.approx(bx.tau_hat, abs=1e-10)


def test_estimated_selection_methods_run_end_to_end():
    data, _ = generate(RoyDesign("B", 0.05), 1000, seed=34)
    for label in ("B(Dhat)", "B(Dhat_m)"):
        est = estimate_method(data, label)
        assert np.isfinite(est.tau_hat)
        assert est.diagnostics["converged"]
        assert est.diagnostics["selection_link"] == (
            "probit" if label == "B(Dhat)" else "logit"
        )


def test_near_collinear_balancing_basis_fails_loudly():
    data, oracle = generate(RoyDesign("B", 0.05), 400, seed=35)
    # a second column differing from the first by 1e-8 noise: not an exact
    # duplicate, so it must surface as a failure, not be silently dropped
    shadow = data.x[:, 0] + 1e-8 * np.random.default_rng(0).standard_normal(400)
    spec = MethodSpec("B(D,X)", selection="oracle", oracle_d0=shadow)
    with pytest.raises(EstimationError, match="collinear|condition|converge"):
        estimate_method(data, spec)


def test_oracle_method_requires_probabilities():
    with pytest.raises(ValidationError, match="oracle"):
        method_from_label("B(D)")


def test_unknown_label_rejected():
    with pytest.raises(ValidationError, match="unknown method label"):
        method_from_label("OLS")


def test_custom_method_uses_supplied_basis():
    data = random_logistic_dataset(36, n=300, p=1)
    est = estimate_method(
        data, method_from_label("custom", basis=BasisSpec("power", power_order=3))
    )
    assert np.isfinite(est.tau_hat)


# ------------------------------------------------------------- equivariance

def test_shift_invariance_with_balanced_intercept():
    data = random_logistic_dataset(37, n=400, p=2)
    baseline = estimate_method(data, "B(X)")
    shifted = Dataset(data.y + 11.5, data.d, data.z, data.x)
    est = estimate_method(shifted, "B(X)")
    assert abs(est.tau_hat - baseline.tau_hat) <= 1e-12


def test_shift_moves_delta_by_weight_imbalance_for_likelihood_fit():
    data = random_logistic_dataset(42, n=300, p=2)
    fitted = fit_mle_propensity(raw_basis(data.x), data.z)
    base = estimate_ipw(data, fitted, method="MLE")
    c = 4.25
    shifted = Dataset(data.y + c, data.d, data.z, data.x)
    moved = estimate_ipw(shifted, fitted, method="MLE")
    s1 = np.mean(data.z / fitted.scores)
    s0 = np.mean((1.0 - data.z) / (1.0 - fitted.scores))
    assert moved.delta_hat - base.delta_hat == pytest.approx(c * (s1 - s0), rel=1e-10)


@pytest.mark.parametrize("label", ["Wald", "IV", "MLE", "B(X)"])
def test_scale_equivariance(label):
    data = random_logistic_dataset(38, n=400, p=2)
    baseline = estimate_method(data, label)
    scaled = Dataset(3.0 * data.y, data.d, data.z, data.x)
    est = estimate_method(scaled, label)
    assert est.tau_hat == pytest.approx(3.0 * baseline.tau_hat, rel=1e-12)


# -------------------------------------------------------- asymptotic variance

def test_asymptotic_variance_positive_and_scales():
    data = random_logistic_dataset(39, n=500, p=2)
    basis = raw_basis(data.x)
    fitted = fit(basis, data.z)
    est = estimate_ipw(data, fitted)
    v, se = asymptotic_variance(data, fitted, basis, est.tau_hat)
    assert v > 0 and se > 0
    scaled = Dataset(5.0 * data.y, data.d, data.z, data.x)
    est5 = estimate_ipw(scaled, fitted)
    assert est5.tau_hat == pytest.approx(5.0 * est.tau_hat, rel=1e-12)
    _, se5 = asymptotic_variance(scaled, fitted, basis, est5.tau_hat)
    assert se5 == pytest.approx(5.0 * se, rel=1e-10)


def test_asymptotic_variance_rejects_singular_projection():
    data = random_logistic_dataset(40, n=200, p=1)
    basis = raw_basis(data.x)
    fitted = fit(basis, data.z)
    bad = np.column_stack([basis.values, basis.values[:, -1]])
    with pytest.raises(ValidationError, match="smaller basis"):
        asymptotic_variance(data, fitted, bad, 0.0)


# ------------------------------------------------------------------ bootstrap

def test_bootstrap_degenerate_outcome_gives_zero_se():
    n = 40
    z = np.tile([1.0, 0.0], 20)
    data = Dataset(y=np.full(n, 7.0), d=z.copy(), z=z, x=np.empty((n, 0)))
    result = bootstrap_se(data, "Wald", n_boot=50, seed=1)
    assert result.se == 0.0
    assert result.interval == (0.0, 0.0)


def test_bootstrap_is_deterministic():
    data = random_logistic_dataset(41, n=150, p=1)
    a = bootstrap_se(data, "B(X)", n_boot=60, seed=9)
    b = bootstrap_se(data, "B(X)", n_boot=60, seed=9)
    assert a.se == b.se and a.interval == b.interval


def test_bootstrap_agrees_with_asymptotic_se():
    data, _ = generate(RoyDesign("B", 0.05), 1000, seed=77)
    est = estimate_method(data, "B(X)", compute_se=True)
    boot = bootstrap_se(data, "B(X)", n_boot=500, seed=5)
    assert abs(boot.se - est.se) / est.se <= 0.2
    assert boot.n_failed == 0


def test_bootstrap_raises_when_too_many_replicates_fail():
    z = np.array([1.0, 0.0, 0.0, 0.0])
    data = Dataset(y=np.arange(4.0), d=z.copy(), z=z, x=np.empty((4, 0)))
    with pytest.raises(EstimationError, match="bootstrap unreliable"):
        bootstrap_se(data, "Wald", n_boot=100, seed=2)


def test_bootstrap_requires_two_replicates(perfect_complier_data):
    with pytest.raises(ValidationError, match="at least 2"):
        bootstrap_se(perfect_complier_data, "Wald", n_boot=1, seed=0)


# -------------------------------------------- ratio-unbiasedness (oracle basis)

def test_oracle_balancing_ratio_is_unbiased_on_homogeneous_design():
    design = RoyDesign("B", 0.05)
    truth = true_late(design)
    gaps = []
    for rep in range(2000):
        data, oracle = generate(design, 500, np.random.SeedSequence((606, rep)))
        try:
            est = estimate_method(
                data, method_from_label("B(D)", oracle_d0=oracle.ed0)
            )
        except EstimationError:
            continue
        gaps.append(est.delta_hat - truth * est.gamma_hat)
    gaps = np.asarray(gaps)
    mc_se = gaps.std(ddof=1) / np.sqrt(gaps.size)
    assert abs(gaps.mean()) <= 3.0 * mc_se
