"""Treatment-effect estimators on the treated (ATT) and the ATE extension.

All weighted estimators are self-normalized (weights divided by their sum), so
they are invariant to rescaling raw weights by any positive constant. The
density-ratio estimator weights every control unit by p(x | treated) /
p(x | control) evaluated at its covariates:

    ATT_hat = mean(y1 over treated)
              - sum_c ratio_c * y0_c / sum_c ratio_c.

The doubly-robust wrapper accepts any normalized weight vector together with
any fitted outcome model for the control arm.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import Dataset
from .flow import density_ratio


class EstimatorError(ValueError):
    """Raised on degenerate inputs (empty groups, bad weights, no overlap)."""


def effective_sample_size(w: np.ndarray) -> float:
    w = np.asarray(w, dtype=np.float64)
    return float(w.sum() ** 2 / np.sum(w * w))


@dataclass
class WeightVector:
    """Positive per-control-unit weights plus their normalized form."""

    unit_ids: np.ndarray
    raw: np.ndarray
    normalized: np.ndarray = field(init=False)

    def __post_init__(self):
        self.unit_ids = np.asarray(self.unit_ids, dtype=np.int64)
        self.raw = np.asarray(self.raw, dtype=np.float64)
        if self.raw.shape != self.unit_ids.shape:
            raise EstimatorError("unit_ids and raw weights must align")
        if not np.all(np.isfinite(self.raw)):
            bad = self.unit_ids[~np.isfinite(self.raw)]
            raise EstimatorError(f"non-finite weights for units {bad.tolist()[:10]}")
        if np.any(self.raw <= 0):
            bad = self.unit_ids[self.raw <= 0]
            raise EstimatorError(f"non-positive weights for units {bad.tolist()[:10]}")
        self.normalized = self.raw / self.raw.sum()
        if abs(self.normalized.sum() - 1.0) > 1e-12:
            raise EstimatorError("normalized weights do not sum to 1")

    def summary(self) -> tuple[float, float, float]:
        return float(self.raw.min()), float(self.raw.max()), effective_sample_size(self.raw)


@dataclass
class EstimateReport:
    estimator_name: str
    att_hat: float
    n1: int
    n0: int
    weight_summary: tuple[float, float, float]
    replication: int = 0

    CSV_HEADER = "estimator_name,replication,att_hat,n1,n0,ess,min_w,max_w"

    def __post_init__(self):
        if self.n1 <= 0 or self.n0 <= 0:
            raise EstimatorError("both treatment groups must be non-empty")

    def to_csv_row(self) -> str:
        lo, hi, ess = self.weight_summary
        return ",".join(
            [
                self.estimator_name,
                str(self.replication),
                repr(float(self.att_hat)),
                str(self.n1),
                str(self.n0),
                repr(float(ess)),
                repr(float(lo)),
                repr(float(hi)),
            ]
        )


@dataclass
class PropensityModel:
    """Logistic model of treatment assignment; intercept-first coefficients."""

    coefficients: np.ndarray

    def predict(self, X: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        t = self.coefficients[0] + X @ self.coefficients[1:]
        return 0.5 * (1.0 + np.tanh(0.5 * t))


def _split(data: Dataset):
    treated = data.W == 1
    if not treated.any() or treated.all():
        raise EstimatorError("both treatment groups must be non-empty")
    return treated, ~treated


def _uniform_summary(n0: int) -> tuple[float, float, float]:
    return (1.0, 1.0, float(n0))


def att_base(data: Dataset, replication: int = 0) -> EstimateReport:
    """Unadjusted difference of observed group means."""
    treated, control = _split(data)
    att = float(data.y_obs[treated].mean() - data.y_obs[control].mean())
    return EstimateReport(
        "base", att, int(treated.sum()), int(control.sum()), _uniform_summary(control.sum()), replication
    )


def dlw_weights(data: Dataset, model_t, model_c) -> WeightVector:
    """Density-ratio weights for the control group."""
    _, control = _split(data)
    ids = np.flatnonzero(control)
    ratios = density_ratio(model_t, model_c, data.X[ids])
    finite = np.isfinite(ratios)
    if not finite.all():
        raise EstimatorError(f"non-finite density ratio for units {ids[~finite].tolist()[:10]}")
    return WeightVector(unit_ids=ids, raw=ratios)


def att_dlw(data: Dataset, model_t, model_c, replication: int = 0) -> EstimateReport:
    """Density-ratio weighting: self-normalized control mean vs treated mean.

    Models only need a log_prob method; analytic densities can stand in for
    fitted flows to isolate the weighting step from density estimation.
    """
    treated, control = _split(data)
    weights = dlw_weights(data, model_t, model_c)
    control_mean = float(weights.normalized @ data.y_obs[weights.unit_ids])
    att = float(data.y_obs[treated].mean() - control_mean)
    return EstimateReport(
        "dlw", att, int(treated.sum()), int(control.sum()), weights.summary(), replication
    )


def ate_dlw(data: Dataset, model_t, model_c) -> float:
    """ATE via density-ratio weights on both groups.

    Treated weights P(W=1) + P(W=0)/ratio and control weights
    P(W=0) + P(W=1)*ratio re-weight each group toward the pooled covariate
    law; group shares estimate P(W=w).
    """
    treated, control = _split(data)
    n = data.W.size
    p1 = treated.sum() / n
    p0 = 1.0 - p1
    r_t = density_ratio(model_t, model_c, data.X[treated])
    r_c = density_ratio(model_t, model_c, data.X[control])
    if not (np.all(np.isfinite(r_t)) and np.all(np.isfinite(r_c))):
        raise EstimatorError("non-finite density ratio in ATE weighting")
    w_t = p1 + p0 / r_t
    w_c = p0 + p1 * r_c
    mean_t = float(w_t @ data.y_obs[treated] / w_t.sum())
    mean_c = float(w_c @ data.y_obs[control] / w_c.sum())
    return mean_t - mean_c


def fit_propensity_logistic(data: Dataset, max_iter: int = 100) -> PropensityModel:
    """Newton-Raphson logistic regression of W on [1, X] to grad-norm < 1e-8."""
    X = np.column_stack([np.ones(data.W.size), data.X])
    y = data.W.astype(np.float64)
    beta = np.zeros(X.shape[1])
    for _ in range(max_iter):
        t = X @ beta
        p = 0.5 * (1.0 + np.tanh(0.5 * t))
        grad = X.T @ (y - p)
        if np.max(np.abs(grad)) < 1e-8:
            break
        s = np.maximum(p * (1.0 - p), 1e-12)
        hess = (X * s[:, None]).T @ X
        hess[np.diag_indices_from(hess)] += 1e-10
        beta = beta + np.linalg.solve(hess, grad)
        if np.max(np.abs(beta)) > 50.0:
            raise EstimatorError("separation detected: coefficients diverged beyond |b| > 50")
    else:
        raise EstimatorError("logistic regression did not converge")
    return PropensityModel(coefficients=beta)


def iptw_weights(data: Dataset, ps: PropensityModel) -> WeightVector:
    """Propensity-odds weights e/(1-e) for control units; guards overlap."""
    _, control = _split(data)
    e = ps.predict(data.X)
    bad = (e < 1e-6) | (e > 1.0 - 1e-6)
    if bad.any():
        raise EstimatorError(
            f"propensity outside [1e-6, 1-1e-6] for units {np.flatnonzero(bad).tolist()[:10]}"
        )
    ids = np.flatnonzero(control)
    return WeightVector(unit_ids=ids, raw=e[ids] / (1.0 - e[ids]))


def att_iptw(data: Dataset, ps: PropensityModel, replication: int = 0) -> EstimateReport:
    """Inverse-probability weighting for ATT with fitted propensities."""
    treated, control = _split(data)
    weights = iptw_weights(data, ps)
    control_mean = float(weights.normalized @ data.y_obs[weights.unit_ids])
    att = float(data.y_obs[treated].mean() - control_mean)
    return EstimateReport(
        "iptw", att, int(treated.sum()), int(control.sum()), weights.summary(), replication
    )


def att_doubly_robust(
    data: Dataset,
    weights: WeightVector,
    outcome,
    name: str = "dr",
    replication: int = 0,
) -> EstimateReport:
    """Outcome-model prediction for the treated plus weighted control residuals.

    counterfactual = mean over treated of h0(x)
                     + sum_c normalized_weight_c * (y0_c - h0(x_c)).
    The outcome model must be fitted on control units only.
    """
    treated, control = _split(data)
    if not getattr(outcome, "is_fitted", False):
        raise EstimatorError("outcome model is not fitted")
    h_treated = outcome.predict(data.X[treated])
    h_control = outcome.predict(data.X[weights.unit_ids])
    residual = float(weights.normalized @ (data.y_obs[weights.unit_ids] - h_control))
    counterfactual = float(h_treated.mean()) + residual
    att = float(data.y_obs[treated].mean()) - counterfactual
    return EstimateReport(
        name, att, int(treated.sum()), int(control.sum()), weights.summary(), replication
    )


def bayes_identity_deviations(true_e, model_t, model_c, sample: np.ndarray, p1: float) -> np.ndarray:
    """|ratio / (odds(x) * (1-p1)/p1) - 1| per sample row.

    The density ratio p(x|treated)/p(x|control) must equal the propensity odds
    e/(1-e) scaled by the prior odds; this measures how far the fitted ratio
    deviates from that identity.
    """
    sample = np.atleast_2d(np.asarray(sample, dtype=np.float64))
    ratio = np.asarray(density_ratio(model_t, model_c, sample), dtype=np.float64)
    e = np.asarray(true_e(sample), dtype=np.float64)
    analytic = e / (1.0 - e) * ((1.0 - p1) / p1)
    return np.abs(ratio / analytic - 1.0)


def verify_bayes_identity(true_e, model_t, model_c, sample: np.ndarray, p1: float) -> float:
    """Maximum relative deviation from the odds identity; 0 means exact."""
    return float(np.max(bayes_identity_deviations(true_e, model_t, model_c, sample, p1)))
