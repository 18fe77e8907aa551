"""Per-subject adaptation of a population GP.

Two experts share the population model's hyperparameters:

* the corrected posterior, which treats the population posterior at the
  subject's past inputs as a conditional prior and corrects it with the
  subject's observed windows;
* the subject-only GP, whose kernel matrix is built from the subject's
  history alone and grows by one row per observed visit.

With no history both fall back to the population prediction.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .gp import Forecast, GpModel, predict_sgp
from .kernels import chol_with_jitter, kernel_matrix


@dataclass(frozen=True)
class SubjectHistory:
    """Time-ordered (input, target-window) pairs observed so far; may be empty."""

    X_hist: np.ndarray
    Y_hist: np.ndarray

    def __post_init__(self):
        X = np.asarray(self.X_hist, dtype=float)
        Y = np.asarray(self.Y_hist, dtype=float)
        if X.ndim != 2 or Y.ndim != 2:
            raise ValueError("history arrays must be 2-d")
        if X.shape[0] != Y.shape[0]:
            raise ValueError("history X and Y row counts differ")
        object.__setattr__(self, "X_hist", X)
        object.__setattr__(self, "Y_hist", Y)

    @property
    def n(self) -> int:
        return self.X_hist.shape[0]

    @staticmethod
    def empty(n_dims: int, n_outputs: int = 4) -> "SubjectHistory":
        return SubjectHistory(np.empty((0, n_dims)), np.empty((0, n_outputs)))


def conditional_prior(model: GpModel, X_pts):
    """Population posterior, jointly, at a set of points.

    Returns (mean, cov): mean is (t, m) with the training target means
    added back; cov is the full (t, t) cross-covariance, one matrix shared
    by all output columns.
    """
    X_pts = np.asarray(X_pts, dtype=float)
    if X_pts.ndim != 2 or X_pts.shape[0] == 0:
        raise ValueError("need a nonempty 2-d array of points")
    K_sp = kernel_matrix(model.X_train, X_pts, model.hp, model.grouping)  # (N,t)
    mean = model.y_mean + K_sp.T @ model.alpha_cols
    V = solve_triangular(model.chol, K_sp, lower=True)
    K_pp = kernel_matrix(X_pts, X_pts, model.hp, model.grouping)
    cov = K_pp - V.T @ V
    return mean, cov


def predict_pgp(model: GpModel, hist: SubjectHistory, x_star) -> Forecast:
    """Population forecast plus a history-driven correction term.

    Conditions the population posterior over history + test point on the
    subject's observed windows.  Empty history returns the population
    forecast unchanged.
    """
    if hist.n == 0:
        return predict_sgp(model, x_star)
    x = np.asarray(x_star, dtype=float).reshape(1, -1)
    if x.shape[1] != hist.X_hist.shape[1]:
        raise ValueError("test point dimension does not match history")
    pts = np.vstack([hist.X_hist, x])
    mean, cov = conditional_prior(model, pts)
    t = hist.n
    return _corrected_forecast(
        mu_star=mean[t],
        v_star=float(cov[t, t]),
        cross=cov[:t, t],
        prior_mean=mean[:t],
        prior_cov=cov[:t, :t],
        Y_hist=hist.Y_hist,
        noise_var=model.hp.noise_var,
    )


def _corrected_forecast(mu_star, v_star, cross, prior_mean, prior_cov,
                        Y_hist, noise_var) -> Forecast:
    B = prior_cov + noise_var * np.eye(prior_cov.shape[0])
    L, _ = chol_with_jitter(B)
    w = cho_solve((L, True), cross)
    mean = mu_star + (Y_hist - prior_mean).T @ w
    var = max(v_star - float(cross @ w), 0.0)
    return Forecast(mean, var)


def predict_tgp(model: GpModel, hist: SubjectHistory, x_star) -> Forecast:
    """GP posterior built on the subject's history only.

    Reuses the population hyperparameters and target means; with no
    history defined as the population forecast (flagged in the note).
    """
    if hist.n == 0:
        f = predict_sgp(model, x_star)
        return Forecast(f.mean, f.variance, "sgp-fallback")
    x = np.asarray(x_star, dtype=float).reshape(1, -1)
    if x.shape[1] != hist.X_hist.shape[1]:
        raise ValueError("test point dimension does not match history")
    hp, grouping = model.hp, model.grouping
    K = kernel_matrix(hist.X_hist, hist.X_hist, hp, grouping)
    K += hp.noise_var * np.eye(hist.n)
    L, _ = chol_with_jitter(K)
    k_star = kernel_matrix(hist.X_hist, x, hp, grouping)[:, 0]
    w = cho_solve((L, True), k_star)
    mean = model.y_mean + (hist.Y_hist - model.y_mean).T @ w
    var = max(hp.signal_var - float(k_star @ w), 0.0)
    return Forecast(mean, var)


def sequential_forecasts(model: GpModel, X_subj, causal_targets):
    """Per-visit population / corrected / subject-only forecasts, efficiently.

    ``X_subj`` stacks a subject's visit inputs in time order;
    ``causal_targets(j)`` must return the (j, m) history target matrix as
    known at visit j.  The population posterior over all visits is solved
    once and sliced per visit, which matches the one-visit-at-a-time
    predictions up to rounding.  Returns three lists of Forecasts.
    """
    X_subj = np.asarray(X_subj, dtype=float)
    T = X_subj.shape[0]
    mean_all, cov_all = conditional_prior(model, X_subj)
    noise = model.hp.noise_var
    sgp_out, pgp_out, tgp_out = [], [], []
    hp, grouping = model.hp, model.grouping
    K_subj = kernel_matrix(X_subj, X_subj, hp, grouping)
    for j in range(T):
        v_star = max(float(cov_all[j, j]), 0.0)
        f_s = Forecast(mean_all[j], v_star)
        sgp_out.append(f_s)
        if j == 0:
            pgp_out.append(f_s)
            tgp_out.append(Forecast(f_s.mean, f_s.variance, "sgp-fallback"))
            continue
        Y_hist = np.asarray(causal_targets(j), dtype=float)
        pgp_out.append(
            _corrected_forecast(
                mu_star=mean_all[j],
                v_star=float(cov_all[j, j]),
                cross=cov_all[:j, j],
                prior_mean=mean_all[:j],
                prior_cov=cov_all[:j, :j],
                Y_hist=Y_hist,
                noise_var=noise,
            )
        )
        Kt = K_subj[:j, :j] + noise * np.eye(j)
        Lt, _ = chol_with_jitter(Kt)
        w = cho_solve((Lt, True), K_subj[:j, j])
        mean_t = model.y_mean + (Y_hist - model.y_mean).T @ w
        var_t = max(hp.signal_var - float(K_subj[:j, j] @ w), 0.0)
        tgp_out.append(Forecast(mean_t, var_t))
    return sgp_out, pgp_out, tgp_out
