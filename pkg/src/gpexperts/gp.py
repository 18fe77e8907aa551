"""Population-level GP with a shared covariance across output columns.

One kernel matrix serves all output columns (the four forecast horizons),
so a test point gets a 4-vector mean and a single scalar variance.  Targets
are centered by their per-column training means before fitting and the
means are added back at prediction time (``center_targets``).
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .errors import NumericError
from .kernels import (
    FeatureGrouping,
    Hyperparams,
    chol_with_jitter,
    kernel_gradients,
    kernel_matrix,
)
from .optimize import minimize_cg

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class Forecast:
    """Predictive distribution over a forecast window.

    ``mean`` has one entry per output column; ``variance`` is the single
    scalar shared across the window.  ``note`` carries provenance such as
    an empty-history fallback.
    """

    mean: np.ndarray
    variance: float
    note: str | None = None

    def __post_init__(self):
        m = np.atleast_1d(np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "mean", m)
        object.__setattr__(self, "variance", float(self.variance))
        if not np.all(np.isfinite(m)):
            raise ValueError("non-finite forecast mean")
        if self.variance < 0:
            raise ValueError("negative forecast variance")


@dataclass(frozen=True)
class GpModel:
    """Trained GP: hyperparameters plus cached solve products.

    ``chol`` is the lower Cholesky factor of K + sigma^2 I on the training
    inputs; ``alpha_cols`` is (K + sigma^2 I)^-1 (Y - y_mean).
    """

    hp: Hyperparams
    grouping: FeatureGrouping
    X_train: np.ndarray
    Y_train: np.ndarray
    y_mean: np.ndarray
    chol: np.ndarray
    alpha_cols: np.ndarray

    @property
    def n_train(self) -> int:
        return self.X_train.shape[0]

    @property
    def n_outputs(self) -> int:
        return self.Y_train.shape[1]


@dataclass(frozen=True)
class FitConfig:
    """Hyperparameter-optimization settings.

    ``n_restarts`` adds randomized starts on top of the heuristic
    initialization; the run with the lowest final NLML wins.
    ``max_fit_rows`` subsamples the rows used for the NLML optimization
    (the returned model still conditions on all rows).  ``noise_floor``
    bounds sigma^2 from below during optimization.
    """

    max_iter: int = 200
    gtol: float = 1e-5
    n_restarts: int = 3
    seed: int = 0
    center_targets: bool = True
    freeze_noise: bool = False
    noise_floor: float | None = None
    init_log_noise: float | None = None
    max_fit_rows: int | None = None


def nlml(hp: Hyperparams, grouping: FeatureGrouping, X, Y_centered) -> float:
    """Negative log marginal likelihood summed over output columns."""
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y_centered, dtype=float))
    C = kernel_matrix(X, X, hp, grouping) + hp.noise_var * np.eye(X.shape[0])
    L, _ = chol_with_jitter(C)
    alpha = cho_solve((L, True), Y)
    n, m = Y.shape
    data_fit = 0.5 * float(np.sum(Y * alpha))
    logdet = float(np.sum(np.log(np.diag(L))))  # 0.5*log|C| per column
    return data_fit + m * logdet + 0.5 * m * n * _LOG_2PI


def nlml_grad(hp: Hyperparams, grouping: FeatureGrouping, X, Y_centered) -> np.ndarray:
    """Gradient of the NLML w.r.t. the log-space hyperparameter vector."""
    return _nlml_and_grad(hp, grouping, X, Y_centered)[1]


def _nlml_and_grad(hp, grouping, X, Y_centered):
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y_centered, dtype=float))
    n, m = Y.shape
    C = kernel_matrix(X, X, hp, grouping) + hp.noise_var * np.eye(n)
    L, _ = chol_with_jitter(C)
    alpha = cho_solve((L, True), Y)
    value = (
        0.5 * float(np.sum(Y * alpha))
        + m * float(np.sum(np.log(np.diag(L))))
        + 0.5 * m * n * _LOG_2PI
    )
    # d(nlml)/dtheta = 0.5 * tr((m*C^-1 - alpha alpha^T) dC/dtheta)
    Cinv = cho_solve((L, True), np.eye(n))
    W = m * Cinv - alpha @ alpha.T
    grads = kernel_gradients(X, hp, grouping)
    g = np.array([0.5 * float(np.sum(W * dC)) for dC in grads])
    return value, g


def default_init(X, Y_centered, grouping: FeatureGrouping) -> Hyperparams:
    """Heuristic start: median pairwise distance per group, target variance."""
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y_centered, dtype=float))
    log_ls = np.zeros(grouping.n_groups)
    for g in range(grouping.n_groups):
        idx = np.flatnonzero(grouping.group_of == g)
        sub = X[:, idx]
        d2 = (
            np.sum(sub * sub, axis=1)[:, None]
            + np.sum(sub * sub, axis=1)[None, :]
            - 2.0 * sub @ sub.T
        )
        med = float(np.sqrt(np.maximum(d2[np.triu_indices_from(d2, k=1)], 0.0).mean()))
        log_ls[g] = np.log(max(med, 1e-3))
    var_y = float(np.var(Y)) + 1e-8
    return Hyperparams(log_ls, np.log(var_y), np.log(0.1 * var_y))


def build_model(hp, grouping, X, Y, center_targets=True) -> GpModel:
    """Condition on (X, Y) at fixed hyperparameters; caches the factorization."""
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    y_mean = Y.mean(axis=0) if center_targets else np.zeros(Y.shape[1])
    C = kernel_matrix(X, X, hp, grouping) + hp.noise_var * np.eye(X.shape[0])
    L, _ = chol_with_jitter(C)
    alpha = cho_solve((L, True), Y - y_mean)
    return GpModel(hp, grouping, X, Y, y_mean, L, alpha)


def fit_sgp(X, Y, grouping: FeatureGrouping, config: FitConfig = FitConfig()) -> GpModel:
    """Fit hyperparameters by NLML minimization, then condition on all rows."""
    X = np.asarray(X, dtype=float)
    Y = np.atleast_2d(np.asarray(Y, dtype=float))
    if X.shape[0] < 5:
        raise ValueError("need at least 5 training rows")
    if X.shape[0] != Y.shape[0]:
        raise ValueError("X and Y row counts differ")
    y_mean = Y.mean(axis=0) if config.center_targets else np.zeros(Y.shape[1])
    Yc = Y - y_mean

    rng = np.random.default_rng(config.seed)
    if config.max_fit_rows is not None and config.max_fit_rows < X.shape[0]:
        sel = rng.choice(X.shape[0], size=config.max_fit_rows, replace=False)
        sel.sort()
        X_fit, Y_fit = X[sel], Yc[sel]
    else:
        X_fit, Y_fit = X, Yc

    hp0 = default_init(X_fit, Y_fit, grouping)
    if config.init_log_noise is not None:
        hp0 = replace(hp0, log_noise_var=float(config.init_log_noise))
    theta0 = hp0.to_vector()

    frozen = np.zeros(theta0.size, dtype=bool)
    if config.freeze_noise:
        frozen[-1] = True
    lower = None
    if config.noise_floor is not None:
        lower = np.full(theta0.size, -np.inf)
        lower[-1] = np.log(config.noise_floor)

    def f(theta):
        try:
            return nlml(Hyperparams.from_vector(theta), grouping, X_fit, Y_fit)
        except NumericError:
            return np.inf

    def f_and_g(theta):
        return _nlml_and_grad(Hyperparams.from_vector(theta), grouping, X_fit, Y_fit)

    starts = [theta0]
    for _ in range(config.n_restarts):
        starts.append(theta0 + rng.normal(0.0, 0.3, size=theta0.size))
    best = None
    for start in starts:
        try:
            theta, value, _ = minimize_cg(
                f, f_and_g, start,
                max_iter=config.max_iter, gtol=config.gtol,
                lower=lower, frozen=frozen,
            )
        except NumericError:
            continue
        if best is None or value < best[1]:
            best = (theta, value)
    if best is None:
        raise NumericError("NLML optimization failed from every start")
    hp = Hyperparams.from_vector(best[0])
    return build_model(hp, grouping, X, Y, center_targets=config.center_targets)


def predict_sgp(model: GpModel, x_star) -> Forecast:
    """Posterior mean vector and shared scalar variance at one test point."""
    x = np.asarray(x_star, dtype=float).reshape(1, -1)
    if x.shape[1] != model.X_train.shape[1]:
        raise ValueError("test point dimension does not match training data")
    k_star = kernel_matrix(model.X_train, x, model.hp, model.grouping)  # (N,1)
    mean = model.y_mean + (k_star.T @ model.alpha_cols).ravel()
    v = solve_triangular(model.chol, k_star, lower=True)
    k_ss = model.hp.signal_var  # zero distance
    var = max(k_ss - float(v.T @ v), 0.0)
    return Forecast(mean, var)


# ---------------------------------------------------------------------------
# serialization (versioned npz record)

_MODEL_FORMAT_VERSION = 1


def model_to_arrays(model: GpModel, prefix: str = "") -> dict:
    """Flatten a model into npz-storable arrays under a key prefix."""
    return {
        prefix + "version": np.array(_MODEL_FORMAT_VERSION),
        prefix + "log_lengthscales": model.hp.log_lengthscales,
        prefix + "log_signal_var": np.array(model.hp.log_signal_var),
        prefix + "log_noise_var": np.array(model.hp.log_noise_var),
        prefix + "group_of": model.grouping.group_of,
        prefix + "X_train": model.X_train,
        prefix + "Y_train": model.Y_train,
        prefix + "y_mean": model.y_mean,
    }


def model_from_arrays(arrays, prefix: str = "") -> GpModel:
    """Rebuild a model (re-deriving the factorization) from stored arrays."""
    version = int(arrays[prefix + "version"])
    if version != _MODEL_FORMAT_VERSION:
        raise ValueError(f"unsupported model format version {version}")
    hp = Hyperparams(
        np.asarray(arrays[prefix + "log_lengthscales"], dtype=float),
        float(arrays[prefix + "log_signal_var"]),
        float(arrays[prefix + "log_noise_var"]),
    )
    grouping = FeatureGrouping(np.asarray(arrays[prefix + "group_of"], dtype=int))
    X = np.asarray(arrays[prefix + "X_train"], dtype=float)
    Y = np.asarray(arrays[prefix + "Y_train"], dtype=float)
    y_mean = np.asarray(arrays[prefix + "y_mean"], dtype=float)
    C = kernel_matrix(X, X, hp, grouping) + hp.noise_var * np.eye(X.shape[0])
    L, _ = chol_with_jitter(C)
    alpha = cho_solve((L, True), Y - y_mean)
    return GpModel(hp, grouping, X, Y, y_mean, L, alpha)


def save_model(path, model: GpModel):
    np.savez(path, **model_to_arrays(model))


def load_model(path) -> GpModel:
    with np.load(path) as data:
        return model_from_arrays(data)
