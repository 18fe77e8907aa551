"""RBF covariance functions with grouped length-scales and log-space gradients.

The kernel is

    k(x, x') = sigma_f^2 * exp(-0.5 * sum_d (x_d - x'_d)^2 / l_{g(d)}^2)

where each input dimension d belongs to a group g(d) sharing one
length-scale.  A single group gives the isotropic kernel; one group per
dimension (or per data modality) gives the ARD variant.  All
hyperparameters live in log-space so that downstream optimization is
unconstrained.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.linalg import LinAlgError
from scipy.linalg import cholesky
from scipy.spatial.distance import cdist

from .errors import NumericError

# Jitter escalation policy for near-singular covariance matrices:
# start at 1e-8 * mean(diag), multiply by 10 up to 1e-2 * mean(diag).
_JITTER_START = 1e-8
_JITTER_MAX = 1e-2


@dataclass(frozen=True)
class FeatureGrouping:
    """Assignment of each input dimension to a length-scale group.

    ``group_of[d]`` is the group index of dimension d; groups must be the
    contiguous labels 0..G-1 and every dimension maps to exactly one group.
    """

    group_of: np.ndarray

    def __post_init__(self):
        g = np.asarray(self.group_of, dtype=int)
        object.__setattr__(self, "group_of", g)
        if g.ndim != 1 or g.size == 0:
            raise ValueError("group_of must be a nonempty 1-d array")
        labels = np.unique(g)
        if not np.array_equal(labels, np.arange(labels.size)):
            raise ValueError("group labels must be contiguous 0..G-1")

    @property
    def n_dims(self) -> int:
        return int(self.group_of.size)

    @property
    def n_groups(self) -> int:
        return int(self.group_of.max()) + 1


def iso_grouping(n_dims: int) -> FeatureGrouping:
    """All dimensions share one length-scale (isotropic kernel)."""
    return FeatureGrouping(np.zeros(n_dims, dtype=int))


def per_dim_grouping(n_dims: int) -> FeatureGrouping:
    """One length-scale per raw dimension (classic ARD)."""
    return FeatureGrouping(np.arange(n_dims))


def modality_grouping(group_of) -> FeatureGrouping:
    """Grouped ARD: one length-scale per data modality."""
    return FeatureGrouping(np.asarray(group_of, dtype=int))


@dataclass(frozen=True)
class Hyperparams:
    """Kernel hyperparameters, stored in log-space.

    ``log_lengthscales`` has one entry per group (length 1 for iso).
    ``log_noise_var`` is the observation-noise variance sigma^2 added to
    the kernel diagonal, not part of the noise-free kernel itself.
    """

    log_lengthscales: np.ndarray
    log_signal_var: float
    log_noise_var: float

    def __post_init__(self):
        ls = np.atleast_1d(np.asarray(self.log_lengthscales, dtype=float))
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_signal_var", float(self.log_signal_var))
        object.__setattr__(self, "log_noise_var", float(self.log_noise_var))
        if not np.all(np.isfinite(ls)):
            raise ValueError("non-finite log length-scales")

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def signal_var(self) -> float:
        return float(np.exp(self.log_signal_var))

    @property
    def noise_var(self) -> float:
        return float(np.exp(self.log_noise_var))

    @property
    def n_params(self) -> int:
        return self.log_lengthscales.size + 2

    def to_vector(self) -> np.ndarray:
        """Flatten as [log lengthscales..., log signal var, log noise var]."""
        return np.concatenate(
            [self.log_lengthscales, [self.log_signal_var, self.log_noise_var]]
        )

    @staticmethod
    def from_vector(theta: np.ndarray) -> "Hyperparams":
        theta = np.asarray(theta, dtype=float)
        return Hyperparams(theta[:-2], theta[-2], theta[-1])


def _check_dims(X: np.ndarray, grouping: FeatureGrouping):
    if X.ndim != 2:
        raise ValueError("expected a 2-d array of row vectors")
    if X.shape[1] != grouping.n_dims:
        raise ValueError(
            f"input has {X.shape[1]} dims but grouping covers {grouping.n_dims}"
        )


def _group_sq_dists(X, X2, hp, grouping):
    """Per-group squared distances, already scaled by the group length-scale."""
    ls = hp.lengthscales
    out = []
    for g in range(grouping.n_groups):
        idx = np.flatnonzero(grouping.group_of == g)
        out.append(
            cdist(X[:, idx] / ls[g], X2[:, idx] / ls[g], metric="sqeuclidean")
        )
    return out


def kernel_matrix(X, X2, hp: Hyperparams, grouping: FeatureGrouping) -> np.ndarray:
    """Cross-covariance matrix between two sets of row vectors (noise-free)."""
    X = np.asarray(X, dtype=float)
    X2 = np.asarray(X2, dtype=float)
    _check_dims(X, grouping)
    _check_dims(X2, grouping)
    if hp.log_lengthscales.size != grouping.n_groups:
        raise ValueError("length-scale count does not match grouping")
    total = sum(_group_sq_dists(X, X2, hp, grouping))
    return hp.signal_var * np.exp(-0.5 * total)


def kernel_value(x, x2, hp: Hyperparams, grouping: FeatureGrouping) -> float:
    """Kernel evaluated at a single pair of vectors."""
    x = np.asarray(x, dtype=float).ravel()
    x2 = np.asarray(x2, dtype=float).ravel()
    if x.size != x2.size:
        raise ValueError("vectors have different lengths")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(x2))):
        raise ValueError("non-finite kernel input")
    return float(kernel_matrix(x[None, :], x2[None, :], hp, grouping)[0, 0])


def kernel_gradients(X, hp: Hyperparams, grouping: FeatureGrouping) -> list:
    """Gradients of K(X, X) + sigma^2 I w.r.t. each log-space hyperparameter.

    Order matches ``Hyperparams.to_vector``: one matrix per group
    length-scale, then signal variance, then noise variance.  The
    signal-variance gradient equals the noise-free K itself; the noise
    gradient is sigma^2 * I.
    """
    X = np.asarray(X, dtype=float)
    _check_dims(X, grouping)
    if X.shape[0] == 0:
        raise ValueError("empty input")
    sq = _group_sq_dists(X, X, hp, grouping)
    K = hp.signal_var * np.exp(-0.5 * sum(sq))
    grads = [K * sq_g for sq_g in sq]  # d/dlog(l_g): K * scaled sqdist
    grads.append(K)
    grads.append(hp.noise_var * np.eye(X.shape[0]))
    return grads


def chol_with_jitter(A: np.ndarray):
    """Lower Cholesky factor of a symmetric PSD matrix, with escalating jitter.

    Returns (L, jitter_added).  Raises NumericError once the jitter would
    exceed 1e-2 * mean(diag).
    """
    mean_diag = float(np.mean(np.diag(A)))
    if mean_diag <= 0 or not np.isfinite(mean_diag):
        raise NumericError("covariance diagonal is not positive")
    try:
        return cholesky(A, lower=True), 0.0
    except LinAlgError:
        pass
    jitter = _JITTER_START * mean_diag
    while jitter <= _JITTER_MAX * mean_diag:
        try:
            L = cholesky(A + jitter * np.eye(A.shape[0]), lower=True)
            return L, jitter
        except LinAlgError:
            jitter *= 10.0
    raise NumericError(
        f"Cholesky failed after jitter escalation to {_JITTER_MAX:g}*mean(diag)"
    )
