"""Combining the two personalized experts with per-sample weights.

The combined forecast is the convex mixture alpha * corrected-posterior +
(1 - alpha) * subject-only.  Weights come from one of six schemes: a
per-visit argmin table, a per-visit win-frequency table, the constant 0.5,
inverse predictive variance, a meta-regression GP trained on
(meta-feature, optimal-weight) pairs from training subjects, or the
ground-truth optimum itself (an oracle used only as a lower bound).
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .gp import FitConfig, Forecast, GpModel, fit_sgp, predict_sgp
from .kernels import per_dim_grouping

META_RAW_DIM = 9
META_EXPANDED_DIM = 55  # 1 + 9 + 9*10/2 monomials of degree <= 2

SCHEME_TAGS = ("prior", "freq", "ave", "var", "reg", "opt", "rand")


@dataclass(frozen=True)
class MetaSample:
    """One training pair for the weight regression."""

    m: np.ndarray           # raw 9-vector [mu_p(4), mu_t(4), y_t]
    m_expanded: np.ndarray  # unit-norm quadratic expansion, length 55
    alpha_opt: float


@dataclass(frozen=True)
class WeightScheme:
    """Tagged weighting strategy with its fitted payload.

    ``table`` is a (n_visits, n_horizons) alpha grid for prior/freq;
    ``meta`` is the weight-regression GP for reg/rand.
    """

    tag: str
    table: np.ndarray | None = None
    meta: GpModel | None = None

    def __post_init__(self):
        if self.tag not in SCHEME_TAGS:
            raise ValueError(f"unknown scheme tag {self.tag!r}")


def mix(f_p: Forecast, f_t: Forecast, alpha: float) -> Forecast:
    """Convex mixture of two expert forecasts at a scalar weight."""
    a = float(alpha)
    if a < 0.0 or a > 1.0:
        warnings.warn(f"mixture weight {a:.4g} outside [0,1]; clamping")
        a = min(max(a, 0.0), 1.0)
    mean = a * f_p.mean + (1.0 - a) * f_t.mean
    var = a * a * f_p.variance + (1.0 - a) ** 2 * f_t.variance
    return Forecast(mean, var)


def optimal_alpha(mu_p, mu_t, y_true, mask) -> float:
    """Least-squares-optimal mixture weight over the masked-in horizons.

    Minimizes sum_k mask_k * (a*mu_p_k + (1-a)*mu_t_k - y_k)^2, clamped to
    [0,1].  When the experts agree (denominator ~ 0) returns 0.5.
    """
    mu_p = np.asarray(mu_p, dtype=float)
    mu_t = np.asarray(mu_t, dtype=float)
    y = np.asarray(y_true, dtype=float)
    m = np.asarray(mask, dtype=bool)
    if not m.any():
        raise ValueError("optimal weight needs at least one masked-in horizon")
    diff = (mu_p - mu_t)[m]
    num = float(np.sum((y - mu_t)[m] * diff))
    den = float(np.sum(diff * diff))
    if den < 1e-12:
        return 0.5
    return float(min(max(num / den, 0.0), 1.0))


def build_meta_features(mu_p, mu_t, y_t: float) -> np.ndarray:
    """Centered, quadratically expanded, unit-norm meta-feature vector.

    The raw 9-vector [mu_p, mu_t, y_t] is centered by the mean of its own
    elements, expanded to all monomials of degree <= 2 (constant, 9 linear,
    45 quadratic), and divided by its Euclidean norm.
    """
    raw = np.concatenate([np.ravel(mu_p), np.ravel(mu_t), [float(y_t)]])
    if raw.size != META_RAW_DIM:
        raise ValueError(f"expected {META_RAW_DIM} raw meta entries, got {raw.size}")
    if not np.all(np.isfinite(raw)):
        raise ValueError("non-finite meta-feature input")
    c = raw - raw.mean()
    out = np.empty(META_EXPANDED_DIM)
    out[0] = 1.0
    out[1:1 + META_RAW_DIM] = c
    pos = 1 + META_RAW_DIM
    for i in range(META_RAW_DIM):
        for j in range(i, META_RAW_DIM):
            out[pos] = c[i] * c[j]
            pos += 1
    return out / np.linalg.norm(out)


def make_meta_sample(mu_p, mu_t, y_t, y_true, mask) -> MetaSample:
    raw = np.concatenate([np.ravel(mu_p), np.ravel(mu_t), [float(y_t)]])
    return MetaSample(
        m=raw,
        m_expanded=build_meta_features(mu_p, mu_t, y_t),
        alpha_opt=optimal_alpha(mu_p, mu_t, y_true, mask),
    )


_META_FIT_DEFAULTS = FitConfig(init_log_noise=float(np.log(0.01)), noise_floor=1e-6)


def fit_meta_gp(samples, config: FitConfig | None = None) -> GpModel:
    """Weight-regression GP on expanded meta-features (per-dimension ARD).

    Accepts only training-fold samples by construction of the caller; the
    noise variance starts at 0.01 and is floored at 1e-6 so interpolation
    on the unit sphere stays sane.
    """
    if len(samples) < 10:
        raise ValueError("need at least 10 meta samples")
    if config is None:
        config = _META_FIT_DEFAULTS
    M = np.stack([s.m_expanded for s in samples])
    a = np.array([s.alpha_opt for s in samples])[:, None]
    return fit_sgp(M, a, per_dim_grouping(META_EXPANDED_DIM), config)


def predict_alpha(meta: GpModel, mu_p, mu_t, y_t) -> float:
    """Regressed mixture weight at a new sample, clamped to [0,1]."""
    phi = build_meta_features(mu_p, mu_t, y_t)
    f = predict_sgp(meta, phi)
    return float(min(max(f.mean[0], 0.0), 1.0))


def weights_prior(per_visit_mae: np.ndarray) -> WeightScheme:
    """Per-visit argmin table from average expert errors.

    ``per_visit_mae`` has shape (n_visits, n_horizons, 2) with the
    corrected-posterior expert first; NaN marks cells without data.
    Ties and empty cells go to the first expert (alpha = 1).
    """
    mae = np.asarray(per_visit_mae, dtype=float)
    if mae.ndim != 3 or mae.shape[2] != 2:
        raise ValueError("expected a (visits, horizons, 2) table")
    with np.errstate(invalid="ignore"):
        table = np.where(mae[:, :, 1] < mae[:, :, 0], 0.0, 1.0)
    return WeightScheme("prior", table=table)


def weights_freq(dominance: np.ndarray) -> WeightScheme:
    """Win-frequency table from a subject x visit x horizon dominance cube.

    Entries are -1 (first expert strictly better), +1 (second better), 0
    (no data).  alpha = wins / cells-with-data, 0.5 where no subject has
    data.
    """
    dom = np.asarray(dominance)
    if dom.ndim != 3:
        raise ValueError("expected (subjects, visits, horizons) dominance")
    wins = np.sum(dom == -1, axis=0).astype(float)
    have = np.sum(dom != 0, axis=0).astype(float)
    with np.errstate(invalid="ignore"):
        table = np.where(have > 0, wins / np.maximum(have, 1.0), 0.5)
    return WeightScheme("freq", table=table)


def weight_var(f_p: Forecast, f_t: Forecast) -> float:
    """Inverse-variance (precision) weight for the first expert."""
    vp, vt = f_p.variance, f_t.variance
    p_small, t_small = vp < 1e-12, vt < 1e-12
    if p_small and t_small:
        return 0.5
    if p_small:
        return 1.0
    if t_small:
        return 0.0
    return float((1.0 / vp) / (1.0 / vp + 1.0 / vt))


def table_alpha(scheme: WeightScheme, visit_index: int) -> np.ndarray:
    """Per-horizon weights from a table scheme at a (clipped) visit index."""
    if scheme.table is None:
        raise ValueError(f"scheme {scheme.tag!r} has no table")
    idx = min(max(int(visit_index), 0), scheme.table.shape[0] - 1)
    return scheme.table[idx]


def mix_per_horizon(f_p: Forecast, f_t: Forecast, alphas) -> np.ndarray:
    """Mixture mean with an independent weight per horizon."""
    a = np.clip(np.asarray(alphas, dtype=float), 0.0, 1.0)
    return a * f_p.mean + (1.0 - a) * f_t.mean
