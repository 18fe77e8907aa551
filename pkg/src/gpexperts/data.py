"""Longitudinal cohort model: CSV ingestion, imputation, normalization,
forecast-window construction, and a synthetic cohort generator.

Visits sit on an integer grid (6-month spacing); absent indices are
missing visits.  The pipeline order is fixed: forward-fill imputation,
z-normalization with training-fold statistics, then window construction.
Forecast targets stay in raw score units; the current score appended as a
predictor is z-normalized like any feature.
"""

from __future__ import annotations

import csv
import logging
import re
from dataclasses import dataclass, replace

import numpy as np

from .errors import ConfigError, DataError

log = logging.getLogger(__name__)

HORIZONS = 4
SCORE_MIN = 0.0
SCORE_MAX = 85.0

GROUP_LABELS = ("CN", "CN->MCI", "MCI", "AD")


@dataclass(frozen=True)
class Visit:
    """One time point: feature vector, target score, and observation flags."""

    visit_index: int
    features: np.ndarray      # NaN = missing before imputation
    score: float              # NaN = missing before imputation
    feat_observed: np.ndarray
    score_observed: bool


@dataclass(frozen=True)
class Subject:
    id: str
    visits: tuple
    group_label: str | None = None

    def __post_init__(self):
        idx = [v.visit_index for v in self.visits]
        if len(self.visits) == 0:
            raise DataError(f"subject {self.id} has no visits")
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise DataError(f"subject {self.id}: visit indices not strictly increasing")


@dataclass(frozen=True)
class Cohort:
    subjects: tuple
    feature_names: tuple
    modality_of: np.ndarray  # per-feature modality index (0-based)

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def subject_ids(self):
        return [s.id for s in self.subjects]

    def subject(self, sid: str) -> Subject:
        for s in self.subjects:
            if s.id == sid:
                return s
        raise KeyError(sid)


@dataclass(frozen=True)
class NormStats:
    """Per-feature z-normalization statistics from training folds only.

    Constant features are dropped; ``kept`` indexes the surviving columns
    of the original feature vector.  ``y_mean``/``y_std`` normalize the
    current score when appended as a predictor.
    """

    mean: np.ndarray
    std: np.ndarray
    kept: np.ndarray
    dropped: np.ndarray
    y_mean: float
    y_std: float


@dataclass(frozen=True)
class WindowSample:
    """One forecasting sample: dense input at visit t, four future targets.

    ``mask`` is True only where the target grid point has a genuinely
    observed score; repeated/carried-forward entries are False.
    """

    subject_id: str
    t: int
    x: np.ndarray
    y_future: np.ndarray
    mask: np.ndarray
    y_current: float


class ScoreSeries:
    """Carry-forward score values of one subject on the visit grid."""

    def __init__(self, subject: Subject):
        first = subject.visits[0].visit_index
        last = subject.visits[-1].visit_index
        values = np.empty(last + 1)
        observed = np.zeros(last + 1, dtype=bool)
        by_index = {v.visit_index: v for v in subject.visits}
        current = by_index[first].score
        for g in range(last + 1):
            v = by_index.get(g)
            if v is not None and np.isfinite(v.score):
                current = v.score
                observed[g] = v.score_observed
            values[g] = current
        self.values = values
        self.observed = observed

    def at(self, g: int) -> float:
        """Score as of grid index g (repeats the last value beyond the end)."""
        return float(self.values[min(g, len(self.values) - 1)])

    def known_at(self, g: int, t: int) -> float:
        """Score for grid g using only data up to grid t."""
        return self.at(min(g, t))

    def observed_at(self, g: int) -> bool:
        return bool(self.observed[g]) if g < len(self.observed) else False


# ---------------------------------------------------------------------------
# CSV schema:  subject_id, visit_index, group_label, m<k>_<name>..., adas13

_MODALITY_RE = re.compile(r"^m(\d+)_")


def _parse_header(header):
    if header[:3] != ["subject_id", "visit_index", "group_label"]:
        raise DataError("header must start with subject_id, visit_index, group_label")
    if header[-1] != "adas13":
        raise DataError("last column must be adas13")
    feature_names = header[3:-1]
    modality_of = []
    for name in feature_names:
        m = _MODALITY_RE.match(name)
        if m is None:
            raise DataError(f"feature column {name!r} lacks an m<k>_ modality prefix")
        modality_of.append(int(m.group(1)) - 1)
    mods = sorted(set(modality_of))
    if mods != list(range(len(mods))):
        raise DataError("modality prefixes must be contiguous starting at m1_")
    return feature_names, np.array(modality_of, dtype=int)


def load_cohort(path) -> Cohort:
    """Parse a cohort CSV; empty cells are missing values."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError("empty file") from None
        feature_names, modality_of = _parse_header(header)
        n_feat = len(feature_names)
        seen = set()
        order = []
        rows = {}
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise DataError(f"row {lineno}: expected {len(header)} fields, got {len(row)}")
            sid = row[0]
            try:
                vidx = int(row[1])
            except ValueError:
                raise DataError(f"row {lineno}: bad visit_index {row[1]!r}") from None
            if (sid, vidx) in seen:
                raise DataError(f"row {lineno}: duplicate visit ({sid}, {vidx})")
            seen.add((sid, vidx))
            label = row[2] or None
            if label is not None and label not in GROUP_LABELS:
                raise DataError(f"row {lineno}: unknown group label {label!r}")
            feats = np.full(n_feat, np.nan)
            for j, cell in enumerate(row[3:3 + n_feat]):
                if cell != "":
                    try:
                        feats[j] = float(cell)
                    except ValueError:
                        raise DataError(f"row {lineno}: bad value {cell!r}") from None
            score = np.nan
            if row[-1] != "":
                try:
                    score = float(row[-1])
                except ValueError:
                    raise DataError(f"row {lineno}: bad score {row[-1]!r}") from None
                if not (SCORE_MIN <= score <= SCORE_MAX):
                    raise DataError(f"row {lineno}: score {score} outside [0, 85]")
            visit = Visit(vidx, feats, score, np.isfinite(feats), bool(np.isfinite(score)))
            if sid not in rows:
                rows[sid] = (label, [])
                order.append(sid)
            rows[sid][1].append(visit)
    subjects = []
    for sid in order:
        label, visits = rows[sid]
        visits.sort(key=lambda v: v.visit_index)
        subjects.append(Subject(sid, tuple(visits), label))
    return Cohort(tuple(subjects), tuple(feature_names), modality_of)


def _fmt(x: float) -> str:
    return "" if not np.isfinite(x) else repr(float(x))


def save_cohort(path, cohort: Cohort):
    """Write the cohort back out in the same CSV schema."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["subject_id", "visit_index", "group_label",
                         *cohort.feature_names, "adas13"])
        for s in cohort.subjects:
            for v in s.visits:
                writer.writerow([
                    s.id, v.visit_index, s.group_label or "",
                    *[_fmt(x) if obs else "" for x, obs in zip(v.features, v.feat_observed)],
                    _fmt(v.score) if v.score_observed else "",
                ])


# ---------------------------------------------------------------------------
# imputation and normalization


def impute_fill_values(cohort: Cohort, subject_ids=None):
    """Means of observed feature/score values (training subjects only)."""
    ids = set(subject_ids) if subject_ids is not None else None
    feats, scores = [], []
    for s in cohort.subjects:
        if ids is not None and s.id not in ids:
            continue
        for v in s.visits:
            feats.append(np.where(v.feat_observed, v.features, np.nan))
            if v.score_observed:
                scores.append(v.score)
    F = np.vstack(feats)
    with np.errstate(invalid="ignore"):
        feat_means = np.nanmean(F, axis=0)
    feat_means = np.where(np.isfinite(feat_means), feat_means, 0.0)
    score_mean = float(np.mean(scores)) if scores else 0.5 * (SCORE_MIN + SCORE_MAX)
    return feat_means, score_mean


def impute_forward(cohort: Cohort, fills=None) -> Cohort:
    """Fill each missing value with the nearest available past value.

    Leading missing entries (nothing observed yet for that subject) take
    the fill means, which must come from training-fold data; when ``fills``
    is omitted they are computed from this cohort itself.  Observation
    flags are preserved; no future visit is ever read.
    """
    if fills is None:
        fills = impute_fill_values(cohort)
    feat_means, score_mean = fills
    subjects = []
    for s in cohort.subjects:
        carried = np.array(feat_means, dtype=float, copy=True)
        carried_score = score_mean
        new_visits = []
        for v in s.visits:
            carried = np.where(v.feat_observed, v.features, carried)
            if v.score_observed:
                carried_score = v.score
            new_visits.append(replace(v, features=carried.copy(), score=carried_score))
        subjects.append(replace(s, visits=tuple(new_visits)))
    return replace(cohort, subjects=tuple(subjects))


def fit_norm(cohort: Cohort, subject_ids=None) -> NormStats:
    """Z-normalization statistics from (imputed) training-fold data."""
    ids = set(subject_ids) if subject_ids is not None else None
    feats, scores = [], []
    for s in cohort.subjects:
        if ids is not None and s.id not in ids:
            continue
        for v in s.visits:
            feats.append(v.features)
            scores.append(v.score)
    F = np.vstack(feats)
    mean = F.mean(axis=0)
    std = F.std(axis=0)
    kept = np.flatnonzero(std > 1e-12)
    dropped = np.flatnonzero(std <= 1e-12)
    if dropped.size:
        log.warning("dropping %d constant feature(s): %s", dropped.size, dropped.tolist())
    y = np.asarray(scores, dtype=float)
    y_std = float(y.std())
    return NormStats(mean[kept], std[kept], kept, dropped,
                     float(y.mean()), y_std if y_std > 1e-12 else 1.0)


def apply_norm(cohort: Cohort, stats: NormStats) -> Cohort:
    """Apply training-fold statistics; drops the recorded constant columns."""
    subjects = []
    for s in cohort.subjects:
        new_visits = []
        for v in s.visits:
            f = (v.features[stats.kept] - stats.mean) / stats.std
            new_visits.append(replace(v, features=f, feat_observed=v.feat_observed[stats.kept]))
        subjects.append(replace(s, visits=tuple(new_visits)))
    names = tuple(cohort.feature_names[i] for i in stats.kept)
    return Cohort(tuple(subjects), names, cohort.modality_of[stats.kept])


# ---------------------------------------------------------------------------
# forecast windows


def build_windows(subject: Subject, stats: NormStats):
    """One sample per scored visit, with repeat-filled four-step targets.

    Expects an imputed + normalized subject.  A target entry is the score
    at grid t+k when that visit exists; otherwise the last available score
    is carried forward with mask False.  Subjects with no genuinely
    observed score are skipped (empty list, warning).
    """
    if not any(v.score_observed for v in subject.visits):
        log.warning("subject %s has no observed scores; skipped", subject.id)
        return []
    series = ScoreSeries(subject)
    out = []
    for v in subject.visits:
        if not np.isfinite(v.score):
            continue
        y_future = np.empty(HORIZONS)
        mask = np.zeros(HORIZONS, dtype=bool)
        for k in range(HORIZONS):
            g = v.visit_index + k + 1
            y_future[k] = series.at(g)
            mask[k] = series.observed_at(g)
        y_norm = (v.score - stats.y_mean) / stats.y_std
        x = np.concatenate([v.features, [y_norm]])
        out.append(WindowSample(subject.id, v.visit_index, x, y_future, mask, v.score))
    return out


def causal_targets(windows, series: ScoreSeries, j: int) -> np.ndarray:
    """History target matrix for windows[:j] as known at windows[j].t.

    Target entries beyond the evaluation visit are replaced by the score
    carried forward to it, mirroring the end-of-sequence repeat rule.
    """
    t_now = windows[j].t
    Y = np.empty((j, HORIZONS))
    for i in range(j):
        for k in range(HORIZONS):
            Y[i, k] = series.known_at(windows[i].t + k + 1, t_now)
    return Y


def filter_by_missingness(cohort: Cohort, max_missing_frac: float) -> Cohort:
    """Drop subjects whose overall missing-cell fraction exceeds the bound."""
    keep = []
    for s in cohort.subjects:
        cells = obs = 0
        for v in s.visits:
            cells += v.features.size + 1
            obs += int(v.feat_observed.sum()) + int(v.score_observed)
        if 1.0 - obs / cells <= max_missing_frac:
            keep.append(s)
    return replace(cohort, subjects=tuple(keep))


# ---------------------------------------------------------------------------
# synthetic cohort generator


@dataclass(frozen=True)
class SynthConfig:
    """Desk-scale cohort generator settings.

    Each subject draws a hidden regime: population-like progressors whose
    slope follows a risk factor encoded in the features, or idiosyncratic
    subjects whose slope is unrelated to it.  A hidden per-subject offset
    decouples feature level from score level, so history-based correction
    pays off.  This makes the best expert weight predictable from the
    experts' own predictions, which the weight regression exploits.
    """

    n_subjects: int = 100
    n_visits: int = 13
    n_features: int = 12
    n_modalities: int = 6
    feature_missingness: float = 0.12
    score_missingness: float = 0.08
    idiosyncratic_frac: float = 0.5
    population_slope: tuple = (0.6, 2.6)
    idiosyncratic_slope: tuple = (-0.8, 0.8)
    subject_offset_sd: float = 4.0
    score_noise: float = 0.7
    wobble_sd: float = 0.8
    wobble_rho: float = 0.6
    feature_noise: float = 0.25

    def validate(self):
        if self.n_visits < 5:
            raise ConfigError("n_visits must be at least 5")
        if self.n_subjects < 1:
            raise ConfigError("n_subjects must be positive")
        if not (1 <= self.n_modalities <= self.n_features):
            raise ConfigError("need 1 <= n_modalities <= n_features")
        for name in ("feature_missingness", "score_missingness", "idiosyncratic_frac"):
            v = getattr(self, name)
            if not (0.0 <= v < 1.0):
                raise ConfigError(f"{name} must be in [0, 1)")


def _group_label(slope: float) -> str:
    if slope > 1.8:
        return "AD"
    if slope > 1.1:
        return "MCI"
    if slope > 0.55:
        return "CN->MCI"
    return "CN"


def synth_cohort(config: SynthConfig, seed: int) -> Cohort:
    """Deterministic synthetic cohort; same seed gives bit-identical output."""
    config.validate()
    rng = np.random.default_rng(seed)
    F, M = config.n_features, config.n_modalities
    counts = np.full(M, F // M)
    counts[: F % M] += 1
    modality_of = np.repeat(np.arange(M), counts)
    feature_names = []
    local = {}
    for mod in modality_of:
        i = local.get(mod, 0)
        feature_names.append(f"m{mod + 1}_f{i}")
        local[mod] = i + 1

    # cohort-level loadings tying features to latent level and risk
    load_level = rng.uniform(0.6, 1.4, size=F) * rng.choice([-1.0, 1.0], size=F)
    load_risk = rng.uniform(0.2, 1.0, size=F)

    lo_p, hi_p = config.population_slope
    lo_i, hi_i = config.idiosyncratic_slope
    subjects = []
    for n in range(config.n_subjects):
        risk = rng.uniform(0.0, 1.0)
        baseline = rng.uniform(8.0, 40.0)
        offset = rng.normal(0.0, config.subject_offset_sd)
        idio = rng.random() < config.idiosyncratic_frac
        if idio:
            slope = rng.uniform(lo_i, hi_i)
        else:
            slope = lo_p + (hi_p - lo_p) * risk + rng.normal(0.0, 0.15)
        wobble = 0.0
        visits = []
        for t in range(config.n_visits):
            wobble = config.wobble_rho * wobble + rng.normal(
                0.0, config.wobble_sd * np.sqrt(1.0 - config.wobble_rho ** 2))
            latent = baseline + slope * t + wobble
            score = float(np.clip(latent + rng.normal(0.0, config.score_noise),
                                  SCORE_MIN, SCORE_MAX))
            level = (latent - offset - 25.0) / 15.0
            feats = (load_level * level + load_risk * (risk - 0.5)
                     + rng.normal(0.0, config.feature_noise, size=F))
            feat_obs = rng.random(F) >= config.feature_missingness
            score_obs = t == 0 or rng.random() >= config.score_missingness
            visits.append(Visit(
                t,
                np.where(feat_obs, feats, np.nan),
                score if score_obs else np.nan,
                feat_obs,
                score_obs,
            ))
        subjects.append(Subject(f"s{n + 1:03d}", tuple(visits), _group_label(slope)))
    return Cohort(tuple(subjects), tuple(feature_names), modality_of)
