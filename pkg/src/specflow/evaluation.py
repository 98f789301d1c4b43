"""Golden-set kinematic labels, ROC/AUC, likelihood histograms and the gap table."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy.stats import rankdata

from . import kinematics as kin
from .errors import UnitScaleError

ACCEL_THRESHOLD = -5.0  # m/s^2
YAW_THRESHOLD = 1.5  # rad/s
MAX_PLAUSIBLE_SPEED = 120.0  # m/s
MIN_MOVING_SPEED = 1e-3  # m/s
NOMINAL_FPR = 0.10
SEMANTIC_TAGS = ("lane_violation", "corner_cut")


@dataclass(frozen=True)
class GoldenLabel:
    is_critical: bool
    trigger: str  # hard_brake | high_yaw_rate | none
    min_accel: float
    max_yaw_rate: float


def check_units(traj_m: np.ndarray, moving: bool = False) -> None:
    """Catch trajectories that were not de-normalized (or were scaled twice)."""
    v = kin.speeds(traj_m)
    vmax = float(np.max(v)) if len(v) else 0.0
    if vmax > MAX_PLAUSIBLE_SPEED:
        raise UnitScaleError(f"max speed {vmax:.1f} m/s is implausible; are coordinates in meters?")
    if moving and vmax < MIN_MOVING_SPEED:
        raise UnitScaleError(f"max speed {vmax:.2e} m/s on a moving scenario; coordinates look normalized")


def golden_label(traj_m: np.ndarray, moving: bool | None = None) -> GoldenLabel:
    """Kinematic safety label of a meter-scale future (T >= 3)."""
    x = np.asarray(traj_m, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != 2 or len(x) < 3:
        raise ValueError("golden_label needs a (T >= 3, 2) trajectory")
    check_units(x, bool(moving))
    a_min = float(np.min(kin.longitudinal_accel(x)))
    yaw = float(np.max(np.abs(kin.yaw_rates(x))))
    if a_min < ACCEL_THRESHOLD:
        trigger = "hard_brake"
    elif yaw > YAW_THRESHOLD:
        trigger = "high_yaw_rate"
    else:
        trigger = "none"
    return GoldenLabel(trigger != "none", trigger, a_min, yaw)


def label_scenario(scenario) -> GoldenLabel:
    anchor = scenario.context.history[-1]
    from .synth import SCALE

    moving = float(np.hypot(anchor[2], anchor[3])) * SCALE > 0.5
    return golden_label(scenario.future_m(), moving=moving)


# ----------------------------------------------------------------------------
# ROC


@dataclass
class RocResult:
    auc: float
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray


def _split(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if s.shape != y.shape or s.ndim != 1:
        raise ValueError("scores and labels must be 1-d and aligned")
    if y.all() or not y.any():
        raise ValueError("AUC needs both classes present")
    return s, y


def rank_auc(scores, labels) -> float:
    """P(random positive outranks random negative), ties counted as one half."""
    s, y = _split(scores, labels)
    ranks = rankdata(s)  # average ranks handle ties
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    u = float(np.sum(ranks[y])) - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


def roc_curve(scores, labels) -> RocResult:
    """Threshold sweep over distinct scores (predict positive when score >= threshold)."""
    s, y = _split(scores, labels)
    order = np.argsort(-s, kind="stable")
    s_sorted = s[order]
    y_sorted = y[order]
    tp = np.cumsum(y_sorted)
    fp = np.cumsum(~y_sorted)
    last = np.r_[np.nonzero(np.diff(s_sorted))[0], len(s) - 1]
    fpr = np.r_[0.0, fp[last] / fp[-1]]
    tpr = np.r_[0.0, tp[last] / tp[-1]]
    thr = np.r_[np.inf, s_sorted[last]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocResult(auc, fpr, tpr, thr)


def auc_roc(pairs) -> RocResult:
    """``pairs`` is an iterable of (score, is_critical)."""
    pairs = list(pairs)
    scores = [p[0] for p in pairs]
    labels = [p[1] for p in pairs]
    res = roc_curve(scores, labels)
    res.auc = rank_auc(scores, labels)
    return res


# ----------------------------------------------------------------------------
# scored collections


@dataclass
class ScoredScenario:
    seed: int
    anomaly_tag: str
    log_likelihood: float
    golden: GoldenLabel

    @property
    def score(self) -> float:
        return -self.log_likelihood


@dataclass
class GapRow:
    tag: str
    count: int
    heuristic_hit_rate: float
    median_score: float
    score_hit_rate: float


def nominal_threshold(scored: list[ScoredScenario], fpr: float = NOMINAL_FPR) -> float:
    if not 0.0 < fpr < 1.0:
        raise ValueError("nominal false-positive rate must be in (0, 1)")
    nom = np.array([s.score for s in scored if s.anomaly_tag == "nominal"])
    if nom.size == 0:
        raise ValueError("no nominal scenarios to set the operating point")
    return float(np.quantile(nom, 1.0 - fpr))


def gap_analysis(scored: list[ScoredScenario], fpr: float = NOMINAL_FPR, tags=None) -> tuple[list[GapRow], float]:
    thr = nominal_threshold(scored, fpr)
    present = sorted({s.anomaly_tag for s in scored}, key=lambda t: (t != "nominal", t))
    rows = []
    for tag in tags or present:
        grp = [s for s in scored if s.anomaly_tag == tag]
        if not grp:
            rows.append(GapRow(tag, 0, float("nan"), float("nan"), float("nan")))
            continue
        sc = np.array([s.score for s in grp])
        rows.append(
            GapRow(
                tag=tag,
                count=len(grp),
                heuristic_hit_rate=float(np.mean([s.golden.is_critical for s in grp])),
                median_score=float(np.median(sc)),
                score_hit_rate=float(np.mean(sc > thr)),
            )
        )
    return rows, thr


def top_anomalies(scored: list[ScoredScenario], n: int = 5) -> list[ScoredScenario]:
    order = sorted(range(len(scored)), key=lambda i: (scored[i].log_likelihood, scored[i].seed))
    return [scored[i] for i in order[:n]]


@dataclass
class Histogram:
    edges: np.ndarray
    nominal_counts: np.ndarray
    critical_counts: np.ndarray
    safety_ceiling: float | None  # max critical log-likelihood, None when no critical case


def distribution_export(scored: list[ScoredScenario], n_bins: int = 40) -> Histogram:
    ll = np.array([s.log_likelihood for s in scored], dtype=np.float64)
    crit = np.array([s.golden.is_critical for s in scored], dtype=bool)
    if ll.size == 0:
        edges = np.linspace(0.0, 1.0, n_bins + 1)
    else:
        lo, hi = float(ll.min()), float(ll.max())
        if hi <= lo:
            lo, hi = lo - 0.5, hi + 0.5
        edges = np.linspace(lo, hi, n_bins + 1)
    nom_counts, _ = np.histogram(ll[~crit], bins=edges)
    crit_counts, _ = np.histogram(ll[crit], bins=edges)
    ceiling = float(ll[crit].max()) if crit.any() else None
    return Histogram(edges, nom_counts, crit_counts, ceiling)


@dataclass
class EvalReport:
    auc_roc: float | None
    roc: RocResult | None
    histogram: Histogram
    gap_table: list[GapRow]
    threshold: float
    top5: list[ScoredScenario]
    extra_auc: dict[str, float | None] = field(default_factory=dict)
    nominal_fpr: float = NOMINAL_FPR

    def to_dict(self) -> dict[str, Any]:
        h = self.histogram
        return {
            "auc_roc": self.auc_roc,
            "auc_injected": self.extra_auc,
            "safety_ceiling": h.safety_ceiling,
            "safety_ceiling_present": h.safety_ceiling is not None,
            "score_threshold_at_nominal_fpr": self.threshold,
            "nominal_fpr": self.nominal_fpr,
            "gap_table": [vars(r) for r in self.gap_table],
            "top5": [{"seed": s.seed, "anomaly_tag": s.anomaly_tag, "log_likelihood": s.log_likelihood} for s in self.top5],
        }


def _safe_auc(scores, labels) -> float | None:
    y = np.asarray(labels, dtype=bool)
    if y.all() or not y.any():
        return None
    return rank_auc(scores, y)


def evaluate(scored: list[ScoredScenario], kinematic_scores=None, nominal_fpr: float = NOMINAL_FPR, n_bins: int = 40) -> EvalReport:
    """Full report. ``kinematic_scores`` (e.g. -min accel) adds a heuristic baseline row."""
    scores = np.array([s.score for s in scored])
    crit = np.array([s.golden.is_critical for s in scored])
    tags = np.array([s.anomaly_tag for s in scored])
    roc = roc_curve(scores, crit) if crit.any() and not crit.all() else None
    auc = rank_auc(scores, crit) if roc is not None else None
    if roc is not None:
        roc.auc = auc
    gap, thr = gap_analysis(scored, nominal_fpr)
    extra: dict[str, float | None] = {}
    nominal = tags == "nominal"
    anomalous = ~nominal
    sel = nominal | anomalous
    extra["all_injected_vs_nominal"] = _safe_auc(scores[sel], anomalous[sel])
    sem = np.isin(tags, SEMANTIC_TAGS)
    sel = nominal | sem
    extra["semantic_vs_nominal"] = _safe_auc(scores[sel], sem[sel])
    for tag in sorted(set(tags) - {"nominal"}):
        sel = nominal | (tags == tag)
        extra[f"{tag}_vs_nominal"] = _safe_auc(scores[sel], (tags == tag)[sel])
    if kinematic_scores is not None:
        ks = np.asarray(kinematic_scores, dtype=np.float64)
        extra["kinematic_baseline_golden"] = _safe_auc(ks, crit)
        sel = nominal | anomalous
        extra["kinematic_baseline_all_injected"] = _safe_auc(ks[sel], anomalous[sel])
    return EvalReport(auc, roc, distribution_export(scored, n_bins), gap, thr, top_anomalies(scored), extra, nominal_fpr)
