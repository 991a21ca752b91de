"""Anomaly scoring, thresholding, alarms, evaluation metrics and drift monitoring."""

from __future__ import annotations

import csv
import math
import warnings
from collections import Counter
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .model import ModelParams, predict
from .numerics import stable_sigmoid
from .pipeline import FeatureSchema, WindowSet
from .training import PROB_CLAMP

DEFAULT_TOLERANCE = 60.0


class SchemaMismatch(ValueError):
    pass


# ---------------------------------------------------------------------------
# scoring
# ---------------------------------------------------------------------------

@dataclass
class ScoreSeries:
    window_ids: np.ndarray
    times: np.ndarray
    scores: np.ndarray            # s_w, (n,)
    entity_errors: np.ndarray     # e_{w,i}, (n, N)
    feature_errors: np.ndarray    # e_{w,i,f}, (n, N, F); 0 on unscored channels
    entities: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.scores)

    def top_entities(self, w: int, k: int = 3) -> list[tuple[str, float]]:
        e = self.entity_errors[w]
        order = np.argsort(-e, kind="stable")[:k]
        return [(self.entities[i], float(e[i])) for i in order]


def feature_errors(pred: np.ndarray, target: np.ndarray, schema: FeatureSchema) -> np.ndarray:
    """Squared error on scored continuous channels, BCE on scored Boolean ones."""
    cont, boo = schema.masks()
    if pred.shape[1:] != cont.shape:
        raise SchemaMismatch(f"predictions {pred.shape[1:]} do not match schema {cont.shape}")
    sq = (pred - target) ** 2
    p = np.clip(stable_sigmoid(pred), PROB_CLAMP, 1.0 - PROB_CLAMP)
    bce = -(target * np.log(p) + (1.0 - target) * np.log(1.0 - p))
    return np.where(cont, sq, 0.0) + np.where(boo, bce, 0.0)


def entity_errors(e_wif: np.ndarray, schema: FeatureSchema, gamma_cont: float = 1.0,
                  gamma_bool: float = 1.0) -> np.ndarray:
    cont, boo = schema.masks()
    nc, nb = cont.sum(axis=1), boo.sum(axis=1)
    out = np.zeros(e_wif.shape[:2])
    with np.errstate(invalid="ignore", divide="ignore"):
        out += gamma_cont * np.where(nc > 0, (e_wif * cont).sum(-1) / np.maximum(nc, 1), 0.0)
        out += gamma_bool * np.where(nb > 0, (e_wif * boo).sum(-1) / np.maximum(nb, 1), 0.0)
    return out


def score_predictions(pred: np.ndarray, target: np.ndarray, schema: FeatureSchema,
                      gamma_cont: float = 1.0, gamma_bool: float = 1.0,
                      times: np.ndarray | None = None) -> ScoreSeries:
    e_wif = feature_errors(pred, target, schema)
    e_wi = entity_errors(e_wif, schema, gamma_cont, gamma_bool)
    n = len(pred)
    return ScoreSeries(np.arange(n), np.arange(n, dtype=float) if times is None else times,
                       e_wi.mean(axis=1), e_wi, e_wif, list(schema.nodes))


def score_windows(params: ModelParams, windows: WindowSet, schema: FeatureSchema,
                  gamma_cont: float = 1.0, gamma_bool: float = 1.0) -> ScoreSeries:
    cfg = params.config
    if (len(schema.nodes), schema.n_features) != (cfg.n_entities, cfg.n_features):
        raise SchemaMismatch(
            f"schema is {len(schema.nodes)}x{schema.n_features}, model expects "
            f"{cfg.n_entities}x{cfg.n_features}")
    pred = predict(windows.x, params)
    return score_predictions(pred, windows.y, schema, gamma_cont, gamma_bool, windows.times)


# ---------------------------------------------------------------------------
# conformal thresholding
# ---------------------------------------------------------------------------

def diff_nonconformity(scores: Sequence[float]) -> np.ndarray:
    """c_1 = 0, c_t = max(0, s_t - s_{t-1})."""
    s = np.asarray(scores, dtype=np.float64)
    c = np.zeros_like(s)
    if len(s) > 1:
        c[1:] = np.maximum(0.0, np.diff(s))
    return c


@dataclass
class ConformalCalibration:
    scores: np.ndarray
    alpha: float
    threshold: float
    rank: int
    attainable: bool = True
    convention: str = "ceil((1-alpha)(T+1))-th order statistic"

    def to_json(self) -> dict:
        return {
            "alpha": self.alpha,
            "threshold": None if math.isinf(self.threshold) else self.threshold,
            "rank": self.rank,
            "attainable": self.attainable,
            "convention": self.convention,
            "scores": self.scores.tolist(),
        }

    @classmethod
    def from_json(cls, d: dict) -> "ConformalCalibration":
        thr = math.inf if d["threshold"] is None else float(d["threshold"])
        return cls(np.asarray(d["scores"], dtype=np.float64), float(d["alpha"]), thr,
                   int(d["rank"]), bool(d["attainable"]), d["convention"])


class UnattainableAlphaWarning(UserWarning):
    pass


def conformal_rank(n: int, alpha: float) -> int:
    # rounding guards against (1 - 0.05) * 20 = 19.000000000000004
    return max(1, math.ceil(round((1.0 - alpha) * (n + 1), 9)))


def calibrate(c_calibration: Sequence[float], alpha: float) -> ConformalCalibration:
    """Finite-sample conformal threshold from calibration nonconformity scores."""
    c = np.asarray(c_calibration, dtype=np.float64)
    if c.size == 0:
        raise ValueError("calibration set is empty")
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    k = conformal_rank(c.size, alpha)
    if k > c.size:
        warnings.warn(
            f"alpha={alpha} is unattainable with {c.size} calibration scores "
            f"(needs >= {math.ceil(1 / alpha) - 1}); threshold is +inf",
            UnattainableAlphaWarning, stacklevel=2)
        return ConformalCalibration(c, alpha, math.inf, k, attainable=False)
    return ConformalCalibration(c, alpha, float(np.sort(c)[k - 1]), k)


@dataclass
class AlarmEvent:
    timestamp: float
    window_id: int
    score: float
    mode: str
    top3: list[tuple[str, float]]

    def to_json(self) -> dict:
        return {"timestamp": self.timestamp, "window_id": self.window_id, "score": self.score,
                "mode": self.mode,
                "top3": [{"entity": e, "error": err} for e, err in self.top3]}

    @classmethod
    def from_json(cls, d: dict) -> "AlarmEvent":
        return cls(float(d["timestamp"]), int(d["window_id"]), float(d["score"]), d["mode"],
                   [(t["entity"], float(t["error"])) for t in d["top3"]])


def detect(scores: ScoreSeries, calibration: ConformalCalibration,
           previous_score: float | None = None) -> list[AlarmEvent]:
    """Alarm on every window whose difference score reaches the threshold.

    ``previous_score`` continues the difference from a preceding stream
    (otherwise the first window's nonconformity is 0).
    """
    s = scores.scores
    if previous_score is not None:
        c = diff_nonconformity(np.concatenate([[previous_score], s]))[1:]
    else:
        c = diff_nonconformity(s)
    out = []
    for w in np.flatnonzero(c >= calibration.threshold):
        out.append(AlarmEvent(float(scores.times[w]), int(scores.window_ids[w]), float(c[w]),
                              "conformal", scores.top_entities(int(w))))
    return out


def threshold_alarms(scores: ScoreSeries, threshold: float) -> list[AlarmEvent]:
    return [AlarmEvent(float(scores.times[w]), int(scores.window_ids[w]), float(scores.scores[w]),
                       "f1max", scores.top_entities(int(w)))
            for w in np.flatnonzero(scores.scores >= threshold)]


def recalibrate(params: ModelParams, baseline: WindowSet, schema: FeatureSchema, alpha: float,
                gamma_cont: float = 1.0, gamma_bool: float = 1.0) -> ConformalCalibration:
    """Rescore a new normal baseline and recalibrate; the model is untouched."""
    if len(baseline) == 0:
        raise ValueError("baseline is empty")
    s = score_windows(params, baseline, schema, gamma_cont, gamma_bool)
    return calibrate(diff_nonconformity(s.scores), alpha)


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------

@dataclass
class MetricsReport:
    TP: int
    FP: int
    TN: int
    FN: int
    attacks_detected: int = 0
    n_attacks: int = 0
    per_attack: list[dict] = field(default_factory=list)
    threshold: float | None = None

    @property
    def FPR(self) -> float:
        return self.FP / (self.FP + self.TN) if self.FP + self.TN else 0.0

    @property
    def precision(self) -> float:
        return self.TP / (self.TP + self.FP) if self.TP + self.FP else 0.0

    @property
    def recall(self) -> float:
        return self.TP / (self.TP + self.FN) if self.TP + self.FN else 0.0

    @property
    def F1(self) -> float:
        d = 2 * self.TP + self.FP + self.FN
        return 2 * self.TP / d if d else 0.0

    def to_json(self) -> dict:
        return {"TP": self.TP, "FP": self.FP, "TN": self.TN, "FN": self.FN,
                "FPR": self.FPR, "precision": self.precision, "recall": self.recall,
                "F1": self.F1, "attacks_detected": self.attacks_detected,
                "n_attacks": self.n_attacks, "per_attack": self.per_attack,
                "threshold": None if self.threshold is None or math.isinf(self.threshold)
                else self.threshold}


def confusion(pred: np.ndarray, labels: np.ndarray) -> tuple[int, int, int, int]:
    pred = np.asarray(pred, bool)
    labels = np.asarray(labels, bool)
    return (int((pred & labels).sum()), int((pred & ~labels).sum()),
            int((~pred & ~labels).sum()), int((~pred & labels).sum()))


def f1_max_threshold(scores: Sequence[float], labels: Sequence[bool]) -> tuple[float, MetricsReport]:
    """Threshold over distinct scores (and +inf) maximizing F1 of ``s >= thr``.

    Ties go to the larger threshold.
    """
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    if len(s) != len(y):
        raise ValueError("scores and labels differ in length")
    if not y.any():
        raise ValueError("no positive labels: F1 is undefined, use conformal thresholding")
    cands = np.unique(s)[::-1]              # descending
    # alarms at threshold cands[j] = number of scores >= cands[j]
    order = np.argsort(-s, kind="stable")
    s_sorted, y_sorted = s[order], y[order]
    tp_cum = np.cumsum(y_sorted)
    n_ge = np.searchsorted(-s_sorted, -cands, side="right")
    tp = tp_cum[n_ge - 1]
    fp = n_ge - tp
    fn = y.sum() - tp
    f1 = 2 * tp / (2 * tp + fp + fn)
    # +inf candidate: no alarms, F1 = 0; only chosen if every finite F1 is 0
    best = int(np.argmax(f1))               # first max = largest threshold
    if f1[best] <= 0.0:
        thr = math.inf
    else:
        thr = float(cands[best])
    TP, FP, TN, FN = confusion(s >= thr, y)
    return thr, MetricsReport(TP, FP, TN, FN, threshold=thr)


@dataclass
class AttackWindow:
    start: float
    end: float
    attack_id: str
    description: str = ""
    targets: tuple[str, ...] = ()


def read_labels_csv(path) -> list[AttackWindow]:
    out = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or [f.strip() for f in reader.fieldnames][:4] != [
                "start", "end", "attack_id", "description"]:
            raise ValueError(f"{path}: expected header start,end,attack_id,description")
        for row in reader:
            targets = tuple(t for t in (row.get("targets") or "").split(";") if t)
            out.append(AttackWindow(float(row["start"]), float(row["end"]), row["attack_id"],
                                    row["description"], targets))
    return out


def format_labels_csv(attacks: Sequence[AttackWindow]) -> str:
    lines = ["start,end,attack_id,description,targets"]
    for a in attacks:
        desc = a.description.replace(",", ";")
        lines.append(f"{a.start!r},{a.end!r},{a.attack_id},{desc},{';'.join(a.targets)}")
    return "\n".join(lines) + "\n"


def merge_attacks(attacks: Sequence[AttackWindow]) -> list[AttackWindow]:
    """Sort by start and merge overlapping intervals (with a warning)."""
    out: list[AttackWindow] = []
    for a in sorted(attacks, key=lambda a: (a.start, a.end)):
        if out and a.start <= out[-1].end:
            prev = out[-1]
            warnings.warn(f"merging overlapping attacks {prev.attack_id} and {a.attack_id}",
                          stacklevel=2)
            out[-1] = AttackWindow(prev.start, max(prev.end, a.end),
                                   f"{prev.attack_id}+{a.attack_id}",
                                   f"{prev.description}; {a.description}",
                                   tuple(dict.fromkeys(prev.targets + a.targets)))
        else:
            out.append(a)
    return out


def window_labels(times: np.ndarray, attacks: Sequence[AttackWindow]) -> np.ndarray:
    t = np.asarray(times, dtype=np.float64)
    lab = np.zeros(len(t), bool)
    for a in attacks:
        lab |= (t >= a.start) & (t <= a.end)
    return lab


def evaluate(alarms: Sequence[AlarmEvent], attacks: Sequence[AttackWindow], times: np.ndarray,
             tolerance: float = DEFAULT_TOLERANCE) -> MetricsReport:
    """Pointwise confusion counts over windows at ``times`` plus attacks detected.

    An attack counts as detected if some alarm falls within
    ``[start - tolerance, end + tolerance]``.
    """
    attacks = merge_attacks(attacks)
    times = np.asarray(times, dtype=np.float64)
    labels = window_labels(times, attacks)
    alarm_t = np.array(sorted(a.timestamp for a in alarms), dtype=np.float64)
    pred = np.isin(times, alarm_t)
    TP, FP, TN, FN = confusion(pred, labels)
    table, ad = [], 0
    for a in attacks:
        near = alarm_t[(alarm_t >= a.start - tolerance) & (alarm_t <= a.end + tolerance)]
        inside = alarm_t[(alarm_t >= a.start) & (alarm_t <= a.end)]
        hit = near.size > 0
        ad += hit
        table.append({"attack_id": a.attack_id, "start": a.start, "end": a.end,
                      "detected": bool(hit), "alarms_inside": int(inside.size),
                      "alarms_near": int(near.size),
                      "first_alarm_delay": float(near[0] - a.start) if hit else None})
    return MetricsReport(TP, FP, TN, FN, attacks_detected=ad, n_attacks=len(attacks),
                         per_attack=table)


# ---------------------------------------------------------------------------
# drift
# ---------------------------------------------------------------------------

@dataclass
class DriftReport:
    alpha: float
    horizon: int
    rolling_fpr: list[float]
    overall_fpr: float
    drift: bool
    factor: float
    entity_ranking: list[tuple[str, int]]
    warnings: list[str] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"alpha": self.alpha, "horizon": self.horizon, "rolling_fpr": self.rolling_fpr,
                "overall_fpr": self.overall_fpr, "drift": self.drift, "factor": self.factor,
                "entity_ranking": [{"entity": e, "count": c} for e, c in self.entity_ranking],
                "warnings": self.warnings}


def drift_monitor(alarms: Sequence[AlarmEvent], n_windows: int, alpha: float, horizon: int,
                  factor: float = 10.0) -> DriftReport:
    """Rolling false-positive rate over consecutive blocks of an attack-free stream.

    Every alarm on attack-free data is a false positive. Drift is flagged when
    any block's FPR reaches ``factor * alpha``; entities are ranked by how
    often they appear among alarm top-3 contributors.
    """
    msgs = []
    if horizon < 1 / alpha:
        msgs.append(f"horizon {horizon} < 1/alpha = {1 / alpha:.0f}: FPR estimate underpowered")
        warnings.warn(msgs[-1], stacklevel=2)
    flags = np.zeros(n_windows, bool)
    for a in alarms:
        if 0 <= a.window_id < n_windows:
            flags[a.window_id] = True
    rolling = [float(flags[i:i + horizon].mean())
               for i in range(0, n_windows - horizon + 1, horizon)] if n_windows >= horizon else []
    overall = float(flags.mean()) if n_windows else 0.0
    drift = any(r >= factor * alpha for r in rolling)
    counts = Counter(e for a in alarms for e, _ in a.top3)
    ranking = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    return DriftReport(alpha, horizon, rolling, overall, drift, factor, ranking, msgs)
