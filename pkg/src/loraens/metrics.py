"""Ensemble aggregation, calibration and classification metrics, OOD scores, temperature scaling.

Ensembles are combined by averaging member probabilities (not logits).  The
confidence of a prediction is the maximum of its aggregated probability row.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.special import log_softmax, softmax
from scipy.stats import rankdata

PROB_FLOOR = 1e-12
DEFAULT_BINS = 10
TEMPERATURE_GRID = np.round(np.arange(0.1, 5.0 + 1e-9, 0.05), 2)


@dataclass
class PredictionSet:
    """Member probabilities ``[N, S, C]`` with integer labels ``[S]``."""

    probs: np.ndarray
    labels: np.ndarray
    logits: np.ndarray | None = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=np.float64)
        if self.probs.ndim == 2:
            self.probs = self.probs[None]
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.probs.ndim != 3 or self.probs.shape[1] != len(self.labels):
            raise ValueError(f"probs {self.probs.shape} do not match {len(self.labels)} labels")
        if np.any(np.abs(self.probs.sum(-1) - 1.0) > 1e-6) or np.any(self.probs < 0):
            raise ValueError("probability rows must lie on the simplex")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.probs.shape[-1]):
            raise ValueError("label out of range")

    @classmethod
    def from_logits(cls, logits, labels, temperature: float = 1.0) -> "PredictionSet":
        logits = np.asarray(logits, dtype=np.float64)
        return cls(temperature_scale(logits, temperature), labels, logits)

    @property
    def mean(self) -> np.ndarray:
        return _as_mean(self.probs)


def ensemble_aggregate(probs) -> dict[str, np.ndarray]:
    """Mean and population variance over the member axis of ``[N, S, C]``."""
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 3 or p.shape[0] < 1:
        raise ValueError(f"expected [N, S, C] with N >= 1, got {p.shape}")
    mean = _as_mean(p)
    var = ((p - mean) ** 2).mean(axis=0)
    return {"mean": mean, "var": var}


def _as_mean(probs) -> np.ndarray:
    # offsetting by the first member keeps the mean exact when members agree
    p = np.asarray(probs, dtype=np.float64)
    return p[0] + (p - p[0]).mean(axis=0) if p.ndim == 3 else p


# ---------------------------------------------------------------------------
# calibration


@dataclass
class ReliabilityBins:
    lo: np.ndarray
    hi: np.ndarray
    count: np.ndarray
    conf: np.ndarray  # mean confidence per bin (0 where empty)
    acc: np.ndarray  # accuracy per bin (0 where empty)

    def to_list(self) -> list[dict]:
        return [{"lo": float(a), "hi": float(b), "count": int(n), "conf": float(c), "acc": float(x)}
                for a, b, n, c, x in zip(self.lo, self.hi, self.count, self.conf, self.acc)]


def bin_index(confidences: np.ndarray, M: int = DEFAULT_BINS) -> np.ndarray:
    """Bins ``[(m-1)/M, m/M)``; the last bin also holds 1.0 and interior edges go up."""
    edges = np.arange(M + 1) / M
    return np.clip(np.searchsorted(edges, confidences, side="right") - 1, 0, M - 1)


def reliability_bins(confidences, correct, M: int = DEFAULT_BINS) -> ReliabilityBins:
    conf = np.asarray(confidences, dtype=np.float64)
    ok = np.asarray(correct, dtype=np.float64)
    if conf.size == 0:
        raise ValueError("reliability bins of an empty prediction set are undefined")
    if conf.shape != ok.shape:
        raise ValueError("confidences and correctness flags differ in shape")
    if np.any(conf < 0) or np.any(conf > 1):
        raise ValueError("confidences must lie in [0, 1]")
    idx = bin_index(conf, M)
    count = np.bincount(idx, minlength=M)
    safe = np.maximum(count, 1)
    edges = np.arange(M + 1) / M
    return ReliabilityBins(edges[:-1], edges[1:], count,
                           np.bincount(idx, conf, minlength=M) / safe,
                           np.bincount(idx, ok, minlength=M) / safe)


def ece(confidences, correct, M: int = DEFAULT_BINS) -> float:
    """Expected calibration error with ``M`` equal-width bins."""
    b = reliability_bins(confidences, correct, M)
    n = b.count.sum()
    return float(np.sum(b.count / n * np.abs(b.acc - b.conf)))


def ece_from_probs(probs, labels, M: int = DEFAULT_BINS) -> float:
    p = _as_mean(probs)
    return ece(p.max(axis=1), p.argmax(axis=1) == np.asarray(labels), M)


# ---------------------------------------------------------------------------
# proper scores and classification metrics


def nll(probs, labels) -> float:
    p = _as_mean(probs)
    labels = np.asarray(labels)
    picked = np.maximum(p[np.arange(len(labels)), labels], PROB_FLOOR)
    return float(-np.mean(np.log(picked)))


def brier(probs, labels) -> float:
    p = _as_mean(probs)
    onehot = np.eye(p.shape[1])[np.asarray(labels)]
    return float(np.mean(np.sum((p - onehot) ** 2, axis=1)))


def accuracy(probs, labels) -> float:
    return float(np.mean(_as_mean(probs).argmax(axis=1) == np.asarray(labels)))


def confusion_matrix(preds, labels, C: int) -> np.ndarray:
    """Rows are true classes, columns predicted classes."""
    preds = np.asarray(preds, dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    return np.bincount(labels * C + preds, minlength=C * C).reshape(C, C)


def macro_f1(preds, labels, C: int) -> float:
    """Unweighted mean of per-class F1; a class with precision + recall = 0 scores 0."""
    if C < 2:
        raise ValueError("macro F1 needs at least two classes")
    cm = confusion_matrix(preds, labels, C)
    f1 = []
    for c in range(C):
        tp = int(cm[c, c])
        pred_c = int(cm[:, c].sum())
        true_c = int(cm[c, :].sum())
        p = tp / pred_c if pred_c else 0.0
        r = tp / true_c if true_c else 0.0
        f1.append(2 * p * r / (p + r) if p + r > 0 else 0.0)
    return math.fsum(f1) / C


# ---------------------------------------------------------------------------
# OOD detection (in-distribution is the positive class)


def _split_scores(pos, neg):
    pos = np.asarray(pos, dtype=np.float64).ravel()
    neg = np.asarray(neg, dtype=np.float64).ravel()
    if pos.size == 0 or neg.size == 0:
        raise ValueError("OOD metrics need non-empty in- and out-of-distribution sets")
    return pos, neg


def auroc(pos_scores, neg_scores) -> float:
    """Mann-Whitney statistic with average ranks, so tied pairs count one half."""
    pos, neg = _split_scores(pos_scores, neg_scores)
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2.0
    return float(u / (pos.size * neg.size))


def _threshold_counts(pos, neg):
    """True and false positives when accepting scores >= t, for distinct t descending."""
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="mergesort")
    s, y = scores[order], is_pos[order]
    tp = np.cumsum(y)
    fp = np.cumsum(~y)
    last = np.r_[np.nonzero(np.diff(s))[0], s.size - 1]  # last index of each tie group
    return s[last], tp[last], fp[last]


def auprc(pos_scores, neg_scores) -> float:
    """Step-wise area ``sum_k (R_k - R_{k-1}) P_k`` over distinct thresholds."""
    pos, neg = _split_scores(pos_scores, neg_scores)
    _, tp, fp = _threshold_counts(pos, neg)
    recall = tp / pos.size
    precision = tp / (tp + fp)
    return float(np.sum(np.diff(np.r_[0.0, recall]) * precision))


def fpr95(pos_scores, neg_scores, tpr: float = 0.95) -> float:
    """False-positive rate at the highest threshold whose TPR reaches ``tpr``."""
    pos, neg = _split_scores(pos_scores, neg_scores)
    _, tp, fp = _threshold_counts(pos, neg)
    # integer comparison avoids rounding at exactly 95%
    num, den = round(tpr * 100), 100
    k = int(np.argmax(tp * den >= num * pos.size))
    return float(fp[k] / neg.size)


def msp(probs) -> np.ndarray:
    return _as_mean(probs).max(axis=1)


def ood_scores(in_probs, out_probs) -> dict[str, float]:
    """AUROC, AUPRC and FPR@95 from maximum softmax probabilities of the aggregated rows."""
    s_in, s_out = msp(in_probs), msp(out_probs)
    return {"auroc": auroc(s_in, s_out), "auprc": auprc(s_in, s_out), "fpr95": fpr95(s_in, s_out)}


# ---------------------------------------------------------------------------
# temperature scaling


def temperature_scale(logits, T: float) -> np.ndarray:
    if not T > 0:
        raise ValueError(f"temperature must be > 0, got {T}")
    return softmax(np.asarray(logits, dtype=np.float64) / T, axis=-1)


def _scaled_nll(logits: np.ndarray, labels: np.ndarray, T: float) -> float:
    if logits.ndim == 2:
        lp = log_softmax(logits / T, axis=-1)[np.arange(len(labels)), labels]
        return float(-np.mean(np.maximum(lp, math.log(PROB_FLOOR))))
    return nll(softmax(logits / T, axis=-1), labels)


def fit_temperature(logits, labels, grid=None) -> float:
    """Grid value minimising NLL; ties go to the smallest temperature.

    ``[N, S, C]`` member logits are each scaled and their probabilities averaged.
    """
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    grid = np.sort(np.asarray(TEMPERATURE_GRID if grid is None else grid, dtype=np.float64))
    if grid.size == 0 or np.any(grid <= 0):
        raise ValueError("temperature grid must be non-empty and positive")
    best_t, best = float(grid[0]), math.inf
    for T in grid:
        v = _scaled_nll(logits, labels, float(T))
        if v < best:
            best_t, best = float(T), v
    return best_t


# ---------------------------------------------------------------------------
# reports


REPORT_SCHEMA = {
    "type": "object",
    "required": ["accuracy", "macro_f1", "ece", "nll", "brier", "temperature", "bins"],
    "additionalProperties": False,
    "properties": {
        "accuracy": {"type": "number", "minimum": 0, "maximum": 1},
        "macro_f1": {"type": "number", "minimum": 0, "maximum": 1},
        "ece": {"type": "number", "minimum": 0, "maximum": 1},
        "nll": {"type": "number", "minimum": 0},
        "brier": {"type": "number", "minimum": 0, "maximum": 2},
        "auroc": {"type": "number", "minimum": 0, "maximum": 1},
        "auprc": {"type": "number", "minimum": 0, "maximum": 1},
        "fpr95": {"type": "number", "minimum": 0, "maximum": 1},
        "temperature": {"type": "number", "exclusiveMinimum": 0},
        "bins": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lo", "hi", "count", "conf", "acc"],
                "additionalProperties": False,
                "properties": {
                    "lo": {"type": "number"}, "hi": {"type": "number"},
                    "count": {"type": "integer", "minimum": 0},
                    "conf": {"type": "number"}, "acc": {"type": "number"},
                },
            },
        },
    },
}


@dataclass
class CalibrationReport:
    accuracy: float
    macro_f1: float
    ece: float
    nll: float
    brier: float
    temperature: float = 1.0
    bins: list = field(default_factory=list)
    auroc: float | None = None
    auprc: float | None = None
    fpr95: float | None = None

    def to_dict(self) -> dict:
        out = {"accuracy": self.accuracy, "macro_f1": self.macro_f1, "ece": self.ece, "nll": self.nll,
               "brier": self.brier}
        for key in ("auroc", "auprc", "fpr95"):
            if getattr(self, key) is not None:
                out[key] = getattr(self, key)
        out["temperature"] = self.temperature
        out["bins"] = self.bins
        return out

    def is_finite(self) -> bool:
        vals = [v for k, v in self.to_dict().items() if k != "bins"]
        return all(math.isfinite(v) for v in vals)


def calibration_report(probs, labels, temperature: float = 1.0, ood_probs=None,
                       M: int = DEFAULT_BINS) -> CalibrationReport:
    """Metric bundle for member probabilities ``[N, S, C]`` (or already aggregated ``[S, C]``)."""
    p = _as_mean(probs)
    labels = np.asarray(labels, dtype=np.int64)
    conf, pred = p.max(axis=1), p.argmax(axis=1)
    bins = reliability_bins(conf, pred == labels, M)
    rep = CalibrationReport(
        accuracy=accuracy(p, labels), macro_f1=macro_f1(pred, labels, p.shape[1]),
        ece=ece(conf, pred == labels, M), nll=nll(p, labels), brier=brier(p, labels),
        temperature=float(temperature), bins=bins.to_list())
    if ood_probs is not None:
        o = ood_scores(p, ood_probs)
        rep.auroc, rep.auprc, rep.fpr95 = o["auroc"], o["auprc"], o["fpr95"]
    return rep


def report_from_logits(member_logits, labels, temperature: float = 1.0, ood_logits=None) -> CalibrationReport:
    """Scale each member's logits by ``1/T``, average probabilities, then score."""
    probs = temperature_scale(member_logits, temperature)
    ood = None if ood_logits is None else temperature_scale(ood_logits, temperature)
    return calibration_report(probs, labels, temperature, ood)
