"""Detection and system metrics. Positive class is always "adversarial"."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.stats import rankdata


def auc(scores_nat, scores_adv) -> float:
    """P(random adversarial score > random natural score), ties counted as 1/2.

    Mann-Whitney U from midranks; equal to the trapezoidal ROC area.
    """
    nat = np.asarray(scores_nat, dtype=np.float64).ravel()
    adv = np.asarray(scores_adv, dtype=np.float64).ravel()
    if nat.size == 0 or adv.size == 0:
        raise ValueError("auc needs non-empty natural and adversarial score arrays")
    ranks = rankdata(np.concatenate([nat, adv]))  # midranks, half-integers
    u = ranks[nat.size:].sum() - adv.size * (adv.size + 1) / 2
    return float(u / (nat.size * adv.size))


def auc_bruteforce(scores_nat, scores_adv) -> float:
    nat = np.asarray(scores_nat, dtype=np.float64).ravel()
    adv = np.asarray(scores_adv, dtype=np.float64).ravel()
    if nat.size == 0 or adv.size == 0:
        raise ValueError("auc needs non-empty natural and adversarial score arrays")
    wins = 0.0
    for a in adv:
        wins += np.sum(a > nat) + 0.5 * np.sum(a == nat)
    return float(wins / (nat.size * adv.size))


def roc_curve(scores_nat, scores_adv) -> tuple:
    """(false positive rates, true positive rates) over every distinct threshold."""
    nat = np.asarray(scores_nat, dtype=np.float64)
    adv = np.asarray(scores_adv, dtype=np.float64)
    thr = np.unique(np.concatenate([nat, adv]))[::-1]
    fpr = [0.0] + [float(np.mean(nat >= t)) for t in thr]
    tpr = [0.0] + [float(np.mean(adv >= t)) for t in thr]
    return np.array(fpr), np.array(tpr)


def _as_bool(v) -> np.ndarray:
    arr = np.asarray(v)
    if arr.dtype.kind in "US":
        return arr == "adversarial"
    return arr.astype(bool)


def confusion(predicted_adv, truth_adv) -> dict:
    p, t = _as_bool(predicted_adv), _as_bool(truth_adv)
    if p.shape != t.shape:
        raise ValueError(f"verdicts {p.shape} and truth {t.shape} are not aligned")
    return {"TP": int(np.sum(p & t)), "FP": int(np.sum(p & ~t)),
            "FN": int(np.sum(~p & t)), "TN": int(np.sum(~p & ~t))}


def f1(predicted_adv, truth_adv) -> float:
    c = confusion(predicted_adv, truth_adv)
    tp, fp, fn = c["TP"], c["FP"], c["FN"]
    if tp + fp == 0:
        return 1.0 if fn == 0 else 0.0
    if tp == 0:
        return 0.0
    precision = tp / (tp + fp)
    recall = tp / (tp + fn)
    return 2 * precision * recall / (precision + recall)


def error_accuracy(detector_adv, classifier_pred, labels, is_adv) -> tuple:
    """(Error %, Accuracy %).

    Error: adversarial inputs the detector passed AND the classifier got wrong,
    over all adversarial inputs. Accuracy: natural inputs the detector passed
    AND the classifier got right, over all natural inputs.
    """
    det = _as_bool(detector_adv)
    pred = np.asarray(classifier_pred)
    lab = np.asarray(labels)
    adv = _as_bool(is_adv)
    if not (det.shape == pred.shape == lab.shape == adv.shape):
        raise ValueError("detector verdicts, predictions, labels and flags must be aligned")
    n_adv, n_nat = int(adv.sum()), int((~adv).sum())
    if n_adv == 0 or n_nat == 0:
        raise ValueError("need at least one natural and one adversarial sample")
    wrong = pred != lab
    error = 100.0 * np.sum(adv & ~det & wrong) / n_adv
    accuracy = 100.0 * np.sum(~adv & ~det & ~wrong) / n_nat
    return float(error), float(accuracy)


@dataclass
class EvalReport:
    auc: float
    f1: float
    error: float
    accuracy: float
    confusion: dict
    baseline_error: Optional[float] = None
    baseline_accuracy: Optional[float] = None
    scores_nat: Optional[np.ndarray] = field(default=None, repr=False)
    scores_adv: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        if not (0 <= self.auc <= 1 and 0 <= self.f1 <= 1):
            raise ValueError("AUC and F1 must lie in [0, 1]")
        if not (0 <= self.error <= 100 and 0 <= self.accuracy <= 100):
            raise ValueError("Error and Accuracy are percentages")

    def as_dict(self) -> dict:
        return {
            "positive_class": "adversarial",
            "AUC": self.auc,
            "F1": self.f1,
            "Error_pct": self.error,
            "Accuracy_pct": self.accuracy,
            "baseline_Error_pct": self.baseline_error,
            "baseline_Accuracy_pct": self.baseline_accuracy,
            "confusion": self.confusion,
        }


def evaluate(scores_nat, scores_adv, verdicts_nat, verdicts_adv, pred_nat, pred_adv,
             labels_nat, labels_adv, keep_scores: bool = False) -> EvalReport:
    """AUC from continuous scores; F1/Error/Accuracy from operational verdicts."""
    v = np.concatenate([_as_bool(verdicts_nat), _as_bool(verdicts_adv)])
    truth = np.concatenate([np.zeros(len(verdicts_nat), bool), np.ones(len(verdicts_adv), bool)])
    preds = np.concatenate([np.asarray(pred_nat), np.asarray(pred_adv)])
    labels = np.concatenate([np.asarray(labels_nat), np.asarray(labels_adv)])
    err, acc = error_accuracy(v, preds, labels, truth)
    base_err, base_acc = error_accuracy(np.zeros_like(v), preds, labels, truth)
    return EvalReport(
        auc=auc(scores_nat, scores_adv),
        f1=f1(v, truth),
        error=err,
        accuracy=acc,
        confusion=confusion(v, truth),
        baseline_error=base_err,
        baseline_accuracy=base_acc,
        scores_nat=np.asarray(scores_nat) if keep_scores else None,
        scores_adv=np.asarray(scores_adv) if keep_scores else None,
    )
