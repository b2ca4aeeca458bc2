"""Forecast metrics: RMSE, training effort, relative RMSE change, sunny/cloudy
breakdown and the least-squares scale diagnostic."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import numpy as np


def _pair(pred, truth) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=float).ravel()
    truth = np.asarray(truth, dtype=float).ravel()
    if pred.shape != truth.shape:
        raise ValueError(f"prediction and truth lengths differ: {pred.size} vs {truth.size}")
    if pred.size == 0:
        raise ValueError("cannot score zero samples")
    return pred, truth


def rmse(pred, truth) -> float:
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def training_effort(epochs, train_size):
    """Samples seen: ``epochs * train_size`` (exact for integers)."""
    if epochs <= 0 or train_size <= 0:
        raise ValueError("epochs and train_size must be positive")
    return epochs * train_size


def delta_rmse_pct(candidate: float, baseline: float) -> float:
    """Percent change of ``candidate`` relative to ``baseline``; negative is better."""
    if not baseline > 0:
        raise ValueError(f"baseline RMSE must be positive, got {baseline}")
    if candidate == baseline:
        return 0.0
    return 100.0 * (candidate - baseline) / baseline


@dataclass
class EvaluationResult:
    rmse_overall: float
    rmse_sunny: float
    rmse_cloudy: float
    n_samples: int
    n_sunny: int
    n_cloudy: int

    def check_stratification(self, rel: float = 1e-9) -> bool:
        total = self.rmse_overall ** 2 * self.n_samples
        parts = sum(r ** 2 * n for r, n in ((self.rmse_sunny, self.n_sunny), (self.rmse_cloudy, self.n_cloudy)) if n)
        return abs(total - parts) <= rel * max(abs(total), 1e-300)


def evaluate_predictions(pred, truth, days, labels: Mapping[int, str]) -> EvaluationResult:
    """Overall and per-label RMSE; every sample's day must carry a label."""
    pred, truth = _pair(pred, truth)
    days = np.asarray(days).ravel()
    if days.shape != pred.shape:
        raise ValueError("days must align with predictions")
    unlabelled = sorted({int(d) for d in np.unique(days)} - set(labels))
    if unlabelled:
        from .data import day_to_iso

        raise ValueError(f"test days without a sunny/cloudy label: {[day_to_iso(d) for d in unlabelled]}")
    label = np.array([labels[int(d)] for d in days])
    bad = set(np.unique(label)) - {"sunny", "cloudy"}
    if bad:
        raise ValueError(f"unknown day labels {sorted(bad)}")
    strata = {}
    for name in ("sunny", "cloudy"):
        sel = label == name
        strata[name] = (rmse(pred[sel], truth[sel]) if sel.any() else float("nan"), int(sel.sum()))
    return EvaluationResult(rmse(pred, truth), strata["sunny"][0], strata["cloudy"][0],
                            pred.size, strata["sunny"][1], strata["cloudy"][1])


def evaluate(ensemble, samples, labels: Mapping[int, str], site=None) -> EvaluationResult:
    """Ensemble predictions on ``samples`` scored in original units."""
    from .training import ensemble_predict

    pred = ensemble_predict(ensemble, samples, site=site)
    return evaluate_predictions(pred, samples.raw_target, samples.days, labels)


@dataclass
class ScaleDiagnostic:
    best_factor: float
    rmse_before: float
    rmse_after: float
    pearson_r: float


def scale_diagnostic(pred, truth) -> ScaleDiagnostic:
    """Least-squares factor through the origin, ``c* = <p, t> / <p, p>``, and
    the RMSE before and after rescaling the predictions by it."""
    pred, truth = _pair(pred, truth)
    pp = float(pred @ pred)
    if pp == 0:
        raise ValueError("predictions are all zero")
    if np.var(truth) == 0:
        raise ValueError("truth has zero variance")
    c = float(pred @ truth) / pp
    r = float(np.corrcoef(pred, truth)[0, 1]) if np.var(pred) > 0 else float("nan")
    return ScaleDiagnostic(c, rmse(pred, truth), rmse(c * pred, truth), r)
