"""Dice scoring, per-model summaries, and residual histograms."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, DimensionError, ParameterError
from .pipeline import _arr

RESULTS_HEADER = ["model", "latent_spec", "patient_id", "dice", "seconds"]
SUMMARY_HEADER = ["model", "latent_spec", "dice_mean", "dice_std", "avg_seconds"]
HISTOGRAM_HEADER = ["bin_lo", "bin_hi", "count_normal", "count_anomalous"]


def dice(pred, truth) -> float:
    """2|P & T| / (|P| + |T|); two empty masks score 1.0."""
    p = _arr(pred).astype(bool)
    t = _arr(truth).astype(bool)
    if p.shape != t.shape:
        raise DimensionError(f"dice: prediction {p.shape} vs truth {t.shape}")
    denom = int(p.sum()) + int(t.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, t).sum()) / denom


@dataclass
class DiceReport:
    per_patient: list[float]
    mean: float
    std: float
    avg_seconds: float
    model: str = ""
    latent_spec: str = ""

    def row(self) -> list[str]:
        return [self.model, self.latent_spec, f"{self.mean:.6f}", f"{self.std:.6f}", f"{self.avg_seconds:.6f}"]


def aggregate(per_patient, timings, model: str = "", latent_spec: str = "") -> DiceReport:
    """Mean and population std of Dice, mean of per-sample timings."""
    scores = np.asarray(list(per_patient), dtype=np.float64)
    times = np.asarray(list(timings), dtype=np.float64)
    if scores.size == 0 or times.size == 0:
        raise ContractError("aggregate: need at least one patient and one timing")
    return DiceReport([float(s) for s in scores], float(scores.mean()), float(scores.std()),
                      float(times.mean()), model, latent_spec)


def residual_histogram(residuals, lesion_mask, brain_mask, bins: int = 50):
    """Histograms of residuals over normal-brain and lesion voxels on shared edges.

    Returns ``(edges, count_normal, count_anomalous)``.
    """
    if bins < 2:
        raise ParameterError(f"need at least 2 bins, got {bins}")
    r = _arr(residuals).astype(np.float64)
    les = _arr(lesion_mask).astype(bool)
    brain = _arr(brain_mask).astype(bool)
    if not (r.shape == les.shape == brain.shape):
        raise DimensionError(f"residual_histogram: {r.shape}, {les.shape}, {brain.shape}")
    normal_vals = r[brain & ~les]
    lesion_vals = r[les]
    both = np.concatenate([normal_vals, lesion_vals])
    top = float(both.max()) if both.size else 0.0
    edges = np.linspace(0.0, top if top > 0 else 1.0, bins + 1)
    cn, _ = np.histogram(normal_vals, bins=edges)
    ca, _ = np.histogram(lesion_vals, bins=edges)
    return edges, cn, ca


def write_results_csv(path, rows) -> None:
    """rows: iterables of (model, latent_spec, patient_id, dice, seconds)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(RESULTS_HEADER)
        for model, latent, pid, d, s in rows:
            w.writerow([model, latent, pid, f"{d:.6f}", f"{s:.6f}"])


def read_results_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary_csv(path, reports) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_HEADER)
        for rep in reports:
            w.writerow(rep.row())


def write_histogram_csv(path, edges, count_normal, count_anomalous) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(HISTOGRAM_HEADER)
        for lo, hi, cn, ca in zip(edges[:-1], edges[1:], count_normal, count_anomalous):
            w.writerow([f"{lo:.6g}", f"{hi:.6g}", int(cn), int(ca)])
