"""Entropy, KL and calibration measurements over saliency maps (natural log throughout)."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .teacher import SaliencyMap

__all__ = [
    "MAX_ENTROPY",
    "EntropyReport",
    "CalibrationSeries",
    "map_entropy",
    "kl_divergence",
    "entropy_histogram",
    "calibration_series",
    "pearson",
    "student_maps",
    "mean_aligned_entropy",
]

MAX_ENTROPY = math.log(1024)
_NORM_TOL = 1e-4


def _values(m) -> np.ndarray:
    arr = m.grid if isinstance(m, SaliencyMap) else m
    arr = getattr(arr, "data", arr)
    return np.asarray(arr, dtype=np.float64)


def _check_normalized(p: np.ndarray, what: str) -> None:
    if not np.all(np.isfinite(p)):
        raise ValueError(f"{what}: non-finite entries")
    if np.any(p < 0):
        raise ValueError(f"{what}: negative entries")
    total = p.sum()
    if abs(total - 1.0) > _NORM_TOL:
        raise ValueError(f"{what}: map sums to {total:.6g}, expected 1")


def map_entropy(m) -> float:
    """Shannon entropy in nats with ``0 log 0 = 0``."""
    p = _values(m)
    _check_normalized(p, "map_entropy")
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def kl_divergence(p, q, epsilon: float = 1e-8) -> float:
    """``KL(p || q')`` where ``q'`` is ``q + epsilon`` renormalized."""
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    p, q = _values(p), _values(q)
    if p.shape != q.shape:
        raise ValueError(f"kl_divergence: shapes differ {p.shape} vs {q.shape}")
    _check_normalized(p, "kl_divergence p")
    _check_normalized(q, "kl_divergence q")
    q = (q + epsilon) / (q + epsilon).sum()
    nz = p > 0
    out = float((p[nz] * (np.log(p[nz]) - np.log(q[nz]))).sum())
    if not math.isfinite(out):
        raise ValueError("kl_divergence: non-finite result")
    return max(out, 0.0)


@dataclass
class EntropyReport:
    group: str
    entropies: np.ndarray
    edges: np.ndarray
    counts: np.ndarray

    @property
    def mean(self) -> float:
        return float(self.entropies.mean())

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["group", "bin_lo", "bin_hi", "count"])
            for lo, hi, c in zip(self.edges[:-1], self.edges[1:], self.counts):
                w.writerow([self.group, f"{lo:.6f}", f"{hi:.6f}", int(c)])

    def write_gnuplot(self, path: str) -> None:
        """Two columns: bin centre (nats), count."""
        centres = 0.5 * (self.edges[:-1] + self.edges[1:])
        with open(path, "w") as fh:
            fh.write(f"# {self.group} entropy histogram (nats)\n")
            for c, n in zip(centres, self.counts):
                fh.write(f"{c:.6f} {int(n)}\n")


def entropy_histogram(maps: Iterable, n_bins: int = 20, group: str = "teacher") -> EntropyReport:
    """Entropies binned uniformly over ``[0, ln 1024]``; the top edge is inclusive."""
    if n_bins < 1:
        raise ValueError("n_bins must be >= 1")
    ents = np.array([map_entropy(m) for m in maps], dtype=np.float64)
    if ents.size == 0:
        raise ValueError("entropy_histogram: no maps")
    ents = np.clip(ents, 0.0, MAX_ENTROPY)
    edges = np.linspace(0.0, MAX_ENTROPY, n_bins + 1)
    counts, _ = np.histogram(ents, bins=edges)
    return EntropyReport(group, ents, edges, counts)


def pearson(x: Sequence[float], y: Sequence[float]) -> float | None:
    """Correlation coefficient, or ``None`` when either series is constant."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.size < 2:
        raise ValueError("pearson: need two equal-length series of length >= 2")
    if np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    dx, dy = x - x.mean(), y - y.mean()
    sx, sy = math.sqrt((dx * dx).sum()), math.sqrt((dy * dy).sum())
    return float(np.clip((dx * dy).sum() / (sx * sy), -1.0, 1.0))


@dataclass
class CalibrationSeries:
    points: list[tuple[float, float]] = field(default_factory=list)

    @property
    def correlation(self) -> float | None:
        return pearson([a for a, _ in self.points], [b for _, b in self.points])

    def write_csv(self, path: str) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "l_att", "metric"])
            for i, (a, b) in enumerate(self.points, 1):
                w.writerow([i, repr(a), repr(b)])
            r = self.correlation
            w.writerow(["pearson", "" if r is None else repr(r), ""])


def calibration_series(log, metric: Sequence[float] | None = None) -> CalibrationSeries:
    """Pair epoch-mean L_att with the epoch's eval metric.

    ``log`` is a TrainLog. Without ``metric`` the per-epoch eval accuracy
    stored in the log is used. Epochs with no L_att are skipped.
    """
    epochs = log.epochs
    if metric is None:
        metric = [e.eval_acc for e in epochs]
    if len(metric) != len(epochs):
        raise ValueError("one metric value per epoch required")
    pts = [(e.l_att, float(m)) for e, m in zip(epochs, metric) if e.l_att is not None and m is not None]
    if len(pts) < 3:
        raise ValueError(f"calibration needs >= 3 epochs with L_att, got {len(pts)}")
    if not all(math.isfinite(a) and math.isfinite(b) for a, b in pts):
        raise ValueError("calibration series has non-finite values")
    return CalibrationSeries(pts)


# -- maps from a model ----------------------------------------------------------------

def student_maps(model, data, cfg, aligner=None, parallel=None, batch: int = 64):
    """Per matched word: (sample id, word, raw 32x32 student map, aligned map or None, teacher map)."""
    from .trainer import compute_losses

    out = []
    for i in range(0, len(data), batch):
        chunk = data[i:i + batch]
        parts = compute_losses(model, chunk, cfg.__class__(**{**cfg.__dict__, "objective": "lavender"}),
                               aligner, parallel, training=False) if aligner is not None else \
            _raw_only(model, chunk, cfg, parallel)
        if parts is None or parts.student is None:
            continue
        for j, (b, _, word) in enumerate(parts.matches):
            out.append((chunk[b][0].sample_id, word, parts.student.data[j],
                        None if parts.aligned is None else parts.aligned.data[j], parts.teacher[j]))
    return out


def _raw_only(model, chunk, cfg, parallel):
    from .aggregation import aggregate
    from .spatial import resize_to_standard, row_to_grid
    from .trainer import LossParts, match_words

    samples = [s for s, _ in chunk]
    _, record = model.forward(samples)
    matches = [(b, pos, w) for b, (s, t) in enumerate(chunk)
               for pos, w in match_words(s.label_words, t.keys(), cfg.match_mode)]
    if not matches:
        return None
    agg = aggregate(record, cfg.agg_mode, parallel, cfg.layer_subset)
    b_idx = np.array([m[0] for m in matches], dtype=np.intp)
    t_idx = np.array([samples[b].label_positions()[p] for b, p, _ in matches], dtype=np.intp)
    student = resize_to_standard(row_to_grid(agg.data[b_idx, t_idx], model.config.patch_grid))
    teacher = np.stack([chunk[b][1][w].grid for b, _, w in matches])
    return LossParts(None, None, None, matches, student, None, teacher)


def mean_aligned_entropy(model, data, cfg, aligner, parallel=None) -> float:
    maps = student_maps(model, data, cfg, aligner, parallel)
    return float(np.mean([map_entropy(m[3]) for m in maps]))
