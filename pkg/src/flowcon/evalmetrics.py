"""Threshold-free detection metrics and the paired ID/OOD evaluation protocol.

Scores are "higher = more in-distribution".  A sample is accepted as ID when
its score is >= the threshold.  AUROC uses the Mann-Whitney pairwise form
with half-credit ties; AUPR integrates the precision-recall curve stepwise
over all distinct thresholds (ties grouped); FPR-95 takes the largest
threshold that still admits the target fraction of ID.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .datasets import FeatureDataset
from .errors import InvalidArgument
from .oodscore import ClassPrototypes, score_rows
from .rngstreams import STREAM_SUBSAMPLE, substream

log = logging.getLogger(__name__)

HIST_BINS = 100
DEFAULT_RATIO = 0.2


@dataclass
class ScoredSets:
    """Score vectors for one (ID, OOD) pairing."""

    id_scores: np.ndarray
    ood_scores: np.ndarray

    def __post_init__(self):
        self.id_scores = np.asarray(self.id_scores, dtype=np.float64).reshape(-1)
        self.ood_scores = np.asarray(self.ood_scores, dtype=np.float64).reshape(-1)

    def require_nonempty(self) -> None:
        if self.id_scores.size == 0 or self.ood_scores.size == 0:
            raise InvalidArgument("metrics need non-empty ID and OOD score sets")
        if not (np.all(np.isfinite(self.id_scores)) and np.all(np.isfinite(self.ood_scores))):
            raise InvalidArgument("scores must be finite")


def auroc(s: ScoredSets) -> float:
    """P(random ID score > random OOD score) with half-credit for ties."""
    s.require_nonempty()
    ood = np.sort(s.ood_scores)
    below = np.searchsorted(ood, s.id_scores, side="left")
    below_or_equal = np.searchsorted(ood, s.id_scores, side="right")
    wins = below.sum() + 0.5 * (below_or_equal - below).sum()
    return float(wins / (s.id_scores.size * s.ood_scores.size))


def _average_precision(pos: np.ndarray, neg: np.ndarray) -> float:
    """Stepwise PR area over all distinct thresholds, descending, ties grouped."""
    scores = np.concatenate([pos, neg])
    is_pos = np.concatenate([np.ones(pos.size, bool), np.zeros(neg.size, bool)])
    order = np.argsort(-scores, kind="stable")
    scores = scores[order]
    is_pos = is_pos[order]
    boundary = np.flatnonzero(np.diff(scores) != 0)
    ends = np.concatenate([boundary, [scores.size - 1]])
    tp = np.cumsum(is_pos)[ends].astype(np.float64)
    predicted = (ends + 1).astype(np.float64)
    precision = tp / predicted
    recall = tp / pos.size
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_recall) * precision))


def aupr(s: ScoredSets, positive: str = "id") -> float:
    """PR area with ID as positive ('id'; high scores) or OOD ('ood'; low scores)."""
    s.require_nonempty()
    if positive == "id":
        return _average_precision(s.id_scores, s.ood_scores)
    if positive == "ood":
        return _average_precision(-s.ood_scores, -s.id_scores)
    raise InvalidArgument(f"positive must be 'id' or 'ood', got {positive!r}")


def fpr_at_tpr(s: ScoredSets, tpr_target: float = 0.95) -> float:
    """OOD acceptance rate at the largest threshold keeping >= target ID acceptance."""
    s.require_nonempty()
    if not (0.0 < tpr_target <= 1.0):
        raise InvalidArgument(f"tpr_target must be in (0, 1], got {tpr_target}")
    n = s.id_scores.size
    k = int(np.ceil(tpr_target * n))
    while k > 1 and (k - 1) / n >= tpr_target:   # guard float roundoff in ceil
        k -= 1
    while k < n and k / n < tpr_target:
        k += 1
    threshold = np.partition(s.id_scores, n - k)[n - k]
    return float(np.mean(s.ood_scores >= threshold))


def subsample_ood(ood: FeatureDataset, id_test_count: int, ratio: float, seed: int
                  ) -> tuple[FeatureDataset, str | None]:
    """Seeded sample without replacement of floor(ratio * id_test_count) rows.

    The stream depends on the master seed only, so identical OOD sets in one
    suite draw identical subsamples and produce identical reports.
    """
    if ratio <= 0:
        raise InvalidArgument("ratio must be positive")
    want = int(np.floor(ratio * id_test_count + 1e-9))
    warning = None
    if want > len(ood):
        warning = (f"requested {want} OOD rows but only {len(ood)} available; using all")
        log.warning(warning)
        want = len(ood)
    rng = substream(seed, STREAM_SUBSAMPLE)
    idx = rng.choice(len(ood), size=want, replace=False)
    return ood.take(idx), warning


def histogram(id_scores: np.ndarray, ood_scores: np.ndarray, bins: int = HIST_BINS) -> dict:
    """Fixed uniform bins over the pooled score range; counts per source."""
    pooled = np.concatenate([id_scores, ood_scores])
    lo, hi = float(pooled.min()), float(pooled.max())
    if lo == hi:
        lo, hi = lo - 0.5, hi + 0.5
    edges = np.linspace(lo, hi, bins + 1)
    id_counts, _ = np.histogram(id_scores, bins=edges)
    ood_counts, _ = np.histogram(ood_scores, bins=edges)
    return {"bin_left": edges[:-1].tolist(), "bin_right": edges[1:].tolist(),
            "id_count": id_counts.tolist(), "ood_count": ood_counts.tolist()}


def write_histogram_csv(hist: dict, path: str | Path) -> None:
    with open(path, "w") as fh:
        fh.write("bin_left,bin_right,id_count,ood_count\n")
        for left, right, idc, oodc in zip(hist["bin_left"], hist["bin_right"],
                                          hist["id_count"], hist["ood_count"]):
            fh.write(f"{left!r},{right!r},{idc},{oodc}\n")


@dataclass
class EvalReport:
    """Metrics, counts, and plot data for one (ID, OOD) pairing or their mean."""

    name: str
    auroc: float | None = None
    aupr_s: float | None = None
    aupr_e: float | None = None
    fpr95: float | None = None
    accuracy: float | None = None
    n_id: int = 0
    n_ood: int = 0
    seed: int = 0
    ratio: float = DEFAULT_RATIO
    histogram: dict | None = None
    warnings: list[str] = field(default_factory=list)
    error: str | None = None

    def metrics_ok(self) -> bool:
        return self.error is None

    def to_json(self, include_histogram: bool = True) -> str:
        payload = {"name": self.name, "auroc": self.auroc, "aupr_s": self.aupr_s,
                   "aupr_e": self.aupr_e, "fpr95": self.fpr95, "accuracy": self.accuracy,
                   "n_id": self.n_id, "n_ood": self.n_ood, "seed": self.seed,
                   "ratio": self.ratio, "warnings": self.warnings, "error": self.error}
        if include_histogram:
            payload["histogram"] = self.histogram
        return json.dumps(payload, sort_keys=True)


def evaluate_suite(model, prototypes: ClassPrototypes, id_test: FeatureDataset,
                   ood_sets: list[tuple[str, FeatureDataset]], seed: int,
                   ratio: float = DEFAULT_RATIO, bins: int = HIST_BINS,
                   accuracy: float | None = None) -> list[EvalReport]:
    """Score ID once, pair it against each OOD set, and append the unweighted mean."""
    if len(id_test) == 0:
        raise InvalidArgument("empty ID test set")
    id_scores, _ = score_rows(model, prototypes, id_test.x64())
    reports: list[EvalReport] = []
    for name, ood in ood_sets:
        if len(ood) == 0:
            reports.append(EvalReport(name=name, n_id=id_scores.size, seed=seed,
                                      ratio=ratio, error="empty OOD set"))
            continue
        sub, warning = subsample_ood(ood, len(id_test), ratio, seed)
        ood_scores, _ = score_rows(model, prototypes, sub.x64())
        pair = ScoredSets(id_scores, ood_scores)
        report = EvalReport(
            name=name,
            auroc=auroc(pair),
            aupr_s=aupr(pair, "id"),
            aupr_e=aupr(pair, "ood"),
            fpr95=fpr_at_tpr(pair, 0.95),
            accuracy=accuracy,
            n_id=id_scores.size,
            n_ood=ood_scores.size,
            seed=seed,
            ratio=ratio,
            histogram=histogram(id_scores, ood_scores, bins),
        )
        if warning:
            report.warnings.append(warning)
        reports.append(report)
    valid = [r for r in reports if r.metrics_ok()]
    if valid:
        mean = EvalReport(
            name="mean",
            auroc=float(np.mean([r.auroc for r in valid])),
            aupr_s=float(np.mean([r.aupr_s for r in valid])),
            aupr_e=float(np.mean([r.aupr_e for r in valid])),
            fpr95=float(np.mean([r.fpr95 for r in valid])),
            accuracy=accuracy,
            n_id=id_scores.size,
            n_ood=int(sum(r.n_ood for r in valid)),
            seed=seed,
            ratio=ratio,
        )
    else:
        mean = EvalReport(name="mean", n_id=id_scores.size, seed=seed, ratio=ratio,
                          error="no valid OOD pairings")
    reports.append(mean)
    return reports
