"""Inference: per-class prototype Gaussians, max-likelihood OOD score, Bayes rule.

Prototypes are arithmetic means of the per-sample (mu, sigma) pairs within
each class; sigma averages in the linear domain.  Scores live in the log
domain throughout - the argmax and every threshold-free metric are invariant
under the monotone log map, and raw densities underflow at realistic
dimensions.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .binio import ByteReader, ByteWriter
from .datasets import FeatureDataset
from .errors import FormatError, InvalidArgument
from .flow import FlowModel, flow_forward
from .loss import LOG_2PI
from .rngstreams import worker_count

log = logging.getLogger(__name__)

PROTO_MAGIC = b"FCPT"
PROTO_VERSION = 1

SCORE_CHUNK = 2048


@dataclass
class ClassPrototypes:
    """Per-class (mu_c, sigma_c) pairs; classes with no samples are omitted."""

    class_ids: np.ndarray            # (k,) uint32, ascending
    mu: np.ndarray                   # (k, d)
    sigma: np.ndarray                # (k, d), strictly positive
    counts: np.ndarray               # (k,) per-class sample counts
    warnings: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.class_ids = np.asarray(self.class_ids, dtype=np.uint32)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        self.counts = np.asarray(self.counts, dtype=np.int64)
        if self.k == 0:
            raise InvalidArgument("prototypes need at least one class")
        if np.any(self.sigma <= 0):
            raise InvalidArgument("prototype sigma entries must be strictly positive")
        if np.any(self.counts < 1):
            raise InvalidArgument("retained classes must have count >= 1")

    @property
    def k(self) -> int:
        return self.class_ids.size

    @property
    def d(self) -> int:
        return self.mu.shape[1]


def _forward_chunked(model: FlowModel, x: np.ndarray, chunk: int = SCORE_CHUNK
                     ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(z_flow, mu, sigma) for all rows; chunks score independently, so the
    result is identical for any worker schedule."""
    n = x.shape[0]
    z = np.empty_like(x)
    mu = np.empty_like(x)
    sigma = np.empty_like(x)

    def run(lo: int) -> None:
        hi = min(lo + chunk, n)
        out = flow_forward(model, x[lo:hi])
        z[lo:hi] = out.z_flow
        mu[lo:hi] = out.mu
        sigma[lo:hi] = np.exp(out.log_sigma)

    starts = list(range(0, n, chunk))
    workers = min(worker_count(), len(starts)) if starts else 1
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    return z, mu, sigma


def _canonical_order(rows: np.ndarray) -> np.ndarray:
    """Index order making per-class sums independent of input row order."""
    return np.lexsort(rows.T[::-1])


def compute_prototypes(model: FlowModel, dataset: FeatureDataset) -> ClassPrototypes:
    """Empirical means of the per-sample prior parameters, one (mu, sigma) pair per class."""
    if len(dataset) == 0:
        raise InvalidArgument("cannot compute prototypes from an empty dataset")
    if dataset.dim != model.d:
        raise InvalidArgument(f"dataset dim {dataset.dim} != model.d {model.d}")
    x = dataset.x64()
    _, mu, sigma = _forward_chunked(model, x)
    warnings: list[str] = []
    n_unlabeled = int(np.sum(~dataset.labeled_mask()))
    if n_unlabeled:
        warnings.append(f"{n_unlabeled} unlabeled rows ignored")
    ids, mus, sigmas, counts = [], [], [], []
    for c in range(dataset.num_classes):
        members = np.flatnonzero(dataset.labels == c)
        if members.size == 0:
            msg = f"class {c} has no samples; omitted from prototypes"
            warnings.append(msg)
            log.warning(msg)
            continue
        stacked = np.concatenate([mu[members], sigma[members]], axis=1)
        order = members[_canonical_order(stacked)]
        ids.append(c)
        mus.append(mu[order].mean(axis=0))
        sigmas.append(sigma[order].mean(axis=0))
        counts.append(members.size)
    if not ids:
        raise InvalidArgument("no labeled samples; cannot build prototypes")
    return ClassPrototypes(np.asarray(ids, np.uint32), np.stack(mus), np.stack(sigmas),
                           np.asarray(counts), warnings)


def prototype_loglik(prototypes: ClassPrototypes, z: np.ndarray) -> np.ndarray:
    """(n, k) log-densities of latent rows under each class Gaussian."""
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    if z.shape[1] != prototypes.d:
        raise InvalidArgument(f"latent dim {z.shape[1]} != prototype dim {prototypes.d}")
    prec = 1.0 / (prototypes.sigma * prototypes.sigma)          # (k, d)
    quad = (z * z) @ prec.T - 2.0 * (z @ (prototypes.mu * prec).T) \
        + np.sum(prototypes.mu * prototypes.mu * prec, axis=1)
    logsig = np.sum(np.log(prototypes.sigma), axis=1)
    return -logsig[None, :] - 0.5 * prototypes.d * LOG_2PI - 0.5 * quad


def score_rows(model: FlowModel, prototypes: ClassPrototypes, x: np.ndarray
               ) -> tuple[np.ndarray, np.ndarray]:
    """(max log-likelihood, winning class id) per row; ties go to the lowest class."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.d or prototypes.d != model.d:
        raise InvalidArgument(f"dimension mismatch: x {x.shape[1]}, model {model.d}, "
                              f"prototypes {prototypes.d}")
    z, _, _ = _forward_chunked(model, x)
    loglik = prototype_loglik(prototypes, z)
    best = np.argmax(loglik, axis=1)                            # first max -> lowest class
    scores = loglik[np.arange(len(z)), best]
    return scores, prototypes.class_ids[best].astype(np.int64)


def ood_score(model: FlowModel, prototypes: ClassPrototypes, x) -> tuple[float, int]:
    """Max class-conditional log-likelihood of one feature vector."""
    arr = np.asarray(x, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"expected a single feature vector, got shape {arr.shape}")
    scores, classes = score_rows(model, prototypes, arr[None, :])
    return float(scores[0]), int(classes[0])


def classify(model: FlowModel, prototypes: ClassPrototypes, x) -> int:
    """Bayes decision rule: the class whose Gaussian assigns the highest likelihood."""
    return ood_score(model, prototypes, x)[1]


# -- prototype container -----------------------------------------------------------

def save_prototypes(p: ClassPrototypes, path) -> None:
    w = ByteWriter(PROTO_MAGIC)
    w.u32(PROTO_VERSION)
    w.u32(p.k)
    w.u32(p.d)
    for i in range(p.k):
        w.u32(int(p.class_ids[i]))
        w.f64_array(p.mu[i])
        w.f64_array(p.sigma[i])
        w.u32(int(p.counts[i]))
    w.save(path)


def load_prototypes(path) -> ClassPrototypes:
    r = ByteReader(path, PROTO_MAGIC)
    version = r.u32()
    if version != PROTO_VERSION:
        raise FormatError(f"{path}: unsupported prototype version {version}")
    k, d = r.u32(), r.u32()
    ids = np.empty(k, np.uint32)
    mu = np.empty((k, d))
    sigma = np.empty((k, d))
    counts = np.empty(k, np.int64)
    for i in range(k):
        ids[i] = r.u32()
        mu[i] = r.f64_array(d)
        sigma[i] = r.f64_array(d)
        counts[i] = r.u32()
    r.expect_end()
    return ClassPrototypes(ids, mu, sigma, counts)
