"""Labeled feature-vector datasets: file I/O, synthetic generators, splitting.

Features travel as float32 on disk (the FCFT container) and are widened to
float64 at the math boundary.  OOD files carry the sentinel label
``UNLABELED`` (0xFFFFFFFF).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .binio import ByteReader, ByteWriter
from .errors import InvalidArgument
from .rngstreams import STREAM_SPLIT, STREAM_SYNTH, substream

log = logging.getLogger(__name__)

MAGIC = b"FCFT"
FORMAT_VERSION = 1
UNLABELED = 0xFFFFFFFF

# Sampling box and curve margin for the synthetic off-manifold set paired
# with gen_moons.
MOONS_BOX = ((-1.5, 2.5), (-1.0, 1.5))
MOONS_MARGIN = 0.3


@dataclass
class FeatureDataset:
    """Rows of (label, float32 feature vector) plus shape metadata."""

    dim: int
    num_classes: int
    labels: np.ndarray          # uint32 (n,)
    features: np.ndarray        # float32 (n, dim)
    provenance: str = ""

    def __post_init__(self):
        self.labels = np.ascontiguousarray(self.labels, dtype=np.uint32)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.features.shape[1] != self.dim:
            raise InvalidArgument(f"features shape {self.features.shape} != (n, {self.dim})")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidArgument("labels/features row count mismatch")
        real = self.labels[self.labels != UNLABELED]
        if real.size and int(real.max()) >= self.num_classes:
            raise InvalidArgument(f"label {int(real.max())} >= num_classes {self.num_classes}")
        if not np.all(np.isfinite(self.features)):
            raise InvalidArgument("non-finite feature values")

    def __len__(self) -> int:
        return self.features.shape[0]

    def x64(self) -> np.ndarray:
        """Features widened to float64 for computation."""
        return self.features.astype(np.float64)

    def labeled_mask(self) -> np.ndarray:
        return self.labels != UNLABELED

    def take(self, indices: np.ndarray) -> "FeatureDataset":
        return FeatureDataset(self.dim, self.num_classes, self.labels[indices],
                              self.features[indices], self.provenance)


def write_features(ds: FeatureDataset, path: str | Path) -> None:
    w = ByteWriter(MAGIC)
    w.u32(FORMAT_VERSION)
    w.u32(len(ds))
    w.u32(ds.dim)
    w.u32(ds.num_classes)
    w.utf8(ds.provenance)
    for i in range(len(ds)):
        w.u32(int(ds.labels[i]))
        w.f32_array(ds.features[i])
    w.save(path)


def read_features(path: str | Path) -> FeatureDataset:
    r = ByteReader(path, MAGIC)
    version = r.u32()
    if version != FORMAT_VERSION:
        raise InvalidArgument(f"{path}: unsupported feature-file version {version}")
    count = r.u32()
    dim = r.u32()
    num_classes = r.u32()
    provenance = r.utf8()
    labels = np.empty(count, dtype=np.uint32)
    features = np.empty((count, dim), dtype=np.float32)
    for i in range(count):
        labels[i] = r.u32()
        features[i] = r.f32_raw(dim)
    r.expect_end()
    return FeatureDataset(dim, num_classes, labels, features, provenance)


def moon_points(n: int, noise: float, rng: np.random.Generator
                ) -> tuple[np.ndarray, np.ndarray]:
    """Float64 moon construction: (points, labels) on the two half-circle curves."""
    half = n // 2
    theta0 = rng.uniform(0.0, np.pi, size=half)
    theta1 = rng.uniform(0.0, np.pi, size=half)
    pts0 = np.stack([np.cos(theta0), np.sin(theta0)], axis=1)
    pts1 = np.stack([1.0 - np.cos(theta1), 0.5 - np.sin(theta1)], axis=1)
    pts = np.concatenate([pts0, pts1], axis=0)
    if noise > 0:
        pts = pts + rng.normal(0.0, noise, size=pts.shape)
    labels = np.concatenate([np.zeros(half, np.uint32), np.ones(half, np.uint32)])
    return pts, labels


def gen_moons(n: int, noise: float, seed: int) -> FeatureDataset:
    """Two interleaving half-circles, n/2 points per class, isotropic noise."""
    if n < 2 or n % 2 != 0:
        raise InvalidArgument(f"n must be even and >= 2, got {n}")
    if noise < 0:
        raise InvalidArgument("noise must be >= 0")
    pts, labels = moon_points(n, noise, substream(seed, STREAM_SYNTH))
    return FeatureDataset(2, 2, labels, pts.astype(np.float32),
                          provenance=f"moons n={n} noise={noise} seed={seed}")


def _half_circle_distance(pts: np.ndarray, center: np.ndarray, upper: bool) -> np.ndarray:
    """Distance from each point to a unit half-circle arc around ``center``."""
    rel = pts - center
    r = np.linalg.norm(rel, axis=1)
    ang = np.arctan2(rel[:, 1], rel[:, 0])
    on_arc = (ang >= 0) if upper else (ang <= 0)
    arc_dist = np.abs(r - 1.0)
    end_a = center + np.array([1.0, 0.0])
    end_b = center - np.array([1.0, 0.0])
    endpoint_dist = np.minimum(np.linalg.norm(pts - end_a, axis=1),
                               np.linalg.norm(pts - end_b, axis=1))
    return np.where(on_arc, arc_dist, endpoint_dist)


def moons_curve_distance(pts: np.ndarray) -> np.ndarray:
    """Distance to the nearest of the two noiseless moon curves."""
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    d0 = _half_circle_distance(pts, np.array([0.0, 0.0]), upper=True)
    d1 = _half_circle_distance(pts, np.array([1.0, 0.5]), upper=False)
    return np.minimum(d0, d1)


def gen_moons_ood(n: int, seed: int) -> FeatureDataset:
    """Uniform box samples rejected within MOONS_MARGIN of either moon curve."""
    if n < 1:
        raise InvalidArgument("n must be >= 1")
    rng = substream(seed, STREAM_SYNTH, 1)
    (x_lo, x_hi), (y_lo, y_hi) = MOONS_BOX
    rows: list[np.ndarray] = []
    kept = 0
    while kept < n:
        cand = rng.uniform([x_lo, y_lo], [x_hi, y_hi], size=(max(64, 2 * (n - kept)), 2))
        ok = cand[moons_curve_distance(cand) >= MOONS_MARGIN]
        rows.append(ok)
        kept += len(ok)
    pts = np.concatenate(rows, axis=0)[:n]
    labels = np.full(n, UNLABELED, dtype=np.uint32)
    return FeatureDataset(2, 2, labels, pts.astype(np.float32),
                          provenance=f"moons-ood n={n} seed={seed}")


def gen_blobs(k: int, d: int, n_per_class: int, mean_scale: float, sigma: float,
              seed: int) -> FeatureDataset:
    """Isotropic Gaussian classes with means drawn on the radius-``mean_scale`` sphere."""
    if k < 1 or d < 2:
        raise InvalidArgument(f"need k >= 1 and d >= 2, got k={k}, d={d}")
    if n_per_class < 1:
        raise InvalidArgument("n_per_class must be >= 1")
    rng = substream(seed, STREAM_SYNTH)
    means = blob_means(k, d, mean_scale, rng)
    feats = np.empty((k * n_per_class, d), dtype=np.float64)
    labels = np.empty(k * n_per_class, dtype=np.uint32)
    for c in range(k):
        block = slice(c * n_per_class, (c + 1) * n_per_class)
        feats[block] = means[c] + (sigma * rng.standard_normal((n_per_class, d)) if sigma > 0
                                   else 0.0)
        labels[block] = c
    return FeatureDataset(d, k, labels, feats.astype(np.float32),
                          provenance=f"blobs k={k} d={d} n={n_per_class} "
                                     f"scale={mean_scale} sigma={sigma} seed={seed}")


def blob_means(k: int, d: int, mean_scale: float, rng: np.random.Generator) -> np.ndarray:
    raw = rng.standard_normal((k, d))
    norms = np.linalg.norm(raw, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return mean_scale * raw / norms


def gen_blobs_ood(n: int, d: int, mean_scale: float, sigma: float, displacement: float,
                  seed: int, num_classes: int = 0) -> FeatureDataset:
    """A single blob displaced to radius ``displacement * mean_scale``; all rows unlabeled."""
    if n < 1 or d < 2:
        raise InvalidArgument("need n >= 1 and d >= 2")
    rng = substream(seed, STREAM_SYNTH, 1)
    center = blob_means(1, d, displacement * mean_scale, rng)[0]
    feats = np.tile(center, (n, 1))
    if sigma > 0:
        feats += sigma * rng.standard_normal((n, d))
    labels = np.full(n, UNLABELED, dtype=np.uint32)
    return FeatureDataset(d, num_classes, labels, feats.astype(np.float32),
                          provenance=f"blobs-ood n={n} d={d} shift={displacement}x seed={seed}")


def split(ds: FeatureDataset, train_fraction: float, seed: int
          ) -> tuple[FeatureDataset, FeatureDataset]:
    """Seeded stratified split preserving per-class proportions within one row."""
    if not (0.0 < train_fraction < 1.0):
        raise InvalidArgument(f"train_fraction must be in (0, 1), got {train_fraction}")
    rng = substream(seed, STREAM_SPLIT)
    train_idx: list[np.ndarray] = []
    test_idx: list[np.ndarray] = []
    classes = np.unique(ds.labels)
    for c in classes:
        members = np.flatnonzero(ds.labels == c)
        if len(members) == 1:
            log.warning("class %s has a single row; assigning it to train", c)
            train_idx.append(members)
            continue
        order = rng.permutation(len(members))
        n_train = int(np.floor(train_fraction * len(members) + 0.5))
        n_train = min(max(n_train, 1), len(members) - 1)
        train_idx.append(np.sort(members[order[:n_train]]))
        test_idx.append(np.sort(members[order[n_train:]]))
    train = np.sort(np.concatenate(train_idx)) if train_idx else np.empty(0, np.int64)
    test = np.sort(np.concatenate(test_idx)) if test_idx else np.empty(0, np.int64)
    return ds.take(train), ds.take(test)
