"""Standalone writer for the FCFT feature-file format.

Layout (all integers little-endian): magic "FCFT", version u32=1, count u32,
dim u32, num_classes u32, metadata length u32 + UTF-8 metadata, then count
records of (label u32, f32[dim]), and a CRC32 of all preceding bytes.  The
sentinel label 0xFFFFFFFF marks unlabeled (OOD) rows.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path

import numpy as np

MAGIC = b"FCFT"
VERSION = 1
UNLABELED = 0xFFFFFFFF


def write_fcft(path: str | Path, features: np.ndarray, labels: np.ndarray,
               num_classes: int, metadata: str = "") -> None:
    features = np.ascontiguousarray(features, dtype="<f4")
    labels = np.ascontiguousarray(labels, dtype="<u4")
    if features.ndim != 2:
        raise ValueError(f"features must be (n, dim), got {features.shape}")
    if labels.shape != (features.shape[0],):
        raise ValueError("labels/features row count mismatch")
    if not np.all(np.isfinite(features)):
        raise ValueError("non-finite feature values")
    count, dim = features.shape
    buf = bytearray(MAGIC)
    buf += struct.pack("<I", VERSION)
    buf += struct.pack("<I", count)
    buf += struct.pack("<I", dim)
    buf += struct.pack("<I", num_classes)
    meta = metadata.encode("utf-8")
    buf += struct.pack("<I", len(meta))
    buf += meta
    for i in range(count):
        buf += struct.pack("<I", int(labels[i]))
        buf += features[i].tobytes()
    buf += struct.pack("<I", zlib.crc32(bytes(buf)) & 0xFFFFFFFF)
    Path(path).write_bytes(bytes(buf))
