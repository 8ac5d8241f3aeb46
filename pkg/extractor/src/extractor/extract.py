"""Offline penultimate-feature extraction into FCFT files.

Runs a frozen classifier in eval mode over a dataset with shuffling disabled
and writes one global-average-pooled feature row per image, in dataset
iteration order.  ID datasets keep their labels; OOD datasets get the
unlabeled sentinel.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch.utils.data import DataLoader
from torchvision import datasets as tv_datasets
from torchvision import transforms

from .fcft import UNLABELED, write_fcft
from .models import PENULTIMATE_WIDTH, build_model, load_weights

# Classifier training recipes; preprocessing must match the weights in use.
NORM_RECIPES = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
}

ID_DATASETS = {"cifar10": 10, "cifar100": 100}
OOD_DATASETS = ("svhn",)


@dataclass
class ExtractJob:
    model: str                      # resnet18 | wrn-40-2
    weights: str | None             # state-dict path; None = random init (tests only)
    dataset: str                    # cifar10 | cifar100 | svhn
    split: str                      # train | test
    out: str
    data_root: str = "./data"
    batch_size: int = 256
    device: str = "cpu"
    norm: str = "cifar10"           # recipe shipped with the classifier weights
    num_classes: int | None = None  # class count of the classifier head
    as_ood: bool | None = None      # None = infer from dataset name


def _transform(norm: str) -> transforms.Compose:
    steps = [transforms.Resize((32, 32)), transforms.ToTensor()]
    if norm != "none":
        mean, std = NORM_RECIPES[norm]
        steps.append(transforms.Normalize(mean, std))
    return transforms.Compose(steps)


def resolve_dataset(job: ExtractJob):
    tf = _transform(job.norm)
    root = job.data_root
    try:
        if job.dataset == "cifar10":
            return tv_datasets.CIFAR10(root, train=job.split == "train", transform=tf)
        if job.dataset == "cifar100":
            return tv_datasets.CIFAR100(root, train=job.split == "train", transform=tf)
        if job.dataset == "svhn":
            return tv_datasets.SVHN(root, split=job.split, transform=tf)
    except RuntimeError as exc:
        raise SystemExit(
            f"dataset {job.dataset!r} not found under {root}: {exc}\n"
            f"download it first, e.g. with torchvision (download=True) on a "
            f"machine with network access") from exc
    raise SystemExit(f"unknown dataset {job.dataset!r}")


def extract_features(job: ExtractJob, dataset=None) -> Path:
    """Runs the extraction and returns the written path.

    ``dataset`` overrides name-based resolution (used by tests to run
    without downloaded data); it must yield (image tensor, label) pairs.
    """
    as_ood = job.as_ood if job.as_ood is not None else job.dataset in OOD_DATASETS
    head_classes = job.num_classes or ID_DATASETS.get(job.dataset, 10)
    model = build_model(job.model, num_classes=head_classes)
    if job.weights:
        load_weights(model, job.weights)
    device = torch.device(job.device)
    model.to(device).eval()

    if dataset is None:
        dataset = resolve_dataset(job)
    loader = DataLoader(dataset, batch_size=job.batch_size, shuffle=False, num_workers=0)

    expected = PENULTIMATE_WIDTH[job.model]
    chunks: list[np.ndarray] = []
    labels: list[np.ndarray] = []
    with torch.no_grad():
        for images, batch_labels in loader:
            feats = model.features(images.to(device))
            if feats.shape[1] != expected:
                raise SystemExit(f"penultimate width {feats.shape[1]} != expected "
                                 f"{expected} for {job.model}")
            chunks.append(feats.cpu().numpy().astype(np.float32))
            labels.append(np.asarray(batch_labels, dtype=np.int64))
    features = np.concatenate(chunks, axis=0) if chunks else np.zeros((0, expected), np.float32)
    raw_labels = np.concatenate(labels) if labels else np.zeros(0, np.int64)
    if as_ood:
        out_labels = np.full(len(features), UNLABELED, dtype=np.uint32)
        num_classes = 0
    else:
        out_labels = raw_labels.astype(np.uint32)
        num_classes = int(raw_labels.max()) + 1 if len(raw_labels) else head_classes
    metadata = (f"model={job.model} weights={job.weights or 'random-init'} "
                f"dataset={job.dataset} split={job.split} norm={job.norm} size=32x32")
    write_fcft(job.out, features, out_labels, num_classes, metadata)
    return Path(job.out)
