"""Adam optimizer and the seeded mini-batch training loop.

Determinism contract: (seed, data, config) fully determine the final
parameters in single-threaded mode.  Every epoch draws its shuffle order
from an independent substream keyed by (seed, epoch), so resuming from a
checkpoint at an epoch boundary replays the exact uninterrupted run.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import flow as flow_mod
from .binio import ByteReader, ByteWriter, read_named_entries, write_named_entries
from .errors import FormatError, InvalidArgument, NumericError, TrainingDiverged
from .flow import FlowModel, build_forward, param_nodes
from .loss import LossConfig, build_flow_nll, build_total
from .ndcore import Graph, gradients
from .rngstreams import STREAM_SHUFFLE, substream

OPTSTATE_MAGIC = b"FCOS"
OPTSTATE_VERSION = 1


@dataclass
class AdamState:
    """Classic Adam with bias correction; weight decay folds into the gradient."""

    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray],
              state: AdamState) -> tuple[dict[str, np.ndarray], AdamState]:
    """One in-place update of all parameters; advances and returns the state."""
    for name, p in params.items():
        if name not in grads:
            raise InvalidArgument(f"missing gradient for parameter {name!r}")
        if grads[name].shape != p.shape:
            raise InvalidArgument(f"gradient shape {grads[name].shape} != parameter "
                                  f"shape {p.shape} for {name!r}")
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if state.weight_decay != 0.0:
            g = g + state.weight_decay * p
        m = state.m.get(name)
        v = state.v.get(name)
        if m is None:
            m = np.zeros_like(p)
            v = np.zeros_like(p)
        m = state.beta1 * m + (1.0 - state.beta1) * g
        v = state.beta2 * v + (1.0 - state.beta2) * (g * g)
        state.m[name] = m
        state.v[name] = v
        p -= state.lr * (m / bc1) / (np.sqrt(v / bc2) + state.eps)
    return params, state


@dataclass
class TrainConfig:
    epochs: int
    batch_size: int = 64
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    lr: float = 1e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-5
    checkpoint_every: int = 0      # epochs between snapshots; 0 = final only
    log_every: int = 50            # steps between intra-epoch log records

    def __post_init__(self):
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise InvalidArgument(f"batch_size must be >= 2, got {self.batch_size}")
        if self.lr <= 0:
            raise InvalidArgument("lr must be positive")

    def fresh_adam(self) -> AdamState:
        return AdamState(lr=self.lr, beta1=self.beta1, beta2=self.beta2, eps=self.eps,
                         weight_decay=self.weight_decay)


def _batch_losses(model: FlowModel, xb: np.ndarray, yb: np.ndarray, cfg: LossConfig
                  ) -> tuple[float, float, float, dict[str, np.ndarray]]:
    """Forward + backward for one batch; returns losses and per-parameter grads.

    lambda == 0 is the ablation switch: the contrastive term is disabled and
    the objective is the plain flow NLL.
    """
    g = Graph()
    nodes = param_nodes(g, model, trainable=True)
    x = g.constant(xb)
    z, logdet, mu, log_sigma = build_forward(g, x, model, nodes)
    if cfg.lam == 0.0:
        root = build_flow_nll(g, z, logdet, mu, log_sigma)
        l_total, l_con, l_flow = float(root.value), 0.0, float(root.value)
    else:
        root, l_con_node, l_flow_node = build_total(g, z, logdet, mu, log_sigma, yb, cfg)
        l_total, l_con, l_flow = float(root.value), float(l_con_node.value), \
            float(l_flow_node.value)
    leaf_grads = gradients(g, root)
    grads = {name: leaf_grads[node.idx].as_array() for name, node in nodes.items()}
    return l_total, l_con, l_flow, grads


def train_epoch(model: FlowModel, features: np.ndarray, labels: np.ndarray,
                cfg: TrainConfig, rng: np.random.Generator, adam: AdamState,
                epoch: int = 0, global_step: int = 0,
                on_record: Callable[[dict], None] | None = None) -> dict:
    """One shuffled pass; a trailing batch shorter than 2 rows is dropped."""
    n = features.shape[0]
    if features.shape[1] != model.d:
        raise InvalidArgument(f"dataset dimension {features.shape[1]} != model.d {model.d}")
    order = rng.permutation(n)
    sums = np.zeros(3)
    rows_seen = 0
    steps = 0
    start = time.monotonic()
    for batch_index, lo in enumerate(range(0, n, cfg.batch_size)):
        idx = order[lo:lo + cfg.batch_size]
        if len(idx) < 2:
            continue
        xb = features[idx]
        yb = labels[idx]
        try:
            l_total, l_con, l_flow, grads = _batch_losses(model, xb, yb, cfg.loss)
            adam_step(model.params, grads, adam)
        except NumericError as exc:
            raise TrainingDiverged(epoch, batch_index, exc) from exc
        sums += np.array([l_total, l_con, l_flow]) * len(idx)
        rows_seen += len(idx)
        steps += 1
        global_step += 1
        if on_record and cfg.log_every > 0 and global_step % cfg.log_every == 0:
            on_record({"epoch": epoch, "step": global_step, "l_total": l_total,
                       "l_con": l_con, "l_flow": l_flow,
                       "wallclock_ms": (time.monotonic() - start) * 1000.0})
    means = sums / max(rows_seen, 1)
    return {"epoch": epoch, "steps": steps, "global_step": global_step,
            "l_total": float(means[0]), "l_con": float(means[1]), "l_flow": float(means[2])}


def fit(model: FlowModel, features: np.ndarray, labels: np.ndarray, cfg: TrainConfig,
        checkpoint_dir: str | Path | None = None, start_epoch: int = 0,
        adam: AdamState | None = None,
        on_record: Callable[[dict], None] | None = None) -> tuple[FlowModel, list[dict]]:
    """Run epochs [start_epoch, cfg.epochs); returns the model and epoch records."""
    if adam is None:
        adam = cfg.fresh_adam()
    ckpt_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckpt_dir is not None:
        ckpt_dir.mkdir(parents=True, exist_ok=True)
    records: list[dict] = []
    global_step = adam.step
    wall_start = time.monotonic()
    for epoch in range(start_epoch, cfg.epochs):
        rng = substream(cfg.seed, STREAM_SHUFFLE, epoch)
        summary = train_epoch(model, features, labels, cfg, rng, adam, epoch=epoch,
                              global_step=global_step, on_record=on_record)
        global_step = summary["global_step"]
        record = {"epoch": epoch, "step": global_step, "l_total": summary["l_total"],
                  "l_con": summary["l_con"], "l_flow": summary["l_flow"],
                  "wallclock_ms": (time.monotonic() - wall_start) * 1000.0}
        records.append(record)
        if on_record:
            on_record(record)
        if ckpt_dir is not None and cfg.checkpoint_every > 0 \
                and (epoch + 1) % cfg.checkpoint_every == 0 and (epoch + 1) < cfg.epochs:
            stem = ckpt_dir / f"epoch{epoch + 1:05d}"
            flow_mod.save_checkpoint(model, stem.with_suffix(".fckp"))
            save_optimizer_state(adam, epoch + 1, model, stem.with_suffix(".fcos"))
    return model, records


# -- optimizer-state container ---------------------------------------------------

def save_optimizer_state(adam: AdamState, next_epoch: int, model: FlowModel, path) -> None:
    w = ByteWriter(OPTSTATE_MAGIC)
    w.u32(OPTSTATE_VERSION)
    w.u32(model.d)
    w.u32(model.k_blocks)
    w.u32(model.hidden)
    entries: dict[str, np.ndarray] = {
        "step": np.asarray(float(adam.step)),
        "next_epoch": np.asarray(float(next_epoch)),
        "lr": np.asarray(adam.lr),
        "beta1": np.asarray(adam.beta1),
        "beta2": np.asarray(adam.beta2),
        "eps": np.asarray(adam.eps),
        "weight_decay": np.asarray(adam.weight_decay),
    }
    for name, arr in adam.m.items():
        entries[f"m.{name}"] = arr
    for name, arr in adam.v.items():
        entries[f"v.{name}"] = arr
    write_named_entries(w, entries)
    w.save(path)


def load_optimizer_state(path) -> tuple[AdamState, int]:
    """Returns (state, next_epoch_to_run)."""
    r = ByteReader(path, OPTSTATE_MAGIC)
    version = r.u32()
    if version != OPTSTATE_VERSION:
        raise FormatError(f"{path}: unsupported optimizer-state version {version}")
    for _ in range(3):      # d, K, h echo the paired checkpoint header
        r.u32()
    entries = read_named_entries(r)
    r.expect_end()
    try:
        adam = AdamState(lr=float(entries["lr"]), beta1=float(entries["beta1"]),
                         beta2=float(entries["beta2"]), eps=float(entries["eps"]),
                         weight_decay=float(entries["weight_decay"]),
                         step=int(float(entries["step"])))
        next_epoch = int(float(entries["next_epoch"]))
    except KeyError as exc:
        raise FormatError(f"{path}: missing optimizer-state entry {exc}")
    adam.m = {k[2:]: v for k, v in entries.items() if k.startswith("m.")}
    adam.v = {k[2:]: v for k, v in entries.items() if k.startswith("v.")}
    return adam, next_epoch
