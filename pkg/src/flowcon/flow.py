"""Invertible coupling-block flow over feature vectors with a learned Gaussian prior head.

The forward map is a stack of affine coupling blocks with alternating
parity masks: the masked half passes through unchanged and parameterizes an
elementwise scale/shift of the other half, so the Jacobian is triangular and
its log-determinant is the sum of the active log-scales.  A zero-initialized
affine head maps the input embedding to per-sample (mu, log sigma), so a
fresh model is the identity map with a standard-normal prior.

Forward passes are expressed once, as graph builders over ndcore, and serve
both inference (constants) and training (parameter leaves).  The inverse is
closed-form numpy; agreement of the two routes is what the round-trip tests
check.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .binio import ByteReader, ByteWriter, read_named_entries, write_named_entries
from .errors import FormatError, InvalidArgument
from .ndcore import Graph, Node, Tensor
from .rngstreams import STREAM_INIT, substream

CHECKPOINT_MAGIC = b"FCKP"
CHECKPOINT_VERSION = 1

SCALE_CLAMP = 2.0          # log-scale saturates smoothly in (-c, c)
LOG_SIGMA_BOUND = 7.0      # hard clamp on the prior head's log sigma
HIDDEN_CAP = 1024


@dataclass
class MLPParams:
    """Two-layer perceptron: affine -> tanh -> affine."""
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray


@dataclass
class CouplingBlock:
    mask: np.ndarray                 # 1 = identity (conditioning) half
    scale_net: MLPParams
    translate_net: MLPParams
    scale_clamp: float = SCALE_CLAMP


@dataclass
class PriorHead:
    weight_mu: np.ndarray            # d x d
    bias_mu: np.ndarray              # d
    weight_logsigma: np.ndarray      # d x d
    bias_logsigma: np.ndarray        # d


@dataclass
class FlowOutput:
    z_flow: np.ndarray
    logdet: np.ndarray | float
    mu: np.ndarray
    log_sigma: np.ndarray


def parity_mask(d: int, block_index: int) -> np.ndarray:
    """Even dims pass through in even-indexed blocks, odd dims in odd-indexed ones."""
    mask = np.zeros(d, dtype=np.float64)
    mask[block_index % 2::2] = 1.0
    return mask


def default_hidden(d: int) -> int:
    return min(4 * d, HIDDEN_CAP)


class FlowModel:
    """Parameter store for K coupling blocks plus the prior head."""

    def __init__(self, d: int, k_blocks: int, hidden: int, params: dict[str, np.ndarray]):
        self.d = d
        self.k_blocks = k_blocks
        self.hidden = hidden
        self.params = params

    def block(self, i: int) -> CouplingBlock:
        p = self.params
        return CouplingBlock(
            mask=parity_mask(self.d, i),
            scale_net=MLPParams(p[f"block{i}.scale.l1.w"], p[f"block{i}.scale.l1.b"],
                                p[f"block{i}.scale.l2.w"], p[f"block{i}.scale.l2.b"]),
            translate_net=MLPParams(p[f"block{i}.translate.l1.w"], p[f"block{i}.translate.l1.b"],
                                    p[f"block{i}.translate.l2.w"], p[f"block{i}.translate.l2.b"]),
        )

    def prior(self) -> PriorHead:
        p = self.params
        return PriorHead(p["prior.mu.w"], p["prior.mu.b"],
                         p["prior.logsigma.w"], p["prior.logsigma.b"])

    def num_params(self) -> int:
        return sum(a.size for a in self.params.values())

    def copy(self) -> "FlowModel":
        return FlowModel(self.d, self.k_blocks, self.hidden,
                         {k: v.copy() for k, v in self.params.items()})


def init_model(d: int, k_blocks: int = 8, hidden: int | None = None, seed: int = 0) -> FlowModel:
    """Seeded init: hidden affines uniform(+-1/sqrt(fan_in)), final affines and prior zero.

    Zero final layers make the fresh model the identity map with logdet 0 and
    a standard-normal prior for every input.
    """
    if d < 2:
        raise InvalidArgument(f"feature dimension must be >= 2, got {d}")
    if k_blocks < 1:
        raise InvalidArgument(f"need at least one coupling block, got {k_blocks}")
    h = default_hidden(d) if hidden is None else hidden
    if h < 1:
        raise InvalidArgument(f"hidden width must be >= 1, got {h}")
    rng = substream(seed, STREAM_INIT)
    bound = 1.0 / np.sqrt(d)
    params: dict[str, np.ndarray] = {}
    for i in range(k_blocks):
        for net in ("scale", "translate"):
            params[f"block{i}.{net}.l1.w"] = rng.uniform(-bound, bound, size=(d, h))
            params[f"block{i}.{net}.l1.b"] = rng.uniform(-bound, bound, size=h)
            params[f"block{i}.{net}.l2.w"] = np.zeros((h, d))
            params[f"block{i}.{net}.l2.b"] = np.zeros(d)
    params["prior.mu.w"] = np.zeros((d, d))
    params["prior.mu.b"] = np.zeros(d)
    params["prior.logsigma.w"] = np.zeros((d, d))
    params["prior.logsigma.b"] = np.zeros(d)
    return FlowModel(d, k_blocks, h, params)


# -- graph builders ----------------------------------------------------------

def param_nodes(g: Graph, model: FlowModel, trainable: bool) -> dict[str, Node]:
    """One leaf (trainable) or constant per parameter, keyed by name."""
    out = {}
    for name, arr in model.params.items():
        if trainable:
            out[name] = g.leaf(Tensor(arr, requires_grad=True), name=name)
        else:
            out[name] = g.constant(arr, name=name)
    return out


def build_coupling(g: Graph, x: Node, mask: np.ndarray, nodes: dict[str, Node],
                   prefix: str, scale_clamp: float) -> tuple[Node, Node]:
    """Forward of one block on a (B, d) node; returns (y, per-row logdet)."""
    batch = x.shape[0]
    mask_c = g.constant(np.broadcast_to(mask, (batch, mask.size)).copy(), name=f"{prefix}.mask")
    inv_c = g.constant(np.broadcast_to(1.0 - mask, (batch, mask.size)).copy())
    xm = g.multiply(x, mask_c)
    hs = g.tanh(g.affine(xm, nodes[f"{prefix}.scale.l1.w"], nodes[f"{prefix}.scale.l1.b"]))
    s_raw = g.affine(hs, nodes[f"{prefix}.scale.l2.w"], nodes[f"{prefix}.scale.l2.b"])
    s = g.mul_scalar(g.tanh(g.mul_scalar(s_raw, 1.0 / scale_clamp)), scale_clamp)
    s = g.multiply(s, inv_c)
    ht = g.tanh(g.affine(xm, nodes[f"{prefix}.translate.l1.w"], nodes[f"{prefix}.translate.l1.b"]))
    t = g.multiply(g.affine(ht, nodes[f"{prefix}.translate.l2.w"],
                            nodes[f"{prefix}.translate.l2.b"]), inv_c)
    y = g.add(xm, g.multiply(g.add(g.multiply(x, g.exp(s)), t), inv_c))
    logdet = g.sum(s, axis=-1)
    return y, logdet


def build_forward(g: Graph, x: Node, model: FlowModel, nodes: dict[str, Node]
                  ) -> tuple[Node, Node, Node, Node]:
    """Full forward on a (B, d) node: (z_flow, logdet rows, mu, log_sigma)."""
    z = x
    logdet: Node | None = None
    for i in range(model.k_blocks):
        z, block_ld = build_coupling(g, z, parity_mask(model.d, i), nodes, f"block{i}",
                                     SCALE_CLAMP)
        logdet = block_ld if logdet is None else g.add(logdet, block_ld)
    mu = g.affine(x, nodes["prior.mu.w"], nodes["prior.mu.b"])
    log_sigma = g.clamp(g.affine(x, nodes["prior.logsigma.w"], nodes["prior.logsigma.b"]),
                        -LOG_SIGMA_BOUND, LOG_SIGMA_BOUND)
    return z, logdet, mu, log_sigma


# -- inference wrappers --------------------------------------------------------

def _as_batch(x, d: int) -> tuple[np.ndarray, bool]:
    arr = np.asarray(x, dtype=np.float64)
    single = arr.ndim == 1
    if single:
        arr = arr[None, :]
    if arr.ndim != 2 or arr.shape[1] != d:
        raise InvalidArgument(f"input shape {np.shape(x)} incompatible with dimension {d}")
    return arr, single


def coupling_forward(block: CouplingBlock, x) -> tuple[np.ndarray, np.ndarray | float]:
    """Graph-backed forward of a single block; accepts (d,) or (n, d)."""
    d = block.mask.size
    arr, single = _as_batch(x, d)
    g = Graph()
    xn = g.constant(arr)
    nodes = {
        "b.scale.l1.w": g.constant(block.scale_net.w1),
        "b.scale.l1.b": g.constant(block.scale_net.b1),
        "b.scale.l2.w": g.constant(block.scale_net.w2),
        "b.scale.l2.b": g.constant(block.scale_net.b2),
        "b.translate.l1.w": g.constant(block.translate_net.w1),
        "b.translate.l1.b": g.constant(block.translate_net.b1),
        "b.translate.l2.w": g.constant(block.translate_net.w2),
        "b.translate.l2.b": g.constant(block.translate_net.b2),
    }
    y, logdet = build_coupling(g, xn, block.mask, nodes, "b", block.scale_clamp)
    if single:
        return y.value[0].copy(), float(logdet.value[0])
    return y.value.copy(), logdet.value.copy()


def _net_apply(net: MLPParams, x: np.ndarray) -> np.ndarray:
    return np.tanh(x @ net.w1 + net.b1) @ net.w2 + net.b2


def coupling_inverse(block: CouplingBlock, y) -> np.ndarray:
    """Closed-form inverse of one block."""
    d = block.mask.size
    arr, single = _as_batch(y, d)
    mask, inv = block.mask, 1.0 - block.mask
    ym = arr * mask
    c = block.scale_clamp
    s = c * np.tanh(_net_apply(block.scale_net, ym) / c) * inv
    t = _net_apply(block.translate_net, ym) * inv
    x = ym + inv * ((arr - t) * np.exp(-s))
    if not np.all(np.isfinite(x)):
        raise InvalidArgument("non-finite values in coupling inverse")
    return x[0].copy() if single else x


def flow_forward(model: FlowModel, z_emb) -> FlowOutput:
    """z_flow, logdet, and the prior's (mu, log_sigma) for one vector or a batch."""
    arr, single = _as_batch(z_emb, model.d)
    g = Graph()
    xn = g.constant(arr)
    nodes = param_nodes(g, model, trainable=False)
    z, logdet, mu, log_sigma = build_forward(g, xn, model, nodes)
    if single:
        return FlowOutput(z.value[0].copy(), float(logdet.value[0]),
                          mu.value[0].copy(), log_sigma.value[0].copy())
    return FlowOutput(z.value.copy(), logdet.value.copy(), mu.value.copy(),
                      log_sigma.value.copy())


def flow_inverse(model: FlowModel, z_flow) -> np.ndarray:
    """Inverse of the coupling stack (blocks unwound in reverse order)."""
    arr, single = _as_batch(z_flow, model.d)
    x = arr
    for i in reversed(range(model.k_blocks)):
        x = coupling_inverse(model.block(i), x)
    return x[0].copy() if single else x


# -- checkpoints ----------------------------------------------------------------

def save_checkpoint(model: FlowModel, path) -> None:
    w = ByteWriter(CHECKPOINT_MAGIC)
    w.u32(CHECKPOINT_VERSION)
    w.u32(model.d)
    w.u32(model.k_blocks)
    w.u32(model.hidden)
    write_named_entries(w, model.params)
    w.save(path)


def load_checkpoint(path) -> FlowModel:
    r = ByteReader(path, CHECKPOINT_MAGIC)
    version = r.u32()
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    d, k_blocks, hidden = r.u32(), r.u32(), r.u32()
    entries = read_named_entries(r)
    r.expect_end()
    expected = init_model(d, k_blocks, hidden, seed=0)
    if set(entries) != set(expected.params):
        missing = set(expected.params) - set(entries)
        extra = set(entries) - set(expected.params)
        raise FormatError(f"{path}: parameter names mismatch (missing {sorted(missing)}, "
                          f"unexpected {sorted(extra)})")
    for name, arr in entries.items():
        if arr.shape != expected.params[name].shape:
            raise FormatError(f"{path}: entry {name!r} shape {arr.shape} != "
                              f"{expected.params[name].shape}")
    return FlowModel(d, k_blocks, hidden, entries)
