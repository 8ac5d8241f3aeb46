"""Training objective: flow NLL, likelihood-product similarity, and the
supervised likelihood-contrastive term.

The contrastive term treats each sample's learned Gaussian as an anchor
distribution: the similarity logit between anchor i and sample j is
``exp(clamp(tau1 * (ll_ii + ll_ij) / d))`` where both log-likelihoods are
taken under anchor i's Gaussian and are divided by the dimension to keep the
double exponential in a usable range.  Softmax temperature tau2 applies in
the exponent, and the inner ratio is evaluated via log-sum-exp so the loss
stays finite for any finite logit matrix.

Everything is built on ndcore graphs; the public functions wrap the same
builders the trainer uses, so there is a single route for the math.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgument, NumericError
from .ndcore import Graph, Node

LOG_2PI = math.log(2.0 * math.pi)


@dataclass
class LossConfig:
    tau1: float = 1.5
    tau2: float = 0.1
    lam: float = 0.07
    exponent_clamp: float = 40.0

    def __post_init__(self):
        if self.tau1 <= 0 or self.tau2 <= 0:
            raise InvalidArgument("tau1 and tau2 must be positive")
        if self.lam < 0:
            raise InvalidArgument("lambda must be >= 0")
        if self.exponent_clamp <= 0:
            raise InvalidArgument("exponent_clamp must be positive")


@dataclass
class BatchLatent:
    """Index-aligned latent batch: flow outputs plus labels."""

    z: np.ndarray           # (B, d)
    logdet: np.ndarray      # (B,)
    mu: np.ndarray          # (B, d)
    log_sigma: np.ndarray   # (B, d)
    labels: np.ndarray      # (B,) integer class indices

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=np.float64)
        self.logdet = np.asarray(self.logdet, dtype=np.float64)
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.log_sigma = np.asarray(self.log_sigma, dtype=np.float64)
        self.labels = np.asarray(self.labels)
        b = self.z.shape[0]
        if b < 1 or self.z.ndim != 2:
            raise InvalidArgument(f"z must be (B, d) with B >= 1, got {self.z.shape}")
        if self.mu.shape != self.z.shape or self.log_sigma.shape != self.z.shape:
            raise InvalidArgument("mu/log_sigma shape mismatch with z")
        if self.logdet.shape != (b,) or self.labels.shape != (b,):
            raise InvalidArgument("logdet/labels must be length-B vectors")
        for name, arr in (("z", self.z), ("logdet", self.logdet), ("mu", self.mu),
                          ("log_sigma", self.log_sigma)):
            if not np.all(np.isfinite(arr)):
                raise NumericError(f"non-finite values in batch field {name}")

    @property
    def size(self) -> int:
        return self.z.shape[0]

    @property
    def dim(self) -> int:
        return self.z.shape[1]


# -- graph builders -----------------------------------------------------------

def build_gaussian_rows(g: Graph, z: Node, mu: Node, log_sigma: Node) -> Node:
    """Per-row diagonal-Gaussian log-density of z under (mu, exp(log_sigma))."""
    diff = g.add(z, g.neg(mu))
    std = g.multiply(diff, g.exp(g.neg(log_sigma)))
    terms = g.add(g.add_scalar(g.neg(log_sigma), -0.5 * LOG_2PI),
                  g.mul_scalar(g.square(std), -0.5))
    return g.sum(terms, axis=-1)


def build_flow_nll(g: Graph, z: Node, logdet: Node, mu: Node, log_sigma: Node) -> Node:
    """Batch mean of -(log-density + logdet)."""
    rows = build_gaussian_rows(g, z, mu, log_sigma)
    return g.mean(g.neg(g.add(rows, logdet)))


def build_anchor_loglik(g: Graph, z: Node, mu: Node, log_sigma: Node) -> Node:
    """(B, B) matrix: entry [i, j] is the log-density of z_j under anchor i's Gaussian.

    Expanded quadratically so the whole matrix falls out of three matmuls
    instead of B^2 vector evaluations.
    """
    batch, dim = z.shape
    prec = g.exp(g.mul_scalar(log_sigma, -2.0))
    quad_z = g.matmul(prec, g.square(z), transpose_b=True)
    mu_prec = g.multiply(mu, prec)
    cross = g.matmul(mu_prec, z, transpose_b=True)
    quad_mu = g.sum(g.multiply(mu, mu_prec), axis=-1, keepdim=True)
    ones_row = g.constant(np.ones((1, batch)))
    quad = g.add(g.add(quad_z, g.mul_scalar(cross, -2.0)), g.matmul(quad_mu, ones_row))
    logsig_sum = g.matmul(g.sum(log_sigma, axis=-1, keepdim=True), ones_row)
    return g.add_scalar(g.add(g.mul_scalar(logsig_sum, -1.0), g.mul_scalar(quad, -0.5)),
                        -0.5 * dim * LOG_2PI)


def build_contrastive(g: Graph, z: Node, mu: Node, log_sigma: Node,
                      labels: np.ndarray, cfg: LossConfig) -> Node:
    """Supervised likelihood-contrastive loss over one labeled batch."""
    batch, dim = z.shape
    if batch < 2:
        raise InvalidArgument(f"contrastive loss needs batch size >= 2, got {batch}")
    labels = np.asarray(labels).reshape(batch)

    loglik = build_anchor_loglik(g, z, mu, log_sigma)
    eye = np.eye(batch)
    ones_row = g.constant(np.ones((1, batch)))
    anchor_ll = g.sum(g.multiply(loglik, g.constant(eye)), axis=-1, keepdim=True)
    arg = g.mul_scalar(g.add(g.matmul(anchor_ll, ones_row), loglik), cfg.tau1 / dim)
    logits = g.mul_scalar(g.exp(g.clamp(arg, -cfg.exponent_clamp, cfg.exponent_clamp)),
                          1.0 / cfg.tau2)

    offdiag = 1.0 - eye
    positives = (labels[:, None] == labels[None, :]).astype(np.float64) * offdiag
    pos_counts = positives.sum(axis=1)
    has_pos = (pos_counts > 0).astype(np.float64)

    # Row-max shift baked in as a constant: exact for any shift value, and
    # pinning the diagonal entry to 0 pre-exp keeps the (masked-out)
    # self-similarity from overflowing.
    vals = logits.value
    if vals is None:
        raise InvalidArgument("contrastive builder requires bound inputs")
    row_max = np.where(offdiag > 0, vals, -np.inf).max(axis=1)
    shift = np.broadcast_to(row_max[:, None], (batch, batch)).copy()
    np.fill_diagonal(shift, np.diagonal(vals))
    masked_exp = g.multiply(g.exp(g.add(logits, g.constant(-shift))), g.constant(offdiag))
    lse = g.add(g.log(g.sum(masked_exp, axis=-1, keepdim=True)), g.constant(row_max[:, None]))

    denom_term = g.sum(g.multiply(lse, g.constant(has_pos[:, None])))
    weights = np.divide(positives, pos_counts[:, None], out=np.zeros_like(positives),
                        where=pos_counts[:, None] > 0)
    numer_term = g.sum(g.multiply(logits, g.constant(weights)))
    return g.add(denom_term, g.neg(numer_term))


def build_total(g: Graph, z: Node, logdet: Node, mu: Node, log_sigma: Node,
                labels: np.ndarray, cfg: LossConfig) -> tuple[Node, Node, Node]:
    """(total, contrastive, flow-NLL) nodes with total built last."""
    l_flow = build_flow_nll(g, z, logdet, mu, log_sigma)
    l_con = build_contrastive(g, z, mu, log_sigma, labels, cfg)
    total = g.add(l_con, g.mul_scalar(l_flow, cfg.lam))
    return total, l_con, l_flow


# -- public scalar API ----------------------------------------------------------

def _batch_nodes(g: Graph, batch: BatchLatent) -> tuple[Node, Node, Node, Node]:
    return (g.constant(batch.z), g.constant(batch.logdet), g.constant(batch.mu),
            g.constant(batch.log_sigma))


def gaussian_logpdf(z, mu, log_sigma) -> float:
    """Diagonal-Gaussian log-density of one vector."""
    z = np.atleast_1d(np.asarray(z, dtype=np.float64))
    mu = np.atleast_1d(np.asarray(mu, dtype=np.float64))
    log_sigma = np.atleast_1d(np.asarray(log_sigma, dtype=np.float64))
    if not (z.shape == mu.shape == log_sigma.shape) or z.ndim != 1:
        raise InvalidArgument(f"length mismatch: {z.shape}, {mu.shape}, {log_sigma.shape}")
    for arr in (z, mu, log_sigma):
        if not np.all(np.isfinite(arr)):
            raise NumericError("non-finite input to gaussian_logpdf")
    g = Graph()
    rows = build_gaussian_rows(g, g.constant(z[None, :]), g.constant(mu[None, :]),
                               g.constant(log_sigma[None, :]))
    return float(rows.value[0])


def flow_nll(batch: BatchLatent) -> float:
    g = Graph()
    z, logdet, mu, log_sigma = _batch_nodes(g, batch)
    return float(build_flow_nll(g, z, logdet, mu, log_sigma).value)


def similarity_logit(ll_i: float, ll_j: float, cfg: LossConfig, d: int) -> float:
    """Pairwise similarity from two anchor-conditioned log-likelihoods."""
    if d < 1:
        raise InvalidArgument("dimension must be >= 1")
    arg = cfg.tau1 * (ll_i / d + ll_j / d)
    return math.exp(min(max(arg, -cfg.exponent_clamp), cfg.exponent_clamp))


def contrastive_loss(batch: BatchLatent, cfg: LossConfig) -> float:
    if batch.size < 2:
        raise InvalidArgument(f"contrastive loss needs batch size >= 2, got {batch.size}")
    g = Graph()
    z, _, mu, log_sigma = _batch_nodes(g, batch)
    return float(build_contrastive(g, z, mu, log_sigma, batch.labels, cfg).value)


def total_loss(batch: BatchLatent, cfg: LossConfig) -> tuple[float, float, float]:
    """(total, contrastive, flow) with total = contrastive + lambda * flow."""
    g = Graph()
    z, logdet, mu, log_sigma = _batch_nodes(g, batch)
    total, l_con, l_flow = build_total(g, z, logdet, mu, log_sigma, batch.labels, cfg)
    return float(total.value), float(l_con.value), float(l_flow.value)
