import math

import numpy as np
import pytest

from flowcon.errors import FormatError, InvalidArgument
from flowcon.flow import (SCALE_CLAMP, build_forward, coupling_forward,
                          coupling_inverse, default_hidden, flow_forward, flow_inverse,
                          init_model, load_checkpoint, param_nodes, parity_mask,
                          save_checkpoint)
from flowcon.loss import build_flow_nll
from flowcon.ndcore import Graph, Tensor, evaluate, gradients

from oracles import numeric_jacobian, rel_err

LOG_2PI = math.log(2 * math.pi)


def randomized_model(d, k, seed, scale=0.4, hidden=None):
    """Model with non-trivial final layers so the map is far from identity.

    Weight scales shrink with fan-in so activations stay O(scale) at any
    width; f64 cannot round-trip a map whose values explode multiplicatively.
    """
    model = init_model(d, k, hidden=hidden, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    for name, arr in model.params.items():
        if ".l2." in name or name.startswith("prior."):
            std = scale / np.sqrt(arr.shape[0]) if arr.ndim == 2 else scale * 0.5
            model.params[name] = rng.normal(0.0, std, arr.shape)
    return model


def set_scale_bias(model, block_idx, dim, log_scale):
    """Pin one unmasked dim's log-scale via the scale net's final bias."""
    raw = SCALE_CLAMP * np.arctanh(log_scale / SCALE_CLAMP)
    model.params[f"block{block_idx}.scale.l2.b"][dim] = raw


def test_zero_init_block_is_identity():
    model = init_model(4, 1, seed=0)
    x = np.array([0.3, -1.2, 0.8, 2.0])
    y, logdet = coupling_forward(model.block(0), x)
    assert np.array_equal(y, x)
    assert logdet == 0.0


def test_forced_scale_on_one_dim():
    # mask of block 0 passes even dims; dim 1 is transformed
    model = init_model(2, 1, seed=0)
    set_scale_bias(model, 0, 1, 1.0)
    x = np.array([0.5, 2.0])
    y, logdet = coupling_forward(model.block(0), x)
    assert y[0] == 0.5
    assert np.isclose(y[1], 2.0 * math.e, rtol=1e-12)
    assert np.isclose(logdet, 1.0, rtol=1e-12)


def test_coupling_logdet_matches_numeric_jacobian():
    model = randomized_model(4, 1, seed=2)
    block = model.block(0)
    x = np.random.default_rng(7).normal(size=4)
    _, logdet = coupling_forward(block, x)
    jac = numeric_jacobian(lambda v: coupling_forward(block, v)[0], x)
    sign, num_logdet = np.linalg.slogdet(jac)
    assert sign > 0
    assert rel_err(logdet, num_logdet) < 1e-6


def test_coupling_inverse_zero_init_identity():
    model = init_model(6, 1, seed=3)
    y = np.random.default_rng(0).normal(size=6)
    assert np.array_equal(coupling_inverse(model.block(0), y), y)


def test_coupling_roundtrip_random():
    model = randomized_model(6, 1, seed=4)
    block = model.block(0)
    rng = np.random.default_rng(5)
    for _ in range(20):
        y = rng.normal(size=6)
        x = coupling_inverse(block, y)
        y2, _ = coupling_forward(block, x)
        assert np.max(np.abs(y2 - y)) < 1e-10


def test_coupling_inverse_hand_case():
    # d=2, mask (1,0): dim 2 transformed with s=ln 2, t=3 -> y=(0,7) maps back to x=(0,2)
    model = init_model(2, 1, seed=0)
    set_scale_bias(model, 0, 1, math.log(2.0))
    model.params["block0.translate.l2.b"][1] = 3.0
    block = model.block(0)
    assert np.array_equal(block.mask, [1.0, 0.0])
    x = coupling_inverse(block, np.array([0.0, 7.0]))
    assert np.allclose(x, [0.0, 2.0], atol=1e-12)


def test_fresh_model_forward_is_identity():
    model = init_model(8, 8, seed=9)
    x = np.random.default_rng(1).normal(size=8)
    out = flow_forward(model, x)
    assert np.array_equal(out.z_flow, x)
    assert out.logdet == 0.0
    assert np.array_equal(out.mu, np.zeros(8))
    assert np.array_equal(out.log_sigma, np.zeros(8))


def test_single_nonidentity_block_dominates_logdet():
    model = init_model(4, 3, seed=0)
    set_scale_bias(model, 1, 0, 0.7)   # block 1 transforms even dims
    set_scale_bias(model, 1, 2, -0.2)
    x = np.array([0.1, 0.2, 0.3, 0.4])
    out = flow_forward(model, x)
    _, block_logdet = coupling_forward(model.block(1), x)  # blocks 0,2 are identity
    assert np.isclose(out.logdet, block_logdet, rtol=1e-12)
    assert np.isclose(out.logdet, 0.5, rtol=1e-12)


def test_stack_logdet_is_sum_of_block_logdets():
    model = randomized_model(6, 4, seed=11)
    x = np.random.default_rng(2).normal(size=6)
    out = flow_forward(model, x)
    z = x.copy()
    total = 0.0
    for i in range(4):
        z, ld = coupling_forward(model.block(i), z)
        total += ld
    assert out.logdet == total  # additivity is exact: same summation path
    assert np.array_equal(out.z_flow, z)


def test_stack_logdet_matches_numeric_jacobian():
    model = randomized_model(4, 3, seed=13)
    x = np.random.default_rng(3).normal(size=4)
    out = flow_forward(model, x)
    jac = numeric_jacobian(lambda v: flow_forward(model, v).z_flow, x)
    _, num_logdet = np.linalg.slogdet(jac)
    assert rel_err(out.logdet, num_logdet) < 1e-3


def test_flow_inverse_identity_model():
    model = init_model(4, 2, seed=0)
    z = np.array([1.0, -2.0, 0.5, 0.0])
    assert np.array_equal(flow_inverse(model, z), z)


def test_flow_inverse_roundtrip_batch():
    model = randomized_model(8, 8, seed=17)
    rng = np.random.default_rng(8)
    x = rng.normal(size=(100, 8))
    out = flow_forward(model, x)
    back = flow_inverse(model, out.z_flow)
    assert np.max(np.abs(back - x)) < 1e-10


def test_inverse_equals_blockwise_reverse_unwind():
    model = randomized_model(6, 3, seed=19)
    z = np.random.default_rng(4).normal(size=6)
    manual = z.copy()
    for i in reversed(range(3)):
        manual = coupling_inverse(model.block(i), manual)
    assert np.array_equal(flow_inverse(model, z), manual)


def test_init_rejects_bad_dims():
    with pytest.raises(InvalidArgument):
        init_model(1, 8)
    with pytest.raises(InvalidArgument):
        init_model(4, 0)


def test_init_deterministic_per_seed():
    a = init_model(16, 4, seed=42)
    b = init_model(16, 4, seed=42)
    for name in a.params:
        assert np.array_equal(a.params[name], b.params[name])
    c = init_model(16, 4, seed=43)
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_parameter_count_closed_form():
    d, k, h = 512, 8, 256
    model = init_model(d, k, hidden=h, seed=0)
    per_net = d * h + h + h * d + d
    expected = k * 2 * per_net + 2 * d * d + 2 * d
    assert model.num_params() == expected


def test_default_hidden_cap():
    assert default_hidden(2) == 8
    assert default_hidden(512) == 1024
    assert default_hidden(300) == 1024


def test_masks_alternate_and_cover():
    for d in (2, 6, 8):
        m0, m1 = parity_mask(d, 0), parity_mask(d, 1)
        assert np.array_equal(m0 + m1, np.ones(d))
        assert m0.sum() == math.ceil(d / 2)
        assert np.array_equal(parity_mask(d, 2), m0)


def test_prior_head_zero_init_gives_standard_normal():
    model = init_model(6, 2, seed=21)
    rng = np.random.default_rng(6)
    for _ in range(5):
        x = rng.normal(size=6)
        out = flow_forward(model, x)
        assert np.array_equal(out.mu, np.zeros(6))
        assert np.array_equal(out.log_sigma, np.zeros(6))


def test_forward_gradient_matches_finite_diff():
    """Gradient of (logdet + gaussian log-density) w.r.t. every parameter."""
    model = randomized_model(4, 2, seed=23, scale=0.3)
    x = np.random.default_rng(9).normal(size=(3, 4))

    def build(g: Graph, nodes):
        z, logdet, mu, log_sigma = build_forward(g, g.constant(x), model, nodes)
        nll = build_flow_nll(g, z, logdet, mu, log_sigma)
        return g.neg(nll)  # mean log-density + logdet

    g = Graph()
    nodes = param_nodes(g, model, trainable=True)
    root = build(g, nodes)
    grads = gradients(g, root)

    for name, node in nodes.items():
        analytic = grads[node.idx].as_array()
        base = model.params[name]
        flat = base.reshape(-1)
        numeric = np.zeros_like(flat)
        probe = {n.idx: Tensor(p) for n, p in
                 ((nodes[k], model.params[k]) for k in nodes)}
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + 1e-5
            fp = evaluate(g, probe).item()
            flat[i] = orig - 1e-5
            fm = evaluate(g, probe).item()
            flat[i] = orig
            numeric[i] = (fp - fm) / 2e-5
        assert rel_err(analytic, numeric.reshape(base.shape), floor=1e-3) < 1e-4, name


def test_checkpoint_roundtrip_bit_exact(tmp_path):
    model = randomized_model(6, 3, seed=29)
    path = tmp_path / "model.fckp"
    save_checkpoint(model, path)
    loaded = load_checkpoint(path)
    assert (loaded.d, loaded.k_blocks, loaded.hidden) == (6, 3, model.hidden)
    for name in model.params:
        assert np.array_equal(loaded.params[name], model.params[name])
    save_checkpoint(loaded, tmp_path / "again.fckp")
    assert (tmp_path / "model.fckp").read_bytes() == (tmp_path / "again.fckp").read_bytes()


def test_checkpoint_crc_rejected(tmp_path):
    model = init_model(4, 2, seed=1)
    path = tmp_path / "model.fckp"
    save_checkpoint(model, path)
    blob = bytearray(path.read_bytes())
    blob[20] ^= 0xFF
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_checkpoint(path)


def test_graph_forward_matches_wrapper():
    """The batched graph route and the public wrapper agree bit-for-bit."""
    model = randomized_model(6, 4, seed=31)
    x = np.random.default_rng(12).normal(size=(5, 6))
    out = flow_forward(model, x)
    g = Graph()
    nodes = param_nodes(g, model, trainable=False)
    z, logdet, mu, log_sigma = build_forward(g, g.constant(x), model, nodes)
    assert np.array_equal(out.z_flow, z.value)
    assert np.array_equal(out.logdet, logdet.value)
    assert np.array_equal(out.mu, mu.value)
    assert np.array_equal(out.log_sigma, log_sigma.value)
