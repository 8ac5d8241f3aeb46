import numpy as np
import pytest

from flowcon.datasets import FeatureDataset
from flowcon.errors import FormatError, InvalidArgument
from flowcon.flow import flow_forward, init_model
from flowcon.loss import gaussian_logpdf
from flowcon.oodscore import (ClassPrototypes, classify, compute_prototypes, load_prototypes,
                              ood_score, prototype_loglik, save_prototypes, score_rows)

from test_flow import randomized_model

STD1 = -0.9189385332046727  # standard normal log-density at its mean


def ds_from(features, labels, num_classes):
    features = np.asarray(features, np.float32)
    return FeatureDataset(features.shape[1], num_classes,
                          np.asarray(labels, np.uint32), features)


def identity_mu_model(d):
    """Prior head passes the embedding through as mu; sigma stays 1."""
    model = init_model(d, 1, seed=0)
    model.params["prior.mu.w"] = np.eye(d)
    return model


def logsigma_passthrough_model(d):
    """Prior head reads log sigma straight from the embedding; mu stays 0."""
    model = init_model(d, 1, seed=0)
    model.params["prior.logsigma.w"] = np.eye(d)
    return model


def test_prototype_single_sample_equals_its_parameters():
    model = randomized_model(4, 2, seed=3)
    x = np.random.default_rng(0).normal(size=(1, 4)).astype(np.float32)
    protos = compute_prototypes(model, ds_from(x, [0], 1))
    out = flow_forward(model, x.astype(np.float64)[0])
    assert np.array_equal(protos.mu[0], out.mu)
    assert np.array_equal(protos.sigma[0], np.exp(out.log_sigma))
    assert protos.counts[0] == 1


def test_prototype_mu_mean():
    model = identity_mu_model(2)
    protos = compute_prototypes(model, ds_from([[0.0, 2.0], [2.0, 0.0]], [0, 0], 1))
    assert np.array_equal(protos.mu[0], [1.0, 1.0])


def test_prototype_sigma_linear_mean():
    model = logsigma_passthrough_model(2)
    rows = np.log([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]])
    protos = compute_prototypes(model, ds_from(rows, [0, 0, 0], 1))
    assert np.allclose(protos.sigma[0], [2.0, 2.0], atol=1e-7)


def test_prototype_missing_class_omitted_with_warning():
    model = init_model(3, 1, seed=0)
    ds = ds_from(np.zeros((2, 3)), [0, 2], 3)
    protos = compute_prototypes(model, ds)
    assert protos.class_ids.tolist() == [0, 2]
    assert any("class 1" in w for w in protos.warnings)


def test_prototype_permutation_invariance_exact():
    model = randomized_model(5, 2, seed=7)
    rng = np.random.default_rng(1)
    feats = rng.normal(size=(40, 5)).astype(np.float32)
    labels = rng.integers(0, 3, size=40).astype(np.uint32)
    base = compute_prototypes(model, ds_from(feats, labels, 3))
    perm = rng.permutation(40)
    shuffled = compute_prototypes(model, ds_from(feats[perm], labels[perm], 3))
    assert np.array_equal(base.mu, shuffled.mu)
    assert np.array_equal(base.sigma, shuffled.sigma)


def test_loglik_standard_normal_cases():
    protos = ClassPrototypes(np.array([0, 1], np.uint32), np.array([[0.0], [4.0]]),
                             np.ones((2, 1)), np.array([1, 1]))
    ll = prototype_loglik(protos, np.array([[0.0]]))
    assert np.isclose(ll[0, 0], STD1, atol=1e-12)
    assert np.argmax(ll[0]) == 0
    tie = prototype_loglik(protos, np.array([[2.0]]))
    assert tie[0, 0] == tie[0, 1]
    assert np.isclose(tie[0, 0], STD1 - 2.0, atol=1e-12)


def test_ood_score_identity_model_and_tie_rule():
    model = init_model(2, 1, seed=0)
    protos = ClassPrototypes(np.array([0, 1], np.uint32),
                             np.array([[0.0, 0.0], [4.0, 4.0]]),
                             np.ones((2, 2)), np.array([1, 1]))
    score, cls = ood_score(model, protos, np.array([0.0, 0.0]))
    assert np.isclose(score, 2 * STD1, atol=1e-12)
    assert cls == 0
    score_tie, cls_tie = ood_score(model, protos, np.array([2.0, 2.0]))
    assert cls_tie == 0  # exact tie resolves to the lowest class index
    assert np.isclose(score_tie, 2 * (STD1 - 2.0), atol=1e-12)


def test_score_matches_bruteforce_per_class():
    model = randomized_model(4, 3, seed=11)
    rng = np.random.default_rng(2)
    protos = ClassPrototypes(np.arange(5, dtype=np.uint32), rng.normal(size=(5, 4)),
                             np.exp(rng.normal(size=(5, 4)) * 0.3), np.ones(5, int))
    for _ in range(50):
        x = rng.normal(size=4)
        score, cls = ood_score(model, protos, x)
        z = flow_forward(model, x).z_flow
        per_class = [gaussian_logpdf(z, protos.mu[c], np.log(protos.sigma[c]))
                     for c in range(5)]
        assert np.isclose(score, max(per_class), atol=1e-9)
        assert cls == int(np.argmax(per_class))


def test_classify_agrees_with_score_argmax():
    model = randomized_model(3, 2, seed=13)
    rng = np.random.default_rng(3)
    protos = ClassPrototypes(np.arange(4, dtype=np.uint32), rng.normal(size=(4, 3)) * 3,
                             np.ones((4, 3)), np.ones(4, int))
    for _ in range(20):
        x = rng.normal(size=3)
        assert classify(model, protos, x) == ood_score(model, protos, x)[1]


def test_classify_prototype_means_win_when_separated():
    model = init_model(2, 1, seed=0)  # identity map
    mu = np.array([[0.0, 0.0], [8.0, 0.0], [0.0, 8.0]])
    protos = ClassPrototypes(np.arange(3, dtype=np.uint32), mu, np.ones((3, 2)),
                             np.ones(3, int))
    for c in range(3):
        assert classify(model, protos, mu[c]) == c


def test_monotone_equivalence_of_log_and_raw_ranking():
    rng = np.random.default_rng(4)
    model = randomized_model(3, 2, seed=17)
    protos = ClassPrototypes(np.arange(2, dtype=np.uint32), rng.normal(size=(2, 3)),
                             np.exp(rng.normal(size=(2, 3)) * 0.2), np.ones(2, int))
    x = rng.normal(size=(1000, 3))
    log_scores, _ = score_rows(model, protos, x)
    raw_scores = np.exp(log_scores)  # strictly increasing map of the log score
    assert np.array_equal(np.argsort(log_scores, kind="stable"),
                          np.argsort(raw_scores, kind="stable"))


def test_untrained_model_scores_are_class_free_standard_normal():
    model = init_model(4, 8, seed=21)
    ds = ds_from(np.random.default_rng(5).normal(size=(30, 4)), [0] * 15 + [1] * 15, 2)
    protos = compute_prototypes(model, ds)
    assert np.array_equal(protos.mu, np.zeros((2, 4)))
    assert np.array_equal(protos.sigma, np.ones((2, 4)))
    x = np.random.default_rng(6).normal(size=4)
    score, _ = ood_score(model, protos, x)
    assert np.isclose(score, gaussian_logpdf(x, np.zeros(4), np.zeros(4)), atol=1e-12)
    ll = prototype_loglik(protos, x[None, :])
    assert np.isclose(ll[0, 0], ll[0, 1], atol=1e-15)


def test_dimension_mismatch_rejected():
    model = init_model(4, 1, seed=0)
    protos = ClassPrototypes(np.array([0], np.uint32), np.zeros((1, 4)), np.ones((1, 4)),
                             np.ones(1, int))
    with pytest.raises(InvalidArgument):
        ood_score(model, protos, np.zeros(3))


def test_prototypes_roundtrip_and_crc(tmp_path):
    rng = np.random.default_rng(7)
    protos = ClassPrototypes(np.array([0, 3, 9], np.uint32), rng.normal(size=(3, 6)),
                             np.exp(rng.normal(size=(3, 6))), np.array([4, 10, 2]))
    path = tmp_path / "p.fcpt"
    save_prototypes(protos, path)
    loaded = load_prototypes(path)
    assert np.array_equal(loaded.class_ids, protos.class_ids)
    assert np.array_equal(loaded.mu, protos.mu)
    assert np.array_equal(loaded.sigma, protos.sigma)
    assert np.array_equal(loaded.counts, protos.counts)
    blob = bytearray(path.read_bytes())
    blob[15] ^= 0x40
    path.write_bytes(bytes(blob))
    with pytest.raises(FormatError):
        load_prototypes(path)


def test_sigma_positivity_enforced():
    with pytest.raises(InvalidArgument):
        ClassPrototypes(np.array([0], np.uint32), np.zeros((1, 2)),
                        np.array([[1.0, 0.0]]), np.ones(1, int))


def test_thread_cap_does_not_change_scores(monkeypatch):
    model = randomized_model(4, 2, seed=29)
    rng = np.random.default_rng(8)
    protos = ClassPrototypes(np.arange(3, dtype=np.uint32), rng.normal(size=(3, 4)),
                             np.exp(rng.normal(size=(3, 4)) * 0.2), np.ones(3, int))
    x = rng.normal(size=(5000, 4))
    monkeypatch.setenv("FLOWCON_THREADS", "1")
    serial_scores, serial_cls = score_rows(model, protos, x)
    monkeypatch.setenv("FLOWCON_THREADS", "4")
    parallel_scores, parallel_cls = score_rows(model, protos, x)
    assert np.array_equal(serial_scores, parallel_scores)
    assert np.array_equal(serial_cls, parallel_cls)
