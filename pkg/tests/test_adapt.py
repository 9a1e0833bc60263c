"""Refinement math, graph merging, distillation, and expert augmentation."""

import numpy as np
import pytest

import oracles
from worldmix import adapt as ad
from worldmix import graphworld as gw
from worldmix import router as rt
from worldmix import worldmodel as wm

VOCAB = gw.Vocab()


def _random_protos(rng, n, d, n_layers=2):
    layers = [rng.normal(size=(n, d)) + 0.05 for _ in range(n_layers)]
    return rt.PrototypeSet([f"d{j}" for j in range(n)], layers)


def test_refinement_config_validation():
    ad.RefinementConfig(alpha=0.0)
    ad.RefinementConfig(alpha=1.0, persistence="persist")
    with pytest.raises(ValueError):
        ad.RefinementConfig(alpha=1.5)
    with pytest.raises(ValueError):
        ad.RefinementConfig(tau_r=0.0)
    with pytest.raises(ValueError):
        ad.RefinementConfig(persistence="forever")


def test_refinement_weights_match_loop_oracle():
    rng = np.random.default_rng(5)
    for _ in range(100):
        n, d = int(rng.integers(2, 7)), int(rng.integers(2, 5))
        protos = rng.normal(size=(n, d)) + 0.05
        tau = float(rng.uniform(0.3, 2.0))
        got = ad.refinement_weights(protos, tau)
        for j in range(n):
            want = oracles.refinement_weights_loops([list(r) for r in protos], j, tau)
            assert np.max(np.abs(got[j] - np.array(want))) < 1e-10
        assert np.max(np.abs(got.sum(axis=1) - 1.0)) < 1e-12


def test_refine_matches_loop_oracle():
    rng = np.random.default_rng(6)
    for _ in range(100):
        n, d = int(rng.integers(2, 6)), int(rng.integers(2, 5))
        protos = _random_protos(rng, n, d, n_layers=2)
        emb = rng.normal(size=(2, d)) + 0.05
        alpha = float(rng.uniform(0.05, 1.0))
        tau = float(rng.uniform(0.3, 2.0))
        clamp = bool(rng.integers(2))
        cfg = ad.RefinementConfig(alpha=alpha, tau_r=tau, clamp=clamp)
        got = ad.refine_prototypes(protos, emb, cfg)
        for l in range(2):
            want = oracles.refine_loops([list(r) for r in protos.layers[l]], list(emb[l]), alpha, tau, clamp)
            assert np.max(np.abs(got.layers[l] - np.array(want))) < 1e-10


def test_refine_worked_example():
    protos = rt.PrototypeSet(["a", "b"], [np.array([[1.0, 0.0], [0.0, 1.0]])])
    emb = np.array([[1.0, 0.0]])
    out = ad.refine_prototypes(protos, emb, ad.RefinementConfig(alpha=1.0, tau_r=1.0))
    # row a moves fully onto its affinity mix: softmax([1, 0]) over (a, b)
    assert abs(out.layers[0][0, 0] - 0.7310585786300049) < 1e-12
    assert abs(out.layers[0][0, 1] - 0.2689414213699951) < 1e-12
    # row b is orthogonal to the embedding, so its coefficient is zero
    assert np.array_equal(out.layers[0][1], np.array([0.0, 1.0]))


def test_refine_alpha_zero_is_bitwise_noop():
    rng = np.random.default_rng(7)
    protos = _random_protos(rng, 4, 3)
    emb = rng.normal(size=(2, 3))
    out = ad.refine_prototypes(protos, emb, ad.RefinementConfig(alpha=0.0))
    assert out is not protos
    for l in range(2):
        assert np.array_equal(out.layers[l], protos.layers[l])
        assert out.layers[l] is not protos.layers[l]


def test_refine_identical_prototypes_fixed_point():
    p = np.array([0.3, -0.2, 0.9])
    protos = rt.PrototypeSet(["a", "b", "c"], [np.tile(p, (3, 1))])
    emb = np.array([[0.1, 0.5, -0.4]])
    out = ad.refine_prototypes(protos, emb, ad.RefinementConfig(alpha=0.8, tau_r=0.7))
    assert np.max(np.abs(out.layers[0] - protos.layers[0])) < 1e-12


def test_refine_clamp_freezes_negative_similarity():
    protos = rt.PrototypeSet(["a", "b"], [np.array([[1.0, 0.0], [0.0, 1.0]])])
    emb = np.array([[-1.0, 0.0]])
    exact = ad.refine_prototypes(protos, emb, ad.RefinementConfig(alpha=0.5, clamp=False))
    clamped = ad.refine_prototypes(protos, emb, ad.RefinementConfig(alpha=0.5, clamp=True))
    assert not np.allclose(exact.layers[0][0], protos.layers[0][0])
    assert np.array_equal(clamped.layers[0][0], protos.layers[0][0])


def test_refine_rejects_zero_prototype():
    protos = rt.PrototypeSet(["a", "b"], [np.array([[1.0, 0.0], [0.0, 0.0]])])
    with pytest.raises(ValueError):
        ad.refine_prototypes(protos, np.array([[1.0, 0.0]]), ad.RefinementConfig(alpha=0.5))


def _graph(labels, feats, edges, n_feat=3):
    n = len(labels)
    v = np.array(feats, dtype=float)
    a = np.zeros((n, n))
    r = np.zeros((n, n))
    np.fill_diagonal(r, 1.0)
    for i, j, w in edges:
        a[i, j] = a[j, i] = 1.0
        r[i, j] = r[j, i] = w
    return gw.ObservationGraph(tuple(labels), v, a, r)


def test_combined_graph_identical_is_fixed_point():
    g = _graph(["a", "b"], [[1, 0, 0], [0, 1, 0]], [(0, 1, 0.5)])
    c = ad.combined_graph(g, g)
    assert c.labels == g.labels
    assert np.array_equal(c.V, g.V)
    assert np.array_equal(c.A, g.A)
    assert np.array_equal(c.R, g.R)


def test_combined_graph_disjoint_blocks():
    g1 = _graph(["a", "b"], [[1, 0, 0], [0, 1, 0]], [(0, 1, 0.5)])
    g2 = _graph(["c", "d"], [[0, 0, 1], [1, 1, 0]], [(0, 1, 0.9)])
    c = ad.combined_graph(g1, g2)
    assert c.labels == ("a", "b", "c", "d")
    assert c.A[0, 1] == 1.0 and c.A[2, 3] == 1.0
    assert c.A[0, 2] == 0.0 and c.A[1, 3] == 0.0
    assert c.R[2, 3] == 0.9
    assert np.array_equal(c.V[2], [0, 0, 1])


def test_combined_graph_overlap_averages_and_maxes():
    g1 = _graph(["a", "shared"], [[1, 0, 0], [0, 1, 0]], [(0, 1, 0.4)])
    g2 = _graph(["shared", "z"], [[0, 0, 1], [1, 0, 0]], [(0, 1, 0.8)])
    c = ad.combined_graph(g1, g2)
    assert c.labels == ("a", "shared", "z")
    s = c.labels.index("shared")
    assert np.array_equal(c.V[s], [0, 0.5, 0.5])
    assert c.A[0, s] == 1.0 and c.A[s, 2] == 1.0 and c.A[0, 2] == 0.0
    assert c.R[0, s] == 0.4 and c.R[s, 2] == 0.8
    with pytest.raises(ValueError):
        ad.combined_graph(g1, gw.ObservationGraph(("x",), np.ones((1, 5)), np.zeros((1, 1)), np.ones((1, 1))))


def _tiny_mixture(rng, n_layers=3, d_h=10, rank=2, n_adapters=3):
    base = wm.BaseModel(VOCAB, n_layers, d_h, gw.MAX_SEQ_LEN_DEFAULT, rng)
    adapters = []
    for j in range(n_adapters):
        a = wm.Adapter(n_layers, d_h, rank, rng)
        for l in range(n_layers):
            a.params[f"up_{l}"].data = rng.normal(size=(rank, d_h))  # nonzero for blend math
        adapters.append(a)
    return wm.Mixture(base, adapters, [f"dom{j}" for j in range(n_adapters)])


def test_distill_one_hot_copies_bitwise():
    mix = _tiny_mixture(np.random.default_rng(0))
    w = mix.one_hot_weights(1)
    out = ad.distill_init(mix, w)
    for l in range(3):
        assert np.array_equal(out.params[f"down_{l}"].data, mix.adapters[1].params[f"down_{l}"].data)
        assert np.array_equal(out.params[f"up_{l}"].data, mix.adapters[1].params[f"up_{l}"].data)
        assert out.params[f"down_{l}"].data is not mix.adapters[1].params[f"down_{l}"].data


def test_distill_matches_loop_oracle():
    rng = np.random.default_rng(1)
    mix = _tiny_mixture(rng)
    for _ in range(100):
        w = rng.dirichlet(np.ones(3), size=3)  # (L, N) simplex rows
        out = ad.distill_init(mix, w)
        for l in range(3):
            downs = [a.params[f"down_{l}"].data for a in mix.adapters]
            ups = [a.params[f"up_{l}"].data for a in mix.adapters]
            dw, uw = oracles.distill_loops(downs, ups, list(w[l]))
            assert np.max(np.abs(out.params[f"down_{l}"].data - dw)) < 1e-10
            assert np.max(np.abs(out.params[f"up_{l}"].data - uw)) < 1e-10


def test_distill_validates_shape():
    mix = _tiny_mixture(np.random.default_rng(2))
    with pytest.raises(ValueError):
        ad.distill_init(mix, np.ones((2, 3)))
    with pytest.raises(ValueError):
        ad.distill_init(wm.Mixture(mix.base, [], []), np.ones((3, 0)))


def _augment_fixture(seed=0, n_demos=2):
    rng = np.random.default_rng(seed)
    mix = _tiny_mixture(rng, n_layers=4, d_h=12, rank=2, n_adapters=3)
    proc = rt.GraphProcessor(VOCAB, 4, gw.FEATURE_DIM, 10, 5, np.random.default_rng(seed + 1))
    seen = {}
    for scene, task in (("studio", "fetch"), ("flat", "stow"), ("bungalow", "relocate")):
        d = gw.generate_domain(0, scene, task)
        seen[d.domain_id] = (d, [gw.demonstrate(d, gw.sample_episode(d, np.random.default_rng(k))) for k in range(2)])
    protos = rt.extract_prototypes(proc, seen)
    mix = wm.Mixture(mix.base, mix.adapters, list(seen.keys()))
    new_dom = gw.generate_domain(0, "workshop", "fetch")
    demos = [gw.demonstrate(new_dom, gw.sample_episode(new_dom, np.random.default_rng(90 + k))) for k in range(n_demos)]
    return mix, proc, protos, new_dom, demos


def test_augment_zero_steps_equals_distill_and_preserves_inputs():
    mix, proc, protos, new_dom, demos = _augment_fixture()
    before_adapters = [
        {k: t.data.copy() for k, t in a.params.items()} for a in mix.adapters
    ]
    before_layers = [layer.copy() for layer in protos.layers]
    cfg = ad.AugmentConfig(k=2, finetune_steps=0, seed=3)
    new_mix, new_protos, report = ad.augment_model(mix, proc, protos, new_dom, demos, cfg)

    assert new_mix.domain_ids[:-1] == mix.domain_ids and new_mix.domain_ids[-1] == new_dom.domain_id
    assert new_mix.n_experts == mix.n_experts + 1
    for a, snap in zip(mix.adapters, before_adapters):
        for k, t in a.params.items():
            assert np.array_equal(t.data, snap[k])
    for l in range(protos.n_layers):
        assert np.array_equal(protos.layers[l], before_layers[l])
        assert np.array_equal(new_protos.layers[l][:-1], protos.layers[l])

    mean_emb = ad._mean_demo_embeddings(proc, new_dom, demos)
    dec = rt.route(mean_emb, protos, 2, 1.0)
    want = ad.distill_init(mix, dec.weights)
    got = new_mix.adapters[-1]
    for l in range(4):
        assert np.array_equal(got.params[f"down_{l}"].data, want.params[f"down_{l}"].data)
        assert np.array_equal(got.params[f"up_{l}"].data, want.params[f"up_{l}"].data)
    for l in range(protos.n_layers):
        assert np.array_equal(new_protos.layers[l][-1], mean_emb[l])

    assert report["domain_id"] == new_dom.domain_id
    assert report["k_used"] == 2 and report["finetune_steps"] == 0
    assert report["loss_first"] is None and report["loss_last"] is None
    assert len(report["distill_weights"]) == 4

    with pytest.raises(ValueError):
        ad.augment_model(new_mix, proc, new_protos, new_dom, demos, cfg)
    with pytest.raises(ValueError):
        ad.augment_model(mix, proc, protos, new_dom, [], cfg)


def test_augment_finetune_reduces_loss():
    mix, proc, protos, new_dom, demos = _augment_fixture(seed=5)
    cfg = ad.AugmentConfig(k=2, finetune_steps=120, lr=0.08, batch_size=8, seed=7)
    new_mix, _protos, report = ad.augment_model(mix, proc, protos, new_dom, demos, cfg)
    assert report["loss_last"] < report["loss_first"]

    # the tuned expert predicts its domain better than the distilled start
    single = wm.Mixture(mix.base, [new_mix.adapters[-1]], [new_dom.domain_id])
    tuned = sum(wm.teacher_forcing_loss(single, single.one_hot_weights(0), d).item() for d in demos)
    start = ad.distill_init(mix, np.asarray(report["distill_weights"]))
    single0 = wm.Mixture(mix.base, [start], [new_dom.domain_id])
    init = sum(wm.teacher_forcing_loss(single0, single0.one_hot_weights(0), d).item() for d in demos)
    assert tuned < init
