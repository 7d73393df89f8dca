"""Forecasting network: parameter layout, extractors, variants, forward."""

import dataclasses

import numpy as np
import pytest
import torch

import oracles
from conftest import line_graph, max_abs_diff, random_graph, randomized, theta_arrays
from stgfsl.errors import ConfigError, ContractError
from stgfsl.param_gen import count_params
from stgfsl.params import DTYPE, ParamVector
from stgfsl.stnn import (
    GRU_MATRICES,
    TCN_DEPTH,
    ExtractorSpec,
    ModelConfig,
    causal_conv1d,
    extract_features,
    generate_extractor_weights,
    generator_views,
    init_theta,
    meta_knowledge,
    predict,
    predictor_view,
    shared_extractor_weights,
    stnn_forward,
)


def small_cfg(**kw) -> ModelConfig:
    base = dict(in_dim=1, history=6, horizon=3, embed_dim=5, heads=2, meta_dim=4,
                extractor=ExtractorSpec(kind="gru", hidden_dim=4))
    base.update(kw)
    return ModelConfig(**base)


def rand_window(rng, cfg, n, batch=None):
    shape = (cfg.history, n, cfg.in_dim) if batch is None else (batch, cfg.history, n, cfg.in_dim)
    return torch.tensor(rng.normal(size=shape), dtype=DTYPE)


class TestInitTheta:
    def test_full_model_segments(self):
        cfg = small_cfg()
        theta = init_theta(cfg, seed=0)
        names = set(theta.names())
        assert {"temporal.u_z", "temporal.w_c"} <= names
        assert {"spatial.w.0", "spatial.a.1", "fuse.gamma_raw", "fuse.w_out"} <= names
        assert {"predictor.w", "predictor.b"} <= names
        assert any(n.startswith("gen.u_z.") for n in names)
        assert all(t.requires_grad for t in theta.tensors())
        assert all(t.dtype == DTYPE for t in theta.tensors())

    def test_variant_segments(self):
        cfg = small_cfg()
        m1a = set(init_theta(dataclasses.replace(cfg, ablation="M1a"), 0).names())
        assert not any(n.startswith("spatial.") for n in m1a)
        assert "fuse.w_out" in m1a and "fuse.gamma_raw" not in m1a

        m1b = set(init_theta(dataclasses.replace(cfg, ablation="M1b"), 0).names())
        assert not any(n.startswith("temporal.") for n in m1b)
        assert any(n.startswith("spatial.") for n in m1b)

        m1c = set(init_theta(dataclasses.replace(cfg, ablation="M1c"), 0, cities={"a": 4}).names())
        assert "embed.a" in m1c
        assert not any(n.startswith(("temporal.", "spatial.", "fuse.")) for n in m1c)

        m2 = set(init_theta(dataclasses.replace(cfg, ablation="M2"), 0).names())
        assert any(n.startswith("extractor.") for n in m2)
        assert not any(n.startswith("gen.") for n in m2)

        m3 = set(init_theta(dataclasses.replace(cfg, ablation="M3"), 0).names())
        assert m3 == set(init_theta(cfg, 0).names())

    def test_m1c_needs_cities(self):
        with pytest.raises(ConfigError):
            init_theta(small_cfg(ablation="M1c"), 0)

    def test_deterministic_in_seed(self):
        cfg = small_cfg()
        a, b, c = init_theta(cfg, 5), init_theta(cfg, 5), init_theta(cfg, 6)
        for name in a.names():
            assert torch.equal(a[name], b[name])
        assert any(not torch.equal(a[n], c[n]) for n in a.names())

    def test_generator_counts_match_formula(self):
        cfg = small_cfg()
        theta = init_theta(cfg, 0)
        views = generator_views(theta, cfg)
        for name in GRU_MATRICES:
            d_in = cfg.in_dim if name.startswith("u") else cfg.extractor.hidden_dim
            expect = count_params(cfg.meta_dim, d_in, cfg.extractor.hidden_dim)[0]
            assert views[name].weight_count() == expect

    def test_conv_generator_counts_match_formula(self):
        cfg = small_cfg(extractor=ExtractorSpec(kind="tcn", hidden_dim=4, kernel_sizes=(2, 3)))
        theta = init_theta(cfg, 0)
        views = generator_views(theta, cfg)
        for ks in (2, 3):
            for layer in range(TCN_DEPTH):
                c_in = cfg.in_dim if layer == 0 else cfg.extractor.hidden_dim
                expect = count_params(cfg.meta_dim, c_in, cfg.extractor.hidden_dim * ks)[0]
                assert views[f"tcn{ks}.l{layer}"].weight_count() == expect


class TestCausalConv:
    def test_manual_two_tap(self):
        # one node, one channel: kernel (1,1,1,2) taps (w_old, w_now)
        x = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=DTYPE)
        kernel = torch.tensor([[[[10.0, 1.0]]]], dtype=DTYPE)
        out = causal_conv1d(x, kernel, None, dilation=1)
        # y[t] = x[t] + 10 x[t-1]
        assert out[0].tolist() == [1.0, 12.0, 23.0, 34.0]

    def test_dilation_reaches_further_back(self):
        x = torch.tensor([[1.0, 2.0, 3.0, 4.0]], dtype=DTYPE)
        kernel = torch.tensor([[[[10.0, 1.0]]]], dtype=DTYPE)
        out = causal_conv1d(x, kernel, None, dilation=2)
        # y[t] = x[t] + 10 x[t-2]
        assert out[0].tolist() == [1.0, 2.0, 13.0, 24.0]

    def test_moving_average_kernel(self):
        x = torch.tensor([[3.0, 3.0, 3.0, 3.0, 3.0]], dtype=DTYPE)
        kernel = torch.full((1, 1, 1, 2), 0.5, dtype=DTYPE)
        out = causal_conv1d(x, kernel, None, dilation=1)
        assert max_abs_diff(out[0][1:], torch.full((4,), 3.0, dtype=DTYPE)) < 1e-15

    def test_causality(self):
        rng = np.random.default_rng(0)
        x = torch.tensor(rng.normal(size=(2, 8)), dtype=DTYPE)
        kernel = torch.tensor(rng.normal(size=(2, 3, 1, 2)), dtype=DTYPE)
        bias = torch.tensor(rng.normal(size=(3,)), dtype=DTYPE)
        base = causal_conv1d(x, kernel, bias, dilation=2)
        bumped = x.clone()
        bumped[:, 5:] += 10.0
        after = causal_conv1d(bumped, kernel, bias, dilation=2)
        assert max_abs_diff(base[..., :5], after[..., :5]) == 0.0
        assert max_abs_diff(base[..., 5:], after[..., 5:]) > 1.0

    def test_matches_scalar_oracle(self):
        rng = np.random.default_rng(1)
        x = torch.tensor(rng.normal(size=(2, 6)), dtype=DTYPE)
        kernel = torch.tensor(rng.normal(size=(2, 3, 1, 2)), dtype=DTYPE)
        bias = torch.tensor(rng.normal(size=(3,)), dtype=DTYPE)
        got = causal_conv1d(x, kernel, bias, dilation=2)
        want = oracles.o_causal_conv(x.numpy(), kernel.numpy(), bias.numpy(), 2)
        assert max_abs_diff(got, want) < 1e-13


class TestExtractors:
    def test_gru_per_node_isolation(self):
        rng = np.random.default_rng(2)
        cfg = small_cfg()
        theta = init_theta(cfg, 0)
        z = torch.tensor(rng.normal(size=(4, cfg.meta_dim)), dtype=DTYPE)
        weights = generate_extractor_weights(z, theta, cfg)
        w1 = rand_window(rng, cfg, 4)
        w2 = w1.clone()
        w2[:, 2, :] += 5.0  # only node 2 changes
        f1 = extract_features(w1, cfg.extractor, weights)
        f2 = extract_features(w2, cfg.extractor, weights)
        assert max_abs_diff(f1[[0, 1, 3]], f2[[0, 1, 3]]) == 0.0
        assert max_abs_diff(f1[2], f2[2]) > 1e-6

    def test_tcn_per_node_isolation(self):
        rng = np.random.default_rng(3)
        cfg = small_cfg(extractor=ExtractorSpec(kind="tcn", hidden_dim=4))
        theta = init_theta(cfg, 0)
        z = torch.tensor(rng.normal(size=(4, cfg.meta_dim)), dtype=DTYPE)
        weights = generate_extractor_weights(z, theta, cfg)
        w1 = rand_window(rng, cfg, 4)
        w2 = w1.clone()
        w2[:, 1, :] -= 3.0
        f1 = extract_features(w1, cfg.extractor, weights)
        f2 = extract_features(w2, cfg.extractor, weights)
        assert max_abs_diff(f1[[0, 2, 3]], f2[[0, 2, 3]]) == 0.0
        assert max_abs_diff(f1[1], f2[1]) > 1e-6

    def test_zero_generator_weights_zero_features(self):
        rng = np.random.default_rng(4)
        cfg = small_cfg()
        theta = init_theta(cfg, 0)
        named = {n: (torch.zeros_like(t) if n.startswith("gen.") else t) for n, t in theta.items()}
        z = torch.tensor(rng.normal(size=(4, cfg.meta_dim)), dtype=DTYPE)
        weights = generate_extractor_weights(z, ParamVector(named), cfg)
        f = extract_features(rand_window(rng, cfg, 4), cfg.extractor, weights)
        # all six matrices are zero: z = r = 1/2, c = 0, h stays 0
        assert float(f.abs().max()) == 0.0

    def test_tcn_branches_sum(self):
        rng = np.random.default_rng(5)
        cfg = small_cfg(extractor=ExtractorSpec(kind="tcn", hidden_dim=3, kernel_sizes=(2, 3)))
        theta = init_theta(cfg, 0)
        z = torch.tensor(rng.normal(size=(4, cfg.meta_dim)), dtype=DTYPE)
        window = rand_window(rng, cfg, 4)
        full = generate_extractor_weights(z, theta, cfg)
        total = extract_features(window, cfg.extractor, full)
        partials = []
        for keep in range(2):
            solo = dataclasses.replace(full, branches=[full.branches[keep]])
            partials.append(extract_features(window, cfg.extractor, solo))
        assert max_abs_diff(total, partials[0] + partials[1]) < 1e-12

    def test_gru_matches_scalar_oracle(self):
        rng = np.random.default_rng(6)
        cfg = small_cfg()
        theta = randomized(init_theta(cfg, 0), rng)
        z = torch.tensor(rng.normal(size=(3, cfg.meta_dim)), dtype=DTYPE)
        weights = generate_extractor_weights(z, theta, cfg)
        window = rand_window(rng, cfg, 3)
        got = extract_features(window, cfg.extractor, weights)
        mats = [
            {name: getattr(weights, name)[n].detach().numpy() for name in GRU_MATRICES}
            for n in range(3)
        ]
        want = oracles.o_extract_gru(window.numpy(), mats)
        assert max_abs_diff(got, want) < 1e-12

    def test_shared_weights_are_node_independent(self):
        cfg = small_cfg(ablation="M2")
        theta = init_theta(cfg, 0)
        weights = shared_extractor_weights(theta, cfg)
        rng = np.random.default_rng(7)
        window = rand_window(rng, cfg, 4)
        window[:, 1] = window[:, 0]  # two nodes with identical histories
        f = extract_features(window, cfg.extractor, weights)
        assert max_abs_diff(f[0], f[1]) == 0.0


class TestPredict:
    def test_reshape_order(self):
        # hand-built predictor: feature row picks one flat output slot
        horizon, d = 3, 2
        w = torch.zeros(1, horizon * d, dtype=DTYPE)
        b = torch.tensor(np.arange(horizon * d, dtype=float), dtype=DTYPE)
        theta = ParamVector({"predictor.w": w, "predictor.b": b})
        feats = torch.zeros(4, 1, dtype=DTYPE)
        out = predict(feats, predictor_view(theta), horizon, d)
        assert out.shape == (horizon, 4, d)
        for m in range(horizon):
            for f in range(d):
                assert float(out[m, 0, f]) == m * d + f

    def test_readout_is_shared_across_nodes(self):
        rng = np.random.default_rng(8)
        w = torch.tensor(rng.normal(size=(4, 6)), dtype=DTYPE)
        b = torch.tensor(rng.normal(size=(6,)), dtype=DTYPE)
        theta = ParamVector({"predictor.w": w, "predictor.b": b})
        feats = torch.tensor(rng.normal(size=(5, 4)), dtype=DTYPE)
        feats[3] = feats[1]
        out = predict(feats, predictor_view(theta), 3, 2)
        assert max_abs_diff(out[:, 3], out[:, 1]) == 0.0


class TestForward:
    def test_shapes_gru_and_tcn(self):
        rng = np.random.default_rng(9)
        for spec in (ExtractorSpec("gru", 4), ExtractorSpec("tcn", 4)):
            cfg = small_cfg(extractor=spec)
            g = random_graph(4, rng)
            theta = init_theta(cfg, 0)
            pred, a_meta = stnn_forward(rand_window(rng, cfg, 4), g, theta, cfg)
            assert pred.shape == (cfg.horizon, 4, cfg.in_dim)
            assert a_meta.shape == (4, 4)
            pred_b, a_b = stnn_forward(rand_window(rng, cfg, 4, batch=2), g, theta, cfg)
            assert pred_b.shape == (2, cfg.horizon, 4, cfg.in_dim)
            assert a_b.shape == (2, 4, 4)

    def test_batched_matches_per_window(self):
        rng = np.random.default_rng(10)
        cfg = small_cfg()
        g = random_graph(4, rng)
        theta = init_theta(cfg, 1)
        batch = rand_window(rng, cfg, 4, batch=3)
        pred_b, a_b = stnn_forward(batch, g, theta, cfg)
        for i in range(3):
            pred, a = stnn_forward(batch[i], g, theta, cfg)
            assert max_abs_diff(pred_b[i], pred) < 1e-12
            assert max_abs_diff(a_b[i], a) < 1e-12

    def test_m1a_is_node_separable(self):
        rng = np.random.default_rng(11)
        cfg = small_cfg(ablation="M1a")
        g = line_graph(4)
        theta = init_theta(cfg, 0)
        w1 = rand_window(rng, cfg, 4)
        w2 = w1.clone()
        w2[:, 3, :] += 4.0
        p1, _ = stnn_forward(w1, g, theta, cfg)
        p2, _ = stnn_forward(w2, g, theta, cfg)
        assert max_abs_diff(p1[:, :3], p2[:, :3]) == 0.0
        assert max_abs_diff(p1[:, 3], p2[:, 3]) > 1e-8

    def test_full_model_couples_neighbors(self):
        rng = np.random.default_rng(12)
        cfg = small_cfg()
        g = line_graph(4)
        theta = init_theta(cfg, 0)
        w1 = rand_window(rng, cfg, 4)
        w2 = w1.clone()
        w2[:, 0, :] += 4.0
        p1, _ = stnn_forward(w1, g, theta, cfg)
        p2, _ = stnn_forward(w2, g, theta, cfg)
        # node 1 is adjacent to node 0: its embedding, hence weights, move
        assert max_abs_diff(p1[:, 1], p2[:, 1]) > 1e-10

    def test_m2_prediction_ignores_encoder(self):
        rng = np.random.default_rng(13)
        cfg = small_cfg(ablation="M2")
        g = random_graph(4, rng)
        theta = init_theta(cfg, 0)
        window = rand_window(rng, cfg, 4)
        pred, a_meta = stnn_forward(window, g, theta, cfg)
        bumped = {
            n: (t + 0.5 if n.startswith(("temporal.", "spatial.", "fuse.")) else t)
            for n, t in theta.items()
        }
        pred2, a2 = stnn_forward(window, g, ParamVector(bumped), cfg)
        assert max_abs_diff(pred, pred2) == 0.0
        assert max_abs_diff(a_meta, a2) > 1e-9  # embeddings still feed the regularizer

    def test_m2_need_meta_off_skips_the_graph(self):
        rng = np.random.default_rng(14)
        cfg = small_cfg(ablation="M2")
        g = random_graph(4, rng)
        theta = init_theta(cfg, 0)
        pred, a_meta = stnn_forward(rand_window(rng, cfg, 4), g, theta, cfg, need_meta=False)
        assert a_meta is None
        assert pred.shape == (cfg.horizon, 4, cfg.in_dim)

    def test_m1c_table_and_errors(self):
        rng = np.random.default_rng(15)
        cfg = small_cfg(ablation="M1c")
        g = random_graph(4, rng)
        theta = init_theta(cfg, 0, cities={"a": 4, "b": 6})
        window = rand_window(rng, cfg, 4)
        pred, a_meta = stnn_forward(window, g, theta, cfg, city="a")
        assert pred.shape == (cfg.horizon, 4, cfg.in_dim)
        with pytest.raises(ConfigError):
            stnn_forward(window, g, theta, cfg, city="missing")
        with pytest.raises(ContractError):
            stnn_forward(window, g, theta, cfg, city="b")  # table rows != graph nodes

    def test_matching_nodes_predict_identically(self):
        # equal embeddings + equal inputs must give equal outputs
        rng = np.random.default_rng(16)
        cfg = small_cfg(ablation="M1c")
        g = line_graph(4)
        theta = init_theta(cfg, 0, cities={"a": 4})
        with torch.no_grad():
            theta["embed.a"][2] = theta["embed.a"][0]
        window = rand_window(rng, cfg, 4)
        window[:, 2] = window[:, 0]
        pred, _ = stnn_forward(window, g, theta, cfg, city="a")
        assert max_abs_diff(pred[:, 2], pred[:, 0]) == 0.0

    def test_window_contract_errors(self):
        rng = np.random.default_rng(17)
        cfg = small_cfg()
        g = random_graph(4, rng)
        theta = init_theta(cfg, 0)
        with pytest.raises(ContractError):
            stnn_forward(torch.zeros(5, 4, 1, dtype=DTYPE), g, theta, cfg)  # wrong T
        with pytest.raises(ContractError):
            stnn_forward(torch.zeros(6, 3, 1, dtype=DTYPE), g, theta, cfg)  # wrong N
        with pytest.raises(ContractError):
            stnn_forward(torch.zeros(6, 4, 2, dtype=DTYPE), g, theta, cfg)  # wrong d

    def test_full_forward_matches_scalar_oracle(self):
        rng = np.random.default_rng(18)
        for kind in ("gru", "tcn"):
            cfg = small_cfg(extractor=ExtractorSpec(kind=kind, hidden_dim=3), embed_dim=4, heads=2)
            g = random_graph(4, rng)
            theta = randomized(init_theta(cfg, 0), rng)
            window = rand_window(rng, cfg, 4)
            pred, a_meta = stnn_forward(window, g, theta, cfg)
            ocfg = {
                "horizon": cfg.horizon, "in_dim": cfg.in_dim, "heads": cfg.heads,
                "extractor": kind, "hidden_dim": 3, "kernel_sizes": (2, 3),
                "meta_dim": cfg.meta_dim,
            }
            o_pred, o_meta = oracles.o_forward(window.numpy(), g.adjacency, theta_arrays(theta), ocfg)
            assert max_abs_diff(pred, o_pred) < 1e-12
            assert max_abs_diff(a_meta, o_meta) < 1e-12


class TestMetaKnowledge:
    def test_gate_override_consistency(self):
        rng = np.random.default_rng(19)
        cfg = small_cfg()
        g = random_graph(4, rng)
        theta = init_theta(cfg, 0)
        window = rand_window(rng, cfg, 4)
        z_full = meta_knowledge(window, g, theta, cfg)
        assert z_full.shape == (4, cfg.meta_dim)

        m1a_cfg = dataclasses.replace(cfg, ablation="M1a")
        m1a_names = set(init_theta(m1a_cfg, 0).names())
        sub = ParamVector({n: theta[n] for n in theta.names() if n in m1a_names})
        z_tp_only = meta_knowledge(window, g, sub, m1a_cfg)
        # temporal-only: embeddings depend on each node's own series
        w2 = window.clone()
        w2[:, 0] += 1.0
        z2 = meta_knowledge(w2, g, sub, m1a_cfg)
        assert max_abs_diff(z_tp_only[1:], z2[1:]) == 0.0

    def test_temporal_input_switch(self):
        cfg = small_cfg(spatial_input="temporal")
        assert cfg.spatial_in_dim == cfg.embed_dim
        rng = np.random.default_rng(20)
        g = random_graph(4, rng)
        theta = init_theta(cfg, 0)
        z = meta_knowledge(rand_window(rng, cfg, 4), g, theta, cfg)
        assert z.shape == (4, cfg.meta_dim)

    def test_window_input_dimension(self):
        cfg = small_cfg()
        assert cfg.spatial_in_dim == cfg.history * cfg.in_dim
