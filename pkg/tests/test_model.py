"""DiffNet forward and backward passes."""

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from diffnet.data import Dataset
from diffnet.model import DiffNet, DiffNetConfig, StaleTraceError, aggregate_neighbors
from oracles import finite_difference_errors, forward_scores, instances, random_dataset


def dataset(interactions, trust, num_items, X=None, Y=None):
    M = len(interactions)
    users = [a for a, r in enumerate(interactions) for _ in r]
    items = [i for r in interactions for i in r]
    src = [a for a, t in enumerate(trust) for _ in t]
    dst = [b for t in trust for b in t]
    return Dataset.from_pairs(M, num_items, users, items, src, dst, user_features=X, item_features=Y)


def bare_config(**kw):
    base = dict(embed_dim=2, diffusion_depth=0, use_user_features=False, use_item_features=False,
                use_batchnorm=False)
    base.update(kw)
    return DiffNetConfig(**base)


class TestFusion:
    def test_identity_fusion_passes_free_embedding(self):
        ds = dataset([[0], [0]], [[], []], 1)
        m = DiffNet(bare_config(fusion_activation="identity", bypass_featureless_fusion=False), ds)
        m.params["W0"][...] = np.eye(2)
        m.params["W0_bias"][...] = 0
        np.testing.assert_array_equal(m.fuse_user(1), m.params["P"][:, 1])

    def test_zero_weights_sigmoid_half(self):
        ds = dataset([[0], [0]], [[], []], 2, X=np.ones((3, 2)), Y=np.ones((2, 2)))
        m = DiffNet(DiffNetConfig(embed_dim=4, diffusion_depth=0, use_batchnorm=False), ds)
        for k in ("W0", "W0_bias", "F", "F_bias"):
            m.params[k][...] = 0
        np.testing.assert_array_equal(m.fuse_user(0), np.full(4, 0.5))
        np.testing.assert_array_equal(m.fuse_item(1), np.full(4, 0.5))

    def test_user_fusion_matches_direct_evaluation(self):
        X = np.array([[1.0], [0.0]])
        ds = dataset([[0]], [[]], 1, X=X)
        m = DiffNet(DiffNetConfig(embed_dim=2, diffusion_depth=0, use_item_features=False,
                                  use_batchnorm=False), ds, rng_seed=7)
        m.params["P"][:, 0] = [0.0, 1.0]
        W, b = m.params["W0"], m.params["W0_bias"]
        b[...] = [0.1, -0.2]
        expected = 1.0 / (1.0 + np.exp(-(W @ np.array([1.0, 0.0, 0.0, 1.0]) + b)))
        np.testing.assert_allclose(m.fuse_user(0), expected, rtol=0, atol=1e-15)

    def test_item_fusion_bypassed_without_features(self):
        ds = dataset([[0, 1]], [[]], 2)
        m = DiffNet(bare_config(), ds)
        assert "F" not in m.params
        np.testing.assert_array_equal(m.fuse_item(1), m.params["Q"][:, 1])

    def test_item_fusion_matches_direct_evaluation(self):
        rng = np.random.default_rng(0)
        Y = rng.standard_normal((3, 4))
        ds = dataset([[0]], [[]], 4, Y=Y)
        m = DiffNet(DiffNetConfig(embed_dim=2, diffusion_depth=0, use_user_features=False,
                                  use_batchnorm=False), ds, rng_seed=1)
        F, c, Q = m.params["F"], m.params["F_bias"], m.params["Q"]
        for i in range(4):
            expected = 1.0 / (1.0 + np.exp(-(F @ np.concatenate([Q[:, i], Y[:, i]]) + c)))
            np.testing.assert_allclose(m.fuse_item(i), expected, atol=1e-15)

    def test_features_only_users(self):
        X = np.arange(6.0).reshape(3, 2)
        ds = dataset([[0], [0]], [[], []], 1, X=X)
        m = DiffNet(DiffNetConfig(embed_dim=2, diffusion_depth=0, use_free_user_embed=False,
                                  use_item_features=False, use_batchnorm=False), ds)
        assert "P" not in m.params and m.params["W0"].shape == (2, 3)

    def test_config_needs_some_input(self):
        with pytest.raises(ValueError):
            DiffNetConfig(use_user_features=False, use_free_user_embed=False)
        with pytest.raises(ValueError):
            DiffNetConfig(pooling="sum")

    def test_missing_features_rejected(self):
        with pytest.raises(ValueError, match="user features"):
            DiffNet(DiffNetConfig(), dataset([[0]], [[]], 1))


class TestAggregation:
    h = np.array([[0.0, 1.0, 3.0], [0.0, 2.0, 4.0]])

    def test_average(self):
        np.testing.assert_array_equal(aggregate_neighbors(self.h, [1, 2]), [2.0, 3.0])

    @pytest.mark.parametrize("pooling", ["average", "max"])
    def test_single_neighbour_identity(self, pooling):
        np.testing.assert_array_equal(aggregate_neighbors(self.h, [2], pooling), self.h[:, 2])

    def test_empty_zero_vector(self):
        np.testing.assert_array_equal(aggregate_neighbors(self.h, []), [0.0, 0.0])
        np.testing.assert_array_equal(aggregate_neighbors(self.h, [], empty_policy="self_copy", user=1), [1.0, 2.0])

    def test_max_elementwise(self):
        h = np.array([[1.0, 5.0, 2.0], [9.0, 0.0, 3.0]])
        np.testing.assert_array_equal(aggregate_neighbors(h, [0, 1, 2], "max"), [5.0, 9.0])

    def test_average_order_invariant(self):
        rng = np.random.default_rng(0)
        h = rng.standard_normal((4, 6))
        a = aggregate_neighbors(h, [5, 1, 3])
        b = aggregate_neighbors(h, [3, 5, 1])
        np.testing.assert_allclose(a, b, atol=1e-15)

    def test_model_aggregate_matches_helper(self):
        rng = np.random.default_rng(1)
        ds = random_dataset(rng, 6, 4)
        for pooling in ("average", "max"):
            m = DiffNet(bare_config(pooling=pooling, diffusion_depth=1), ds)
            h = rng.standard_normal((2, 6))
            agg, _, ops = m.aggregate(h)
            for a in range(6):
                np.testing.assert_allclose(agg[:, a], aggregate_neighbors(h, ds.trust_out[a], pooling), atol=1e-15)
            assert ops == ds.num_edges


class TestDiffusion:
    def test_empty_graph_self_passthrough(self):
        ds = dataset([[0]] * 3, [[], [], []], 1)
        m = DiffNet(bare_config(diffusion_depth=1, diffusion_activations="identity"), ds)
        m.params["W_diff0"][...] = np.hstack([np.zeros((2, 2)), np.eye(2)])
        h = np.random.default_rng(0).standard_normal((2, 3))
        out = m.diffuse(h, 0)[0]
        np.testing.assert_array_equal(out, h)

    def test_two_users_swap(self):
        ds = dataset([[0], [0]], [[1], [0]], 1)
        m = DiffNet(bare_config(diffusion_depth=1, diffusion_activations="identity"), ds)
        m.params["W_diff0"][...] = np.hstack([np.eye(2), np.zeros((2, 2))])
        h = np.array([[1.0, 3.0], [2.0, 4.0]])
        np.testing.assert_array_equal(m.diffuse(h, 0)[0], h[:, ::-1])

    def test_chain_against_oracle(self):
        rng = np.random.default_rng(5)
        X, Y = rng.standard_normal((2, 4)), rng.standard_normal((3, 5))
        ds = dataset([[0, 1], [2], [3, 4], []], [[1], [2], [3], []], 5, X=X, Y=Y)
        m = DiffNet(DiffNetConfig(embed_dim=3, diffusion_depth=2, use_batchnorm=False), ds, rng_seed=2)
        np.testing.assert_allclose(m.score_users(), forward_scores(m, ds), rtol=0, atol=1e-12)

    def test_layer_out_of_range(self):
        m = DiffNet(bare_config(diffusion_depth=1), dataset([[0]], [[]], 1))
        with pytest.raises(ValueError):
            m.diffuse(np.zeros((2, 1)), 1)


class TestPrediction:
    def test_final_vector_empty_history(self):
        ds = dataset([[], [0]], [[], []], 2)
        m = DiffNet(bare_config(), ds)
        v = np.random.default_rng(0).standard_normal((2, 2))
        hK = np.array([[1.0, 2.0], [3.0, 4.0]])
        np.testing.assert_array_equal(m.final_user_vectors(hK, v)[:, 0], hK[:, 0])

    def test_final_vector_single_item_doubles(self):
        ds = dataset([[1]], [[]], 2)
        m = DiffNet(bare_config(), ds)
        hK = np.array([[0.3], [-0.7]])
        v = np.array([[9.0, 0.3], [9.0, -0.7]])
        np.testing.assert_array_equal(m.final_user_vectors(hK, v), 2 * hK)

    def test_final_vector_hand_arithmetic(self):
        ds = dataset([[0, 1]], [[]], 2)
        m = DiffNet(bare_config(), ds)
        u = m.final_user_vectors(np.array([[1.0], [1.0]]), np.eye(2))
        np.testing.assert_array_equal(u[:, 0], [1.5, 1.5])

    def test_orthogonal_and_unit(self):
        ds = dataset([[], []], [[], []], 2)
        m = DiffNet(bare_config(), ds)
        m.params["P"][...] = [[1.0, 1.0], [0.0, 0.0]]
        m.params["Q"][...] = [[0.0, 1.0], [1.0, 0.0]]
        m.mark_updated()
        assert m.predict(0, 0) == 0.0
        assert m.predict(0, 1) == 1.0

    def test_unknown_ids(self):
        m = DiffNet(bare_config(), dataset([[0]], [[]], 1))
        with pytest.raises(IndexError):
            m.predict(1, 0)
        with pytest.raises(IndexError):
            m.predict(0, 3)

    def test_all_finite(self):
        rng = np.random.default_rng(3)
        ds = random_dataset(rng, 12, 9, d1=3, d2=2)
        for pooling in ("average", "max"):
            m = DiffNet(DiffNetConfig(embed_dim=5, diffusion_depth=3, pooling=pooling), ds)
            t = m.forward(training=True)
            for arr in [t.u, t.v, *t.h, *t.h_agg]:
                assert np.all(np.isfinite(arr))


class TestForwardOracle:
    @settings(max_examples=200, deadline=None, suppress_health_check=[HealthCheck.too_slow])
    @given(instances())
    def test_matches_straight_line_oracle(self, inst):
        ds, model = inst
        np.testing.assert_allclose(model.score_users(), forward_scores(model, ds), rtol=0, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(instances(), st.randoms(use_true_random=False))
    def test_permutation_equivariance(self, inst, rnd):
        ds, model = inst
        M = ds.num_users
        perm = list(range(M))
        rnd.shuffle(perm)
        perm = np.array(perm)  # new user j is old user perm[j]
        inv = np.argsort(perm)
        ds2 = Dataset(
            M, ds.num_items,
            tuple(ds.interactions[perm[j]] for j in range(M)),
            tuple(np.sort(inv[ds.trust_out[perm[j]]]) for j in range(M)),
            user_features=None if ds.user_features is None else ds.user_features[:, perm],
            item_features=ds.item_features,
        )
        m2 = DiffNet(model.config, ds2)
        for k, v in model.params.items():
            m2.params[k][...] = v[:, perm] if k == "P" else v
        for s2, s in zip(m2.bn_states, model.bn_states):
            s2.running_mean, s2.running_var = s.running_mean, s.running_var
        m2.mark_updated()
        t1, t2 = model.forward(), m2.forward()
        for h1, h2 in zip(t1.h, t2.h):
            np.testing.assert_allclose(h2, h1[:, perm], atol=1e-12)
        np.testing.assert_allclose(m2.score_users(), model.score_users()[perm], atol=1e-12)


class TestBackward:
    def _fixture(self, **kw):
        rng = np.random.default_rng(0)
        ds = random_dataset(rng, 8, 10, d1=3, d2=3)
        cfg = dict(embed_dim=4, diffusion_depth=2, use_batchnorm=False, init_scale=0.5)
        cfg.update(kw)
        model = DiffNet(DiffNetConfig(**cfg), ds, rng_seed=1)
        users = rng.integers(0, 8, 30)
        pos = rng.integers(0, 10, 30)
        neg = rng.integers(0, 10, 30)
        return model, users, pos, neg

    def test_zero_upstream_gives_zero(self):
        model, users, pos, _ = self._fixture()
        t = model.forward()
        grads = model.backward(t, users, pos, np.zeros(users.size))
        assert set(grads) == set(model.params)
        assert all(np.all(g == 0) for g in grads.values())

    def test_stale_trace(self):
        model, users, pos, _ = self._fixture()
        t = model.forward()
        model.mark_updated()
        with pytest.raises(StaleTraceError):
            model.backward(t, users, pos, np.ones(users.size))

    def test_matrix_factorization_case(self):
        # one user, no history, K=0, linear: dL/dq_i = u_a * dL/dr
        ds = dataset([[]], [[]], 3)
        m = DiffNet(bare_config(embed_dim=3), ds, rng_seed=4)
        t = m.forward()
        g = m.backward(t, np.array([0]), np.array([2]), np.array([0.7]))
        np.testing.assert_allclose(g["Q"][:, 2], 0.7 * m.params["P"][:, 0], atol=1e-15)
        np.testing.assert_allclose(g["P"][:, 0], 0.7 * m.params["Q"][:, 2], atol=1e-15)
        assert np.all(g["Q"][:, :2] == 0)

    @pytest.mark.parametrize(
        "variant",
        [
            {},
            {"pooling": "max"},
            {"empty_neighbor_policy": "self_copy"},
            {"use_free_user_embed": False},
            {"use_free_item_embed": False},
            {"use_user_features": False, "use_item_features": False, "bypass_featureless_fusion": False},
            {"diffusion_activations": ("sigmoid", "identity"), "fusion_activation": "relu"},
        ],
        ids=["default", "max", "self_copy", "no_P", "no_Q", "fused_no_features", "mixed_acts"],
    )
    def test_finite_differences(self, variant):
        model, users, pos, neg = self._fixture(**variant)
        report = finite_difference_errors(model, users, pos, neg, reg=0.01)
        bad = {k: v for k, v in report.items() if not v[0]}
        assert not bad, bad

    def test_finite_differences_batchnorm_training(self):
        model, users, pos, neg = self._fixture(use_batchnorm=True)
        report = finite_difference_errors(model, users, pos, neg, reg=0.01, training=True)
        bad = {k: v for k, v in report.items() if not v[0]}
        assert not bad, bad
