import numpy as np
import pytest

from gravembed.autodiff import Tensor, grad_check
from gravembed.forces import membership_matrix
from gravembed.graphs import all_pairs_paths, build_graph
from gravembed.nets import (
    DiscriminatorConfig,
    EncoderConfig,
    discriminator_forward,
    discriminator_loss,
    encoder_forward,
    init_params,
    mlp_forward,
    silhouette_loss,
    total_loss,
)
from gravembed.ties import tie_matrix_exact
from gravembed.training import full_objective


def enc_cfg(d=3, hidden=(4,), q=2, lam=0.1, hops=2):
    return EncoderConfig(input_dim=d, hidden_dims=hidden, output_dim=q,
                         gate_threshold=lam, hops=hops)


def small_setup(n=5, d=3, seed=0, lam=0.1, hops=2, edge_prob=0.6):
    rng = np.random.default_rng(seed)
    edges = [(i, j, float(rng.uniform(0.5, 2.0)))
             for i in range(n) for j in range(i + 1, n) if rng.random() < edge_prob]
    feats = rng.standard_normal((n, d))
    labels = [i % 2 for i in range(n)]
    g = build_graph(feats, edges, labels=labels, n_classes=2)
    paths = all_pairs_paths(g, hops)
    ties = tie_matrix_exact(g, paths)
    cfg = enc_cfg(d=d, lam=lam, hops=hops)
    return g, paths, ties, cfg, rng


class TestEncoderForward:
    def test_single_vertex_is_plain_mlp(self):
        g = build_graph(np.array([[1.0, -2.0, 0.5]]), [])
        paths = all_pairs_paths(g, 2)
        cfg = enc_cfg()
        rng = np.random.default_rng(1)
        params = init_params(cfg, None, rng)
        out = encoder_forward(params, g, np.zeros((1, 1)), paths, cfg)
        ref = mlp_forward(params, g.features, cfg)
        assert np.array_equal(out.values, ref.data)

    def test_closed_gate_equals_mlp_and_permutes(self):
        g, paths, ties, _, rng = small_setup(seed=2)
        cfg = enc_cfg(lam=1.0)  # every product < 1 on generic features
        params = init_params(cfg, None, rng)
        out = encoder_forward(params, g, ties * 0.9, paths, cfg)
        ref = mlp_forward(params, g.features, cfg)
        assert np.array_equal(out.values, ref.data)
        perm = np.array([3, 1, 4, 0, 2])
        out_p = mlp_forward(params, g.features[perm], cfg)
        assert np.array_equal(out_p.data, ref.data[perm])

    def test_identical_inputs_identical_rows(self):
        feats = np.tile([0.7, -0.3, 1.1], (3, 1))
        g = build_graph(feats, [(0, 1, 1.0), (1, 2, 1.0), (0, 2, 1.0)],
                        labels=[0, 0, 0], n_classes=2)
        paths = all_pairs_paths(g, 2)
        ties = tie_matrix_exact(g, paths)
        cfg = enc_cfg()
        params = init_params(cfg, None, np.random.default_rng(3))
        y = encoder_forward(params, g, ties, paths, cfg).values
        assert np.abs(y[0] - y[1]).max() <= 1e-12
        assert np.abs(y[0] - y[2]).max() <= 1e-12

    def test_embedding_range_open_interval(self):
        g, paths, ties, cfg, rng = small_setup(seed=4)
        params = init_params(cfg, None, rng)
        y = encoder_forward(params, g, ties, paths, cfg).values
        assert (np.abs(y) < 1.0).all()

    def test_output_invariant_to_weight_rescaling(self):
        g, paths, ties, cfg, rng = small_setup(seed=9)
        params = init_params(cfg, None, rng)
        y1 = encoder_forward(params, g, ties, paths, cfg).values
        scaled = build_graph(
            g.features,
            [(i, j, 2.5 * w) for i in range(g.n_vertices)
             for j, w in g.adjacency[i] if i < j],
        )
        paths2 = all_pairs_paths(scaled, cfg.hops)
        ties2 = tie_matrix_exact(scaled, paths2)
        y2 = encoder_forward(params, scaled, ties2, paths2, cfg).values
        assert np.abs(y1 - y2).max() <= 1e-12

    def test_feature_dim_checked(self):
        g, paths, ties, _, rng = small_setup(seed=5)
        cfg = enc_cfg(d=7)
        params = init_params(cfg, None, rng)
        with pytest.raises(ValueError, match="dim"):
            encoder_forward(params, g, ties, paths, cfg)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            EncoderConfig(3, (4,), 1, 0.1, 2)  # q < 2
        with pytest.raises(ValueError):
            EncoderConfig(3, (4,), 3, 0.1, 2)  # q not < d
        with pytest.raises(ValueError):
            EncoderConfig(3, (4,), 2, 1.5, 2)  # threshold outside [0, 1]


class TestDiscriminatorForward:
    def test_zero_params_uniform(self):
        cfg = DiscriminatorConfig(3, (4,), 3)
        params = init_params(enc_cfg(), cfg, np.random.default_rng(0))
        for name, t in params.items():
            if name.startswith("disc."):
                t.data[...] = 0.0
        out = discriminator_forward(params, np.array([1.0, 2.0, 3.0]), cfg)
        assert np.allclose(out.data, 1 / 3, atol=1e-15)

    def test_rows_sum_to_one(self):
        cfg = DiscriminatorConfig(4, (5,), 4)
        params = init_params(enc_cfg(d=5, q=2), cfg, np.random.default_rng(1))
        rows = np.random.default_rng(2).uniform(0, 5, (10, 4))
        out = discriminator_forward(params, rows, cfg)
        assert np.abs(out.data.sum(axis=1) - 1.0).max() < 1e-12

    def test_pure_function(self):
        cfg = DiscriminatorConfig(3, (), 3)
        params = init_params(enc_cfg(), cfg, np.random.default_rng(3))
        row = np.array([0.5, 1.5, 0.25])
        a = discriminator_forward(params, row, cfg).data
        b = discriminator_forward(params, row, cfg).data
        assert np.array_equal(a, b)

    def test_io_dims_must_match(self):
        with pytest.raises(ValueError):
            DiscriminatorConfig(3, (4,), 2)


class TestSilhouetteLoss:
    def test_two_one_fixture(self):
        # y1 = y2 = (1,0) class 0; y3 = (0,1) class 1
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        labels = np.array([0, 0, 1])
        res = silhouette_loss(emb, labels, [0, 1, 2])
        assert res.in_force[0] == 1.0
        assert res.out_force[0] == 0.5
        assert res.sil[0] == 0.5
        # vertex 3: In = 0 (singleton), Out = min over {class 0} = 1 + 1 = 2
        assert res.sil[2] == -1.0
        per_vertex = 0.5 * (1.0 - res.sil)
        assert abs(per_vertex[0] - 0.25) <= 1e-12
        assert abs(res.loss.item() - per_vertex.sum()) <= 1e-12

    def test_identical_embeddings_one_per_class(self):
        emb = np.array([[0.3, 0.4], [0.3, 0.4]])
        labels = np.array([0, 1])
        res = silhouette_loss(emb, labels, [0, 1])
        assert np.array_equal(res.sil, [-1.0, -1.0])
        assert res.loss.item() == pytest.approx(2.0, abs=1e-12)

    def test_degenerate_vertex_gets_half_loss(self):
        # vertex 0 orthogonal-and-antipodal so both forces vanish
        emb = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, -1.0, 0.0]])
        labels = np.array([0, 0, 1])
        res = silhouette_loss(emb, labels, [0, 1, 2])
        # In(0) = sim to v1 = 0.5; Out(0) = sim to v2 = 0.5 -> active
        # make vertex 0's in-neighbor antipodal instead:
        emb = np.array([[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
        res = silhouette_loss(emb, np.array([0, 0, 1]), [0, 1, 2])
        assert res.in_force[0] == 0.0  # antipodal same-class vertex
        assert res.out_force[0] == 0.5
        # now the fully degenerate case: singleton class, zero sims everywhere
        emb = np.array([[1.0, 0.0], [-1.0, 0.0]])
        res = silhouette_loss(emb, np.array([0, 1]), [0, 1])
        assert not res.active.any()
        assert np.array_equal(res.sil, [0.0, 0.0])
        assert res.loss.item() == pytest.approx(1.0, abs=1e-12)

    def test_sil_bounded(self):
        rng = np.random.default_rng(6)
        for _ in range(20):
            n = int(rng.integers(4, 10))
            emb = rng.standard_normal((n, 3))
            labels = rng.integers(0, 3, n)
            if np.unique(labels).size < 2:
                continue
            res = silhouette_loss(emb, labels, np.arange(n))
            assert (res.sil[res.active] >= -1.0 - 1e-12).all()
            assert (res.sil[res.active] <= 1.0 + 1e-12).all()

    def test_mean_normalization_divides_by_counts(self):
        emb = np.array([[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0], [0.0, 1.0]])
        labels = np.array([0, 0, 1, 1, 1])
        s = silhouette_loss(emb, labels, np.arange(5), "sum")
        m = silhouette_loss(emb, labels, np.arange(5), "mean")
        assert s.in_force[0] == pytest.approx(1.0)
        assert m.in_force[0] == pytest.approx(1.0)  # one peer, count 1
        assert s.out_force[0] == pytest.approx(1.5)  # 3 x 0.5
        assert m.out_force[0] == pytest.approx(0.5)

    def test_needs_two_classes(self):
        with pytest.raises(ValueError, match="2 classes"):
            silhouette_loss(np.ones((2, 2)), np.array([0, 0]), [0, 1])

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        emb = rng.standard_normal((6, 3))
        labels = np.array([0, 1, 0, 1, 2, 2])
        t = Tensor(emb.copy(), requires_grad=True)
        res = silhouette_loss(t, labels, np.arange(6))
        res.loss.backward()
        analytic = t.grad.copy()
        step = 1e-6
        flat = emb.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + step
            fp = silhouette_loss(emb, labels, np.arange(6)).loss.item()
            flat[k] = orig - step
            fm = silhouette_loss(emb, labels, np.arange(6)).loss.item()
            flat[k] = orig
            num = (fp - fm) / (2 * step)
            a = analytic.reshape(-1)[k]
            assert abs(a - num) / max(abs(a), abs(num), 1e-8) < 1e-4


class TestDiscriminatorLoss:
    def test_perfect_prediction(self):
        probs = np.eye(3)[[0, 1, 2, 0]]
        assert discriminator_loss(probs, [0, 1, 2, 0]).item() == 0.0

    def test_uniform_quarter(self):
        probs = np.full((10, 4), 0.25)
        loss = discriminator_loss(probs, np.zeros(10, dtype=int))
        assert loss.item() == pytest.approx(7.5, abs=1e-12)

    def test_bounds(self):
        rng = np.random.default_rng(8)
        for _ in range(20):
            n, k = int(rng.integers(1, 8)), int(rng.integers(2, 5))
            raw = rng.uniform(0, 1, (n, k))
            probs = raw / raw.sum(axis=1, keepdims=True)
            labels = rng.integers(0, k, n)
            loss = discriminator_loss(probs, labels).item()
            assert 0.0 <= loss <= n

    def test_row_count_checked(self):
        with pytest.raises(ValueError):
            discriminator_loss(np.full((2, 3), 1 / 3), [0, 1, 2])


class TestTotalLoss:
    def test_gamma_zero_is_encoder_loss(self):
        assert total_loss(1.25, 99.0, 0.0) == 1.25

    def test_arithmetic(self):
        assert total_loss(1.0, 2.0, 0.5) == 2.0

    def test_monotone_in_components(self):
        assert total_loss(1.0, 2.0, 0.5) <= total_loss(1.5, 2.0, 0.5)
        assert total_loss(1.0, 2.0, 0.5) <= total_loss(1.0, 2.5, 0.5)

    def test_negative_gamma_rejected(self):
        with pytest.raises(ValueError):
            total_loss(1.0, 1.0, -0.1)

    def test_tensor_path_matches_float_path(self):
        t = total_loss(Tensor(np.float64(1.5)), Tensor(np.float64(2.0)), 0.25)
        assert t.item() == total_loss(1.5, 2.0, 0.25)


class TestFullObjectiveGradient:
    def test_six_vertex_two_class_fixture(self):
        rng = np.random.default_rng(42)
        n, d = 6, 3
        edges = [(0, 1, 1.3), (1, 2, 0.8), (2, 3, 1.1), (3, 4, 0.7), (4, 5, 1.9),
                 (5, 0, 1.2), (1, 4, 0.6)]
        feats = rng.standard_normal((n, d))
        labels = [0, 1, 0, 1, 0, 1]
        g = build_graph(feats, edges, labels=labels, n_classes=2)
        paths = all_pairs_paths(g, 2)
        ties = tie_matrix_exact(g, paths)
        cfg = EncoderConfig(input_dim=d, hidden_dims=(4,), output_dim=2,
                            gate_threshold=0.2, hops=2)
        dcfg = DiscriminatorConfig(2, (3,), 2)
        params = init_params(cfg, dcfg, rng)
        membership = membership_matrix(g.labels, 2)
        labeled = np.arange(n)

        base = full_objective(params, g, ties, paths, cfg, dcfg, membership,
                              labeled, gamma=0.7)
        frozen = (base.encoder_gates, base.latent_gate)

        def loss_fn(p):
            return full_objective(p, g, ties, paths, cfg, dcfg, membership,
                                  labeled, gamma=0.7, frozen=frozen).total

        worst = grad_check(loss_fn, params, step=1e-5)
        assert worst <= 1e-4
