import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from l3rs.controller import (
    EMBED_DIM,
    LAMBDA_INIT,
    ControllerContext,
    EmaTracker,
    PsiLayout,
    Variant,
    build_features,
    compose_update,
    controller_forward,
    flatten,
    hyper_params_of,
    init_meta_params,
    load_psi,
    save_psi,
    time_features,
    unflatten,
)
from l3rs.nnlite import NetworkSpec, ParamSet, init_params
from l3rs.optdir import OptimizerKind

SGD_ADAM = (OptimizerKind.SGD, OptimizerKind.ADAM)


def zero_mlp(layout):
    psi = unflatten(np.zeros(layout.flat_size), layout)
    return psi.mlps[0]


class TestEmaTracker:
    def test_gamma_zero_tracks_latest(self):
        tr = EmaTracker(1, gammas=(0.0,))
        for xi in [2.0, -1.0, 5.5]:
            tr.update(xi, np.array([[xi, xi]]))
            comp, loss = tr.read()
            assert comp[0, 0, 0] == xi
            assert loss[0] == xi

    def test_two_step_hand_recursion(self):
        # gamma 0.9: a1 = 0.1*1 = 0.1, a2 = 0.9*0.1 + 0.1*3 = 0.39
        tr = EmaTracker(1, gammas=(0.9,))
        tr.update(1.0, np.array([[1.0, 1.0]]))
        tr.update(3.0, np.array([[3.0, 3.0]]))
        assert tr._loss[0] == pytest.approx(0.39, abs=1e-15)
        _, loss = tr.read()
        assert loss[0] == pytest.approx(0.39 / 0.19, abs=1e-12)
        assert loss[0] == pytest.approx(2.052632, abs=1e-6)

    def test_constant_stream_closed_form(self):
        tr = EmaTracker(1, gammas=(0.9,))
        xi = 4.0
        for k in range(1, 20):
            tr.update(xi, np.array([[xi, xi]]))
            # raw accumulator follows the geometric series xi * (1 - gamma^k)
            assert tr._loss[0] == pytest.approx(xi * (1 - 0.9 ** k), rel=1e-13)
            _, loss = tr.read()
            assert abs(loss[0] - xi) < 1e-12

    def test_first_read_equals_first_sample(self):
        for gamma in (0.0, 0.5, 0.99):
            tr = EmaTracker(2, gammas=(gamma,))
            stats = np.array([[1.5, -2.0], [0.25, 3.0]])
            tr.update(7.0, stats)
            comp, loss = tr.read()
            np.testing.assert_allclose(comp[:, :, 0], stats, rtol=0, atol=1e-15)
            assert loss[0] == pytest.approx(7.0, abs=1e-15)

    def test_read_before_update_errors(self):
        with pytest.raises(ValueError):
            EmaTracker(1).read()

    def test_empty_gamma_set(self):
        tr = EmaTracker(3, gammas=())
        tr.update(1.0, np.zeros((3, 2)))
        comp, loss = tr.read()
        assert comp.shape == (3, 2, 0)
        assert loss.shape == (0,)


class TestTimeFeatures:
    def test_midpoint_relative_feature_is_zero(self):
        f = time_features(50, 100)
        assert f[5] == 0.0  # alpha = 0.5 exactly

    def test_final_step_alpha_zero(self):
        f = time_features(100, 100)
        assert f[0] == pytest.approx(math.tanh(10.0), abs=1e-12)

    def test_absolute_feature_exact_zero(self):
        f = time_features(1, 1000)
        assert f[11 + 1] == 0.0  # K * 1e-3 == 1.0 exactly

    def test_absolute_feature_small_k(self):
        f = time_features(1, 100)
        assert f[11] == pytest.approx(math.tanh(math.log(0.01)), abs=1e-12)
        assert f[11] == pytest.approx(-0.99980, abs=1e-5)

    def test_all_in_open_interval(self):
        for K in (1, 3, 10, 500, 10000):
            for k in range(1, min(K, 64) + 1):
                f = time_features(k, K)
                assert len(f) == 15
                assert np.all(f > -1.0) and np.all(f < 1.0)

    def test_relative_monotone_in_k(self):
        K = 77
        prev = time_features(1, K)[:11]
        for k in range(2, K + 1):
            cur = time_features(k, K)[:11]
            assert np.all(cur >= prev)
            prev = cur

    def test_absolute_monotone_in_K(self):
        prev = time_features(1, 1)[11:]
        for K in (2, 5, 17, 300, 4096):
            cur = time_features(1, K)[11:]
            assert np.all(cur >= prev)
            prev = cur

    def test_bad_inputs(self):
        with pytest.raises(ValueError):
            time_features(0, 10)
        with pytest.raises(ValueError):
            time_features(11, 10)
        with pytest.raises(ValueError):
            time_features(1, 0)


class TestLayoutAndCodec:
    def test_default_flat_length(self):
        layout = PsiLayout(n_components=4, base_kinds=SGD_ADAM)
        assert layout.feature_dim == 42
        assert layout.mlp_size == 1955
        assert layout.flat_size == 1955 + 64 + 2 == 2021

    def test_roundtrip_bitwise(self):
        layout = PsiLayout(n_components=3, base_kinds=SGD_ADAM)
        vec = np.random.default_rng(0).normal(size=layout.flat_size)
        psi = unflatten(vec.copy(), layout)
        assert np.array_equal(flatten(psi), vec)

    def test_single_slot_perturbation_is_local(self):
        layout = PsiLayout(n_components=2, base_kinds=SGD_ADAM)
        vec = np.random.default_rng(1).normal(size=layout.flat_size)
        for slot in [0, 100, layout.mlp_size + 3, layout.flat_size - 1]:
            bumped = vec.copy()
            bumped[slot] += 1.0
            a, b = unflatten(vec, layout), unflatten(bumped, layout)
            arrays_a = [*a.mlps[0].arrays(), a.embeddings, a.hyper_raw]
            arrays_b = [*b.mlps[0].arrays(), b.embeddings, b.hyper_raw]
            changed = sum(int(not np.array_equal(x, y)) for x, y in zip(arrays_a, arrays_b))
            assert changed == 1
            total_diff = sum(int(np.sum(x != y)) for x, y in zip(arrays_a, arrays_b))
            assert total_diff == 1

    def test_length_mismatch_rejected(self):
        layout = PsiLayout(n_components=2, base_kinds=SGD_ADAM)
        with pytest.raises(ValueError):
            unflatten(np.zeros(layout.flat_size + 1), layout)

    def test_variant_feature_dims(self):
        no_emb = PsiLayout(n_components=4, base_kinds=SGD_ADAM, variant=Variant.NO_EMBEDDING)
        assert no_emb.feature_dim == 26
        empty_gamma = PsiLayout(n_components=4, base_kinds=SGD_ADAM, gammas=())
        assert empty_gamma.feature_dim == 33

    def test_per_layer_mlp_parameter_count(self):
        shared = PsiLayout(n_components=4, base_kinds=SGD_ADAM, variant=Variant.NO_EMBEDDING)
        per_layer = PsiLayout(n_components=4, base_kinds=SGD_ADAM, variant=Variant.PER_LAYER_MLP)
        assert per_layer.flat_size == 4 * shared.mlp_size + shared.n_hyper

    def test_hyper_count_follows_base_set(self):
        all_six = PsiLayout(
            n_components=4,
            base_kinds=tuple(OptimizerKind),
        )
        # sgd and weight_decay carry no betas
        assert all_six.n_hyper == 2 * 4


class TestInitMetaParams:
    def test_fresh_controller_is_uniform_with_tiny_lambda(self):
        layout = PsiLayout(n_components=4, base_kinds=SGD_ADAM)
        psi = init_meta_params(layout, seed=3)
        features = np.random.default_rng(5).normal(size=layout.feature_dim)
        mu, lam = controller_forward(psi.mlps[0], features)
        np.testing.assert_allclose(mu, [0.5, 0.5], rtol=0, atol=1e-15)
        assert lam == pytest.approx(LAMBDA_INIT, rel=1e-14)

    def test_recovered_betas(self):
        layout = PsiLayout(n_components=2, base_kinds=SGD_ADAM)
        psi = init_meta_params(layout, seed=0)
        hp = hyper_params_of(psi)
        assert abs(hp[1].beta1 - 0.9) < 1e-12
        assert abs(hp[1].beta2 - 0.999) < 1e-12

    def test_deterministic(self):
        layout = PsiLayout(n_components=3, base_kinds=SGD_ADAM)
        a = init_meta_params(layout, seed=11)
        b = init_meta_params(layout, seed=11)
        assert np.array_equal(a.flat, b.flat)


class TestControllerForward:
    def test_hand_softmax(self):
        layout = PsiLayout(n_components=1, base_kinds=SGD_ADAM)
        mlp = zero_mlp(layout)
        mlp.b3[:] = [math.log(3.0), 0.0, 0.0]
        mu, lam = controller_forward(mlp, np.zeros(layout.feature_dim))
        np.testing.assert_allclose(mu, [0.75, 0.25], rtol=0, atol=1e-15)
        assert lam == 1.0

    def test_shift_invariance(self):
        layout = PsiLayout(n_components=1, base_kinds=SGD_ADAM)
        mlp = zero_mlp(layout)
        mlp.b3[:] = [0.4, -1.1, 0.0]
        mu1, _ = controller_forward(mlp, np.zeros(layout.feature_dim))
        mlp.b3[:2] += 17.0
        mu2, _ = controller_forward(mlp, np.zeros(layout.feature_dim))
        np.testing.assert_allclose(mu1, mu2, rtol=0, atol=1e-15)

    @given(st.integers(0, 2**31 - 1))
    @settings(max_examples=30, deadline=None)
    def test_mu_sums_to_one_lambda_positive(self, seed):
        layout = PsiLayout(n_components=1, base_kinds=SGD_ADAM)
        rng = np.random.default_rng(seed)
        psi = unflatten(rng.normal(scale=0.7, size=layout.flat_size), layout)
        mu, lam = controller_forward(psi.mlps[0], rng.normal(size=layout.feature_dim))
        assert abs(mu.sum() - 1.0) <= 1e-12
        assert np.all(mu > 0)
        assert lam > 0


class TestComposeUpdate:
    def test_single_direction_norm_is_lambda(self):
        d = np.array([3.0, -4.0])
        out = compose_update(0.37, np.array([1.0]), [d])
        assert np.linalg.norm(out) == pytest.approx(0.37, rel=1e-14)

    def test_antipodal_cancellation(self):
        d = np.array([1.0, 2.0, -1.0])
        out = compose_update(1.0, np.array([0.5, 0.5]), [d, -d])
        assert np.abs(out).max() < 1e-15

    def test_orthonormal_pythagoras(self):
        d1 = np.array([1.0, 0.0])
        d2 = np.array([0.0, 1.0])
        out = compose_update(1.0, np.array([0.5, 0.5]), [d1, d2])
        assert np.linalg.norm(out) == pytest.approx(math.sqrt(0.5), rel=1e-12)
        assert np.linalg.norm(out) == pytest.approx(0.70711, abs=1e-5)

    def test_tiny_direction_contributes_zero(self):
        d1 = np.array([0.0, 1e-13])
        d2 = np.array([2.0, 0.0])
        out = compose_update(1.0, np.array([0.5, 0.5]), [d1, d2])
        np.testing.assert_allclose(out, [0.5, 0.0], rtol=0, atol=1e-15)

    def test_zero_lambda_zero_update(self):
        out = compose_update(0.0, np.array([0.6, 0.4]),
                             [np.array([5.0, 1.0]), np.array([-2.0, 7.0])])
        assert np.all(out == 0.0)

    def test_positive_rescaling_invariance(self):
        rng = np.random.default_rng(2)
        dirs = [rng.normal(size=5) for _ in range(3)]
        mu = np.array([0.2, 0.5, 0.3])
        base = compose_update(1.3, mu, dirs)
        scaled = compose_update(1.3, mu, [dirs[0], 1e6 * dirs[1], dirs[2]])
        assert np.abs(base - scaled).max() <= 1e-12

    def test_renormalized_variant_norm_is_exactly_lambda(self):
        rng = np.random.default_rng(3)
        dirs = [rng.normal(size=4) for _ in range(2)]
        out = compose_update(0.9, np.array([0.5, 0.5]), dirs, renormalize=True)
        assert np.linalg.norm(out) == pytest.approx(0.9, rel=1e-12)


class TestBuildFeatures:
    def test_frame_width_and_embedding_slots(self):
        layout = PsiLayout(n_components=2, base_kinds=SGD_ADAM)
        ema_comp = np.zeros((2, 2, 3))
        ema_loss = np.zeros(3)
        tf = np.zeros(15)
        emb = np.arange(2 * EMBED_DIM, dtype=float).reshape(2, EMBED_DIM)
        dirn = np.zeros((2, 2))
        frames = build_features(ema_comp, ema_loss, tf, emb, dirn)
        assert frames.shape == (2, layout.feature_dim)
        diff = frames[0] != frames[1]
        assert diff.sum() == EMBED_DIM
        assert np.all(np.nonzero(diff)[0] == np.arange(9 + 15, 9 + 15 + EMBED_DIM))


class TestVariants:
    def test_global_identical_across_components(self):
        spec = NetworkSpec(6, (5,), 3)
        params = init_params(spec, seed=1)
        layout = PsiLayout(n_components=len(params), base_kinds=SGD_ADAM,
                           variant=Variant.GLOBAL)
        psi = init_meta_params(layout, seed=2)
        psi.flat[:] += np.random.default_rng(3).normal(scale=0.3, size=layout.flat_size)
        ctx = ControllerContext(psi, params, K=4)
        rng = np.random.default_rng(4)
        for k in range(1, 5):
            grads = ParamSet(list(params.ids),
                             [rng.normal(size=t.shape) for t in params.tensors])
            params, mu, lam = ctx.step(params, grads, loss=1.0, k=k)
            assert np.all(mu == mu[0])
            assert np.all(lam == lam[0])

    def test_embeddings_differentiate_components(self):
        # identical statistics, different embedding rows: mu/lambda may differ;
        # the no-embedding variant must give identical outputs instead
        for variant, expect_equal in [(Variant.FULL, False), (Variant.NO_EMBEDDING, True)]:
            layout = PsiLayout(n_components=2, base_kinds=SGD_ADAM, variant=variant)
            psi = init_meta_params(layout, seed=5)
            psi.flat[:] += np.random.default_rng(6).normal(scale=0.5, size=layout.flat_size)
            ema_comp = np.tile(np.array([[0.3], [0.3]])[:, :, None], (1, 2, 3))
            frames = build_features(ema_comp, np.zeros(3), time_features(1, 10),
                                    psi.embeddings, np.zeros((2, 2)))
            mu0, lam0 = controller_forward(psi.mlps[0], frames[0])
            mu1, lam1 = controller_forward(psi.mlps[0], frames[1])
            same = np.allclose(mu0, mu1) and lam0 == pytest.approx(lam1)
            assert same == expect_equal


class TestPsiCheckpoint:
    def test_roundtrip_value_exact(self, tmp_path):
        layout = PsiLayout(n_components=4, base_kinds=SGD_ADAM)
        psi = init_meta_params(layout, seed=9)
        psi.flat[:] += np.random.default_rng(10).normal(size=layout.flat_size)
        path = tmp_path / "psi.json"
        save_psi(path, psi, extra={"generation": 12})
        loaded, doc = load_psi(path)
        assert np.array_equal(loaded.flat, psi.flat)
        assert loaded.layout == layout
        assert doc["generation"] == 12

    def test_layout_survives(self, tmp_path):
        layout = PsiLayout(n_components=2,
                           base_kinds=(OptimizerKind.LION, OptimizerKind.SGD),
                           gammas=(0.9,), variant=Variant.NO_EMBEDDING)
        psi = init_meta_params(layout, seed=0)
        save_psi(tmp_path / "p.json", psi)
        loaded, _ = load_psi(tmp_path / "p.json")
        assert loaded.layout == layout
