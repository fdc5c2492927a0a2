import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metanet import autodiff as ad
from metanet.autodiff import Tensor
from metanet.episodes import Episode
from metanet.model import (
    FastWeightSet,
    LayerSpec,
    MetaNet,
    ModelConfig,
    VariantConfig,
    as_constants,
    attend_read,
    attention_weights,
    contrastive_loss,
    layer_augment_forward,
    pair_labels,
)

TINY = dict(input_shape=(5, 5), way=3, base_hidden=(6, 6), embed_hidden=(6, 6), aug_layers=3)


def tiny(**kw) -> ModelConfig:
    return ModelConfig(**{**TINY, **kw})


def random_episode(rng, way=3, shots=1, L=4, shape=(5, 5)):
    sy = np.repeat(np.arange(way), shots)
    qy = rng.integers(0, way, size=L)
    return Episode(rng.uniform(0, 1, size=(len(sy),) + shape), sy, rng.uniform(0, 1, size=(L,) + shape),
                   qy, np.arange(way), np.arange(len(sy)), np.arange(L) + 100)


def setup(cfg=None, seed=0):
    model = MetaNet(cfg or tiny())
    params = model.init_params(np.random.default_rng(seed))
    return model, params


def zero_generators(params):
    out = dict(params)
    for k in out:
        if k.startswith(("Z.", "G.")):
            out[k] = np.zeros_like(out[k])
    return out


class TestParams:
    def test_init_range(self):
        model, params = setup()
        H = model.config.lstm_hidden
        for k, v in params.items():
            if k.endswith("lstm_b"):
                v = np.delete(v, np.s_[H:2 * H])
            assert v.min() >= -0.1 and v.max() < 0.1

    def test_slow_weight_groups(self):
        for variant, groups in [("standard", {"W", "Q", "Z", "G"}), ("minus", {"W", "Q", "Z"}),
                                ("plus", {"W", "Q", "Z", "G"})]:
            model, params = setup(tiny(variant=VariantConfig(variant)))
            assert {k.split(".")[0] for k in params} == groups

    def test_generator_sizes_do_not_depend_on_widths(self):
        a, b = MetaNet(tiny()), MetaNet(tiny(base_hidden=(30, 9), embed_hidden=(11, 7)))
        sa, sb = a.param_shapes(), b.param_shapes()
        assert {k: v for k, v in sa.items() if k[0] in "ZG"} == {k: v for k, v in sb.items() if k[0] in "ZG"}
        assert a.base_layout.size != b.base_layout.size

    def test_default_marks_last_three_layers(self):
        cfg = ModelConfig()
        assert [s.augmented for s in cfg.base_layers()] == [False, True, True, True]
        assert [s.augmented for s in cfg.embed_layers()] == [False, True, True, True]

    def test_higher_order_is_not_available(self):
        with pytest.raises(NotImplementedError):
            tiny(stop_meta_gradient=False)


class TestLayerAugmentation:
    def test_zero_fast_weights_collapse(self):
        rng = np.random.default_rng(0)
        x, W = rng.normal(size=(4, 3)), rng.normal(size=(5, 4))
        for kind in ("fc", "softmax"):
            spec = LayerSpec(kind, 3, 5, True)
            aug = layer_augment_forward(spec, W, np.zeros_like(W), x).data
            plain = layer_augment_forward(spec, W, [], x).data
            np.testing.assert_array_equal(aug, plain)

    def test_post_nonlinearity_sum(self):
        spec = LayerSpec("fc", 1, 2, True)
        W = np.array([[0.0, 2.0], [0.0, -3.0]])      # bias-only slow pre-activation [2, -3]
        Wf = np.array([[0.0, -1.0], [0.0, 5.0]])     # fast pre-activation [-1, 5]
        out = layer_augment_forward(spec, W, Wf, np.zeros((1, 1))).data
        assert out.tolist() == [[2.0, 5.0]]

    def test_softmax_layer_sums_before_normalising(self):
        spec = LayerSpec("softmax", 1, 2, True)
        W = np.array([[0.0, 2.0], [0.0, -3.0]])
        Wf = np.array([[0.0, -1.0], [0.0, 5.0]])
        out = layer_augment_forward(spec, W, Wf, np.zeros((1, 1))).data
        np.testing.assert_allclose(out, ad.softmax(np.array([[1.0, 2.0]])).data)

    @pytest.mark.parametrize("kind,per_example", [("fc", False), ("fc", True), ("softmax", True), ("conv", True)])
    def test_gradient(self, kind, per_example):
        rng = np.random.default_rng(1)
        if kind == "conv":
            spec, x = LayerSpec("conv", 2, 3, True), rng.normal(size=(2, 2, 5, 5))
        else:
            spec, x = LayerSpec(kind, 4, 3, True), rng.normal(size=(2, 4))
        W = rng.normal(size=spec.weight_shape)
        F = rng.normal(size=((2,) if per_example else ()) + spec.weight_shape)
        proj = rng.normal(size=layer_augment_forward(spec, W, F, x).shape)
        err = ad.finite_diff_check(
            lambda p: ad.sum(ad.mul(layer_augment_forward(spec, p["W"], p["F"], x), proj)), {"W": W, "F": F})
        assert err < 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(ad.ShapeError):
            layer_augment_forward(LayerSpec("fc", 3, 5), np.zeros((5, 4)), np.zeros((4, 4)), np.zeros((1, 3)))


class TestTaskFastWeights:
    def test_zero_generator(self):
        model, params = setup()
        params = zero_generators(params)
        P = as_constants(params)
        ep = random_episode(np.random.default_rng(0))
        qstar = model.gen_task_fast_weights(P, model.embed_gradients(model.group(params, "Q"), ep, None))
        assert all(np.all(q.data == 0) for q in qstar.values())
        with_fast = model.embed_inputs(P, qstar, ep.query_x).data
        without = model.embed_inputs(P, None, ep.query_x).data
        np.testing.assert_array_equal(with_fast, without)

    def test_reproducible(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0), way=5)
        model = MetaNet(tiny(way=5))
        params = model.init_params(np.random.default_rng(0))

        def run():
            g = model.embed_gradients(model.group(params, "Q"), ep, np.random.default_rng(0))
            return model.gen_task_fast_weights(as_constants(params), g)
        a, b = run(), run()
        assert all(np.array_equal(a[i].data, b[i].data) for i in a)

    def test_label_change_changes_qstar(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0))
        Q = model.group(params, "Q")
        q1 = model.gen_task_fast_weights(as_constants(params), model.embed_gradients(Q, ep, None))
        ep.support_y = ep.support_y[[1, 0, 2]]
        q2 = model.gen_task_fast_weights(as_constants(params), model.embed_gradients(Q, ep, None))
        assert max(np.abs(q1[i].data - q2[i].data).max() for i in q1) > 0

    def test_shapes_match_augmented_layers(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0))
        g = model.embed_gradients(model.group(params, "Q"), ep, None)
        assert g.shape == (3, model.embed_layout.size)
        qstar = model.gen_task_fast_weights(as_constants(params), g)
        assert {i: q.shape for i, q in qstar.items()} == {
            i: s.weight_shape for i, s in enumerate(model.embed) if s.augmented}

    def test_needs_gradients(self):
        model, params = setup()
        with pytest.raises(ValueError):
            model.gen_task_fast_weights(as_constants(params), np.zeros((0, model.embed_layout.size)))


class TestContrastive:
    def test_identical_positive(self):
        e = Tensor([[0.3, -1.0]])
        assert contrastive_loss(e, e, [1.0]).data.tolist() == [0.0]

    def test_beyond_margin_negative(self):
        assert contrastive_loss(Tensor([[0.0, 0.0]]), Tensor([[1.5, 0.0]]), [0.0]).data.tolist() == [0.0]

    def test_inside_margin_negative(self):
        out = contrastive_loss(Tensor([[0.0, 0.0]]), Tensor([[0.5, 0.0]]), [0.0]).data
        assert out.tolist() == [0.25]

    def test_pair_labels(self):
        assert pair_labels([0, 1, 2], [0, 2, 2]).tolist() == [1.0, 0.0, 1.0]

    def test_multi_shot_episode_uses_pairs(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0), shots=2)
        g = model.embed_gradients(model.group(params, "Q"), ep, np.random.default_rng(0))
        assert g.shape == (6, model.embed_layout.size)
        loss, _ = model.episode_loss(as_constants(params), ep, np.random.default_rng(0))
        assert np.isfinite(loss.item())


class TestExampleFastWeights:
    def test_zero_generator(self):
        model, params = setup()
        params = zero_generators(params)
        grads = np.random.default_rng(0).normal(size=(3, model.base_layout.size))
        assert np.all(model.gen_example_fast_weights(as_constants(params), grads).data == 0)

    def test_output_length(self):
        model = MetaNet(ModelConfig(input_shape=(1, 3), way=5, base_hidden=(5,), embed_hidden=(4,), aug_layers=2))
        # fc 3->5 has 5*4 = 20 coordinates, softmax 5->5 has 5*6 = 30
        assert model.base_layout.size == 50
        params = model.init_params(np.random.default_rng(0))
        ep = random_episode(np.random.default_rng(0), way=5, shape=(1, 3))
        g = model.base_gradients(model.group(params, "W"), ep.support_x, ep.support_y)
        assert model.gen_example_fast_weights(as_constants(params), g).shape == (5, 50)

    def test_identical_examples_identical_rows(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0))
        x = np.stack([ep.support_x[0]] * 2)
        g = model.base_gradients(model.group(params, "W"), x, np.array([1, 1]))
        rows = model.gen_example_fast_weights(as_constants(params), g).data
        np.testing.assert_array_equal(rows[0], rows[1])

    def test_row_i_only_sees_example_i(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0))
        W = model.group(params, "W")
        full = model.base_gradients(W, ep.support_x, ep.support_y)
        for i in range(3):
            alone = model.base_gradients(W, ep.support_x[i:i + 1], ep.support_y[i:i + 1])
            np.testing.assert_allclose(full[i], alone[0], rtol=0, atol=1e-15)


class TestMemory:
    def test_shapes(self):
        model, params = setup(tiny(way=5))
        ep = random_episode(np.random.default_rng(0), way=5)
        mem = model.build_memory(as_constants(params), ep, np.random.default_rng(0))
        assert mem.memory.shape == (5, model.base_layout.size)
        assert mem.index.shape == (5, 6)

    def test_rows_mismatch(self):
        with pytest.raises(ValueError):
            FastWeightSet(None, Tensor(np.zeros((2, 3))), Tensor(np.zeros((3, 4))))

    def test_index_rows_are_fc_outputs(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0))
        P = as_constants(params)
        mem = model.build_memory(P, ep, None)
        np.testing.assert_array_equal(mem.index.data, model.embed_inputs(P, mem.qstar, ep.support_x).data)
        assert not np.allclose(mem.index.data.sum(1), 1.0)

    def test_permuting_support_permutes_rows(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0))
        P = as_constants(params)
        meta = {}
        mem = model.build_memory(P, ep, None, meta)
        perm = np.array([2, 0, 1])
        ep2 = Episode(ep.support_x[perm], ep.support_y[perm], ep.query_x, ep.query_y, ep.class_map,
                      ep.support_idx[perm], ep.query_idx)
        mem2 = model.build_memory(P, ep2, None, {"embed": meta["embed"]})
        np.testing.assert_array_equal(mem2.memory.data, mem.memory.data[perm])
        np.testing.assert_array_equal(mem2.index.data, mem.index.data[perm])


class TestAttention:
    def test_single_slot(self):
        M = np.array([[1.0, 2.0, 3.0]])
        w = attention_weights(np.array([[0.2, 0.4]]), np.array([1.0, -1.0]))
        assert w.tolist() == [[1.0]]
        np.testing.assert_array_equal(attend_read(M, [[0.2, 0.4]], [1.0, -1.0]).data, M[0])

    def test_orthogonal_keys(self):
        R = np.array([[1.0, 0.0], [0.0, 1.0]])
        M = np.array([[1.0, -2.0], [4.0, 8.0]])
        e = math.e
        w = attention_weights(R, np.array([1.0, 0.0]))[0]
        np.testing.assert_allclose(w, [e / (e + 1), 1 / (e + 1)], rtol=0, atol=1e-12)
        np.testing.assert_allclose(attend_read(M, R, [1.0, 0.0]).data, w @ M, atol=1e-12)

    def test_identical_keys(self):
        R = np.array([[0.3, 0.7], [0.3, 0.7]])
        np.testing.assert_allclose(attention_weights(R, np.array([5.0, -1.0]))[0], [0.5, 0.5], atol=1e-15)

    def test_zero_norm(self):
        with pytest.raises(ad.NumericError):
            attend_read(np.ones((1, 2)), np.ones((1, 2)), np.zeros(2))
        with pytest.raises(ad.NumericError):
            attend_read(np.ones((2, 2)), np.array([[1.0, 0.0], [0.0, 0.0]]), np.ones(2))

    def test_empty_memory(self):
        with pytest.raises(ValueError):
            attend_read(np.zeros((0, 2)), np.zeros((0, 3)), np.ones(3))

    @settings(max_examples=200, deadline=None)
    @given(st.integers(1, 64), st.integers(1, 8), st.integers(0, 2**32 - 1))
    def test_weights_form_a_distribution(self, n, d, seed):
        rng = np.random.default_rng(seed)
        w = attention_weights(rng.normal(size=(n, d)) + 1e-3, rng.normal(size=d) + 1e-3)
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) < 1e-6


class TestPredict:
    def test_distribution(self):
        model, params = setup()
        rng = np.random.default_rng(0)
        ep = random_episode(rng)
        P = as_constants(params)
        mem = model.build_memory(P, ep, None)
        probs = model.predict(P, mem, rng.uniform(0, 1, size=(1000, 5, 5)))
        assert np.all((probs >= 0) & (probs <= 1))
        np.testing.assert_allclose(probs.sum(1), 1.0, atol=1e-9)

    def test_untrained_is_near_uniform(self):
        model, params = setup(ModelConfig(way=5))
        rng = np.random.default_rng(0)
        ep = random_episode(rng, way=5, shape=(28, 28))
        P = as_constants(params)
        probs = model.predict(P, model.build_memory(P, ep, None), rng.uniform(0, 1, size=(50, 28, 28)))
        entropy = -(probs * np.log(probs)).sum(1)
        assert np.all(np.abs(entropy - math.log(5)) < 0.1 * math.log(5))

    def test_zero_fast_weights_equal_slow_only(self):
        model, params = setup()
        params = zero_generators(params)
        rng = np.random.default_rng(0)
        ep = random_episode(rng)
        P = as_constants(params)
        x = rng.uniform(0, 1, size=(20, 5, 5))
        fast = model.predict(P, model.build_memory(P, ep, None), x)
        slow = ad.softmax(model.slow_only_logits(P, x)).data
        np.testing.assert_allclose(fast, slow, rtol=0, atol=1e-12)

    def test_way_mismatch(self):
        model, params = setup()
        ep = random_episode(np.random.default_rng(0), way=4)
        with pytest.raises(ad.ShapeError):
            model.episode_loss(as_constants(params), ep, None)


class TestPermutationEquivariance:
    def _check(self, model, params, freeze_task):
        rng = np.random.default_rng(3)
        ep = random_episode(rng, way=3, L=6)
        P = as_constants(params)
        meta = {}
        ref = model.predict(P, model.build_memory(P, ep, None, meta), ep.query_x)
        perm = np.array([1, 2, 0])
        ep2 = Episode(ep.support_x[perm], ep.support_y[perm], ep.query_x, ep.query_y, ep.class_map,
                      ep.support_idx[perm], ep.query_idx)
        meta2 = {"embed": meta["embed"]} if freeze_task else {}
        out = model.predict(P, model.build_memory(P, ep2, None, meta2), ep.query_x)
        np.testing.assert_allclose(out, ref, rtol=0, atol=1e-9)

    def test_minus_variant(self):
        self._check(*setup(tiny(variant=VariantConfig("minus"))), freeze_task=False)

    def test_standard_with_task_weights_held(self):
        self._check(*setup(), freeze_task=True)


@pytest.mark.parametrize("variant,base_input", [("minus", "raw"), ("standard", "raw"), ("plus", "raw"),
                                                ("standard", "repr"), ("plus", "repr")])
def test_episode_gradient_matches_finite_differences(variant, base_input):
    model, params = setup(tiny(variant=VariantConfig(variant, base_input)), seed=2)
    ep = random_episode(np.random.default_rng(4))
    meta = {}
    model.episode_loss(as_constants(params), ep, np.random.default_rng(0), meta)
    err = ad.finite_diff_check(lambda P: model.episode_loss(P, ep, None, meta)[0], params,
                               coords=300, rng=np.random.default_rng(0), h=1e-7, oracle_dtype=np.longdouble)
    assert err < 1e-3


def test_conv_architecture_runs_and_differentiates():
    cfg = ModelConfig(input_shape=(8, 8), way=3, base_hidden=(5,), embed_hidden=(5,), conv_filters=(2,),
                      aug_layers=3)
    model, params = setup(cfg)
    assert [s.kind for s in model.base] == ["conv", "fc", "softmax"]
    ep = random_episode(np.random.default_rng(0), shape=(8, 8))
    meta = {}
    model.episode_loss(as_constants(params), ep, None, meta)
    err = ad.finite_diff_check(lambda P: model.episode_loss(P, ep, None, meta)[0], params,
                               coords=200, rng=np.random.default_rng(1))
    assert err < 1e-3
