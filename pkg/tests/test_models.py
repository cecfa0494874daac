"""Model specs, training behavior, DAE pairing, and reduced classifiers."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from defswap import autodiff as ad
from defswap import data, models


def _quick_recipe(epochs=3, batch=100, kind="adam", lr=0.001):
    return models.OptimizerRecipe(kind, lr, batch, epochs)


def _trained_stub(spec, seed=0):
    """TrainedModel without running the optimizer (for encoder plumbing)."""
    graph = spec.build_graph()
    return models.TrainedModel(spec, graph, ad.init_params(graph, seed),
                               {"spec_hash": spec.spec_hash()})


class TestModelSpec:
    def test_zero_epochs_rejected(self):
        with pytest.raises(ValueError, match="epochs"):
            models.OptimizerRecipe(epochs=0)

    def test_bad_batch_and_lr(self):
        with pytest.raises(ValueError):
            models.OptimizerRecipe(batch_size=0)
        with pytest.raises(ValueError):
            models.OptimizerRecipe(learning_rate=0.0)
        with pytest.raises(ValueError):
            models.OptimizerRecipe(kind="adagrad")

    def test_shape_checked_at_construction(self):
        with pytest.raises(ad.ShapeError):
            models.ModelSpec((("maxpool2", {}),), (10,), "mse")

    def test_bad_loss(self):
        with pytest.raises(ValueError, match="loss"):
            models.ModelSpec((("dense", {"units": 2}),), (4,), "hinge")

    def test_spec_hash_stable_across_json_roundtrip(self):
        spec = models.fc_classifier_spec()
        again = models.ModelSpec.from_json(spec.to_json())
        assert spec.spec_hash() == again.spec_hash()

    def test_canonical_architectures(self):
        assert models.fc_classifier_spec().build_graph().output_shape == (10,)
        dae = models.dae_spec().build_graph()
        assert dae.output_shape == (784,)
        assert [n.kind for n in dae.nodes] == ["dense"] * 6 + ["sigmoid"]
        assert dae.nodes[2].out_shape == (81,)
        cae = models.compression_ae_spec().build_graph()
        assert [n.kind for n in cae.nodes] == ["dense", "relu", "dense", "sigmoid"]
        assert cae.nodes[0].out_shape == (81,)


class TestTrain:
    def test_desk_classifier_reaches_90_percent(self, victim):
        assert victim.provenance["final_test_accuracy"] >= 0.90

    def test_loss_curve_nonincreasing_within_jitter(self, victim):
        curve = victim.provenance["loss_curve"]
        assert all(b <= a * 1.05 for a, b in zip(curve, curve[1:]))

    def test_provenance_fields(self, victim):
        p = victim.provenance
        assert p["spec_hash"] == victim.spec.spec_hash()
        assert p["seed"] == 0
        assert p["train_seconds"] > 0
        assert 0.0 <= p["final_train_accuracy"] <= 1.0

    def test_reproducible_bit_for_bit(self, digits):
        train, _ = digits
        sub = data.subsample(train, 300, seed=1)
        spec = models.fc_classifier_spec(hidden=(32,), optimizer=_quick_recipe())
        a = models.train(spec, (sub.x, sub.y), seed=11)
        b = models.train(spec, (sub.x, sub.y), seed=11)
        for key in a.store.keys():
            assert a.store[key].tobytes() == b.store[key].tobytes()

    def test_different_seed_differs(self, digits):
        train, _ = digits
        sub = data.subsample(train, 200, seed=1)
        spec = models.fc_classifier_spec(hidden=(16,), optimizer=_quick_recipe(2))
        a = models.train(spec, (sub.x, sub.y), seed=1)
        b = models.train(spec, (sub.x, sub.y), seed=2)
        assert a.store["0.w"].tobytes() != b.store["0.w"].tobytes()

    def test_divergence_reports_epoch(self):
        x = np.array([[1.0]])
        y = np.array([[2.0]])
        spec = models.ModelSpec((("dense", {"units": 1}),), (1,), "mse",
                                models.OptimizerRecipe("sgd", 1e4, 1, 300))
        with np.errstate(over="ignore"), pytest.raises(models.TrainingDiverged,
                                                       match="epoch"):
            models.train(spec, (x, y), seed=0)

    def test_dataset_shape_mismatch(self):
        spec = models.fc_classifier_spec(input_dim=10, hidden=(4,),
                                         optimizer=_quick_recipe(1))
        with pytest.raises(ad.ShapeError):
            models.train(spec, (np.zeros((5, 7)), np.zeros(5, dtype=int)), seed=0)

    def test_dae_beats_untrained(self, digits):
        train, test = digits
        sub = data.subsample(train, 500, seed=3)
        spec = models.dae_spec(optimizer=_quick_recipe(epochs=8, batch=100))
        trained = models.train(spec, (sub.x, sub.x), seed=4)
        untrained = _trained_stub(spec, seed=4)
        xe = test.x[:100]
        mse_trained = float(np.mean((trained.outputs(xe) - xe) ** 2))
        mse_untrained = float(np.mean((untrained.outputs(xe) - xe) ** 2))
        assert mse_trained < mse_untrained

    def test_dae_output_in_unit_interval(self, digits):
        _, test = digits
        spec = models.dae_spec(optimizer=_quick_recipe(1))
        stub = _trained_stub(spec)
        out = stub.outputs(test.x[:20])
        assert out.min() >= 0.0 and out.max() <= 1.0

    def test_adam_step_matches_reference(self):
        recipe = models.OptimizerRecipe("adam", 0.01, 1, 1)
        opt = models._Optimizer(recipe)
        store = ad.ParameterStore()
        store.add("p", np.array([1.0, -2.0]))
        g = np.array([0.3, -0.1])
        opt.step(store, {"p": g})
        want, _, _ = models.adam_update_reference(
            np.array([1.0, -2.0]), g, np.zeros(2), np.zeros(2), 1, lr=0.01)
        assert_allclose(store["p"], want, rtol=1e-12)

    def test_rmsprop_and_sgd_momentum_step(self):
        for kind in ("rmsprop", "sgd"):
            recipe = models.OptimizerRecipe(kind, 0.1, 1, 1, momentum=0.9)
            opt = models._Optimizer(recipe)
            store = ad.ParameterStore()
            store.add("p", np.ones(3))
            opt.step(store, {"p": np.full(3, 0.5)})
            assert not np.array_equal(store["p"], np.ones(3))


class TestDaeTrainingSet:
    def test_mix_zero_all_clean(self):
        x = np.random.default_rng(0).random((50, 8))
        inputs, targets = models.make_dae_training_set(x, [], 0.0)
        assert np.array_equal(inputs, x)
        assert np.array_equal(targets, x)

    def test_mix_one_all_perturbed_targets_clean(self):
        x = np.random.default_rng(1).random((40, 8))
        bump = lambda batch: batch + 0.5
        inputs, targets = models.make_dae_training_set(x, [bump], 1.0)
        assert np.all(np.abs(inputs - x) > 0.4)
        assert np.array_equal(targets, x)

    def test_thirds_mix_balanced(self):
        x = np.zeros((999, 4))
        gens = [lambda b: b + 1.0, lambda b: b + 2.0, lambda b: b + 3.0]
        inputs, _ = models.make_dae_training_set(x, gens, 1.0, seed=5)
        perturbed = np.abs(inputs[:, 0])
        assert np.mean(perturbed > 0) == 1.0
        for level in (1.0, 2.0, 3.0):
            frac = np.mean(perturbed == level)
            assert abs(frac - 1 / 3) < 0.02

    def test_partial_mix_fraction(self):
        x = np.zeros((2000, 3))
        inputs, _ = models.make_dae_training_set(x, [lambda b: b + 1.0], 0.4, seed=6)
        frac = np.mean(np.abs(inputs[:, 0]) > 0)
        assert abs(frac - 0.4) < 0.05

    def test_empty_generators_rejected(self):
        with pytest.raises(ValueError, match="generator"):
            models.make_dae_training_set(np.zeros((4, 2)), [], 0.5)

    def test_bad_ratio_rejected(self):
        with pytest.raises(ValueError, match="mix_ratio"):
            models.make_dae_training_set(np.zeros((4, 2)), [lambda b: b], 1.5)


class TestEncoders:
    def test_dae_encoder_bottleneck(self):
        stub = _trained_stub(models.dae_spec())
        enc, _ = models.bottleneck_encoder(stub)
        assert enc.output_shape == (81,)
        assert len(enc.nodes) == 3

    def test_compression_ae_encoder_includes_relu(self):
        stub = _trained_stub(models.compression_ae_spec())
        enc, _ = models.bottleneck_encoder(stub)
        assert enc.output_shape == (81,)
        assert [n.kind for n in enc.nodes] == ["dense", "relu"]

    def test_encode_batches(self, digits):
        _, test = digits
        stub = _trained_stub(models.compression_ae_spec())
        z = models.encode(models.bottleneck_encoder(stub), test.x[:300], batch=64)
        assert z.shape == (300, 81)


@pytest.fixture(scope="module")
def compressor81(digits):
    train, _ = digits
    sub = data.subsample(train, 800, seed=8)
    spec = models.compression_ae_spec(optimizer=_quick_recipe(epochs=5, batch=200))
    model = models.train(spec, (sub.x, sub.x), seed=8)
    return models.bottleneck_encoder(model)


@pytest.fixture(scope="module")
def compressor196(digits):
    train, _ = digits
    sub = data.subsample(train, 800, seed=9)
    spec = models.compression_ae_spec(bottleneck=196,
                                      optimizer=_quick_recipe(epochs=5, batch=200))
    model = models.train(spec, (sub.x, sub.x), seed=9)
    return models.bottleneck_encoder(model)


class TestReducedClassifiers:
    def test_recipe_rejects_bottleneck_mismatch(self, victim, compressor81):
        with pytest.raises(ad.ShapeError, match="81"):
            models.ReducedClassifierRecipe("retrain", victim, compressor81, (100,))

    def test_retrain_method(self, victim, compressor81, digits):
        train, test = digits
        sub = data.subsample(train, 2000, seed=10)
        recipe = models.ReducedClassifierRecipe("retrain", victim, compressor81, (81,))
        reduced = models.derive_reduced_classifier(recipe, (sub.x, sub.y), seed=10)
        assert reduced.graph.input_shape == (81,)
        z = models.encode(compressor81, test.x)
        acc = np.mean(reduced.predict(z) == test.y)
        assert acc > 0.5

    def test_retrain_faster_than_full_input(self, victim, compressor81, digits):
        train, _ = digits
        sub = data.subsample(train, 2000, seed=11)
        recipe_opt = _quick_recipe(epochs=5, batch=200)
        full_spec = models.fc_classifier_spec(optimizer=recipe_opt)
        full = models.train(full_spec, (sub.x, sub.y), seed=11)
        recipe = models.ReducedClassifierRecipe("retrain", victim, compressor81, (81,))
        red_spec = models.reduced_classifier_spec(full_spec, 81)
        z = models.encode(compressor81, sub.x)
        reduced = models.train(red_spec, (z, sub.y), seed=11)
        assert reduced.provenance["train_seconds"] < full.provenance["train_seconds"]

    def test_upsample_requires_matching_sizes(self, victim, compressor81):
        recipe = models.ReducedClassifierRecipe("upsample", victim, compressor81, (81,))
        with pytest.raises(ad.ShapeError, match="784"):
            models.derive_reduced_classifier(recipe, (np.zeros((4, 784)),
                                                      np.zeros(4, dtype=int)), seed=0)

    def test_upsample_freezes_all_but_first_layer(self, victim, compressor196, digits):
        train, _ = digits
        sub = data.subsample(train, 1000, seed=12)
        recipe = models.ReducedClassifierRecipe("upsample", victim, compressor196, (196,))
        derived = models.derive_reduced_classifier(recipe, (sub.x, sub.y), seed=12)
        assert derived.graph.input_shape == (196,)
        head = 3  # reshape, upsample2, flatten
        src_nodes = victim.graph.nodes
        for i, node in enumerate(src_nodes):
            for name, src_key in node.params.items():
                dst_key = derived.graph.nodes[head + i].params[name]
                same = (derived.store[dst_key].tobytes()
                        == victim.store[src_key].tobytes())
                if i == 0:
                    assert not same, "first layer should have trained"
                else:
                    assert same, f"{dst_key} should be frozen"

    def test_upsample_adapter_variant_freezes_everything_original(
            self, victim, compressor196, digits):
        train, _ = digits
        sub = data.subsample(train, 600, seed=13)
        recipe = models.ReducedClassifierRecipe(
            "upsample", victim, compressor196, (196,), upsample_variant="adapter")
        derived = models.derive_reduced_classifier(recipe, (sub.x, sub.y), seed=13)
        assert derived.graph.nodes[0].kind == "dense"
        head = 4  # adapter, reshape, upsample2, flatten
        for i, node in enumerate(victim.graph.nodes):
            for name, src_key in node.params.items():
                dst_key = derived.graph.nodes[head + i].params[name]
                assert derived.store[dst_key].tobytes() == victim.store[src_key].tobytes()

    def test_unknown_method_rejected(self, victim, compressor81):
        with pytest.raises(ValueError, match="method"):
            models.ReducedClassifierRecipe("distill", victim, compressor81, (81,))
