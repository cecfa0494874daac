import pytest

from defswap import attacks, data, defenses, models


@pytest.fixture(scope="session")
def digits():
    """(train, test) desk-scale digit sets from the bundled fixture."""
    return data.load_digits_surrogate(train_size=5000, seed=0)


@pytest.fixture(scope="session")
def victim(digits):
    """A quickly trained 784-128-10 victim shared by attack/defense tests."""
    train, test = digits
    spec = models.fc_classifier_spec(
        optimizer=models.OptimizerRecipe("adam", 0.001, 200, 10))
    return models.train(spec, (train.x, train.y), seed=0,
                        eval_data=(test.x, test.y))


@pytest.fixture(scope="session")
def stack(digits, victim):
    """Victim, denoiser, compressor, reduced classifiers, and all five
    pipelines at test scale (shortened epochs, fixed seeds)."""
    train, test = digits
    vs = attacks.VictimSystem.from_model(victim)

    def fgs_gen(xb):
        return attacks.fgs(vs, xb, vs.predict(xb), 1.5)

    mixed = models.make_dae_training_set(train.x, [fgs_gen], 0.5, seed=0)
    dae = models.train(
        models.dae_spec(optimizer=models.OptimizerRecipe(
            "adam", 0.001, 200, 40)),
        mixed, seed=1)
    ae = models.train(
        models.compression_ae_spec(optimizer=models.OptimizerRecipe(
            "adam", 0.001, 500, 30)),
        (train.x, train.x), seed=2)
    classifiers = {
        defenses.FULL: victim,
        defenses.AE_REDUCED: models.derive_reduced_classifier(
            models.ReducedClassifierRecipe(
                "retrain", victim, models.bottleneck_encoder(ae), (81,)),
            (train.x, train.y), seed=3),
        defenses.DAE_REDUCED: models.derive_reduced_classifier(
            models.ReducedClassifierRecipe(
                "retrain", victim, models.bottleneck_encoder(dae), (81,)),
            (train.x, train.y), seed=4),
    }
    pipelines = defenses.build_all(dae, ae, classifiers)
    return {"dae": dae, "ae": ae, "classifiers": classifiers,
            "pipelines": pipelines, "train": train, "test": test}
