import csv

import numpy as np
import pytest
import torch

from cxrsynth.toy import make_domain
from cxrsynth.translation import (
    DiscriminatorSpec,
    GanHyperparams,
    GeneratorSpec,
    build_discriminator,
    build_generator,
    export_loss_history,
    init_model,
    load_checkpoint,
    round_trip_error,
    save_checkpoint,
    train_translation,
    translate,
)
from cxrsynth.translation.models import parameter_count

SMALL_G = GeneratorSpec(base_width=8, residual_blocks=2)
SMALL_D = DiscriminatorSpec(base_width=8, layers=3)


def small_hp(**kw):
    base = dict(
        image_size=32, batch_size=2, total_steps=4, generator=SMALL_G, discriminator=SMALL_D, seed=5
    )
    base.update(kw)
    return GanHyperparams(**base)


def test_default_generator_shape_and_range():
    g = build_generator(GeneratorSpec(), seed=0)
    x = torch.rand(2, 1, 256, 256) * 2 - 1
    with torch.no_grad():
        y = g(x)
    assert y.shape == (2, 1, 256, 256)
    assert y.min() > -1 and y.max() < 1


def test_default_discriminator_patch_grid():
    spec = DiscriminatorSpec()
    assert spec.receptive_field == 70
    d = build_discriminator(spec, seed=0)
    with torch.no_grad():
        s = d(torch.zeros(1, 1, 256, 256))
    assert s.shape == (1, 1, 30, 30)
    assert s.min() >= 0 and s.max() <= 1


def test_build_deterministic_per_seed():
    a, b = build_generator(SMALL_G, 3), build_generator(SMALL_G, 3)
    c = build_generator(SMALL_G, 4)
    sa, sb, sc = a.state_dict(), b.state_dict(), c.state_dict()
    assert all(torch.equal(sa[k], sb[k]) for k in sa)
    assert not all(torch.equal(sa[k], sc[k]) for k in sa)


def test_spec_validation():
    with pytest.raises(ValueError):
        GeneratorSpec(residual_blocks=0)
    with pytest.raises(ValueError):
        GanHyperparams(adversarial_mode="wasserstein")
    with pytest.raises(ValueError):
        GanHyperparams(total_steps=-1)


def test_zero_steps_returns_initial_model():
    a = make_domain("blob", 4, 32, seed=0)
    b = make_domain("ring", 4, 32, seed=1)
    hp = small_hp(total_steps=0)
    m = train_translation(a, b, hp)
    assert m.step_count == 0 and m.loss_history == []
    assert m.digest() == init_model(hp).digest()


def test_empty_domain_errors():
    b = make_domain("ring", 4, 32, seed=1)
    with pytest.raises(ValueError):
        train_translation(np.zeros((0, 32, 32, 1), np.float32), b, small_hp())


def test_training_history_and_determinism(tmp_path):
    a = make_domain("blob", 6, 32, seed=0)
    b = make_domain("ring", 6, 32, seed=1)
    hp = small_hp(total_steps=5)
    m1 = train_translation(a, b, hp)
    m2 = train_translation(a, b, hp)
    assert m1.step_count == 5 and len(m1.loss_history) == 5
    assert m1.digest() == m2.digest()
    assert m1.loss_history == m2.loss_history
    for bundle in m1.loss_history:
        assert bundle.total == bundle.recomputed_total(hp.lambda_cycle)

    m3 = train_translation(a, b, hp, checkpoint_every=2, checkpoint_dir=tmp_path / "ck")
    assert sorted(p.name for p in (tmp_path / "ck").iterdir()) == ["step_000002.pt", "step_000004.pt"]
    assert load_checkpoint(tmp_path / "ck" / "step_000004.pt").step_count == 4
    assert m3.digest() == m1.digest()


def test_translate_contract():
    m = init_model(small_hp())
    x = make_domain("blob", 3, 32, seed=2)
    y = translate(m, x, "AtoB")
    assert y.shape == x.shape and y.min() >= 0 and y.max() <= 1
    np.testing.assert_array_equal(y, translate(m, x, "AtoB"))
    # batch order preserved
    np.testing.assert_array_equal(translate(m, x[::-1], "AtoB"), y[::-1])
    np.testing.assert_allclose(translate(m, x[1:2], "AtoB"), y[1:2], atol=1e-6)
    with pytest.raises(ValueError):
        translate(m, np.zeros((1, 32, 32, 3), np.float32))


def test_translate_full_resolution_default_model():
    m = init_model(GanHyperparams(generator=GeneratorSpec(base_width=8, residual_blocks=1)))
    out = translate(m, np.random.default_rng(0).uniform(0, 1, (1, 256, 256, 1)).astype(np.float32))
    assert out.shape == (1, 256, 256, 1) and 0 <= out.min() and out.max() <= 1


def test_checkpoint_round_trip(tmp_path):
    a = make_domain("blob", 4, 32, seed=0)
    b = make_domain("ring", 4, 32, seed=1)
    m = train_translation(a, b, small_hp(total_steps=2))
    path = save_checkpoint(m, tmp_path / "gan.pt")
    back = load_checkpoint(path)
    assert back.digest() == m.digest()
    assert back.step_count == 2 and back.loss_history == m.loss_history
    assert back.hyperparams == m.hyperparams
    np.testing.assert_array_equal(translate(back, a), translate(m, a))


def test_loss_history_csv(tmp_path):
    a = make_domain("blob", 4, 32, seed=0)
    b = make_domain("ring", 4, 32, seed=1)
    m = train_translation(a, b, small_hp(total_steps=3))
    p = export_loss_history(m.loss_history, tmp_path / "loss.csv")
    rows = list(csv.DictReader(p.open()))
    assert [r["step"] for r in rows] == ["1", "2", "3"]
    assert float(rows[0]["total"]) == m.loss_history[0].total


@pytest.mark.slow
def test_trained_round_trip_beats_untrained():
    a = make_domain("blob", 40, 32, seed=0)
    b = make_domain("ring", 40, 32, seed=1)
    hp = small_hp(total_steps=120, batch_size=4)
    trained = train_translation(a, b, hp)
    fresh = init_model(hp)
    assert round_trip_error(trained, a) < round_trip_error(fresh, a)


def test_parameter_count_positive():
    assert parameter_count(build_generator(SMALL_G, 0)) > 0
