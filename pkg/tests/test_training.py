import numpy as np
import pytest

from cp3.errors import EmptyInputError, NonFiniteError, ValidationError
from cp3.generation import init_generator
from cp3.params import as_dict
from cp3.scr import ScrConfig, init_scr
from cp3.synthdata import default_specs, generate_dataset
from cp3.training import (
    AdamState,
    PretrainVariant,
    TrainConfig,
    adam_step,
    evaluate,
    finetune_generation,
    lr_at,
    mirror,
    predict,
    pretext_pair,
    pretrain_generation,
    resolution_targets,
    train_refinement,
)


@pytest.fixture(scope="module")
def data():
    return generate_dataset(default_specs(0, per_category=6, n_points=64))


def small_gen(seed=0):
    return init_generator(seed, num_coarse=16, encoder_dims=(16, 32), decoder_hidden=(32,))


def small_scr(ds, **kw):
    cfg = dict(num_categories=ds.num_categories, gen_width=32, global_width=32, channels=4,
               multipliers=(1, 2), k_list=(4,), sgm_units=(True, True))
    return init_scr(ScrConfig(**{**cfg, **kw}), 0)


def test_lr_schedule():
    cfg = TrainConfig(learning_rate=1.0, decay_factor=0.5, decay_every=2)
    assert [lr_at(cfg, e) for e in range(5)] == [1.0, 1.0, 0.5, 0.5, 0.25]
    with pytest.raises(ValidationError):
        lr_at(cfg, -1)


@pytest.mark.parametrize("bad", [dict(learning_rate=0), dict(decay_factor=1.5), dict(batch_size=0),
                                 dict(epochs=-1), dict(loss="emd"), dict(stage="warmup")])
def test_config_validation(bad):
    with pytest.raises(ValidationError):
        TrainConfig(**bad)


def test_adam_first_step_and_zero_grad():
    params = {"w": np.array([1.0, -2.0, 3.0])}
    new, state = adam_step(AdamState(), params, {"w": np.array([0.5, -4.0, 1e3])}, 0.1)
    np.testing.assert_allclose(new["w"], params["w"] - 0.1 * np.array([1, -1, 1]), rtol=1e-6)
    same, _ = adam_step(AdamState(), params, {"w": np.zeros(3)}, 0.1)
    np.testing.assert_array_equal(same["w"], params["w"])
    assert state.step == 1


def test_adam_descends_quadratic():
    p, state = {"x": np.array([3.0])}, AdamState()
    for _ in range(500):
        p, state = adam_step(state, p, {"x": 2 * p["x"]}, 0.05)
    assert abs(p["x"][0]) < 1e-2


def test_adam_names_nonfinite_parameter():
    with pytest.raises(NonFiniteError, match="'b'"):
        adam_step(AdamState(), {"a": np.ones(1), "b": np.ones(1)}, {"a": np.ones(1), "b": np.array([np.nan])}, 0.1)


def test_zero_epochs_returns_init(data):
    gen = small_gen()
    res = finetune_generation(TrainConfig(epochs=0), data.split("train"), gen)
    assert res.losses == []
    for k, v in as_dict(gen).items():
        assert as_dict(res.params)[k] is v or np.array_equal(as_dict(res.params)[k], v)
    with pytest.raises(EmptyInputError):
        finetune_generation(TrainConfig(epochs=1), [], gen)


def test_pretraining_loss_decreases():
    ds = generate_dataset(default_specs(1, per_category=50, n_points=64))
    res = pretrain_generation(TrainConfig(learning_rate=1e-3, epochs=30, stage="pretrain"), "IOI->I", ds.samples, small_gen())
    assert res.losses[-1] < 0.7 * res.losses[0]


def test_training_is_deterministic(data):
    cfg = TrainConfig(learning_rate=1e-3, epochs=2)
    a = finetune_generation(cfg, data.split("train"), small_gen())
    b = finetune_generation(cfg, data.split("train"), small_gen())
    assert a.losses == b.losses
    for k, v in as_dict(a.params).items():
        assert v.tobytes() == as_dict(b.params)[k].tobytes()


def test_pretext_pairs(data):
    s = data.samples[0]
    n = len(s.partial.points)
    for variant in PretrainVariant:
        x, y = pretext_pair(variant, s, 3, 0, 0.9)
        assert x.shape[1] == 3 and y.shape[1] == 3
        if variant.needs_complete:
            assert y is s.complete.points
    x0, y0 = pretext_pair(PretrainVariant.HYBRID_PARALLEL, s, 3, 0, 0.9)
    x1, y1 = pretext_pair(PretrainVariant.HYBRID_PARALLEL, s, 3, 1, 0.9)
    assert y0 is s.partial.points and np.array_equal(x1, y1) and np.array_equal(x0, x1)
    assert len(x0) <= n
    m = mirror(s.partial.points, 2)
    np.testing.assert_allclose(m[:, 2].mean(), s.partial.points[:, 2].mean(), atol=1e-12)
    np.testing.assert_allclose(mirror(m, 2), s.partial.points, atol=1e-12)


def test_refinement_leaves_generator_frozen(data):
    gen = small_gen()
    before = {k: v.copy() for k, v in as_dict(gen).items()}
    res = train_refinement(TrainConfig(learning_rate=1e-3, epochs=1, stage="refine"), data.split("train"), gen, small_scr(data))
    assert len(res.losses) == 1
    for k, v in as_dict(gen).items():
        assert v.tobytes() == before[k].tobytes()


def test_resolution_targets(data):
    samples = data.split("train")[:3]
    t = resolution_targets(samples, [16, 64], 0)
    assert t[0].shape == (3, 16, 3) and t[1].shape == (3, 64, 3)
    with pytest.raises(ValidationError):
        resolution_targets(samples, [65], 0)


def test_evaluate_with_exact_predictions(data):
    val = data.split("val")
    preds = np.stack([s.complete.points for s in val])
    rep = evaluate(None, None, val, predictions=preds, category_names=data.category_names)
    assert rep.overall["cd_l2"] == 0 and rep.overall["cd_l1"] == 0 and rep.overall["fscore"] == 1.0
    assert set(rep.per_category) == set(data.category_names)


def test_random_labels_with_one_category(data):
    ds1 = generate_dataset(default_specs(0, per_category=4, n_points=64, kinds=("box",)), category_names=("box",))
    gen = small_gen()
    net = small_scr(ds1)
    val = ds1.split("val")
    a = predict(gen, net, val, "correct")
    b = predict(gen, net, val, "random", seed=4)
    assert a.tobytes() == b.tobytes()
    with pytest.raises(ValidationError):
        evaluate(gen, net, val, label_mode="swapped")
