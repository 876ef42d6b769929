import math

import numpy as np
import pytest
from groupkan import checkpoint, config, model, training
from groupkan.checkpoint import CheckpointMetadata
from groupkan.config import AugmentFlags, LossConfig, SyntheticSpec, TrainPlan
from groupkan.data import Sample, generate_synthetic, split
from groupkan.errors import ContractError, DataError, DimensionError
from groupkan.tensor import Parameter, Tensor

from .common import max_relative_error, numeric_gradient, random_tensor, tape_gradient

BCE_ONLY = LossConfig(bce_weight=1.0, dice_weight=0.0)


def test_loss_vanishes_for_confident_correct_logits():
    target = np.zeros((2, 1, 4, 4))
    target[:, :, :2] = 1.0
    logits = Tensor(np.where(target > 0, 20.0, -20.0))
    assert training.bce_dice_loss(logits, target).item() < 1e-6


def test_bce_of_zero_logits_is_ln2():
    target = np.zeros((1, 1, 4, 4))
    target[..., :2] = 1.0
    loss = training.bce_dice_loss(Tensor(np.zeros((1, 1, 4, 4))), target, BCE_ONLY)
    assert loss.item() == pytest.approx(math.log(2), abs=1e-9)


def test_loss_shape_mismatch():
    with pytest.raises(DimensionError, match="differ"):
        training.bce_dice_loss(Tensor(np.zeros((1, 1, 4, 4))), np.zeros((1, 1, 4, 2)))


@pytest.mark.parametrize("cfg", [LossConfig(), BCE_ONLY, LossConfig(bce_weight=0.0)])
def test_loss_gradient(cfg):
    rng = np.random.default_rng(0)
    logits = random_tensor(rng, 2, 1, 3, 3)
    target = (rng.random((2, 1, 3, 3)) > 0.5).astype(float)

    def fn():
        return training.bce_dice_loss(logits, target, cfg)

    (grad,) = tape_gradient(fn, logits)
    assert max_relative_error(grad, numeric_gradient(fn, logits)) < 1e-6


def test_cosine_endpoints_are_exact():
    plan = TrainPlan(epochs=400)
    assert training.cosine_lr(0, plan) == 1e-4
    assert training.cosine_lr(399, plan) == 1e-5


def test_cosine_midpoint():
    plan = TrainPlan(epochs=3)
    assert training.cosine_lr(1, plan) == pytest.approx(5.5e-5, abs=1e-12)


def test_cosine_is_non_increasing():
    plan = TrainPlan(epochs=50)
    rates = [training.cosine_lr(epoch, plan) for epoch in range(plan.epochs)]
    assert all(a >= b for a, b in zip(rates, rates[1:]))


def test_cosine_single_epoch_and_range():
    assert training.cosine_lr(0, TrainPlan(epochs=1)) == 1e-4
    with pytest.raises(ContractError):
        training.cosine_lr(5, TrainPlan(epochs=5))
    with pytest.raises(ContractError):
        training.cosine_lr(-1, TrainPlan(epochs=5))


def test_adam_zero_gradient_leaves_parameter():
    param = Parameter([1.5, -2.0])
    training.adam_step([param], [np.zeros(2)], training.AdamState(), lr=0.1)
    np.testing.assert_array_equal(param.data, [1.5, -2.0])


def test_adam_first_step_moves_by_lr():
    param = Parameter([1.0])
    training.adam_step([param], [np.array([2.0])], training.AdamState(), lr=0.1)
    assert param.data[0] == pytest.approx(0.9, abs=1e-7)


def scalar_adam_trace(x, lr, steps, beta1=0.9, beta2=0.999, eps=1e-8):
    m = v = 0.0
    trace = []
    for t in range(1, steps + 1):
        g = 2 * x
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        x = x - lr * m_hat / (math.sqrt(v_hat) + eps)
        trace.append(x)
    return trace


def test_adam_matches_scalar_oracle():
    param = Parameter([1.0])
    state = training.AdamState()
    trace = []
    for _ in range(5):
        training.adam_step([param], [2 * param.data], state, lr=0.1)
        trace.append(param.data[0])
    np.testing.assert_allclose(trace, scalar_adam_trace(1.0, 0.1, 5), atol=1e-12, rtol=0)
    assert state.step == 5


def test_adam_requires_gradients():
    params = [Parameter([1.0]), Parameter([2.0])]
    with pytest.raises(ContractError, match=r"\[1\]"):
        training.adam_step(params, [np.ones(1), None], training.AdamState(), lr=0.1)
    with pytest.raises(ContractError):
        training.adam_step(params, [np.ones(1)], training.AdamState(), lr=0.1)


def marked_sample(rng):
    mask = (rng.random((8, 8)) > 0.7).astype(float)
    image = np.stack([mask, rng.random((8, 8)), 1.0 - mask])
    return Sample(image=image, mask=mask, id="marked")


def test_augment_without_flags_is_identity():
    sample = marked_sample(np.random.default_rng(0))
    flags = AugmentFlags(rotation=False, hflip=False, vflip=False)
    out = training.augment(sample, flags, np.random.default_rng(1))
    np.testing.assert_array_equal(out.image, sample.image)
    np.testing.assert_array_equal(out.mask, sample.mask)


def test_augment_rotation_uses_first_draw():
    sample = marked_sample(np.random.default_rng(2))
    flags = AugmentFlags(hflip=False, vflip=False)
    turns = int(np.random.default_rng(3).integers(4))
    out = training.augment(sample, flags, np.random.default_rng(3))
    np.testing.assert_array_equal(out.mask, np.rot90(sample.mask, turns))


@pytest.mark.parametrize("seed", range(8))
def test_augment_keeps_image_and_mask_aligned(seed):
    sample = marked_sample(np.random.default_rng(seed))
    out = training.augment(sample, AugmentFlags(), np.random.default_rng(seed + 100))
    np.testing.assert_array_equal(out.image[0], out.mask)
    assert out.mask.sum() == sample.mask.sum()


def synthetic(count, resolution=32, seed=0):
    return generate_synthetic(
        SyntheticSpec(count=count, resolution=resolution, seed=seed, contrast=0.8, noise=0.05)
    )


def test_evaluate_restores_training_mode():
    net = model.build(config.preset_config("tiny"))
    scores = training.evaluate(net, synthetic(3))
    assert set(scores) == {"iou", "f1"}
    assert 0.0 <= scores["iou"] <= scores["f1"] <= 1.0
    assert net.training


def test_train_rejects_empty_dataset():
    net = model.build(config.preset_config("tiny"))
    with pytest.raises(DataError):
        training.train(net, [], TrainPlan(epochs=1))


def test_training_is_deterministic(tmp_path):
    samples = synthetic(6)
    plan = TrainPlan(epochs=2, batch_size=2, lr_start=1e-3, lr_end=1e-4, seed=4)
    results = []
    for run in range(2):
        net = model.build(config.preset_config("tiny", seed=4))
        results.append(training.train(net, samples, plan, log_path=str(tmp_path / f"{run}.csv")))

    first, second = results
    assert first.history == second.history
    for name in first.state:
        assert first.state[name].tobytes() == second.state[name].tobytes()
    assert (tmp_path / "0.csv").read_text() == (tmp_path / "1.csv").read_text()


def test_seed_change_gives_different_checkpoint(tmp_path):
    samples = synthetic(6)
    states = []
    for seed in (3, 4):
        net = model.build(config.preset_config("tiny", seed=seed))
        plan = TrainPlan(epochs=1, batch_size=2, lr_start=1e-3, lr_end=1e-4, seed=seed)
        training.train(net, samples, plan)
        path = str(tmp_path / f"seed{seed}.gkn")
        checkpoint.save_checkpoint(path, net, CheckpointMetadata(seed=seed))
        states.append(checkpoint.load_checkpoint(path).state)

    first, second = states
    assert first.keys() == second.keys()
    assert any(first[name].tobytes() != second[name].tobytes() for name in first)
    assert first["head.weight"].tobytes() != second["head.weight"].tobytes()


def test_train_log_columns(tmp_path):
    net = model.build(config.preset_config("tiny"))
    result = training.train(net, synthetic(4), TrainPlan(epochs=1, batch_size=2))
    path = tmp_path / "log.csv"
    training.write_train_log(str(path), result.history)
    lines = path.read_text().splitlines()
    assert lines[0] == ",".join(training.TRAIN_LOG_COLUMNS)
    assert len(lines) == 2
    assert result.best_epoch == 0


@pytest.mark.slow
def test_loss_halves_on_small_synthetic_set():
    samples = synthetic(10, resolution=64)
    plan = TrainPlan(
        epochs=30,
        batch_size=1,
        lr_start=3e-3,
        lr_end=3e-4,
        augment=AugmentFlags(rotation=False, hflip=False, vflip=False),
    )
    net = model.build(config.preset_config("tiny"))
    result = training.train(net, samples, plan)
    assert result.history[-1].train_loss <= 0.5 * result.history[0].train_loss


@pytest.mark.slow
def test_tiny_preset_segments_default_synthetic_set():
    samples = generate_synthetic(SyntheticSpec(count=200, resolution=64))
    plan = TrainPlan(epochs=50, batch_size=8)
    net = model.build(config.preset_config("tiny"))
    result = training.train(net, samples, plan)
    assert result.best_val_iou >= 0.85
    assert training.evaluate(net, split(samples, plan.split_fraction, plan.seed)[1])["iou"] == (
        pytest.approx(result.best_val_iou, abs=1e-12)
    )
