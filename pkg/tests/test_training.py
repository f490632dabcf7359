import logging
import math
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from ScoreNet.checkpoint import load_checkpoint
from ScoreNet.model import ModelConfigError, ScoreModelConfig, build_model
from Training.losses import NonFiniteLossError, dsm_loss, l1_loss, loss_and_gradients, method_loss
from Training.trainer import TRAIN_LOG_NAME, TRAINER_STATE_NAME, TrainConfig, TrainingSplit, evaluate_loss, train

TINY = dict(resolution_levels=[8, 4], channels_per_level=[4, 8], fourier_dim=8)


def tiny_model(method, **overrides):
    return build_model(ScoreModelConfig.for_method(method, **{**TINY, **overrides}), dtype=torch.float64)


def randomise_head(model, seed=0, std=0.1, bias=None):
    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        for param in model.conv_out.parameters():
            param.copy_(torch.randn(param.shape, generator=generator, dtype=param.dtype) * std)
        if bias is not None:
            model.conv_out.bias.fill_(bias)


def lattice_conditions(n, generator):
    return torch.randint(0, 3, (n, 1, 8, 8), generator=generator).to(torch.float64) / 2


def tiny_split(n, *, seed=0, split="train", conditioned=True):
    generator = torch.Generator().manual_seed(seed)
    images = torch.rand(n, 1, 8, 8, dtype=torch.float64, generator=generator)
    conditions = (images > 0.5).to(torch.float64) * 0.5 if conditioned else None
    return TrainingSplit(images=images, conditions=conditions, split=split)


def quiet_config(**overrides):
    return TrainConfig(**{**dict(batch_size=2, learning_rate=1e-3, max_epochs=2, checkpoint_every=1, show_progress=False), **overrides})


def test_zero_predictor_scores_noise_energy():
    model = tiny_model("csm")
    generator = torch.Generator().manual_seed(0)
    images = torch.rand(4, 1, 8, 8, dtype=torch.float64, generator=generator)
    noise = torch.randn(images.shape, dtype=torch.float64, generator=generator)
    t = torch.tensor([0.05, 0.3, 0.7, 1.0], dtype=torch.float64)

    result = dsm_loss(model, images, None, model.schedule, None, t=t, noise=noise)
    energy = noise.pow(2).flatten(1).sum(dim=1)
    assert torch.allclose(result.per_sample, energy, rtol=1e-10)
    assert float(result.loss) == pytest.approx(float(energy.mean()), rel=1e-10)

    unweighted = dsm_loss(model, images, None, model.schedule, None, t=t, noise=noise, weighting="none")
    assert torch.allclose(unweighted.per_sample, energy / result.sigma**2, rtol=1e-10)


def test_zero_predictor_baseline_matches_pixel_count():
    model = tiny_model("csm")
    images = torch.full((256, 1, 8, 8), 0.5, dtype=torch.float64)
    result = dsm_loss(model, images, None, model.schedule, torch.Generator().manual_seed(1))
    assert float(result.loss) == pytest.approx(64.0, rel=0.05)
    assert float(result.t.min()) >= 1e-5


def test_dsm_loss_is_deterministic_in_seed():
    model = tiny_model("csm")
    images = torch.rand(3, 1, 8, 8, dtype=torch.float64)
    a = dsm_loss(model, images, None, model.schedule, torch.Generator().manual_seed(5))
    b = dsm_loss(model, images, None, model.schedule, torch.Generator().manual_seed(5))
    assert torch.equal(a.per_sample, b.per_sample)
    assert torch.equal(a.t, b.t)


def test_dsm_loss_rejects_bad_inputs():
    model = tiny_model("csm")
    images = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    generator = torch.Generator().manual_seed(0)
    with pytest.raises(ValueError):
        dsm_loss(model, images, None, model.schedule, generator, weighting="sigma")
    with pytest.raises(ValueError):
        dsm_loss(model, images + 1.5, None, model.schedule, generator)
    with pytest.raises(ModelConfigError):
        dsm_loss(model, images, images, model.schedule, generator)
    with pytest.raises(ModelConfigError):
        dsm_loss(tiny_model("ctm"), images, None, model.schedule, generator)


def test_non_finite_loss_reports_context():
    model = tiny_model("csm")
    with torch.no_grad():
        model.conv_out.bias.fill_(math.nan)
    images = torch.rand(2, 1, 8, 8, dtype=torch.float64)
    with pytest.raises(NonFiniteLossError, match="sigma_t="):
        dsm_loss(model, images, None, model.schedule, torch.Generator().manual_seed(0))


def test_unconditional_objective_ignores_conditions():
    model = tiny_model("csm")
    split = tiny_split(3)
    with_conditions = method_loss(model, split.images, split.conditions, model.schedule, torch.Generator().manual_seed(2))
    without = method_loss(model, split.images, None, model.schedule, torch.Generator().manual_seed(2))
    assert torch.equal(with_conditions.per_sample, without.per_sample)


def test_l1_loss_cases():
    model = tiny_model("unet")
    images = torch.full((2, 1, 8, 8), 0.25, dtype=torch.float64)
    conditions = torch.full_like(images, 0.5)
    # zero-initialised head predicts 0 everywhere
    assert float(l1_loss(model, conditions, images).loss) == pytest.approx(0.25)
    assert float(l1_loss(model, conditions, torch.zeros_like(images)).loss) == 0.0
    with pytest.raises(ModelConfigError):
        l1_loss(tiny_model("csm"), conditions, images)
    with pytest.raises(ModelConfigError):
        method_loss(model, images, None, model.schedule, torch.Generator())


@pytest.mark.parametrize("batch_seed", [0, 1, 2])
def test_l1_gradient_matches_finite_differences(batch_seed):
    model = tiny_model("unet")
    randomise_head(model, std=0.05, bias=0.5)
    generator = torch.Generator().manual_seed(20 + batch_seed)
    conditions = lattice_conditions(2, generator)
    images = torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=generator)

    _, grad = loss_and_gradients(model, l1_loss(model, conditions, images))
    base = model.flat_parameters()
    picks = torch.randperm(base.numel(), generator=generator)[:20].tolist()
    h = 1e-6
    for index in picks:
        plus, minus = base.clone(), base.clone()
        plus[index] += h
        minus[index] -= h
        model.load_flat_parameters(plus)
        f_plus = float(l1_loss(model, conditions, images).loss)
        model.load_flat_parameters(minus)
        f_minus = float(l1_loss(model, conditions, images).loss)
        numeric = (f_plus - f_minus) / (2 * h)
        analytic = float(grad[index])
        assert abs(numeric - analytic) <= 1e-4 * max(abs(analytic), abs(numeric)) + 1e-6
    model.load_flat_parameters(base)


def test_l1_gradient_follows_the_error_sign_inside_the_clamp():
    model = tiny_model("unet")
    randomise_head(model, seed=5, std=2.0, bias=0.5)
    generator = torch.Generator().manual_seed(9)
    conditions = lattice_conditions(2, generator)
    images = torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=generator)
    bias_offset = dict((name, offset) for name, _, offset in model.parameter_layout())["conv_out.bias"]

    with torch.no_grad():
        prediction = model.unet_forward(conditions)
    active = (prediction > 0.0) & (prediction < 1.0)
    assert bool(active.any()) and not bool(active.all())

    _, grad = loss_and_gradients(model, l1_loss(model, conditions, images))
    expected = ((prediction - images).sign() * active).sum() / prediction.numel()
    assert float(grad[bias_offset]) == pytest.approx(float(expected), abs=1e-12)

    _, below = loss_and_gradients(model, l1_loss(model, conditions, torch.zeros_like(images)))
    _, above = loss_and_gradients(model, l1_loss(model, conditions, torch.ones_like(images)))
    assert float(below[bias_offset]) > 0.0
    assert float(above[bias_offset]) < 0.0


def test_loss_and_gradients_follow_parameter_layout():
    model = tiny_model("ctm")
    split = tiny_split(2)
    result = dsm_loss(model, split.images, split.conditions, model.schedule, torch.Generator().manual_seed(0))
    value, grad = loss_and_gradients(model, result)
    assert value == pytest.approx(float(result.loss))
    assert grad.numel() == model.num_parameters()
    head = dict((name, offset) for name, _, offset in model.parameter_layout())["conv_out.bias"]
    assert float(grad[head].abs()) > 0.0


def test_train_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0).validate()
    with pytest.raises(ValueError):
        TrainConfig(t_eps=0.0).validate()
    with pytest.raises(ValueError):
        TrainConfig(loss_weighting="sigma").validate()
    with pytest.raises(ValueError):
        TrainConfig(learning_rate=0.0).validate()


def test_training_split_checks():
    with pytest.raises(ValueError):
        TrainingSplit(images=torch.zeros(0, 1, 8, 8))
    with pytest.raises(ValueError):
        TrainingSplit(images=torch.zeros(2, 1, 8, 8), conditions=torch.zeros(2, 1, 4, 4))


def test_train_writes_log_and_checkpoints(tmp_path):
    model = tiny_model("ctm")
    val_split = tiny_split(2, seed=1, split="val")
    report = train(model, tiny_split(4), quiet_config(), val_split=val_split, out_dir=tmp_path)

    assert len(report.train_losses) == len(report.val_losses) == 2
    assert report.steps == 4
    assert report.best_epoch in (0, 1)
    assert report.best_val_loss == min(report.val_losses)
    lines = (tmp_path / TRAIN_LOG_NAME).read_text(encoding="utf-8").splitlines()
    assert lines[0] == "epoch\ttrain_loss\tval_loss\tseconds"
    assert [line.split("\t")[0] for line in lines[1:]] == ["0", "1"]
    for name in ("best.sdf", "last.sdf", "epoch_0000.sdf", "epoch_0001.sdf"):
        assert (tmp_path / name).exists()

    best = load_checkpoint(tmp_path / "best.sdf")
    assert best.meta["epoch"] == report.best_epoch
    assert best.meta["val_loss"] == pytest.approx(report.best_val_loss)

    logged = {int(line.split("\t")[0]): float(line.split("\t")[2]) for line in lines[1:]}
    reloaded = evaluate_loss(best.model, val_split, best.model.schedule, quiet_config())
    assert reloaded == pytest.approx(logged[report.best_epoch], rel=1e-6)


def test_training_is_deterministic_in_seed():
    first, second = tiny_model("csm"), tiny_model("csm")
    train(first, tiny_split(4), quiet_config(seed=3))
    train(second, tiny_split(4), quiet_config(seed=3))
    assert torch.equal(first.flat_parameters(), second.flat_parameters())


def test_training_changes_the_weights_of_the_unet():
    model = tiny_model("unet")
    before = model.flat_parameters()
    report = train(model, tiny_split(4), quiet_config(max_epochs=1))
    assert report.steps == 2
    assert not torch.equal(before, model.flat_parameters())


def test_training_refuses_the_test_split():
    with pytest.raises(ValueError, match="test split"):
        train(tiny_model("csm"), tiny_split(2, split="test"), quiet_config())
    with pytest.raises(ValueError, match="test split"):
        train(tiny_model("csm"), tiny_split(2), quiet_config(), val_split=tiny_split(2, split="test"))


def test_max_steps_stops_early():
    report = train(tiny_model("csm"), tiny_split(6), quiet_config(max_epochs=5, max_steps=4))
    assert report.steps == 4
    assert len(report.train_losses) == 2


def test_resume_appends_to_the_log(tmp_path):
    model = tiny_model("csm")
    train(model, tiny_split(4), quiet_config(max_epochs=1), out_dir=tmp_path)
    resumed = load_checkpoint(tmp_path / "last.sdf").model
    report = train(
        resumed,
        tiny_split(4),
        quiet_config(max_epochs=2),
        out_dir=tmp_path,
        start_epoch=1,
        best_val_loss=0.0,
    )
    assert len(report.train_losses) == 1
    assert report.best_epoch == -1
    lines = (tmp_path / TRAIN_LOG_NAME).read_text(encoding="utf-8").splitlines()
    assert [line.split("\t")[0] for line in lines[1:]] == ["0", "1"]
    assert load_checkpoint(tmp_path / "best.sdf").meta["epoch"] == 0
    with pytest.raises(ValueError):
        train(resumed, tiny_split(4), quiet_config(max_epochs=2), start_epoch=2)


def interrupted_run(out_dir, *, drop_state=False):
    first = train(tiny_model("csm"), tiny_split(4), quiet_config(max_epochs=1), out_dir=out_dir)
    if drop_state:
        (out_dir / TRAINER_STATE_NAME).unlink()
    resumed = load_checkpoint(out_dir / "last.sdf").model
    train(
        resumed,
        tiny_split(4),
        quiet_config(max_epochs=3),
        out_dir=out_dir,
        start_epoch=1,
        best_val_loss=first.best_val_loss,
    )
    return resumed


def train_losses(out_dir):
    lines = (out_dir / TRAIN_LOG_NAME).read_text(encoding="utf-8").splitlines()[1:]
    return [line.split("\t")[1] for line in lines]


def test_resume_from_last_continues_the_uninterrupted_run(tmp_path):
    straight = tiny_model("csm")
    train(straight, tiny_split(4), quiet_config(max_epochs=3), out_dir=tmp_path / "straight")
    assert (tmp_path / "straight" / TRAINER_STATE_NAME).exists()

    resumed = interrupted_run(tmp_path / "resumed")
    assert torch.equal(resumed.flat_parameters(), straight.flat_parameters())
    assert train_losses(tmp_path / "resumed") == train_losses(tmp_path / "straight")


def test_resume_without_trainer_state_starts_fresh_adam(tmp_path, caplog):
    straight = tiny_model("csm")
    train(straight, tiny_split(4), quiet_config(max_epochs=3))
    with caplog.at_level(logging.WARNING, logger="Training.trainer"):
        resumed = interrupted_run(tmp_path, drop_state=True)
    assert "fresh Adam moments" in caplog.text
    assert not torch.equal(resumed.flat_parameters(), straight.flat_parameters())


def test_validation_loss_is_reproducible():
    model = tiny_model("ctm")
    split = tiny_split(3, split="val")
    config = quiet_config()
    assert evaluate_loss(model, split, model.schedule, config) == evaluate_loss(model, split, model.schedule, config)


TOY_MEAN, TOY_STD = 0.5, 0.1


def toy_split(n, seed, split):
    generator = torch.Generator().manual_seed(seed)
    values = TOY_MEAN + TOY_STD * torch.randn(n, 1, 1, 1, dtype=torch.float64, generator=generator)
    return TrainingSplit(images=values.clamp(0.0, 1.0), split=split)


@pytest.mark.slow
def test_scalar_toy_learns_the_marginal_score():
    config = ScoreModelConfig.for_method(
        "csm",
        resolution_levels=[1, 1],
        channels_per_level=[32, 32],
        fourier_dim=16,
        normalization="none",
    )
    model = build_model(config, dtype=torch.float64)
    train_split, val_split = toy_split(4096, 0, "train"), toy_split(1024, 1, "val")
    train_config = TrainConfig(
        batch_size=256,
        learning_rate=1e-3,
        max_epochs=1000,
        max_steps=2000,
        checkpoint_every=1000,
        show_progress=False,
    )

    baseline = evaluate_loss(model, val_split, model.schedule, train_config)
    assert baseline == pytest.approx(1.0, rel=0.1)
    report = train(model, train_split, train_config, val_split=val_split)
    assert report.val_losses[-1] <= 0.5 * baseline

    for t in (0.1, 0.5, 0.9):
        sigma = float(model.schedule.sigma(t))
        spread = math.sqrt(TOY_STD**2 + sigma**2)
        x = torch.linspace(TOY_MEAN - 2 * spread, TOY_MEAN + 2 * spread, 201, dtype=torch.float64)
        x = x.view(-1, 1, 1, 1)
        exact = (TOY_MEAN - x) / spread**2
        with torch.no_grad():
            learned = model.score_forward(x, None, t)
        rms_error = float((learned - exact).pow(2).mean().sqrt())
        rms_exact = float(exact.pow(2).mean().sqrt())
        assert rms_error <= 0.1 * rms_exact
