import math
import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).resolve().parents[1]))

from SDE.ve_sde import (
    ScheduleDomainError,
    ShapeMismatchError,
    SigmaSchedule,
    drift_diffusion,
    kernel_score,
    perturb,
    prior_sample,
    sigma_at,
    uniform_time,
)

SCHEDULE = SigmaSchedule(0.01, 128.0)


def test_sigma_endpoints_are_exact():
    assert sigma_at(SCHEDULE, 0.0) == 0.01
    assert sigma_at(SCHEDULE, 1.0) == 128.0
    t = torch.tensor([0.0, 1.0], dtype=torch.float64)
    assert sigma_at(SCHEDULE, t).tolist() == [0.01, 128.0]


def test_sigma_midpoint_and_log_linearity():
    assert sigma_at(SCHEDULE, 0.5) == pytest.approx(math.sqrt(0.01 * 128.0), rel=1e-12)
    ts = torch.linspace(0.0, 1.0, 10, dtype=torch.float64)
    logs = torch.log(sigma_at(SCHEDULE, ts))
    expected = math.log(0.01) + ts * math.log(12800.0)
    assert torch.allclose(logs, expected, rtol=1e-12, atol=1e-12)
    assert bool((logs[1:] > logs[:-1]).all())


def test_invalid_schedule_and_times_are_rejected():
    with pytest.raises(ScheduleDomainError):
        SigmaSchedule(1.0, 0.5)
    with pytest.raises(ScheduleDomainError):
        SigmaSchedule(0.0, 1.0)
    with pytest.raises(ScheduleDomainError):
        sigma_at(SCHEDULE, 1.5)
    with pytest.raises(ScheduleDomainError):
        sigma_at(SCHEDULE, -0.1)


def test_drift_diffusion_values():
    drift, g0 = drift_diffusion(SCHEDULE, 0.0)
    assert drift == 0.0
    assert g0 == pytest.approx(0.01 * math.sqrt(2 * math.log(12800.0)), rel=1e-12)
    assert g0 == pytest.approx(0.043494, rel=2e-4)
    drift, g1 = drift_diffusion(SCHEDULE, 1.0)
    assert drift == 0.0
    assert g1 == pytest.approx(128.0 * math.sqrt(2 * math.log(12800.0)), rel=1e-12)
    assert g1 == pytest.approx(556.72, rel=2e-4)


def test_diffusion_squared_is_variance_rate():
    t, h = 0.3, 1e-6
    rate = (sigma_at(SCHEDULE, t + h) ** 2 - sigma_at(SCHEDULE, t - h) ** 2) / (2 * h)
    _, g = drift_diffusion(SCHEDULE, t)
    assert g * g == pytest.approx(rate, rel=1e-6)


def test_perturb_examples():
    noise = torch.randn(2, 1, 4, 4, generator=torch.Generator().manual_seed(0), dtype=torch.float64)
    zeros = torch.zeros_like(noise)
    assert torch.equal(perturb(zeros, SCHEDULE, 1.0, noise), 128.0 * noise)
    x0 = torch.rand(2, 1, 4, 4, dtype=torch.float64)
    assert torch.equal(perturb(x0, SCHEDULE, 0.7, zeros), x0)
    with pytest.raises(ShapeMismatchError):
        perturb(x0, SCHEDULE, 0.5, torch.zeros(2, 1, 4, 5, dtype=torch.float64))


def test_perturb_accepts_per_sample_times():
    x0 = torch.zeros(3, 1, 2, 2, dtype=torch.float64)
    noise = torch.ones_like(x0)
    t = torch.tensor([0.0, 0.5, 1.0], dtype=torch.float64)
    out = perturb(x0, SCHEDULE, t, noise)
    assert out[0].unique().tolist() == [0.01]
    assert out[2].unique().tolist() == [128.0]


def test_perturb_variance_monte_carlo():
    generator = torch.Generator().manual_seed(1)
    noise = torch.randn(100_000, dtype=torch.float64, generator=generator)
    samples = perturb(torch.zeros_like(noise), SCHEDULE, 0.5, noise)
    assert float(samples.var()) == pytest.approx(1.28, rel=0.02)


def test_kernel_score_identities():
    generator = torch.Generator().manual_seed(2)
    x0 = torch.rand(2, 1, 8, 8, dtype=torch.float64, generator=generator)
    z = torch.randn(2, 1, 8, 8, dtype=torch.float64, generator=generator)
    t = 0.37
    sigma = sigma_at(SCHEDULE, t)

    assert torch.equal(kernel_score(x0, x0, SCHEDULE, t), torch.zeros_like(x0))
    zeros = torch.zeros_like(x0)
    one_sigma = torch.full_like(x0, sigma)
    assert torch.allclose(kernel_score(one_sigma, zeros, SCHEDULE, t), torch.full_like(x0, -1.0 / sigma))
    residual = kernel_score(perturb(x0, SCHEDULE, t, z), x0, SCHEDULE, t) + z / sigma
    assert float(residual.abs().max()) <= 1e-9 * float((z / sigma).abs().max())


def test_kernel_score_rejects_zero_time():
    x = torch.zeros(1, 1, 2, 2)
    with pytest.raises(ScheduleDomainError):
        kernel_score(x, x, SCHEDULE, 0.0)
    with pytest.raises(ShapeMismatchError):
        kernel_score(x, torch.zeros(1, 1, 2, 3), SCHEDULE, 0.5)


def test_prior_sample_statistics_and_determinism():
    a = prior_sample((1000, 1000), SCHEDULE, torch.Generator().manual_seed(3), dtype=torch.float64)
    b = prior_sample((1000, 1000), SCHEDULE, torch.Generator().manual_seed(3), dtype=torch.float64)
    assert torch.equal(a, b)
    assert abs(float(a.mean())) < 3 * 128.0 / 1000
    assert float(a.std()) == pytest.approx(128.0, rel=0.01)


def test_uniform_time_respects_floor():
    t = uniform_time(10_000, torch.Generator().manual_seed(4), t_eps=1e-5, dtype=torch.float64)
    assert float(t.min()) >= 1e-5
    assert float(t.max()) <= 1.0
    with pytest.raises(ScheduleDomainError):
        uniform_time(4, torch.Generator(), t_eps=0.0)
