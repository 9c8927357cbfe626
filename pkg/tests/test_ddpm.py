import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vascreg.ddpm import (TrainConfig, build_schedule, check_compatible, eight_gaussians,
                          forward_sample, forward_transition, mixture_centers,
                          pointwise_spread, posterior_coefficients, posterior_step, sample_inference,
                          sample_many, sample_uncertainty, stream, train, train_step)
from vascreg import nn
from vascreg.errors import InvalidRange, NonFiniteLoss, ShapeMismatch, StepOutOfRange
from vascreg.model import LossWeights, ModelConfig, TempDiffRegNet, make_batch
from vascreg.synth import DataConfig, assemble_samples, simulate_case

MINI = dict(points=32, frames=4, T=12, width=16, heads=2, blocks=1, ffn_hidden=16, time_dim=8,
            decoder_hidden=(32,), conv_channels=(4, 4), frame_features=8, pose_hidden=8,
            branch_dim=4, position_dim=4, basis_modes=4)


@pytest.fixture(scope="module")
def samples():
    cfg = DataConfig(n_cases=1, frames_per_case=8, oracle_pose=True)
    return assemble_samples(simulate_case(cfg, 0, 0), cfg)


# -- schedule ------------------------------------------------------------------

@given(st.integers(1, 300), st.floats(1e-5, 0.05), st.floats(0.0, 0.5))
@settings(max_examples=40)
def test_alpha_bar_is_running_product(T, b1, extra):
    b2 = min(b1 + extra, 0.9)
    s = build_schedule(T, b1, b2)
    prod = np.array([np.prod([1 - s.betas[k] for k in range(1, t + 1)]) for t in range(T + 1)])
    np.testing.assert_allclose(s.alpha_bar, prod, rtol=0, atol=1e-12)
    assert s.alpha_bar[0] == 1.0 and np.all(np.diff(s.alpha_bar) < 0)


def test_schedule_endpoints_and_validation():
    s = build_schedule(100, 1e-4, 0.02)
    assert s.betas[1] == 1e-4 and s.betas[100] == 0.02
    for args in [(0, 1e-4, 0.02), (10, 0.0, 0.02), (10, 0.1, 0.05), (10, 0.1, 1.0), (2.5, 1e-4, 0.02)]:
        with pytest.raises(InvalidRange):
            build_schedule(*args)
    with pytest.raises(ValueError):
        s.betas[3] = 0.5


def test_step_range_is_enforced():
    s = build_schedule(10)
    with pytest.raises(StepOutOfRange):
        forward_sample(np.zeros(2), 0, s, np.zeros(2))
    with pytest.raises(StepOutOfRange):
        posterior_coefficients(11, s)


# -- forward process -------------------------------------------------------------

def test_forward_sample_moments():
    s = build_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(0)
    x0 = np.full(100_000, 2.0)
    for t in (1, 40, 100):
        xt = forward_sample(x0, t, s, rng.normal(size=x0.shape))
        mean, var = np.sqrt(s.alpha_bar[t]) * 2.0, 1 - s.alpha_bar[t]
        assert abs(xt.mean() - mean) <= 0.02 * abs(mean) + 0.02 * np.sqrt(var)
        assert abs(xt.var() - var) <= 0.02 * var


def test_single_steps_compose_to_marginal():
    s = build_schedule(20, 1e-3, 0.2)
    rng = np.random.default_rng(1)
    x = np.full(100_000, 1.5)
    for t in range(1, 21):
        x = forward_transition(x, t, s, rng.normal(size=x.shape))
    assert abs(x.mean() - np.sqrt(s.alpha_bar[20]) * 1.5) < 0.02
    assert abs(x.var() - (1 - s.alpha_bar[20])) < 0.02 * (1 - s.alpha_bar[20])


def test_forward_sample_per_sample_steps(rng):
    s = build_schedule(50)
    x0, eps = rng.normal(size=(3, 4, 2)), rng.normal(size=(3, 4, 2))
    t = np.array([1, 25, 50])
    out = forward_sample(x0, t, s, eps)
    for i in range(3):
        np.testing.assert_allclose(out[i], forward_sample(x0[i], t[i], s, eps[i]))


# -- reverse process ---------------------------------------------------------------

@given(st.integers(0, 10_000))
@settings(max_examples=20)
def test_exact_x0_telescopes_back_to_x0(seed):
    s = build_schedule(100, 1e-4, 0.02)
    rng = np.random.default_rng(seed)
    x0 = rng.normal(size=(5, 2)) * 3
    x = rng.normal(size=x0.shape)
    for t in range(100, 0, -1):
        x = posterior_step(x, x0, t, s, rng.normal(size=x.shape))
    np.testing.assert_allclose(x, x0, atol=1e-9)


def test_final_step_returns_x0_hat_exactly():
    s = build_schedule(100, 1e-4, 0.02)
    c0, ct, sigma = posterior_coefficients(1, s)
    assert abs(c0 - 1.0) < 1e-12 and ct == 0.0 and sigma == 0.0


def test_posterior_matches_forward_marginal():
    # q(x_{t-1} | x0) = int q(x_{t-1} | x_t, x0) q(x_t | x0) dx_t
    s = build_schedule(50, 1e-3, 0.2)
    rng = np.random.default_rng(2)
    x0, t = 0.7, 30
    xt = forward_sample(np.full(200_000, x0), t, s, rng.normal(size=200_000))
    prev = posterior_step(xt, x0, t, s, rng.normal(size=xt.shape))
    assert abs(prev.mean() - np.sqrt(s.alpha_bar[t - 1]) * x0) < 0.01
    assert abs(prev.var() - (1 - s.alpha_bar[t - 1])) < 0.02 * (1 - s.alpha_bar[t - 1])


def test_stream_is_keyed():
    assert np.array_equal(stream(1, 2, 3).normal(size=3), stream(1, 2, 3).normal(size=3))
    assert not np.array_equal(stream(1, 2, 3).normal(size=3), stream(1, 3, 2).normal(size=3))


# -- training and sampling on a miniature model --------------------------------------

def _trained(samples, steps=6, seed=0):
    model = TempDiffRegNet(ModelConfig(**MINI))
    cfg = ModelConfig(**MINI)
    trace = train(model, samples, build_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
                  TrainConfig(steps=steps, batch_size=4, seed=seed, log_every=0))
    return model, trace


def test_training_trace_is_deterministic(samples):
    _, a = _trained(samples)
    _, b = _trained(samples)
    assert a == b and len(a) == 6
    assert set(a[0]) >= {"total", "mse", "curv", "diff", "grad_norm", "step"}


def test_training_reduces_loss(samples):
    _, trace = _trained(samples, steps=60)
    first = np.mean([r["total"] for r in trace[:10]])
    last = np.mean([r["total"] for r in trace[-10:]])
    assert last < first


def test_nonfinite_loss_raises(samples):
    cfg = ModelConfig(**MINI)
    model = TempDiffRegNet(cfg)
    batch = make_batch(samples[:2])
    batch.label[0, 0, 0, 0] = np.nan
    opt = nn.Adam(model.parameters())
    with pytest.raises(NonFiniteLoss):
        train_step(batch, model, build_schedule(cfg.T, cfg.beta_start, cfg.beta_end),
                   LossWeights(), np.random.default_rng(0), opt)


def test_lr_schedule_warmup_and_decay():
    tc = TrainConfig(steps=100, lr=1e-3, lr_final=1e-4, warmup=10)
    assert tc.lr_at(0) == pytest.approx(1e-4)
    assert tc.lr_at(9) == pytest.approx(1e-3)
    assert tc.lr_at(99) == pytest.approx(1e-4, rel=1e-2)


def test_batched_sampling_equals_single(samples):
    model, _ = _trained(samples, steps=2)
    cfg = model.cfg
    sch = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    many = sample_many(samples[:3], model, sch, seed=4, batch_size=2)
    for s, r in zip(samples[:3], many):
        one = sample_inference(s, model, sch, seed=4)
        np.testing.assert_allclose(one.shape_mm, r.shape_mm, atol=1e-10)
        assert len(one.trajectory) == cfg.T + 1


def test_sampling_is_reproducible_and_seed_dependent(samples):
    model, _ = _trained(samples, steps=2)
    sch = build_schedule(model.cfg.T, model.cfg.beta_start, model.cfg.beta_end)
    a = sample_inference(samples[0], model, sch, seed=1).shape_mm
    assert np.array_equal(a, sample_inference(samples[0], model, sch, seed=1).shape_mm)
    assert not np.array_equal(a, sample_inference(samples[0], model, sch, seed=2).shape_mm)


def test_mismatched_schedule_is_rejected(samples):
    model, _ = _trained(samples, steps=1)
    with pytest.raises(ShapeMismatch):
        check_compatible(model, build_schedule(model.cfg.T, 1e-4, 0.02))
    with pytest.raises(ShapeMismatch):
        sample_many(samples[:1], model, build_schedule(model.cfg.T + 1, 1e-3, 0.2))


def test_uncertainty_shapes(samples):
    model, _ = _trained(samples, steps=1)
    sch = build_schedule(model.cfg.T, model.cfg.beta_start, model.cfg.beta_end)
    u = sample_uncertainty(samples[0], model, sch, n_samples=5, seed=0)
    assert u.samples.shape == (5, 4, 32, 2) and u.std.shape == (4, 32)
    assert np.all(u.std >= 0)


def test_pointwise_spread_oracle():
    s = np.array([[[0.0, 0.0]], [[2.0, 0.0]]])
    mean, std = pointwise_spread(s)
    np.testing.assert_allclose(mean, [[1.0, 0.0]])
    np.testing.assert_allclose(std, [1.0])


def test_eight_gaussians_layout(rng):
    x, lab = eight_gaussians(4000, rng)
    c = mixture_centers()
    assert np.linalg.norm(x - c[lab], axis=1).mean() < 0.2
    assert set(lab) == set(range(8))
