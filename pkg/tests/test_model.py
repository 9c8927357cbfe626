import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vascreg import nn
from vascreg.ddpm import build_schedule, forward_sample
from vascreg.errors import ShapeMismatch, StepOutOfRange
from vascreg.geometry import polyline_curvature
from vascreg.model import (Batch, LossWeights, ModelConfig, TempDiffRegNet, composite_loss,
                           dct_basis, decode_shape, encode_branch_sequence, make_batch,
                           menger_tensor, point_mse, timestep_embedding)
from vascreg.nn.gradcheck import check_gradients
from vascreg.synth import DataConfig, assemble_samples, simulate_case

MINI = dict(points=8, frames=3, T=10, width=8, heads=2, blocks=1, ffn_hidden=8, time_dim=4,
            decoder_hidden=(12,), conv_channels=(2, 3), frame_features=6, pose_hidden=4,
            branch_dim=3, position_dim=3, basis_modes=4)


def mini_batch(cfg, rng, B=2):
    F, P = cfg.frames, cfg.points
    proj = rng.normal(size=(B, F, P, 2))
    return Batch(proj + 0.05 * rng.normal(size=(B, F, P, 2)), proj,
                 rng.normal(size=(B, F, 21)), np.arange(B), proj + 0.05 * rng.normal(size=(B, F, P, 2)))


@pytest.fixture(scope="module")
def real_samples():
    cfg = DataConfig(n_cases=1, frames_per_case=8, oracle_pose=True)
    return assemble_samples(simulate_case(cfg, 0, 0), cfg)


def test_dct_basis_is_orthonormal():
    B = dct_basis(32, 8)
    np.testing.assert_allclose(B @ B.T, np.eye(8), atol=1e-12)
    np.testing.assert_allclose(B[0], 1 / np.sqrt(32))


def test_timestep_embedding_shape_and_range():
    e = timestep_embedding([1, 50, 100], 7)
    assert e.shape == (3, 7) and np.abs(e).max() <= 1.0


def test_gate_interpolates_between_network_and_noisy_input(rng):
    cfg = ModelConfig(**{**MINI, "basis_modes": 0})
    model = TempDiffRegNet(cfg)
    dec = model.decoder
    x_t = rng.normal(size=(1, 3, 8, 2))
    y = rng.normal(size=(1, cfg.condition_dim))
    n_gate = cfg.frames * cfg.points

    def network(t):
        inp = np.concatenate([x_t.reshape(1, -1), timestep_embedding([t], cfg.time_dim), y], axis=-1)
        h = dec.mlp(inp).data + dec.linear(inp).data
        return h[:, :dec.n_coef].reshape(x_t.shape)

    y[:, -n_gate:] = -1e3                   # gate shut
    np.testing.assert_allclose(model.decode(x_t, 4, y).data, network(4), atol=1e-9)
    y[:, -n_gate:] = 1e3                    # gate open
    m, ab = network(4), cfg.alpha_bar()[4]
    want = m + dec.c_skip[4] * (x_t - np.sqrt(ab) * m)
    np.testing.assert_allclose(model.decode(x_t, 4, y).data, want, atol=1e-9)
    # without the blend the output is the network estimate, gate open or not
    np.testing.assert_allclose(model.decode(x_t, 4, y, blend=False).data, m, atol=1e-9)


def test_skip_coefficients_limits():
    cfg = ModelConfig(**{**MINI, "data_std": 1.0, "skip_connection": "scaled"})
    dec = TempDiffRegNet(cfg).decoder
    ab = cfg.alpha_bar()
    np.testing.assert_allclose(dec.c_skip, np.sqrt(ab))
    np.testing.assert_allclose(dec.c_out, np.sqrt(1 - ab))
    assert dec.c_skip[0] == 1.0 and dec.c_out[0] == 0.0


def test_alpha_bar_matches_schedule():
    cfg = ModelConfig()
    np.testing.assert_allclose(cfg.alpha_bar(), build_schedule(cfg.T, cfg.beta_start,
                                                               cfg.beta_end).alpha_bar, rtol=1e-14)
    assert cfg.alpha_bar()[-1] < 1e-4


def test_config_validation():
    with pytest.raises(ShapeMismatch):
        ModelConfig(width=10, heads=4)
    with pytest.raises(ShapeMismatch):
        ModelConfig(basis_modes=40, points=32)
    with pytest.raises(ValueError):
        ModelConfig(data_std=0.0)


def test_make_batch_normalisation(real_samples):
    b = make_batch(real_samples[:3])
    assert b.obs.shape == (3, 4, 32, 2) and b.pose.shape == (3, 4, 21)
    assert np.abs(b.proj).max() == pytest.approx(1.0)
    with pytest.raises(ShapeMismatch):
        make_batch([real_samples[0], real_samples[0].single_frames()[0]])


def test_encoder_output_shape(real_samples):
    cfg = ModelConfig()
    y = encode_branch_sequence(real_samples[0], TempDiffRegNet(cfg))
    # pooled context, relative observations, one gate logit per frame and point
    assert y.shape == (cfg.condition_dim,) == (128 + 4 * 32 * 2 + 4 * 32,)
    assert np.all(np.isfinite(y))
    b = make_batch(real_samples[:1])
    np.testing.assert_allclose(y[128:384], ((b.obs - b.proj) * cfg.residual_gain).ravel())
    plain = ModelConfig(observation_skip=False, skip_connection="none")
    assert encode_branch_sequence(real_samples[0], TempDiffRegNet(plain)).shape == (128,)


def test_frame_order_matters(real_samples):
    model = TempDiffRegNet(ModelConfig())
    y = encode_branch_sequence(real_samples[0], model)
    y_rev = encode_branch_sequence(real_samples[0], model, order=[3, 2, 1, 0])
    assert np.abs(y - y_rev).max() > 1e-6


def test_decoder_output_in_basis_span(rng):
    cfg = ModelConfig(**{**MINI, "skip_connection": "none"})
    model = TempDiffRegNet(cfg)
    out = decode_shape(rng.normal(size=(3, 8, 2)), 5, rng.normal(size=cfg.condition_dim), model)
    B = dct_basis(8, 4)
    proj = np.einsum("fpc,mp,mq->fqc", out, B, B)
    np.testing.assert_allclose(out, proj, atol=1e-12)


def test_decoder_rejects_bad_inputs(rng):
    model = TempDiffRegNet(ModelConfig(**MINI))
    y = rng.normal(size=(1, model.cfg.condition_dim))
    with pytest.raises(StepOutOfRange):
        model.decode(rng.normal(size=(1, 3, 8, 2)), 0, y)
    with pytest.raises(StepOutOfRange):
        model.decode(rng.normal(size=(1, 3, 8, 2)), 11, y)
    with pytest.raises(ShapeMismatch):
        model.decode(rng.normal(size=(1, 2, 8, 2)), 3, y)
    with pytest.raises(ShapeMismatch):
        model.decode(rng.normal(size=(1, 3, 8, 2)), 3, y[:, :8])


def test_displacement_roundtrip(rng):
    model = TempDiffRegNet(ModelConfig(**MINI))
    shapes, proj = rng.normal(size=(3, 8, 2)), rng.normal(size=(3, 8, 2))
    np.testing.assert_allclose(model.to_shape(model.to_displacement(shapes, proj), proj), shapes)


def test_parameter_count_is_modest():
    assert TempDiffRegNet(ModelConfig()).num_parameters() < 2_000_000


def test_model_is_seed_deterministic(rng):
    a, b = TempDiffRegNet(ModelConfig(**MINI)), TempDiffRegNet(ModelConfig(**MINI))
    for (na, pa), (nb, pb) in zip(a.named_parameters(), b.named_parameters()):
        assert na == nb and np.array_equal(pa.data, pb.data)


# -- loss --------------------------------------------------------------------

def test_menger_tensor_matches_geometry(rng):
    pts = rng.normal(size=(10, 2))
    np.testing.assert_allclose(menger_tensor(pts).data, polyline_curvature(pts), rtol=1e-12)


def test_point_mse_is_mean_squared_distance():
    a = np.zeros((2, 3, 2))
    b = np.ones((2, 3, 2))
    assert float(point_mse(a, b).data) == 2.0


@given(st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
@settings(max_examples=20)
def test_loss_is_zero_at_the_target(w_mse, w_curv, w_diff):
    if not (w_mse or w_curv or w_diff):
        return
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 3, 8, 2))
    total, terms = composite_loss(x0, x0, LossWeights(w_mse, w_curv, w_diff), [(x0, x0)],
                                  reference=rng.normal(size=x0.shape), gain=20.0)
    assert float(total.data) == pytest.approx(0.0, abs=1e-12)


def test_loss_terms_combine_linearly(rng):
    x0 = rng.normal(size=(2, 3, 8, 2))
    pred = x0 + 0.1 * rng.normal(size=x0.shape)
    w = LossWeights(0.7, 0.3, 1.9)
    total, t = composite_loss(pred, x0, w, [(pred, x0), (x0, x0)], reference=x0, gain=5.0)
    assert t["total"] == pytest.approx(0.7 * t["mse"] + 0.3 * t["curv"] + 1.9 * t["diff"])
    assert t["diff"] == pytest.approx(t["mse"] / 2)


def test_disabled_term_reports_zero(rng):
    x0 = rng.normal(size=(2, 3, 8, 2))
    _, t = composite_loss(x0 + 1, x0, LossWeights(1.0, 0.0, 1.0))
    assert t["curv"] == 0.0 and t["diff"] == 0.0 and t["mse"] > 0


def test_loss_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(0, 0, 0)
    with pytest.raises(ValueError):
        LossWeights(-1, 0, 1)


def test_end_to_end_gradient_on_miniature_model(rng):
    """Composite loss through encoder, decoder and re-noised step w.r.t. every parameter."""
    cfg = ModelConfig(**MINI)
    model = TempDiffRegNet(cfg)
    # zero-initialised biases put dead ReLU units exactly on the kink; move them off it
    for name, p in model.named_parameters():
        if name.endswith("bias"):
            p.data = 0.1 * rng.normal(size=p.shape)
    batch = mini_batch(cfg, rng)
    sch = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    x0 = model.to_displacement(batch.label, batch.proj)
    t = np.array([3, 7])
    x_t = forward_sample(x0, t, sch, rng.normal(size=x0.shape))
    x_1 = forward_sample(x0, np.ones(2, int), sch, rng.normal(size=x0.shape))

    def loss():
        y = model.encode(batch)
        pred = model.decode(x_t, t, y)
        final = model.decode(x_1, 1, y)
        total, _ = composite_loss(final, x0, LossWeights(), [(pred, x0)], batch.proj,
                                  cfg.residual_gain)
        return total

    assert check_gradients(loss, model.parameters(), h=1e-6) < 1e-3
