import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from mocritic.autodiff import ContractViolation, Tensor, gradient_check
from mocritic.critic import CriticConfig, CriticModel
from mocritic.diffusion import (
    DiffusionSchedule,
    FinetuneConfig,
    GeneratorConfig,
    GeneratorModel,
    MotionDataset,
    critic_to_loss,
    ddpm_sample,
    finetune,
    kl_reg,
    mdm_loss,
    posterior_step,
    q_sample,
    score_vs_denoising_curve,
    train_generator,
    write_diagnostics,
)

GEN = GeneratorConfig(seq_len=4, width=16, depth=2, n_labels=2, time_dim=8, label_dim=4, T=25)
CRITIC = CriticConfig(embed_dim=8, layers=1, heads=2, ff_dim=8, head_hidden=8, seq_len=4)


def toy_data(gen, n=24, seed=0):
    rng = np.random.default_rng(seed)
    return MotionDataset(rng.normal(size=(n, gen.config.motion_dim)), rng.integers(0, 2, size=n))


def frozen_critic(seed=0):
    c = CriticModel(CRITIC, seed=seed)
    c.freeze()
    return c


# ------------------------------------------------------------------ schedule


@pytest.mark.parametrize("T", [25, 50, 100, 1000])
def test_schedule_ends_near_noise(T):
    s = DiffusionSchedule(T)
    assert s.alpha_bar[-1] < 0.01
    assert np.all(np.diff(s.alpha_bar) < 0)
    assert s.betas[0] == pytest.approx(1e-4 * 1000 / T)


def test_schedule_rejects_weak_noise():
    with pytest.raises(ContractViolation):
        DiffusionSchedule(10)  # rescaled beta_max would exceed 1
    with pytest.raises(ContractViolation):
        DiffusionSchedule(100, beta_min=1e-5, beta_max=1e-3)


def test_q_sample_statistics():
    s = DiffusionSchedule(100)
    rng = np.random.default_rng(0)
    eps = rng.normal(size=200_000)
    x = q_sample(np.full(200_000, 2.0), 30, eps, s)
    ab = s.alpha_bar[29]
    assert x.mean() == pytest.approx(2.0 * math.sqrt(ab), abs=0.01)
    assert x.var() == pytest.approx(1.0 - ab, abs=0.01)
    with pytest.raises(ContractViolation):
        q_sample(np.zeros(3), 0, np.zeros(3), s)


def test_q_sample_matches_iterated_single_steps():
    # composing x_t = sqrt(a_t) x_{t-1} + sqrt(b_t) e_t: mean and variance
    s = DiffusionSchedule(30)
    mean, var = 1.0, 0.0
    for t in range(1, 31):
        mean *= math.sqrt(s.alphas[t - 1])
        var = s.alphas[t - 1] * var + s.betas[t - 1]
        assert mean == pytest.approx(math.sqrt(s.alpha_bar[t - 1]), rel=1e-12)
        assert var == pytest.approx(1 - s.alpha_bar[t - 1], rel=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.integers(2, 50), st.floats(-3, 3), st.floats(-3, 3))
def test_posterior_matches_gaussian_product(t, x0, xt):
    s = DiffusionSchedule(50)
    a, b = s.alphas[t - 1], s.betas[t - 1]
    abp = s.alpha_bar[t - 2]
    prec = 1 / (1 - abp) + a / b
    mean = (math.sqrt(abp) * x0 / (1 - abp) + math.sqrt(a) * xt / b) / prec
    got_mean = posterior_step(np.array([x0]), np.array([xt]), t, s, np.zeros(1))[0]
    got_std = posterior_step(np.array([x0]), np.array([xt]), t, s, np.ones(1))[0] - got_mean
    assert got_mean == pytest.approx(mean, rel=1e-9, abs=1e-12)
    assert got_std == pytest.approx(math.sqrt(1 / prec), rel=1e-9)


def test_last_step_is_deterministic():
    s = DiffusionSchedule(25)
    out = posterior_step(np.ones(3), np.zeros(3), 1, s, np.full(3, 100.0))
    np.testing.assert_allclose(out, 1.0)


# -------------------------------------------------------------------- losses


def test_critic_to_loss_fixtures():
    assert critic_to_loss(Tensor(np.array(12.0)), 12.0).item() == pytest.approx(0.5, abs=1e-12)
    hi = critic_to_loss(Tensor(np.array(40.0)), 12.0).item()
    lo = critic_to_loss(Tensor(np.array(-40.0)), 12.0).item()
    assert hi < 1e-12 and lo > 1 - 1e-12


def test_loss_gradients():
    rng = np.random.default_rng(0)
    assert gradient_check(lambda s: critic_to_loss(s, 1.0).mean(), [rng.normal(size=4)]) < 1e-8
    prev = rng.normal(size=(2, 3))
    assert gradient_check(lambda x: kl_reg(x, prev), [rng.normal(size=(2, 3))]) < 1e-8


def test_kl_reg_value_and_shape_check():
    x = np.array([[1.0, 2.0], [3.0, 4.0]])
    assert kl_reg(Tensor(x), x + 1.0).item() == pytest.approx(0.5)
    with pytest.raises(ContractViolation):
        kl_reg(Tensor(x), np.zeros(3))


def test_mdm_loss_gradient_wrt_params():
    gen = GeneratorModel(GeneratorConfig(seq_len=2, width=4, depth=1, n_labels=2, time_dim=4, label_dim=2, T=25))
    s = DiffusionSchedule(25)
    x0 = np.random.default_rng(1).normal(size=(3, gen.config.motion_dim))
    labels = np.array([0, 1, 0])
    names = gen.params.names()

    def loss(*ts):
        saved = gen.params._params
        gen.params._params = dict(zip(names, ts))
        try:
            return mdm_loss(gen, x0, labels, s, np.random.default_rng(7))
        finally:
            gen.params._params = saved

    assert gradient_check(loss, [a.copy() for a in gen.params.arrays()], coords=5) < 1e-6


# ----------------------------------------------------------------- generator


def test_label_validation_and_shapes():
    gen = GeneratorModel(GEN)
    with pytest.raises(ContractViolation):
        gen.forward(Tensor(np.zeros((1, gen.config.motion_dim))), np.array([3]), np.array([5]))
    x = ddpm_sample(gen, np.array([0, 1]), DiffusionSchedule(GEN.T), seed=0)
    assert x.shape == (2, gen.config.motion_dim)
    assert gen.to_clips(x)[0].length == 4


def test_generator_checkpoint_roundtrip(tmp_path):
    gen = GeneratorModel(GEN, seed=2, mean=np.arange(75.0), std=np.full(75, 2.0))
    gen.save(tmp_path / "g.mgen")
    back = GeneratorModel.load(tmp_path / "g.mgen")
    np.testing.assert_array_equal(back.mean, gen.mean)
    for a, b in zip(gen.params.arrays(), back.params.arrays()):
        np.testing.assert_array_equal(a, b)
    back.save(tmp_path / "h.mgen")
    assert (tmp_path / "h.mgen").read_bytes() == (tmp_path / "g.mgen").read_bytes()


def test_pretraining_reduces_loss():
    gen = GeneratorModel(GEN)
    losses = train_generator(gen, toy_data(gen), DiffusionSchedule(GEN.T), steps=150, lr=3e-3, batch_size=8)
    assert np.mean(losses[-20:]) < np.mean(losses[:20])


# ----------------------------------------------------------------- fine-tune


def test_requires_frozen_critic():
    gen = GeneratorModel(GEN)
    with pytest.raises(ContractViolation):
        finetune(gen, CriticModel(CRITIC), toy_data(gen), FinetuneConfig(iterations=1), DiffusionSchedule(GEN.T))


def test_window_validation():
    with pytest.raises(ContractViolation):
        FinetuneConfig(window=(0, 5)).resolve_window(20)
    with pytest.raises(ContractViolation):
        FinetuneConfig(window=(5, 20)).resolve_window(20)
    assert FinetuneConfig().resolve_window(100) == (70, 90)


def test_diagnostics_decomposition_and_first_kl_absent(tmp_path):
    gen = GeneratorModel(GEN, seed=1)
    cfg = FinetuneConfig(iterations=4, lr=1e-3, sample_batch=3, batch_size=4, lam=0.5, mu=2.0)
    state = finetune(gen, frozen_critic(), toy_data(gen), cfg, DiffusionSchedule(GEN.T), run_dir=tmp_path,
                     checkpoint_every=2)
    h = state.history
    assert h[0].kl_loss is None and all(d.kl_loss is not None for d in h[1:])
    for d in h:
        assert 18 <= d.t <= 22
        assert d.total == d.mdm_loss + cfg.lam * d.critic_loss + cfg.mu * (d.kl_loss or 0.0)
    assert (tmp_path / "gen_00002.mgen").exists() and (tmp_path / "gen_00004.mgen").exists()
    rows = (tmp_path / "diagnostics.csv").read_text().splitlines()
    assert rows[0] == "iter,t,mdm_loss,critic_loss,kl_loss,mean_score,total" and len(rows) == 5


def test_single_step_mode_uses_T():
    gen = GeneratorModel(GEN)
    cfg = FinetuneConfig(iterations=2, single_step_mode=True, sample_batch=2, batch_size=4)
    state = finetune(gen, frozen_critic(), toy_data(gen), cfg, DiffusionSchedule(GEN.T))
    assert [d.t for d in state.history] == [GEN.T, GEN.T]


def test_zero_scales_equal_plain_training():
    data = toy_data(GeneratorModel(GEN))
    s = DiffusionSchedule(GEN.T)
    a = GeneratorModel(GEN, seed=4)
    b = GeneratorModel(GEN, seed=4)
    finetune(a, frozen_critic(), data, FinetuneConfig(lam=0.0, mu=0.0, iterations=5, lr=1e-3, batch_size=6,
                                                      sample_batch=2, seed=9), s)
    train_generator(b, data, s, steps=5, lr=1e-3, batch_size=6, seed=9)
    for x, y in zip(a.params.arrays(), b.params.arrays()):
        assert np.array_equal(x, y)


def test_zero_iterations_leave_generator_untouched(tmp_path):
    gen = GeneratorModel(GEN, seed=6)
    gen.save(tmp_path / "in.mgen")
    finetune(gen, frozen_critic(), toy_data(gen), FinetuneConfig(iterations=0), DiffusionSchedule(GEN.T))
    gen.save(tmp_path / "out.mgen")
    assert (tmp_path / "in.mgen").read_bytes() == (tmp_path / "out.mgen").read_bytes()


def test_finetune_is_deterministic():
    data = toy_data(GeneratorModel(GEN))
    cfg = FinetuneConfig(iterations=3, lr=1e-3, sample_batch=2, batch_size=4)
    runs = []
    for _ in range(2):
        g = GeneratorModel(GEN, seed=8)
        finetune(g, frozen_critic(), data, cfg, DiffusionSchedule(GEN.T))
        runs.append(g.params.arrays())
    for x, y in zip(*runs):
        assert np.array_equal(x, y)


def test_curve_has_one_entry_per_step(tmp_path):
    gen = GeneratorModel(GEN)
    curve = score_vs_denoising_curve(gen, frozen_critic(), DiffusionSchedule(GEN.T), seeds=[0], batch=2)
    assert curve.shape == (GEN.T,) and np.all(np.isfinite(curve))
    write_diagnostics([], tmp_path / "d.csv")
    assert (tmp_path / "d.csv").read_text().startswith("iter,")
