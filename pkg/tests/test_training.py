import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftlab import oracle, schedule, training
from driftlab.errors import ConfigError, NumericError
from driftlab.fields import NULL_LABEL
from driftlab.mlp import Mlp
from driftlab.training import Classifier, Denoiser, TrainConfig

FLOW = schedule.flow_linear()


def zero_denoiser(sched, parameterization="noise", n_classes=0):
    net = Denoiser.build(1, sched, (8,), parameterization, n_classes, rng=0)
    net.mlp.params[:] = 0.0
    return net


def mean_and_se(per_sample):
    return per_sample.mean(), per_sample.std(ddof=1) / np.sqrt(per_sample.size)


# Mlp


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 2**16), widths=st.lists(st.integers(1, 6), min_size=2, max_size=4))
def test_mlp_backward_matches_finite_differences(seed, widths):
    gen = np.random.default_rng(seed)
    mlp = Mlp.initialize(widths, seed)
    x = gen.normal(size=(5, widths[0]))
    weights = gen.normal(size=(5, widths[-1]))
    out, cache = mlp.forward(x)
    grad, grad_in = mlp.backward(cache, weights)
    step = 1e-6
    for i in gen.choice(mlp.params.size, size=min(8, mlp.params.size), replace=False):
        mlp.params[i] += step
        up = np.sum(weights * mlp(x))
        mlp.params[i] -= 2 * step
        down = np.sum(weights * mlp(x))
        mlp.params[i] += step
        assert grad[i] == pytest.approx((up - down) / (2 * step), rel=1e-5, abs=1e-7)
    e = np.zeros_like(x)
    e[0, 0] = step
    fd_in = (np.sum(weights * mlp(x + e)) - np.sum(weights * mlp(x - e))) / (2 * step)
    assert grad_in[0, 0] == pytest.approx(fd_in, rel=1e-5, abs=1e-7)


def test_mlp_parameter_count_and_validation():
    assert Mlp.count_params((3, 4, 2)) == 3 * 4 + 4 + 4 * 2 + 2
    with pytest.raises(ConfigError):
        Mlp((3, 4), np.zeros(5))
    with pytest.raises(ConfigError):
        Mlp((3,))
    a, b = Mlp.initialize((2, 3, 1), 7), Mlp.initialize((2, 3, 1), 7)
    np.testing.assert_array_equal(a.params, b.params)
    assert np.all(np.abs(a.params[:6]) <= 1 / np.sqrt(2))


# Features


def test_time_and_condition_features(vp2):
    feats = training.time_features(vp2, [0.25])
    np.testing.assert_allclose(feats[0, :3], [0.25, 1.0, 0.0], atol=1e-15)
    assert feats[0, 3] == pytest.approx(schedule.log_snr(vp2, 0.25))
    assert abs(training.time_features(vp2, [1e-12])[0, 3]) == training.LAMBDA_CLIP
    onehot = training.condition_features(np.array([0, NULL_LABEL, 1]), 3, 2)
    np.testing.assert_array_equal(onehot, [[1, 0], [0, 0], [0, 1]])
    with pytest.raises(ConfigError):
        training.condition_features(np.array([2]), 1, 2)


# Losses


def test_zero_model_denoising_loss_is_half(mix, vp2):
    out = training.denoising_loss(zero_denoiser(vp2), mix, vp2, 100_000, 1)
    m, se = mean_and_se(out.per_sample)
    assert abs(m - 0.5) < 3 * se


def test_oracle_predictor_reaches_irreducible_loss(mix, vp2):
    gen = np.random.default_rng(2)
    n = 100_000
    x0, _ = oracle.sample_data(mix, n, gen)
    eps = gen.standard_normal(x0.shape)
    t = gen.uniform(vp2.t_min, vp2.t_max, n)
    x = vp2.alpha(t)[:, None] * x0 + vp2.sigma(t)[:, None] * eps
    ideal = oracle.ideal_noise(mix, vp2, t, x)
    oracle_loss = 0.5 * np.sum((ideal - eps) ** 2, axis=1)
    zero_loss = 0.5 * np.sum(eps ** 2, axis=1)
    assert oracle_loss.mean() < zero_loss.mean()
    # the irreducible term is E||eps - E[eps|x]||^2 = E||eps||^2 - E||E[eps|x]||^2
    m, se = mean_and_se(oracle_loss - (zero_loss - 0.5 * np.sum(ideal ** 2, axis=1)))
    assert abs(m) < 3 * se + 1e-12


def test_point_mass_data_has_zero_loss_predictor(vp2):
    gen = np.random.default_rng(0)
    t = gen.uniform(0.01, 0.99, 1000)
    eps = gen.standard_normal((1000, 1))
    x = vp2.sigma(t)[:, None] * eps  # x0 = 0
    point = oracle.GaussianMixture([1.0], [[0.0]], [1e-12])
    np.testing.assert_allclose(oracle.ideal_noise(point, vp2, t, x), eps, atol=1e-8)
    np.testing.assert_allclose(x / vp2.sigma(t)[:, None], eps, atol=1e-12)


def test_cfg_full_dropout_is_unconditional_loss(mix, vp2):
    net = Denoiser.build(1, vp2, (8,), n_classes=2, rng=3)
    dropped = training.cfg_loss(net, mix, vp2, 512, 9, TrainConfig(p_drop=1.0))
    plain = training.denoising_loss(net, mix, vp2, 512, 9)
    assert dropped.value == plain.value
    np.testing.assert_array_equal(dropped.grad, plain.grad)


def test_cfg_without_dropout_always_conditions(mix, vp2, monkeypatch):
    net = Denoiser.build(1, vp2, (8,), n_classes=2, rng=3)
    seen = []
    original = net.features

    def spy(x, t, cond=None):
        seen.append(np.asarray(cond))
        return original(x, t, cond)

    monkeypatch.setattr(net, "features", spy)
    training.cfg_loss(net, mix, vp2, 256, 1, TrainConfig(p_drop=0.0))
    assert np.all(seen[0] != NULL_LABEL)
    with pytest.raises(ConfigError):
        TrainConfig(p_drop=1.5)


def test_cfm_oracle_velocity_beats_zero_model(mix):
    gen = np.random.default_rng(4)
    n = 50_000
    x1, _ = oracle.sample_data(mix, n, gen)
    eps = gen.standard_normal(x1.shape)
    t = gen.uniform(FLOW.t_min, FLOW.t_max, n)
    x = FLOW.alpha(t)[:, None] * x1 + FLOW.sigma(t)[:, None] * eps
    target = x1 - eps
    best = 0.5 * np.sum((oracle.marginal_velocity(mix, FLOW, t, x) - target) ** 2, axis=1)
    zero = 0.5 * np.sum(target ** 2, axis=1)
    assert best.mean() < zero.mean()
    net = zero_denoiser(FLOW, "velocity")
    zero_net = training.cfm_loss(net, mix, FLOW, n, 4)
    m, se = mean_and_se(zero_net.per_sample)
    assert abs(m - zero.mean()) < 3 * (se + zero.std() / np.sqrt(n))


def test_cfm_point_mass_target_is_exact():
    point = oracle.GaussianMixture([1.0], [[0.5]], [1e-12])
    t, x = 0.4, np.array([[0.1]])
    np.testing.assert_allclose(oracle.marginal_velocity(point, FLOW, t, x),
                               oracle.conditional_velocity(FLOW, t, x, np.array([0.5])),
                               atol=1e-8)


def test_classifier_uniform_and_analytic_losses(mix, vp2):
    clf = Classifier.build(1, 2, vp2, (8,), rng=0)
    clf.mlp.params[:] = 0.0
    out = training.classifier_nll_loss(clf, mix, vp2, 1000, 0)
    np.testing.assert_allclose(out.per_sample, np.log(2.0), atol=1e-15)
    gen = np.random.default_rng(5)
    x0, comp = oracle.sample_data(mix, 50_000, gen)
    t = gen.uniform(0.05, 0.95, x0.shape[0])
    x = vp2.alpha(t)[:, None] * x0 + vp2.sigma(t)[:, None] * gen.standard_normal(x0.shape)
    logp = oracle.class_log_posterior(mix, vp2, t, x)
    assert np.mean(-logp[np.arange(x.shape[0]), mix.labels[comp]]) < np.log(2.0)


def test_wrong_parameterizations_are_rejected(mix, vp2):
    with pytest.raises(ConfigError):
        training.cfm_loss(zero_denoiser(FLOW), mix, FLOW, 8)
    with pytest.raises(ConfigError):
        training.cfm_loss(zero_denoiser(vp2, "velocity"), mix, vp2, 8)
    with pytest.raises(ConfigError):
        training.cfg_loss(zero_denoiser(vp2), mix, vp2, 8)
    with pytest.raises(ConfigError):
        training.loss_function("ddpm-grid", mix=mix, sched=vp2)


def gradient_cases(mix, vp2):
    ds = schedule.discretize(vp2, 50)
    yield "denoise", Denoiser.build(1, vp2, (16, 16), rng=1), \
        lambda m, r: training.denoising_loss(m, mix, vp2, 64, r)
    yield "denoise-score", Denoiser.build(1, vp2, (16, 16), "score", rng=1), \
        lambda m, r: training.denoising_loss(m, mix, vp2, 64, r, TrainConfig(weight="sigma-squared"))
    yield "cfg", Denoiser.build(1, vp2, (16, 16), n_classes=2, rng=1), \
        lambda m, r: training.cfg_loss(m, mix, vp2, 64, r)
    yield "cfm", Denoiser.build(1, FLOW, (16, 16), "velocity", rng=1), \
        lambda m, r: training.cfm_loss(m, mix, FLOW, 64, r)
    yield "classifier", Classifier.build(1, 2, vp2, (16, 16), rng=1), \
        lambda m, r: training.classifier_nll_loss(m, mix, vp2, 64, r)
    yield "ddpm-grid", Denoiser.build(1, vp2, (16, 16), rng=1), \
        lambda m, r: training.ddpm_grid_loss(m, mix, ds, 64, r)


def test_gradient_checks_for_every_loss(mix, vp2):
    for name, model, loss in gradient_cases(mix, vp2):
        for batch_seed in range(5):
            err = training.gradient_check(model, lambda m: loss(m, batch_seed), rng=batch_seed)
            assert err < 1e-4, (name, batch_seed, err)


def test_zero_learning_rate_keeps_parameters(mix, vp2):
    net = Denoiser.build(1, vp2, (8,), rng=2)
    before = net.mlp.params.copy()
    fixed = training.denoising_loss(net, mix, vp2, 256, 3).value
    training.train(net, "denoise", TrainConfig(lr=0.0, steps=50, epoch_len=10), 0,
                   mix=mix, sched=vp2)
    np.testing.assert_array_equal(net.mlp.params, before)
    assert training.denoising_loss(net, mix, vp2, 256, 3).value == fixed


def test_nan_parameters_abort_training(mix, vp2):
    net = Denoiser.build(1, vp2, (8,), rng=2)
    net.mlp.params[0] = np.nan
    with pytest.raises(NumericError):
        training.train(net, "denoise", TrainConfig(steps=5), 0, mix=mix, sched=vp2)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_diverging_run_aborts(mix, vp2):
    net = Denoiser.build(1, vp2, (8,), rng=2)
    with pytest.raises(NumericError):
        training.train(net, "denoise", TrainConfig(lr=1e6, steps=200, cosine=False), 0,
                       mix=mix, sched=vp2)


def test_training_is_reproducible(mix, vp2):
    nets = [Denoiser.build(1, vp2, (8,), rng=4) for _ in range(2)]
    reports = [training.train(n, "denoise", TrainConfig(steps=100, epoch_len=10), 6,
                              mix=mix, sched=vp2) for n in nets]
    np.testing.assert_array_equal(nets[0].mlp.params, nets[1].mlp.params)
    assert reports[0].epoch_losses == reports[1].epoch_losses
    assert len(reports[0].epoch_losses) == 10


def test_grid_restricted_loss_matches_ddpm_loss(mix, vp2):
    ds = schedule.discretize(vp2, 20)
    net = Denoiser.build(1, vp2, (16,), rng=8)
    grid_cfg = TrainConfig(time_grid=tuple(ds.grid[1:]))
    cont = training.denoising_loss(net, mix, vp2, 100_000, 1, grid_cfg).per_sample
    disc = training.ddpm_grid_loss(net, mix, ds, 100_000, 2).per_sample
    m1, s1 = mean_and_se(cont)
    m2, s2 = mean_and_se(disc)
    assert abs(m1 - m2) < 3 * np.hypot(s1, s2)


@pytest.mark.slow
def test_score_and_noise_parameterizations_train_alike(mix, vp2):
    gaps = []
    for param, weight in (("noise", "constant"), ("score", "sigma-squared")):
        net = Denoiser.build(1, vp2, parameterization=param, rng=1)
        training.train(net, "denoise", TrainConfig(lr=3e-2, weight=weight, steps=20_000), 1,
                       mix=mix, sched=vp2)
        gaps.append(training.noise_probe_rmse(net, mix, vp2))
    assert abs(gaps[0] - gaps[1]) < 0.05
