import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftlab import fields, oracle, schedule
from driftlab.errors import ConfigError, ConversionError, UnsupportedError
from driftlab.fields import FieldModel, GuidanceSpec


def constant_model(value, parameterization, dim=1):
    return FieldModel(lambda x, t, c=None: np.full_like(x, value), parameterization, dim,
                      backing="network")


def test_noise_passthrough(vp2):
    model = constant_model(0.37, "noise")
    x = np.array([[1.0], [2.0]])
    np.testing.assert_array_equal(fields.to_noise(model, vp2, x, 0.5), 0.37)


def test_oracle_score_to_noise_on_standard_normal(vp2):
    model = fields.oracle_score_model(oracle.standard_normal(), vp2)
    x = np.linspace(-2, 2, 5)[:, None]
    np.testing.assert_allclose(fields.to_noise(model, vp2, x, 0.4), vp2.sigma(0.4) * x,
                               atol=1e-12)


def test_x0_model_inverts_forward_map(vp2):
    x0, eps, t = np.array([[0.3], [-1.2]]), np.array([[0.5], [2.0]]), 0.6
    model = FieldModel(lambda x, tt, c=None: x0, "x0", 1, "network")
    x = vp2.alpha(t) * x0 + vp2.sigma(t) * eps
    np.testing.assert_allclose(fields.to_noise(model, vp2, x, t), eps, atol=1e-12)


def test_conversion_errors(vp2):
    with pytest.raises(UnsupportedError):
        fields.to_noise(constant_model(0.0, "velocity"), vp2, np.zeros((1, 1)), 0.5)
    with pytest.raises(ConversionError):
        fields.to_noise(constant_model(0.0, "score"), vp2, np.zeros((1, 1)), 0.0)
    with pytest.raises(ConfigError):
        GuidanceSpec("classifier", gamma=1.0)
    with pytest.raises(ConfigError):
        FieldModel(lambda x, t, c=None: x, "logits", 1)


def test_reverse_drift_on_standard_normal(vp2):
    model = fields.oracle_score_model(oracle.standard_normal(), vp2)
    x = np.linspace(-2, 2, 5)[:, None]
    np.testing.assert_allclose(fields.reverse_sde_drift(model, vp2, x, 0.3), x, atol=1e-12)
    np.testing.assert_allclose(fields.reverse_ode_velocity(model, vp2, x, 0.3), 0.0, atol=1e-12)


def test_zero_gamma_classifier_equals_unguided(mix, vp2):
    model = fields.oracle_noise_model(mix, vp2)
    spec = GuidanceSpec("classifier", gamma=0.0,
                        classifier_grad=fields.analytic_classifier_grad(mix, vp2))
    x = np.linspace(-2, 2, 9)[:, None]
    np.testing.assert_array_equal(fields.reverse_sde_drift(model, vp2, x, 0.5, spec, cond=1),
                                  fields.reverse_sde_drift(model, vp2, x, 0.5))


def test_drift_two_construction_paths(mix, vp2):
    model = fields.oracle_noise_model(mix, vp2)
    x, t = np.array([[0.7]]), 0.5
    dd = vp2.drift_diffusion(t)
    direct = dd.f * x - dd.g2 * oracle.marginal_score(mix, vp2, t, x)
    np.testing.assert_allclose(fields.reverse_sde_drift(model, vp2, x, t), direct, atol=1e-12)
    np.testing.assert_allclose(fields.reverse_ode_velocity(model, vp2, x, t),
                               oracle.marginal_velocity(mix, vp2, t, x), atol=1e-9)


def test_sde_minus_ode_is_half_noise_term(mix, vp2):
    model = fields.oracle_noise_model(mix, vp2)
    x, t = np.linspace(-2, 2, 9)[:, None], 0.45
    dd = vp2.drift_diffusion(t)
    eps = fields.to_noise(model, vp2, x, t)
    diff = fields.reverse_sde_drift(model, vp2, x, t) - fields.reverse_ode_velocity(model, vp2, x, t)
    np.testing.assert_allclose(diff, dd.g2 / (2 * vp2.sigma(t)) * eps, atol=1e-12)


def test_cfg_combine_examples():
    c, u = np.array([1.0, 0.0]), np.array([0.0, 1.0])
    np.testing.assert_array_equal(fields.cfg_combine(c, u, 2.0), [2.0, -1.0])
    np.testing.assert_array_equal(fields.cfg_combine(c, u, 1.0), c)
    np.testing.assert_array_equal(fields.cfg_combine(c, u, 0.0), u)


def test_cfg_unit_scale_is_conditional_predictor_bitwise(mix, vp2):
    model = fields.oracle_noise_model(mix, vp2)
    x = np.linspace(-2, 2, 17)[:, None]
    guided = fields.guided_noise(model, vp2, x, 0.4, GuidanceSpec("cfg", s=1.0), cond=0)
    np.testing.assert_array_equal(guided, fields.to_noise(model, vp2, x, 0.4, 0))


def test_classifier_guidance_shifts_towards_class(mix, vp2):
    model = fields.oracle_noise_model(mix, vp2)
    spec = GuidanceSpec("classifier", gamma=2.0,
                        classifier_grad=fields.analytic_classifier_grad(mix, vp2))
    x = np.array([[0.0]])
    base = fields.reverse_ode_velocity(model, vp2, x, 0.5)
    guided = fields.reverse_ode_velocity(model, vp2, x, 0.5, spec, cond=1)
    # reverse time integrates -velocity, so class 1 (positive mode) lowers velocity
    assert guided[0, 0] < base[0, 0]
    eff = fields.effective_noise(model, vp2, x, 0.5, spec, cond=1)
    dd = vp2.drift_diffusion(0.5)
    np.testing.assert_allclose(dd.f * x + dd.g2 / (2 * vp2.sigma(0.5)) * eff, guided, atol=1e-12)


@settings(max_examples=100, deadline=None)
@given(t=st.floats(1e-3, 0.9999), x=st.floats(-5, 5))
def test_noise_score_round_trip(t, x):
    sched = schedule.vp_linear()
    mix = oracle.benchmark_mixture()
    eps_model = fields.oracle_noise_model(mix, sched)
    score = fields.to_score(eps_model, sched, np.array([[x]]), t)
    back = FieldModel(lambda xx, tt, c=None: score, "score", 1)
    np.testing.assert_allclose(fields.to_noise(back, sched, np.array([[x]]), t),
                               eps_model(np.array([[x]]), t), rtol=1e-12, atol=1e-12)


def test_ode_velocity_matches_oracle_at_random_points(mix):
    sched = schedule.vp_linear()
    model = fields.oracle_noise_model(mix, sched)
    gen = np.random.default_rng(5)
    for _ in range(500):
        t = gen.uniform(0.01, 0.99)
        x = gen.normal(0, 2, (1, 1))
        np.testing.assert_allclose(fields.reverse_ode_velocity(model, sched, x, t),
                                   oracle.marginal_velocity(mix, sched, t, x), atol=1e-9)


@settings(max_examples=100, deadline=None)
@given(s1=st.integers(0, 64), s2=st.integers(0, 64),
       c=st.integers(-64, 64), u=st.integers(-64, 64))
def test_cfg_combine_affine_in_scale(s1, s2, c, u):
    # dyadic inputs keep every product exact
    s1, s2, c, u = s1 / 8, s2 / 8, np.array([c / 4]), np.array([u / 4])
    mid = fields.cfg_combine(c, u, (s1 + s2) / 2)
    mean = (fields.cfg_combine(c, u, s1) + fields.cfg_combine(c, u, s2)) / 2
    np.testing.assert_array_equal(mid, mean)


def test_cfg_with_identical_branches_is_unguided(vp2):
    mix = oracle.GaussianMixture([1.0], [[0.0]], [1.0], labels=[0])
    model = fields.oracle_noise_model(mix, vp2)
    x = np.linspace(-2, 2, 5)[:, None]
    for s in (0.0, 1.0, 3.0):
        guided = fields.reverse_sde_drift(model, vp2, x, 0.5, GuidanceSpec("cfg", s=s), cond=0)
        np.testing.assert_allclose(guided, fields.reverse_sde_drift(model, vp2, x, 0.5),
                                   atol=1e-14)
