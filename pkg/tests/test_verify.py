import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from driftlab import fields, oracle, schedule, verify
from driftlab.errors import ConfigError
from driftlab.fields import FieldModel
from driftlab.verify import Grid1D


@pytest.fixture
def grid():
    return Grid1D.uniform(-6.0, 6.0, 1024)


# Grid plumbing.

def test_grid_needs_64_points():
    with pytest.raises(ConfigError):
        Grid1D.uniform(0.0, 1.0, 63)
    assert Grid1D.uniform(0.0, 1.0, 64).xs.size == 64


def test_grid_rejects_negative_density():
    xs = np.linspace(0, 1, 64)
    with pytest.raises(ConfigError):
        Grid1D(xs, xs[1] - xs[0], values=-np.ones(64))


def test_refined_grid_halves_spacing(grid):
    fine = grid.refined()
    assert fine.dx == pytest.approx(grid.dx / 2, rel=1e-12)
    assert fine.xs[0] == grid.xs[0] and fine.xs[-1] == grid.xs[-1]


# PDE residuals.

@pytest.mark.parametrize("check", ["continuity", "fp"])
def test_stationary_normal_residuals_vanish(check, vp2, grid):
    normal = oracle.standard_normal()
    fn = verify.continuity_residual if check == "continuity" else verify.fokker_planck_residual
    rep = fn(normal, vp2, 0.5, grid)
    assert rep.sup_norm < 1e-8


@pytest.mark.parametrize("t", [0.3, 0.5, 0.7])
def test_benchmark_pde_residuals_small(mix, vp2, grid, t):
    for rep in (verify.continuity_residual(mix, vp2, t, grid),
                verify.fokker_planck_residual(mix, vp2, t, grid),
                verify.reverse_pde_residual(mix, vp2, 1.0 - t, grid)):
        assert rep.sup_norm < 1e-5
        assert np.isfinite(rep.l2_norm) and rep.l2_norm >= 0


def test_continuity_residual_converges_at_fourth_order(mix, vp2, grid):
    ratio = verify.convergence_ratio(
        lambda g: verify.continuity_residual(mix, vp2, 0.5, g), grid)
    assert ratio >= 8.0


def test_wrong_sign_diffusion_is_detected(mix, vp2, grid):
    # The reverse equation evaluated on the forward density must not balance.
    rep = verify.reverse_pde_residual(mix, vp2, 0.5, grid)
    drift, diffusion = verify._fp_terms(mix, vp2, 0.5, grid)
    assert rep.sup_norm < 1e-5
    assert np.max(np.abs(diffusion)) > 1e-2


@pytest.mark.parametrize("t", [0.3, 0.5, 0.7])
def test_conditional_kernel_residual(vp2, grid, t):
    assert verify.conditional_fp_residual(vp2, t, 1.0, grid).sup_norm < 1e-6


def test_conditional_kernel_residual_vp_linear(grid):
    rep = verify.conditional_fp_residual(schedule.vp_linear(), 0.4, -0.5, grid)
    assert rep.sup_norm < 1e-6


def test_pde_residuals_are_deterministic(mix, vp2, grid):
    a = verify.fokker_planck_residual(mix, vp2, 0.5, grid)
    b = verify.fokker_planck_residual(mix, vp2, 0.5, grid)
    assert np.array_equal(a.residual, b.residual)


def test_pde_rejects_multivariate_mixture(vp2, grid):
    with pytest.raises(ConfigError):
        verify.continuity_residual(oracle.standard_normal(2), vp2, 0.5, grid)


@pytest.mark.parametrize("t", [0.3, 0.5, 0.7])
def test_averaged_conditional_flux_matches_direct(mix, vp2, grid, t):
    diff, averaged, direct = verify.averaged_drift_residual(mix, vp2, t, grid)
    assert diff < 1e-6
    assert averaged.sup_norm < 1e-5


# Monte Carlo identities.

def test_fisher_single_component_reference_is_exact(vp2):
    comp = oracle.GaussianMixture([1.0], [[0.4]], [0.3])
    x, t = 0.9, 0.5
    res = verify.fisher_check(comp, vp2, t, x, 20_000, rng=3)
    a, s = vp2.alpha(t), vp2.sigma(t)
    exact = -(x - a * 0.4) / (a * a * 0.3 + s * s)
    assert res.reference[0] == pytest.approx(exact, rel=1e-12)
    assert res.z_score < 3.0


def test_fisher_benchmark_probe(mix, vp2):
    assert verify.fisher_check(mix, vp2, 0.5, 0.7, 100_000, rng=0).z_score < 3.0


def test_fisher_far_probe_tracks_near_component(mix, vp2):
    t, x = 0.5, 5.0
    res = verify.fisher_check(mix, vp2, t, x, 100_000, rng=1)
    resp = oracle.responsibilities(mix, vp2, t, np.array([[x]]))[0]
    assert resp[1] > 0.9999
    a, s = vp2.alpha(t), vp2.sigma(t)
    near = -(x - a * 1.0) / (a * a * 0.01 + s * s)
    assert res.reference[0] == pytest.approx(near, rel=1e-3)
    assert res.estimate[0] == pytest.approx(near, rel=1e-2)
    assert res.z_score < 3.0


def test_fisher_rejects_small_budgets(mix, vp2):
    with pytest.raises(ConfigError):
        verify.fisher_check(mix, vp2, 0.5, 0.0, 999)


def test_ito_constant_integrand():
    res = verify.ito_isometry_check(lambda u: np.ones_like(u), (0.0, 1.0), 100_000, 256, rng=0)
    assert res.target_var == pytest.approx(1.0, abs=1e-12)
    assert res.z_score < 3.0
    assert abs(res.skewness) < 0.05 and abs(res.excess_kurtosis) < 0.1


def test_ito_noise_rate_integrand_targets_grid_increment():
    beta = 1.0
    grid = np.linspace(0.0, 1.0, 11)
    k = 5
    res = verify.ito_isometry_check(lambda u: np.sqrt(beta) * np.ones_like(u),
                                    (1.0 - grid[k], 1.0 - grid[k - 1]), 100_000, 256, rng=1)
    assert res.target_var == pytest.approx(grid[k] - grid[k - 1], rel=1e-10)
    assert res.z_score < 3.0


def test_ito_vp_linear_integrand_matches_integrated_rate():
    name, phi, interval = verify.ito_integrands()[-1]
    res = verify.ito_isometry_check(phi, interval, 100_000, 256, rng=2)
    sched = schedule.vp_linear()
    ds = schedule.discretize(sched, np.linspace(0, 1, 11))
    assert name == "sqrt-beta"
    assert res.target_var == pytest.approx(ds.h[5], rel=1e-9)
    assert res.z_score < 3.0


def test_ito_zero_integrand_is_exactly_zero():
    res = verify.ito_isometry_check(lambda u: np.zeros_like(u), (0.0, 1.0), 2000, 128, rng=0)
    assert res.sample_var == 0.0 and res.target_var == 0.0 and res.z_score == 0.0


def test_ito_rejects_coarse_substeps():
    with pytest.raises(ConfigError):
        verify.ito_isometry_check(lambda u: u, (0.0, 1.0), 1000, 127)


def test_ito_z_scores_over_twenty_seeds_stay_in_band():
    zs = [verify.ito_isometry_check(lambda u: np.sin(3 * u), (0.0, 1.0), 20_000, 128,
                                    rng=seed).z_score for seed in range(20)]
    assert sum(z > 3.0 for z in zs) <= 1


@pytest.mark.parametrize("label", ["zero", "half-ideal", "tanh"])
def test_orthogonality_balances(mix, vp2, label):
    models = dict(verify.orthogonality_models(mix, vp2, 0.5))
    res = verify.orthogonality_check(mix, vp2, 0.5, models[label], 100_000, rng=4)
    assert res.z_score < 3.0
    assert res.total == pytest.approx(res.model_gap + res.irreducible, rel=1e-2)


def test_orthogonality_ideal_model_has_no_gap(mix, vp2):
    res = verify.orthogonality_check(mix, vp2, 0.5, lambda x: oracle.ideal_noise(mix, vp2, 0.5, x),
                                     20_000, rng=5)
    assert res.model_gap == 0.0
    assert res.total == pytest.approx(res.irreducible, rel=1e-12)


# Discrete identities.

def test_ddim_matches_first_order_ode_step(mix, vp2):
    ds = schedule.discretize(vp2, 100)
    model = fields.oracle_noise_model(mix, vp2)
    gen = np.random.default_rng(0)
    worst = max(verify.ddim_ode_equivalence(ds, model, int(k), rng=gen, batch=8)
                for k in gen.integers(2, 101, size=100))
    assert worst < 1e-12


def test_ddim_ode_zero_model_both_scale_input(vp2):
    ds = schedule.discretize(vp2, 50)
    zero = FieldModel(lambda x, t, c=None: np.zeros_like(x), "noise", 1, "network")
    x = np.linspace(-2, 2, 9)[:, None]
    # Equal up to rounding: the two forms take the ratio of scales in different orders.
    assert verify.ddim_ode_equivalence(ds, zero, 20, x=x) <= 4 * np.finfo(float).eps
    out = verify.ode_first_order_step(ds, x, np.zeros_like(x), 20)
    assert np.allclose(out, ds.alpha(19) / ds.alpha(20) * x, rtol=0, atol=1e-15)


@given(st.integers(2, 100), st.integers(0, 2**32 - 1))
@settings(max_examples=40, deadline=None)
def test_ddim_ode_equivalence_property(k, seed):
    sched = schedule.vp_linear()
    mix = oracle.benchmark_mixture()
    ds = schedule.discretize(sched, 100)
    model = fields.oracle_noise_model(mix, sched)
    assert verify.ddim_ode_equivalence(ds, model, k, rng=seed, batch=4) < 1e-12


def test_ddim_ode_rejects_bad_index(mix, vp2):
    ds = schedule.discretize(vp2, 10)
    with pytest.raises(IndexError):
        verify.ddim_ode_equivalence(ds, fields.oracle_noise_model(mix, vp2), 11)


def test_expansion_table_excludes_first_step():
    ds = schedule.discretize(schedule.vp_constant(1.0), 100)
    table = verify.ddpm_expansion_check(ds)
    assert table.k[0] == 2 and table.k[-1] == 100
    assert ds.b_tilde[1] == 0.0 and ds.h[1] > 0


def test_expansion_interior_ratio_stays_bounded_under_refinement():
    worst = [verify.ddpm_expansion_check(
        schedule.discretize(schedule.vp_constant(1.0), n)).max_interior_ratio()
        for n in (100, 400, 1600)]
    assert max(worst) <= 2.0
    assert worst[1] / worst[0] <= 1.5 and worst[2] / worst[1] <= 1.5


# Suite runner.

def test_suite_fast_checks_pass():
    rows = verify.run_suite(["ddim-ode", "ddpm-expansion"])
    assert rows and all(r.passed for r in rows)


def test_suite_rejects_unknown_check():
    with pytest.raises(ConfigError):
        verify.run_suite(["continuity", "bogus"])
