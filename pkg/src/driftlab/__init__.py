"""Numerical laboratory for diffusion-model dynamics.

Modules:
    schedule: noise schedules, drift/diffusion coefficients, DDPM discretization.
    oracle: closed-form Gaussian-mixture marginals, scores and velocities.
    fields: parameterization conversions, guidance and reverse-time fields.
    samplers: Euler-Maruyama, Euler, Heun, DPM-Solver-1, DDPM and DDIM.
    training: MLP denoisers, losses with manual gradients, optimizer loop.
    verify: PDE residuals and Monte Carlo identity checks.
    embedlm: toy diffusion language model in a frozen embedding space.
    cli: the ``driftlab`` command-line runner.
"""

__version__ = "0.1.0"
