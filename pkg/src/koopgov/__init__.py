"""Deep Koopman vehicle model with a CBF torque governor.

Modules: ``plant`` (ground-truth simulator), ``nn`` (dense networks with
reverse mode), ``koopman`` (lifted linear model and training), ``data``
(scenario corpus), ``governor`` (safe set and QP), ``baselines``
(comparison predictors) and ``cli`` (command-line harness).
"""
__version__ = "0.1.0"
