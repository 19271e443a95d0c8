"""Comparison predictors and the shared one-step RMSE evaluator.

Two baselines stand next to the Koopman model:

* a physics predictor, which is the plant itself run with perturbed mass and/or
  friction (with zero perturbation it is a perfect oracle);
* a direct MLP regressor from ``[x; u]`` (normalized) to the next normalized state.

Every predictor is wrapped in a ``PredictorHandle`` exposing
``predict(states, inputs) -> next_states`` in physical units, so one evaluator
serves all of them.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import koopman as km
from . import nn
from . import plant
from .errors import DimensionMismatch, Diverged, EmptyTestSet
from .normalization import N_INPUT, N_STATE, NormalizationSpec

log = logging.getLogger(__name__)

MLP_SIZES = (N_STATE + N_INPUT, 128, 128, 128, N_STATE)
KINDS = ("physics_perturbed", "mlp", "koopman")


def perturbed_params(params: plant.VehicleParams, delta_mass: float = 0.0,
                     delta_mu: float = 0.0) -> plant.VehicleParams:
    """Nominal parameters with mass and friction shifted (validated by VehicleParams)."""
    return params.with_(mass=params.mass + delta_mass, friction=params.friction + delta_mu)


def physics_predict(x, u, params: plant.VehicleParams, dt: float = plant.CONTROL_DT):
    """One control step of the plant under ``params`` (already perturbed)."""
    return plant.step(x, u, params, dt)


@dataclass
class MLPConfig:
    sizes: tuple = MLP_SIZES
    batch_size: int = 50
    lr: float = 0.01
    epochs: int = 30
    seed: int = 0

    def __post_init__(self):
        self.sizes = tuple(int(s) for s in self.sizes)
        if self.sizes[0] != N_STATE + N_INPUT or self.sizes[-1] != N_STATE:
            raise ValueError(f"MLP must map {N_STATE + N_INPUT} inputs to {N_STATE} outputs")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")


def one_step_pairs(trajectories, norm: NormalizationSpec):
    """Normalized ``([x_k; u_k], x_{k+1})`` pairs from every trajectory."""
    ins, outs = [], []
    for tr in trajectories:
        xs = norm.normalize_state(tr.states)
        us = norm.normalize_input(tr.inputs)
        ins.append(np.hstack([xs[:-1], us[:-1]]))
        outs.append(xs[1:])
    if not ins:
        return np.zeros((0, N_STATE + N_INPUT)), np.zeros((0, N_STATE))
    return np.vstack(ins), np.vstack(outs)


def mlp_loss(net: nn.DenseNet, inputs, targets) -> float:
    r = nn.forward(net, inputs) - targets
    return float((r * r).sum(axis=1).mean())


def train_mlp(inputs, targets, config: MLPConfig | None = None, on_epoch=None) -> nn.DenseNet:
    """Minibatch steepest descent on the mean one-step squared error."""
    config = config or MLPConfig()
    inputs = np.asarray(inputs, dtype=float)
    targets = np.asarray(targets, dtype=float)
    rng = np.random.default_rng(config.seed)
    net = nn.init(list(config.sizes), rng=rng)
    for epoch in range(config.epochs):
        order = rng.permutation(len(inputs))
        total, nb = 0.0, 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            y, cache = nn.forward_cached(net, inputs[idx])
            r = y - targets[idx]
            loss = float((r * r).sum(axis=1).mean())
            if not math.isfinite(loss):
                raise Diverged(f"MLP loss became {loss} at epoch {epoch + 1}")
            grads, _ = nn.backward_cached(net, cache, 2.0 * r / len(idx))
            nn.sgd_step_(net, grads, config.lr)
            total, nb = total + loss, nb + 1
        log.info("mlp epoch %d  loss=%.6g", epoch + 1, total / max(nb, 1))
        if on_epoch is not None:
            on_epoch({"epoch": epoch + 1, "loss": total / max(nb, 1)})
    return net


def mlp_predict(net: nn.DenseNet, x, u):
    """Next normalized state from normalized ``x`` (..., 3) and ``u`` (..., 2)."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if x.shape[-1] != N_STATE or u.shape[-1] != N_INPUT:
        raise DimensionMismatch(f"x {x.shape} / u {u.shape}: expected trailing dims 3 and 2")
    return nn.forward(net, np.concatenate([x, u], axis=-1))


@dataclass
class PredictorHandle:
    kind: str
    name: str = ""
    params: plant.VehicleParams | None = None
    net: nn.DenseNet | None = None
    model: km.KoopmanModel | None = None
    norm: NormalizationSpec | None = None
    perturbation: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown predictor kind {self.kind!r}")
        if self.kind == "physics_perturbed" and self.params is None:
            raise ValueError("physics predictor needs params")
        if self.kind == "mlp" and (self.net is None or self.norm is None):
            raise ValueError("mlp predictor needs a network and its normalization")
        if self.kind == "koopman":
            if self.model is None or self.model.norm is None:
                raise ValueError("koopman predictor needs a model with stored normalization")
            self.norm = self.model.norm
        self.name = self.name or self.kind

    @classmethod
    def physics(cls, params: plant.VehicleParams, delta_mass=0.0, delta_mu=0.0, name=None):
        p = perturbed_params(params, delta_mass, delta_mu)
        label = name or f"physics(dm={delta_mass:+g},dmu={delta_mu:+g})"
        return cls("physics_perturbed", label, params=p,
                   perturbation={"delta_mass": delta_mass, "delta_mu": delta_mu})

    def predict(self, states, inputs, mu: float | None = None):
        """Physical next states for ``(N, 3)`` states and ``(N, 2)`` inputs.

        ``mu`` is the road friction of the trajectory; only the physics
        predictor uses it (plus its own friction offset).
        """
        states = np.atleast_2d(np.asarray(states, dtype=float))
        inputs = np.atleast_2d(np.asarray(inputs, dtype=float))
        if self.kind == "physics_perturbed":
            params = self.params
            if mu is not None:
                params = params.with_(friction=min(1.0, mu + self.perturbation.get("delta_mu", 0.0)))
            return np.array([plant.step(x, u, params) for x, u in zip(states, inputs)])
        xn = self.norm.normalize_state(states)
        un = self.norm.normalize_input(inputs)
        if self.kind == "mlp":
            yn = mlp_predict(self.net, xn, un)
        else:
            yn = km.step_lifted(self.model, km.lift(self.model, xn), un)[:, :N_STATE]
        return self.norm.denormalize_state(yn)


def one_step_errors(predictor: PredictorHandle, trajectories) -> np.ndarray:
    """Stacked ``prediction - truth`` over every consecutive pair."""
    errs = [predictor.predict(tr.states[:-1], tr.inputs[:-1], tr.mu) - tr.states[1:]
            for tr in trajectories if len(tr) > 1]
    if not errs:
        raise EmptyTestSet("no consecutive sample pairs in the test trajectories")
    return np.vstack(errs)


def evaluate_one_step_rmse(predictor: PredictorHandle, trajectories) -> np.ndarray:
    """Per-channel RMSE (m/s, m/s, rad/s) of one-step predictions from true states."""
    e = one_step_errors(predictor, trajectories)
    return np.sqrt((e * e).mean(axis=0))


def held_out_std(trajectories) -> np.ndarray:
    """Per-channel standard deviation of the predicted targets (states 1..end)."""
    ys = [tr.states[1:] for tr in trajectories if len(tr) > 1]
    if not ys:
        raise EmptyTestSet("empty test set")
    return np.vstack(ys).std(axis=0)


def evaluation_report(predictors, trajectories, provenance: dict | None = None) -> dict:
    rows = []
    for p in predictors:
        r = evaluate_one_step_rmse(p, trajectories)
        rows.append({"name": p.name, "kind": p.kind, "perturbation": p.perturbation,
                     "rmse": {"v_x": float(r[0]), "v_y": float(r[1]), "omega_r": float(r[2])}})
    std = held_out_std(trajectories)
    return {
        "provenance": dict(provenance or {}),
        "n_test_trajectories": len(trajectories),
        "test_std": {"v_x": float(std[0]), "v_y": float(std[1]), "omega_r": float(std[2])},
        "predictors": rows,
    }


def write_report(report: dict, path) -> None:
    Path(path).write_text(json.dumps(report, indent=1, sort_keys=True) + "\n")
