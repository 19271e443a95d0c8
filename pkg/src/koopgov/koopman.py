"""Deep Koopman model: learned lift, linear lifted dynamics, exact projection.

The lifted state is ``z = [x; encoder(x)]`` (3 + 12 = 15 entries), so the
projection back to the state is the first three entries with no error. One
prediction step is ``x_next = (A z + B u)[:3]``; the default rollout
re-lifts each predicted state before stepping again, and a pure lifted
rollout (lift once, iterate ``z``) is available for comparison.

All model-facing arrays are in normalized units (see ``NormalizationSpec``).
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .errors import DimensionMismatch, Diverged, FormatError
from .normalization import N_INPUT, N_STATE, NormalizationSpec

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
ENCODER_SIZES = (3, 128, 128, 128, 12)


@dataclass
class TrainConfig:
    seq_len: int = 20
    batch_size: int = 20
    lr: float = 1e-3
    gamma: float = 1.0
    epochs: int = 30
    seed: int = 0
    w_pred: float = 1.0
    w_recon: float = 1.0
    momentum: float = 0.0
    patience: int = 20
    encoder_sizes: tuple = ENCODER_SIZES
    # random windows drawn per epoch; None means every window every epoch
    windows_per_epoch: int | None = 10000
    # least-squares fit of A, B on the initial lift before descent starts
    warm_start: bool = True
    constant_feature: bool = True

    def __post_init__(self):
        self.encoder_sizes = tuple(int(s) for s in self.encoder_sizes)
        if self.seq_len < 1:
            raise ValueError("seq_len must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError("gamma must be in [0, 1]")
        if self.batch_size < 1 or self.epochs < 0 or self.lr <= 0:
            raise ValueError("batch_size >= 1, epochs >= 0 and lr > 0 required")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError("momentum must be in [0, 1)")
        if self.encoder_sizes[0] != N_STATE:
            raise ValueError("encoder input must be the 3-dim state")


@dataclass
class KoopmanModel:
    encoder: nn.DenseNet
    decoder: nn.DenseNet
    A: np.ndarray
    B: np.ndarray
    norm: NormalizationSpec | None = None
    train_meta: dict = field(default_factory=dict)

    def __post_init__(self):
        d = self.lifted_dim
        self.A = np.asarray(self.A, dtype=float)
        self.B = np.asarray(self.B, dtype=float)
        if self.A.shape != (d, d) or self.B.shape != (d, N_INPUT):
            raise DimensionMismatch(f"A {self.A.shape}, B {self.B.shape} do not fit lifted dim {d}")
        if self.decoder.input_dim != d or self.decoder.output_dim != N_STATE:
            raise DimensionMismatch("decoder must map the lifted vector to the state")

    n = N_STATE
    m = N_INPUT

    @property
    def lifted_dim(self) -> int:
        return N_STATE + self.encoder.output_dim

    def copy(self) -> "KoopmanModel":
        return KoopmanModel(self.encoder.copy(), self.decoder.copy(), self.A.copy(),
                            self.B.copy(), self.norm, dict(self.train_meta))

    def __eq__(self, other):
        return (isinstance(other, KoopmanModel)
                and self.encoder == other.encoder and self.decoder == other.decoder
                and np.array_equal(self.A, other.A) and np.array_equal(self.B, other.B)
                and self.norm == other.norm)


def init_model(encoder_sizes=ENCODER_SIZES, seed=0, norm=None, constant_feature=True) -> KoopmanModel:
    """Fresh model: Glorot encoder/decoder, ``A = I``, ``B = 0``.

    Starting from the identity keeps K-step rollouts bounded at the start of
    training (the initial predictor is persistence). With
    ``constant_feature`` the last encoder output starts as the constant 1
    (zero weights, unit bias): min-max scaling makes even a linear plant
    affine in normalized units, and the offset needs a constant observable.
    """
    rng = np.random.default_rng(seed)
    enc = nn.init(list(encoder_sizes), rng=rng)
    if constant_feature:
        enc.layers[-1].W[-1] = 0.0
        enc.layers[-1].b[-1] = 1.0
    d = N_STATE + encoder_sizes[-1]
    dec = nn.init([d] + list(encoder_sizes[-2:0:-1]) + [N_STATE], rng=rng)
    return KoopmanModel(enc, dec, np.eye(d), np.zeros((d, N_INPUT)), norm)


def warm_start(model: KoopmanModel, X, U, ridge=1e-6, chunk=8192) -> KoopmanModel:
    """Least-squares (EDMD-style) fit of ``A`` and ``B`` on one-step pairs.

    Uses the model's current encoder as the dictionary, so with a freshly
    initialized encoder this is a random-feature regression. Only the first
    transition of each window is used: with stride-1 windows that already
    covers the data without the K-fold overlap. The encoder and decoder are
    left untouched.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    d = model.lifted_dim
    GtG = np.zeros((d + N_INPUT, d + N_INPUT))
    GtY = np.zeros((d + N_INPUT, d))
    for s in range(0, len(X), chunk):
        G = np.hstack([lift(model, X[s:s + chunk, 0]), U[s:s + chunk, 0]])
        GtG += G.T @ G
        GtY += G.T @ lift(model, X[s:s + chunk, 1])
    M = np.linalg.solve(GtG + ridge * len(X) * np.eye(len(GtG)), GtY).T
    out = model.copy()
    out.A = M[:, :d].copy()
    out.B = M[:, d:].copy()
    return out


def lift(model: KoopmanModel, x):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != N_STATE:
        raise DimensionMismatch(f"state must have {N_STATE} entries, got {x.shape}")
    return np.concatenate([x, nn.forward(model.encoder, x)], axis=-1)


def project(z):
    z = np.asarray(z, dtype=float)
    if z.ndim == 0 or z.shape[-1] <= N_STATE:
        raise DimensionMismatch(f"lifted vector too short: {z.shape}")
    return z[..., :N_STATE].copy()


def step_lifted(model: KoopmanModel, z, u):
    z = np.asarray(z, dtype=float)
    u = np.asarray(u, dtype=float)
    if z.shape[-1] != model.lifted_dim or u.shape[-1] != N_INPUT:
        raise DimensionMismatch(f"z {z.shape} / u {u.shape} do not match the model")
    return z @ model.A.T + u @ model.B.T


def predict_multistep(model: KoopmanModel, x0, u_seq, mode: str = "relift"):
    """Roll the model forward over ``u_seq`` (shape ``(K, 2)`` or ``(N, K, 2)``).

    Returns the K predicted states. ``mode="relift"`` re-encodes each projected
    prediction; ``mode="lifted"`` lifts ``x0`` once and propagates ``z``.
    """
    u_seq = np.asarray(u_seq, dtype=float)
    z = lift(model, x0)
    out = []
    for i in range(u_seq.shape[-2]):
        z = step_lifted(model, z, u_seq[..., i, :])
        out.append(project(z))
        if mode == "relift":
            z = lift(model, out[-1])
        elif mode != "lifted":
            raise ValueError(f"unknown rollout mode {mode!r}")
    return np.stack(out, axis=-2)


def _weights(gamma, K):
    # 0**0 == 1 so gamma = 0 keeps only the first step.
    return np.array([gamma ** i for i in range(K)])


def loss_prediction(model, X, U, gamma=1.0, K=None):
    """Decay-weighted K-step prediction loss, averaged over the batch.

    ``X`` is ``(N, K+1, 3)`` true states, ``U`` is ``(N, >=K, 2)`` inputs.
    """
    X = np.asarray(X, dtype=float)
    K = X.shape[1] - 1 if K is None else K
    pred = predict_multistep(model, X[:, 0], U[:, :K])
    err = ((X[:, 1:K + 1] - pred) ** 2).sum(axis=2)
    return float((err * _weights(gamma, K)).sum(axis=1).mean())


def loss_reconstruction(model, X, gamma=1.0, K=None):
    """Autoencoder loss: decoder(lift(x_i)) against x_i for i = 1..K."""
    X = np.asarray(X, dtype=float)
    K = X.shape[1] - 1 if K is None else K
    S = X[:, 1:K + 1]
    rec = nn.forward(model.decoder, lift(model, S))
    err = ((S - rec) ** 2).sum(axis=2)
    return float((err * _weights(gamma, K)).sum(axis=1).mean())


@dataclass
class Grads:
    encoder: list
    decoder: list
    A: np.ndarray
    B: np.ndarray


def loss_and_grads(model: KoopmanModel, X, U, gamma=1.0, w_pred=1.0, w_recon=1.0):
    """Total loss ``w_pred*L1 + w_recon*L2`` and its exact gradient.

    Returns ``(L, L1, L2, Grads)``. Backpropagates through the re-lifting
    rollout, including the path from each prediction into the next encoder call.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    N, K = X.shape[0], X.shape[1] - 1
    enc, A, B = model.encoder, model.A, model.B
    A3, B3 = A[:N_STATE], B[:N_STATE]
    w = _weights(gamma, K)

    zs, caches, preds = [], [], []
    xh = X[:, 0]
    for i in range(K):
        e, c = nn.forward_cached(enc, xh)
        z = np.concatenate([xh, e], axis=1)
        xh = z @ A3.T + U[:, i] @ B3.T
        zs.append(z)
        caches.append(c)
        preds.append(xh)

    g_enc = nn.zero_grads(enc)
    dA = np.zeros_like(A)
    dB = np.zeros_like(B)
    L1 = 0.0
    g_next = np.zeros((N, N_STATE))
    for i in range(K - 1, -1, -1):
        r = preds[i] - X[:, i + 1]
        L1 += w[i] * float((r * r).sum()) / N
        g = w_pred * 2.0 * w[i] / N * r + g_next
        dA[:N_STATE] += g.T @ zs[i]
        dB[:N_STATE] += g.T @ U[:, i]
        gz = g @ A3
        ge, gx = nn.backward_cached(enc, caches[i], gz[:, N_STATE:])
        nn.add_grads(g_enc, ge)
        g_next = gz[:, :N_STATE] + gx

    S = X[:, 1:].reshape(-1, N_STATE)
    ws = np.tile(w, N)[:, None]
    e, ce = nn.forward_cached(enc, S)
    zS = np.concatenate([S, e], axis=1)
    y, cd = nn.forward_cached(model.decoder, zS)
    r = y - S
    L2 = float((ws * r * r).sum()) / N
    g_dec, gz = nn.backward_cached(model.decoder, cd, w_recon * 2.0 * ws * r / N)
    ge, _ = nn.backward_cached(enc, ce, gz[:, N_STATE:])
    nn.add_grads(g_enc, ge)

    L = w_pred * L1 + w_recon * L2
    return L, L1, L2, Grads(g_enc, g_dec, dA, dB)


def _apply(model: KoopmanModel, g: Grads, lr, velocity=None, momentum=0.0):
    if momentum:
        for key in ("encoder", "decoder"):
            for (vW, vb), (gW, gb) in zip(velocity[key], getattr(g, key)):
                vW *= momentum
                vW += gW
                if vb is not None:
                    vb *= momentum
                    vb += gb
        for key in ("A", "B"):
            velocity[key] *= momentum
            velocity[key] += getattr(g, key)
        g = Grads(velocity["encoder"], velocity["decoder"], velocity["A"], velocity["B"])
    nn.sgd_step_(model.encoder, g.encoder, lr)
    nn.sgd_step_(model.decoder, g.decoder, lr)
    model.A -= lr * g.A
    model.B -= lr * g.B


def evaluate_losses(model, X, U, gamma=1.0, chunk=4096):
    """(L1, L2) over a whole window set, batch-averaged."""
    X = np.asarray(X, dtype=float)
    if len(X) == 0:
        return float("nan"), float("nan")
    l1 = l2 = 0.0
    for s in range(0, len(X), chunk):
        xs, us = X[s:s + chunk], U[s:s + chunk]
        l1 += loss_prediction(model, xs, us, gamma) * len(xs)
        l2 += loss_reconstruction(model, xs, gamma) * len(xs)
    return l1 / len(X), l2 / len(X)


def initial_model(train_windows, config: TrainConfig, norm=None) -> KoopmanModel:
    """The parameters ``train`` starts from (and returns when ``epochs == 0``)."""
    model = init_model(config.encoder_sizes, config.seed, norm, config.constant_feature)
    if config.warm_start and len(train_windows[0]):
        model = warm_start(model, *train_windows)
    return model


def train(train_windows, val_windows, config: TrainConfig, norm=None, model=None,
          on_epoch=None) -> KoopmanModel:
    """Minibatch steepest descent on ``L = L1 + L2`` with early stopping.

    ``train_windows`` / ``val_windows`` are ``(X, U)`` pairs of normalized
    windows, ``X: (N, K+1, 3)`` and ``U: (N, K+1, 2)``. Returns the parameters
    with the best validation L1 (or the last epoch if there is no validation
    set). ``on_epoch(row)`` receives a dict per epoch.
    """
    Xtr, Utr = (np.asarray(a, dtype=float) for a in train_windows)
    K = config.seq_len
    if Xtr.shape[1] != K + 1:
        raise DimensionMismatch(f"windows hold {Xtr.shape[1]} samples, seq_len={K} needs {K + 1}")
    has_val = val_windows is not None and len(val_windows[0]) > 0
    if has_val:
        Xva, Uva = (np.asarray(a, dtype=float) for a in val_windows)

    model = initial_model(train_windows, config, norm) if model is None else model.copy()
    if norm is not None:
        model.norm = norm
    # descent runs on the loss averaged over prediction steps
    lr = config.lr / float(_weights(config.gamma, K).sum())
    rng = np.random.default_rng(config.seed + 1)
    velocity = None
    if config.momentum:
        velocity = {"encoder": nn.zero_grads(model.encoder), "decoder": nn.zero_grads(model.decoder),
                    "A": np.zeros_like(model.A), "B": np.zeros_like(model.B)}

    best, best_val, since_best = model.copy(), math.inf, 0
    history = []
    for epoch in range(config.epochs):
        order = rng.permutation(len(Xtr))
        if config.windows_per_epoch is not None:
            order = order[:config.windows_per_epoch]
        tot = tot1 = tot2 = 0.0
        nb = 0
        for s in range(0, len(order), config.batch_size):
            idx = order[s:s + config.batch_size]
            L, L1, L2, g = loss_and_grads(model, Xtr[idx], Utr[idx], config.gamma,
                                          config.w_pred, config.w_recon)
            if not math.isfinite(L):
                raise Diverged(f"loss became {L} at epoch {epoch}; lower the learning rate (lr={config.lr})")
            _apply(model, g, lr, velocity, config.momentum)
            tot, tot1, tot2, nb = tot + L, tot1 + L1, tot2 + L2, nb + 1
        row = {"epoch": epoch + 1, "L": tot / max(nb, 1), "L1": tot1 / max(nb, 1), "L2": tot2 / max(nb, 1)}
        if has_val:
            row["val_L1"] = evaluate_losses(model, Xva, Uva, config.gamma)[0]
            if not math.isfinite(row["val_L1"]):
                raise Diverged(f"validation loss became non-finite at epoch {epoch + 1}")
        else:
            row["val_L1"] = float("nan")
        history.append(row)
        log.info("epoch %d  L=%.6g  L1=%.6g  L2=%.6g  val_L1=%.6g",
                 row["epoch"], row["L"], row["L1"], row["L2"], row["val_L1"])
        if on_epoch is not None:
            on_epoch(row)
        if has_val:
            if row["val_L1"] < best_val:
                best, best_val, since_best = model.copy(), row["val_L1"], 0
            else:
                since_best += 1
                if since_best >= config.patience:
                    log.info("early stop at epoch %d", epoch + 1)
                    break
        else:
            best = model.copy()

    best.train_meta = {
        "seed": config.seed,
        "epochs": len(history),
        "final_losses": history[-1] if history else {},
        "best_val_L1": None if best_val == math.inf else best_val,
        "history": history,
    }
    return best


def to_dict(model: KoopmanModel) -> dict:
    meta = {k: v for k, v in model.train_meta.items() if k != "history"}
    return {
        "format_version": FORMAT_VERSION,
        "n": N_STATE,
        "m": N_INPUT,
        "lifted_dim": model.lifted_dim,
        "encoder": nn.to_dict(model.encoder),
        "decoder": nn.to_dict(model.decoder),
        "A": model.A.tolist(),
        "B": model.B.tolist(),
        "norm": None if model.norm is None else model.norm.to_dict(),
        "train_meta": meta,
    }


def save(model: KoopmanModel, path, extra: dict | None = None) -> None:
    d = to_dict(model)
    if extra:
        d.update(extra)
    Path(path).write_text(json.dumps(d, indent=1, sort_keys=True) + "\n")


def _array(d, key, shape):
    try:
        a = np.array(d[key], dtype=float)
    except (KeyError, ValueError, TypeError) as exc:
        raise FormatError(f"field {key!r} missing or not numeric") from exc
    if a.shape != shape:
        raise FormatError(f"{key} has shape {a.shape}, expected {shape}")
    return a


def from_dict(d: dict) -> KoopmanModel:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported model format_version {version!r} (reader supports {FORMAT_VERSION})")
    if d.get("n") != N_STATE or d.get("m") != N_INPUT:
        raise FormatError(f"model has n={d.get('n')}, m={d.get('m')}; expected {N_STATE}, {N_INPUT}")
    dim = d.get("lifted_dim")
    if not isinstance(dim, int) or dim <= N_STATE:
        raise FormatError(f"bad lifted_dim {dim!r}")
    try:
        enc = nn.from_dict(d["encoder"])
        dec = nn.from_dict(d["decoder"])
    except (KeyError, ValueError, TypeError, DimensionMismatch) as exc:
        raise FormatError(f"bad network block: {exc}") from exc
    if enc.input_dim != N_STATE or N_STATE + enc.output_dim != dim:
        raise FormatError("encoder shape does not match lifted_dim")
    A = _array(d, "A", (dim, dim))
    B = _array(d, "B", (dim, N_INPUT))
    norm = None if d.get("norm") is None else NormalizationSpec.from_dict(d["norm"])
    try:
        return KoopmanModel(enc, dec, A, B, norm, dict(d.get("train_meta") or {}))
    except DimensionMismatch as exc:
        raise FormatError(str(exc)) from exc


def load(path) -> KoopmanModel:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{path}: not a JSON document ({exc})") from exc
    return from_dict(d)
