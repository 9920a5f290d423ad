"""Residual-encoder regression network trained with ADAM, from scratch.

Maps flattened polarization-channel measurements to optical properties.
The encoder is a dense projection followed by width-preserving residual
blocks h <- h + W2 tanh(W1 h + b1) + b2 and a latent projection; a small
dense head reads the property estimate out of the latent code.  tanh is
used everywhere except the final linear layer (smooth, bounded
derivative).  All arithmetic is float64 numpy and fully deterministic for
a given seed.

The optimizer is bias-corrected ADAM with a step-annealed learning rate:
after every 500 optimizer steps the rate is multiplied by the anneal
factor (0.5 by default), i.e. lr(t) = base * factor^floor(t / 500) with t
the 1-based step index.

An optional variational mode replaces the latent projection by mean /
log-variance heads with reparametrized sampling and a KL penalty; it is
off by default and the plain deterministic encoder is the reference path.

Model file POLN (little endian): magic "POLN", version u32, u32-length
JSON descriptor, normalization mean and scale f64 arrays, parameter
vector f64.
"""

from __future__ import annotations

import json
import math
import os
import struct
from dataclasses import dataclass, field

import numpy as np

POLN_MAGIC = b"POLN"
POLN_VERSION = 1

ANNEAL_EVERY = 500
ANNEAL_FACTOR = 0.5
DIVERGENCE_LIMIT = 1e6


class TrainingDiverged(RuntimeError):
    pass


def _dense_init(rng, n_in, n_out):
    return rng.normal(0.0, 1.0 / math.sqrt(n_in), size=(n_in, n_out))


class Network:
    """Dense residual encoder with a regression head.

    Parameters live in named arrays with a flat-vector view for the
    optimizer and for finite-difference checks.
    """

    def __init__(self, n_features, n_targets, width=64, n_blocks=3,
                 latent=16, variational=False, kl_weight=1e-3, seed=0,
                 target_names=None):
        self.n_features = int(n_features)
        self.n_targets = int(n_targets)
        self.width = int(width)
        self.n_blocks = int(n_blocks)
        self.latent = int(latent)
        self.variational = bool(variational)
        self.kl_weight = float(kl_weight)
        self.target_names = tuple(target_names) if target_names else \
            tuple(f"target_{i}" for i in range(self.n_targets))

        rng = np.random.default_rng(seed)
        self.arrays = {}
        self._order = []

        def add(name, arr):
            self.arrays[name] = arr
            self._order.append(name)

        add("w_in", _dense_init(rng, self.n_features, self.width))
        add("b_in", np.zeros(self.width))
        for i in range(self.n_blocks):
            add(f"blk{i}_w1", _dense_init(rng, self.width, self.width))
            add(f"blk{i}_b1", np.zeros(self.width))
            add(f"blk{i}_w2", _dense_init(rng, self.width, self.width))
            add(f"blk{i}_b2", np.zeros(self.width))
        lat_out = 2 * self.latent if self.variational else self.latent
        add("w_lat", _dense_init(rng, self.width, lat_out))
        add("b_lat", np.zeros(lat_out))
        add("w_head", _dense_init(rng, self.latent, self.latent))
        add("b_head", np.zeros(self.latent))
        add("w_out", _dense_init(rng, self.latent, self.n_targets))
        add("b_out", np.zeros(self.n_targets))

    @property
    def n_params(self):
        return sum(a.size for a in self.arrays.values())

    def params_vector(self):
        return np.concatenate([self.arrays[k].ravel() for k in self._order])

    def set_params_vector(self, vec):
        vec = np.asarray(vec, dtype=np.float64)
        if vec.shape != (self.n_params,):
            raise ValueError("parameter vector length mismatch")
        off = 0
        for k in self._order:
            a = self.arrays[k]
            a[...] = vec[off:off + a.size].reshape(a.shape)
            off += a.size

    def descriptor(self):
        return {
            "n_features": self.n_features,
            "n_targets": self.n_targets,
            "width": self.width,
            "n_blocks": self.n_blocks,
            "latent": self.latent,
            "variational": self.variational,
            "kl_weight": self.kl_weight,
            "target_names": list(self.target_names),
        }

    @classmethod
    def from_descriptor(cls, d, seed=0):
        return cls(d["n_features"], d["n_targets"], width=d["width"],
                   n_blocks=d["n_blocks"], latent=d["latent"],
                   variational=d["variational"], kl_weight=d["kl_weight"],
                   seed=seed, target_names=d["target_names"])

    # -- forward / backward ------------------------------------------------

    def _forward_cached(self, x, noise=None):
        a = self.arrays
        cache = {"x": x}
        pre_in = x @ a["w_in"] + a["b_in"]
        h = np.tanh(pre_in)
        cache["t_in"] = h
        for i in range(self.n_blocks):
            pre1 = h @ a[f"blk{i}_w1"] + a[f"blk{i}_b1"]
            t1 = np.tanh(pre1)
            h_next = h + t1 @ a[f"blk{i}_w2"] + a[f"blk{i}_b2"]
            cache[f"blk{i}_h"] = h
            cache[f"blk{i}_t1"] = t1
            h = h_next
        cache["h_enc"] = h
        pre_lat = h @ a["w_lat"] + a["b_lat"]
        if self.variational:
            mu = pre_lat[:, :self.latent]
            logvar = pre_lat[:, self.latent:]
            if noise is None:
                noise = np.zeros_like(mu)
            std = np.exp(0.5 * logvar)
            z_lin = mu + std * noise
            cache["mu"] = mu
            cache["logvar"] = logvar
            cache["std"] = std
            cache["noise"] = noise
        else:
            z_lin = pre_lat
        z = np.tanh(z_lin)
        cache["z_lin"] = z_lin
        cache["z"] = z
        u = np.tanh(z @ a["w_head"] + a["b_head"])
        cache["u"] = u
        y = u @ a["w_out"] + a["b_out"]
        cache["y"] = y
        return y, cache

    def forward(self, x, noise=None):
        """Prediction for a single feature vector or a batch."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.shape[1] != self.n_features:
            raise ValueError(
                f"expected {self.n_features} features, got {x.shape[1]}")
        y, _ = self._forward_cached(x, noise)
        return y[0] if single else y

    def loss_and_grad(self, x, t, noise=None):
        """Mean-squared-error loss and its exact parameter gradient."""
        x = np.asarray(x, dtype=np.float64)
        t = np.asarray(t, dtype=np.float64)
        if x.ndim != 2 or t.ndim != 2 or x.shape[0] != t.shape[0]:
            raise ValueError("batch must be 2D with matching sample counts")
        a = self.arrays
        y, c = self._forward_cached(x, noise)
        b = x.shape[0]
        resid = y - t
        loss = float(np.mean(resid ** 2))

        grads = {k: np.zeros_like(v) for k, v in a.items()}
        dy = 2.0 * resid / resid.size

        grads["w_out"] = c["u"].T @ dy
        grads["b_out"] = dy.sum(axis=0)
        du = dy @ a["w_out"].T
        dpre_head = du * (1.0 - c["u"] ** 2)
        grads["w_head"] = c["z"].T @ dpre_head
        grads["b_head"] = dpre_head.sum(axis=0)
        dz = dpre_head @ a["w_head"].T
        dz_lin = dz * (1.0 - c["z"] ** 2)

        if self.variational:
            dmu = dz_lin.copy()
            dlogvar = dz_lin * c["noise"] * c["std"] * 0.5
            if self.kl_weight != 0.0:
                # KL(q || N(0,1)) averaged over batch and latent dims.
                n_el = c["mu"].size
                loss += self.kl_weight * float(
                    -0.5 * np.mean(1.0 + c["logvar"] - c["mu"] ** 2
                                   - np.exp(c["logvar"])))
                dmu += self.kl_weight * c["mu"] / n_el
                dlogvar += self.kl_weight * 0.5 * (np.exp(c["logvar"]) - 1.0) / n_el
            dpre_lat = np.concatenate([dmu, dlogvar], axis=1)
        else:
            dpre_lat = dz_lin
        grads["w_lat"] = c["h_enc"].T @ dpre_lat
        grads["b_lat"] = dpre_lat.sum(axis=0)
        dh = dpre_lat @ a["w_lat"].T

        for i in range(self.n_blocks - 1, -1, -1):
            t1 = c[f"blk{i}_t1"]
            h_in = c[f"blk{i}_h"]
            grads[f"blk{i}_w2"] = t1.T @ dh
            grads[f"blk{i}_b2"] = dh.sum(axis=0)
            dt1 = dh @ a[f"blk{i}_w2"].T
            dpre1 = dt1 * (1.0 - t1 ** 2)
            grads[f"blk{i}_w1"] = h_in.T @ dpre1
            grads[f"blk{i}_b1"] = dpre1.sum(axis=0)
            dh = dh + dpre1 @ a[f"blk{i}_w1"].T

        dpre_in = dh * (1.0 - c["t_in"] ** 2)
        grads["w_in"] = x.T @ dpre_in
        grads["b_in"] = dpre_in.sum(axis=0)

        flat = np.concatenate([grads[k].ravel() for k in self._order])
        return loss, flat


def l2_loss(y_pred, y_true) -> float:
    """Mean squared error over all elements."""
    y_pred = np.asarray(y_pred, dtype=np.float64)
    y_true = np.asarray(y_true, dtype=np.float64)
    if y_pred.shape != y_true.shape:
        raise ValueError("shape mismatch")
    return float(np.mean((y_pred - y_true) ** 2))


def backward(net: Network, batch):
    """Exact gradient of the mean L2 loss over a (features, targets) batch."""
    x, t = batch
    _, grad = net.loss_and_grad(np.atleast_2d(x), np.atleast_2d(t))
    return grad


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    step_count: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    base_lr: float = 1e-3
    anneal_every: int = ANNEAL_EVERY
    anneal_factor: float = ANNEAL_FACTOR

    @classmethod
    def fresh(cls, n_params, **kw):
        return cls(m=np.zeros(n_params), v=np.zeros(n_params), **kw)


def learning_rate(state: AdamState, step: int = None) -> float:
    """Annealed rate for a 1-based step index (defaults to the next step)."""
    t = state.step_count + 1 if step is None else step
    return state.base_lr * state.anneal_factor ** (t // state.anneal_every)


def adam_step(params, grads, state: AdamState):
    """One bias-corrected ADAM update; returns the new parameter vector."""
    g = np.asarray(grads, dtype=np.float64)
    p = np.asarray(params, dtype=np.float64)
    if g.shape != p.shape or g.shape != state.m.shape:
        raise ValueError("parameter/gradient/state length mismatch")
    state.step_count += 1
    t = state.step_count
    lr = state.base_lr * state.anneal_factor ** (t // state.anneal_every)
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * g
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * g * g
    m_hat = state.m / (1.0 - state.beta1 ** t)
    v_hat = state.v / (1.0 - state.beta2 ** t)
    return p - lr * m_hat / (np.sqrt(v_hat) + state.epsilon)


@dataclass
class TrainResult:
    train_curve: list
    val_curve: list
    best_params: np.ndarray
    best_val: float
    final_params: np.ndarray = field(repr=False, default=None)


def _as_xy(ds):
    if hasattr(ds, "feature_matrix"):
        return ds.feature_matrix(), ds.target_matrix()
    x, y = ds
    return np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)


def train(net: Network, train_set, test_set, steps=3000, batch_size=32,
          seed=0, base_lr=1e-3, val_every=50, anneal_every=ANNEAL_EVERY,
          anneal_factor=ANNEAL_FACTOR, epochs=None) -> TrainResult:
    """Mini-batch ADAM training; records train/validation loss curves.

    Batches come from a seeded shuffle each epoch, validation is evaluated
    every ``val_every`` steps and at the start and end, and the returned
    best parameters are the checkpoint with the lowest validation loss.
    ``epochs`` may be given instead of ``steps`` (one epoch = ceil(N /
    batch) optimizer steps).  Raises TrainingDiverged on non-finite or
    runaway loss.
    """
    x_tr, y_tr = _as_xy(train_set)
    x_te, y_te = _as_xy(test_set)
    if x_tr.shape[0] == 0 or x_te.shape[0] == 0:
        raise ValueError("training and test sets must be nonempty")
    if epochs is not None:
        steps = int(epochs) * max(1, math.ceil(x_tr.shape[0] / batch_size))
    rng = np.random.default_rng(seed)
    state = AdamState.fresh(net.n_params, base_lr=base_lr,
                            anneal_every=anneal_every,
                            anneal_factor=anneal_factor)
    params = net.params_vector()

    def val_loss():
        noise = None
        if net.variational:
            noise = np.zeros((x_te.shape[0], net.latent))
        return l2_loss(net.forward(x_te, noise=noise), y_te)

    train_curve = []
    val_curve = [(0, val_loss())]
    best_val = val_curve[0][1]
    best_params = params.copy()

    n = x_tr.shape[0]
    order = rng.permutation(n)
    pos = 0
    for step in range(1, steps + 1):
        if pos + batch_size > n:
            order = rng.permutation(n)
            pos = 0
        idx = order[pos:pos + min(batch_size, n)]
        pos += batch_size
        noise = None
        if net.variational:
            noise = rng.standard_normal((idx.size, net.latent))
        loss, grad = net.loss_and_grad(x_tr[idx], y_tr[idx], noise=noise)
        if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
            raise TrainingDiverged(
                f"loss {loss} at step {step} (lr {learning_rate(state):.3g})")
        params = adam_step(params, grad, state)
        net.set_params_vector(params)
        train_curve.append((step, loss))
        if step % val_every == 0 or step == steps:
            v = val_loss()
            if not math.isfinite(v) or v > DIVERGENCE_LIMIT:
                raise TrainingDiverged(f"validation loss {v} at step {step}")
            val_curve.append((step, v))
            if v < best_val:
                best_val = v
                best_params = params.copy()
    return TrainResult(train_curve=train_curve, val_curve=val_curve,
                       best_params=best_params, best_val=best_val,
                       final_params=params)


def infer(net: Network, norm_params, grid, launched_weight,
          feature_shape=(16, 16)) -> dict:
    """Property estimate from a raw measurement grid.

    Extracts features exactly as the dataset builder does, applies the
    stored normalization, and evaluates the network.  Rejects grids whose
    feature geometry differs from the training features.
    """
    from . import dataset as ds_mod

    feats = ds_mod.extract_features(grid, launched_weight, feature_shape)
    if feats.shape[0] != net.n_features:
        raise ValueError(
            f"feature length {feats.shape[0]} does not match the trained "
            f"network ({net.n_features}); grid geometry mismatch")
    feats = (feats - norm_params.mean) * norm_params.scale
    noise = np.zeros((1, net.latent)) if net.variational else None
    y = net.forward(feats[None, :], noise=noise)[0]
    return {name: float(v) for name, v in zip(net.target_names, y)}


def write_poln(net: Network, norm_params, path) -> None:
    desc = json.dumps(net.descriptor()).encode()
    buf = bytearray()
    buf += struct.pack("<4sII", POLN_MAGIC, POLN_VERSION, len(desc))
    buf += desc
    buf += struct.pack("<I", norm_params.mean.shape[0])
    buf += np.asarray(norm_params.mean, dtype="<f8").tobytes()
    buf += np.asarray(norm_params.scale, dtype="<f8").tobytes()
    params = net.params_vector()
    buf += struct.pack("<I", params.shape[0])
    buf += np.asarray(params, dtype="<f8").tobytes()
    tmp = str(path) + ".tmp"
    with open(tmp, "wb") as fh:
        fh.write(bytes(buf))
    os.replace(tmp, path)


def read_poln(path):
    from .dataset import NormParams

    with open(path, "rb") as fh:
        blob = fh.read()
    head = struct.Struct("<4sII")
    if len(blob) < head.size:
        raise ValueError(f"truncated model file at byte {len(blob)}")
    magic, version, dlen = head.unpack_from(blob, 0)
    if magic != POLN_MAGIC:
        raise ValueError("bad magic at byte 0; not a POLN file")
    if version != POLN_VERSION:
        raise ValueError(f"unsupported POLN version {version}")
    off = head.size
    desc = json.loads(blob[off:off + dlen].decode())
    off += dlen
    (f_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    mean = np.frombuffer(blob, dtype="<f8", count=f_len, offset=off).copy()
    off += f_len * 8
    scale = np.frombuffer(blob, dtype="<f8", count=f_len, offset=off).copy()
    off += f_len * 8
    (p_len,) = struct.unpack_from("<I", blob, off)
    off += 4
    params = np.frombuffer(blob, dtype="<f8", count=p_len, offset=off).copy()
    net = Network.from_descriptor(desc)
    net.set_params_vector(params)
    return net, NormParams(mean=mean, scale=scale)
