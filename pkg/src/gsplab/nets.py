"""Small feed-forward networks with explicit gradients.

The learned pieces of the auction: a bid-multiplier actor (softplus
output, strictly positive) and a critic (identity output).  Everything is
plain numpy with hand-rolled backprop.  Beyond ordinary parameter
gradients, the actor exposes the derivative of its output with respect to
the *unnormalized* bid input (needed by the monotonicity penalty and its
parameter gradient), implemented as a forward-mode tangent pass plus a
reverse pass over the combined graph.

Checkpoints are a self-describing little-endian binary format (magic
string, version, architecture dims, normalization stats, row-major
float64 parameter blocks).
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

CHECKPOINT_MAGIC = b"GSPLAB-NET"
CHECKPOINT_VERSION = 1

_ACT_NAMES = {"tanh": 0, "softplus": 1, "identity": 2}
_ACT_BY_ID = {v: k for k, v in _ACT_NAMES.items()}


class NanGradientError(FloatingPointError):
    """A gradient contained NaN; the optimizer step was aborted."""


class UnfittedNormalizerError(RuntimeError):
    """Normalization statistics were never fitted."""


def _sigmoid(z):
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softplus(z):
    return np.where(z > 30, z, np.log1p(np.exp(np.minimum(z, 30))))


def _act(name, z):
    """Returns (value, first derivative, second derivative) at z."""
    if name == "tanh":
        a = np.tanh(z)
        d1 = 1.0 - a * a
        return a, d1, -2.0 * a * d1
    if name == "softplus":
        s = _sigmoid(z)
        return _softplus(z), s, s * (1.0 - s)
    if name == "identity":
        return z, np.ones_like(z), np.zeros_like(z)
    raise ValueError(f"unknown activation {name!r}")


class Normalizer:
    """Invertible per-feature affine standardization (x - mean) / scale."""

    def __init__(self, dim):
        self.dim = dim
        self.mean = None
        self.scale = None

    @property
    def fitted(self):
        return self.mean is not None

    def fit(self, X):
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != self.dim:
            raise ValueError(f"expected (n, {self.dim}) data, got {X.shape}")
        self.mean = X.mean(axis=0)
        self.scale = np.maximum(X.std(axis=0), 1e-8)
        return self

    def set_identity(self):
        self.mean = np.zeros(self.dim)
        self.scale = np.ones(self.dim)
        return self

    def transform(self, X):
        if not self.fitted:
            raise UnfittedNormalizerError("normalizer statistics not fitted")
        return (X - self.mean) / self.scale


class Mlp:
    """Fully connected net with one output unit per default usage.

    forward/backward use ordinary reverse-mode; jvp propagates an input
    tangent, and backward_jvp differentiates a loss of (output, output
    tangent) with respect to the parameters.
    """

    def __init__(self, sizes, hidden="tanh", output="identity", rng=None):
        if len(sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.sizes = list(sizes)
        self.hidden = hidden
        self.output = output
        self.weights = []
        self.biases = []
        rng = rng if rng is not None else np.random.default_rng(0)
        for n_in, n_out in zip(sizes[:-1], sizes[1:]):
            limit = np.sqrt(6.0 / (n_in + n_out))
            self.weights.append(rng.uniform(-limit, limit, size=(n_out, n_in)))
            self.biases.append(np.zeros(n_out))

    @property
    def n_layers(self):
        return len(self.weights)

    def _act_name(self, layer):
        return self.output if layer == self.n_layers - 1 else self.hidden

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out.append(w)
            out.append(b)
        return out

    def get_flat(self):
        return np.concatenate([p.ravel() for p in self.params()])

    def set_flat(self, flat):
        pos = 0
        for p in self.params():
            p[...] = flat[pos:pos + p.size].reshape(p.shape)
            pos += p.size
        if pos != flat.size:
            raise ValueError("flat parameter vector has wrong length")

    def forward(self, U):
        """U: (B, n_in) -> output (B, n_out), plus cache for backward."""
        A = np.asarray(U, dtype=float)
        zs, acts, d1s, d2s = [], [A], [], []
        for layer, (w, b) in enumerate(zip(self.weights, self.biases)):
            Z = A @ w.T + b
            A, d1, d2 = _act(self._act_name(layer), Z)
            zs.append(Z)
            acts.append(A)
            d1s.append(d1)
            d2s.append(d2)
        cache = {"zs": zs, "acts": acts, "d1s": d1s, "d2s": d2s}
        return A, cache

    def backward(self, cache, dY):
        """Gradients of sum(dY * Y) wrt params and input.

        Returns (grads, dU) where grads matches params() order.
        """
        acts, d1s = cache["acts"], cache["d1s"]
        dZ = dY * d1s[-1]
        dws = [None] * self.n_layers
        dbs = [None] * self.n_layers
        for layer in range(self.n_layers - 1, -1, -1):
            dws[layer] = dZ.T @ acts[layer]
            dbs[layer] = dZ.sum(axis=0)
            dA = dZ @ self.weights[layer]
            if layer > 0:
                dZ = dA * d1s[layer - 1]
        grads = []
        for dw, db in zip(dws, dbs):
            grads.append(dw)
            grads.append(db)
        return grads, dA

    def jvp(self, cache, V):
        """Directional derivative of the output along input tangent V."""
        d1s = cache["d1s"]
        S = np.asarray(V, dtype=float)
        ts, ss = [], [S]
        for layer, w in enumerate(self.weights):
            T = S @ w.T
            S = d1s[layer] * T
            ts.append(T)
            ss.append(S)
        jcache = {"ts": ts, "ss": ss}
        return d1s[-1] * ts[-1], jcache

    def backward_jvp(self, cache, jcache, dY, dYdot):
        """Parameter gradients of a loss depending on (Y, Ydot).

        dY and dYdot are the loss derivatives wrt the output and the
        output tangent respectively.
        """
        acts, d1s, d2s = cache["acts"], cache["d1s"], cache["d2s"]
        ts, ss = jcache["ts"], jcache["ss"]
        L = self.n_layers
        dZ = dY * d1s[-1] + dYdot * d2s[-1] * ts[-1]
        dT = dYdot * d1s[-1]
        dws = [None] * L
        dbs = [None] * L
        for layer in range(L - 1, -1, -1):
            dws[layer] = dZ.T @ acts[layer] + dT.T @ ss[layer]
            dbs[layer] = dZ.sum(axis=0)
            dA = dZ @ self.weights[layer]
            dS = dT @ self.weights[layer]
            if layer > 0:
                dZ = dA * d1s[layer - 1] + dS * d2s[layer - 1] * ts[layer - 1]
                dT = dS * d1s[layer - 1]
        grads = []
        for dw, db in zip(dws, dbs):
            grads.append(dw)
            grads.append(db)
        return grads


# ---------------------------------------------------------------------------
# Optimizers


class Sgd:
    """Plain (momentum-free) gradient descent."""

    def __init__(self, lr):
        self.lr = lr

    def step(self, params, grads):
        _guard_nan(grads)
        for p, g in zip(params, grads):
            p -= self.lr * g


class Adam:
    """Adaptive-moment estimation, deterministic given its state."""

    def __init__(self, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = None
        self.v = None

    def step(self, params, grads):
        _guard_nan(grads)
        if self.m is None:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        self.t += 1
        b1t = 1.0 - self.beta1**self.t
        b2t = 1.0 - self.beta2**self.t
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            p -= self.lr * (m / b1t) / (np.sqrt(v / b2t) + self.eps)


def _guard_nan(grads):
    for g in grads:
        if not np.all(np.isfinite(g)):
            raise NanGradientError("non-finite gradient; step aborted")


# ---------------------------------------------------------------------------
# Actor and critic


DEFAULT_HIDDEN = (64, 32)


class BidMultiplierNet:
    """Actor pi(b, x) > 0: positive bid multiplier, rank score r = b * pi.

    Inputs are standardized with fitted statistics; the bid derivative is
    chain-ruled back through the normalization so callers always see
    d pi / d (raw bid).
    """

    def __init__(self, feature_dim, hidden=DEFAULT_HIDDEN, rng=None):
        self.feature_dim = feature_dim
        self.input_dim = 1 + feature_dim
        self.norm = Normalizer(self.input_dim)
        self.net = Mlp([self.input_dim, *hidden, 1], hidden="tanh",
                       output="softplus", rng=rng)

    def fit_normalizer(self, bids, feats):
        self.norm.fit(np.column_stack([bids, feats]))
        return self

    def _inputs(self, bids, feats):
        bids = np.asarray(bids, dtype=float).reshape(-1)
        feats = np.asarray(feats, dtype=float).reshape(bids.size, self.feature_dim)
        return self.norm.transform(np.column_stack([bids, feats]))

    def multiplier_batch(self, bids, feats):
        Y, _ = self.net.forward(self._inputs(bids, feats))
        return Y[:, 0]

    def multiplier(self, bid, feats):
        return float(self.multiplier_batch([bid], [feats])[0])

    def grad_bid_batch(self, bids, feats):
        """d pi / d raw bid for each row."""
        U = self._inputs(bids, feats)
        _, cache = self.net.forward(U)
        V = np.zeros_like(U)
        V[:, 0] = 1.0 / self.norm.scale[0]
        Ydot, _ = self.net.jvp(cache, V)
        return Ydot[:, 0]

    def grad_bid(self, bid, feats):
        return float(self.grad_bid_batch([bid], [feats])[0])

    def forward_with_grad(self, bids, feats):
        """(pi, d pi/d bid, caches) for a batch; caches feed mono/pg grads."""
        U = self._inputs(bids, feats)
        Y, cache = self.net.forward(U)
        V = np.zeros_like(U)
        V[:, 0] = 1.0 / self.norm.scale[0]
        Ydot, jcache = self.net.jvp(cache, V)
        return Y[:, 0], Ydot[:, 0], (cache, jcache)

    def mono_penalty(self, bids, feats):
        """Hinge penalty sum(max(0, -(pi + b * dpi/db))) and its θ-gradient.

        The hinge uses subgradient 0 exactly at the kink.
        """
        bids = np.asarray(bids, dtype=float).reshape(-1)
        if bids.size == 0:
            raise ValueError("empty batch")
        pi, dpi_db, (cache, jcache) = self.forward_with_grad(bids, feats)
        slope = pi + bids * dpi_db  # d r / d b for r = b * pi
        active = slope < 0
        loss = float(np.sum(np.maximum(0.0, -slope)))
        dY = np.where(active, -1.0, 0.0)[:, None]
        dYdot = np.where(active, -bids, 0.0)[:, None]
        grads = self.net.backward_jvp(cache, jcache, dY, dYdot)
        return loss, grads

    def save(self, path):
        _save_checkpoint(path, kind=1, sizes=self.net.sizes,
                         hidden=self.net.hidden, output=self.net.output,
                         norm=self.norm, flat=self.net.get_flat())

    @classmethod
    def load(cls, path):
        kind, sizes, hidden, output, mean, scale, flat = _load_checkpoint(path)
        if kind != 1:
            raise ValueError(f"checkpoint kind {kind} is not an actor")
        obj = cls(feature_dim=sizes[0] - 1, hidden=tuple(sizes[1:-1]))
        obj.net = Mlp(sizes, hidden=hidden, output=output)
        obj.net.set_flat(flat)
        obj.norm.mean = mean
        obj.norm.scale = scale
        return obj


class CriticNet:
    """Critic Q(s, a) over standardized (bid, features, action) input."""

    def __init__(self, feature_dim, hidden=DEFAULT_HIDDEN, rng=None):
        self.feature_dim = feature_dim
        self.input_dim = 1 + feature_dim + 1
        self.norm = Normalizer(self.input_dim)
        self.net = Mlp([self.input_dim, *hidden, 1], hidden="tanh",
                       output="identity", rng=rng)

    def fit_normalizer(self, states, actions):
        self.norm.fit(np.column_stack([states, actions]))
        return self

    def _inputs(self, states, actions):
        states = np.asarray(states, dtype=float)
        actions = np.asarray(actions, dtype=float).reshape(-1)
        return self.norm.transform(np.column_stack([states, actions]))

    def q_batch(self, states, actions):
        Y, _ = self.net.forward(self._inputs(states, actions))
        return Y[:, 0]

    def q(self, state, action):
        return float(self.q_batch(np.asarray(state)[None, :], [action])[0])

    def mse_and_grads(self, states, actions, targets):
        """Mean squared error against targets and its parameter gradient."""
        targets = np.asarray(targets, dtype=float).reshape(-1)
        Y, cache = self.net.forward(self._inputs(states, actions))
        resid = Y[:, 0] - targets
        loss = float(np.mean(resid**2))
        dY = (2.0 / targets.size) * resid[:, None]
        grads, _ = self.net.backward(cache, dY)
        return loss, grads

    def grad_action(self, states, actions):
        """dQ / d raw action for each row."""
        _, cache = self.net.forward(self._inputs(states, actions))
        dY = np.ones((np.asarray(states).shape[0], 1))
        _, dU = self.net.backward(cache, dY)
        return dU[:, -1] / self.norm.scale[-1]

    def save(self, path):
        _save_checkpoint(path, kind=2, sizes=self.net.sizes,
                         hidden=self.net.hidden, output=self.net.output,
                         norm=self.norm, flat=self.net.get_flat())

    @classmethod
    def load(cls, path):
        kind, sizes, hidden, output, mean, scale, flat = _load_checkpoint(path)
        if kind != 2:
            raise ValueError(f"checkpoint kind {kind} is not a critic")
        obj = cls(feature_dim=sizes[0] - 2, hidden=tuple(sizes[1:-1]))
        obj.net = Mlp(sizes, hidden=hidden, output=output)
        obj.net.set_flat(flat)
        obj.norm.mean = mean
        obj.norm.scale = scale
        return obj


# ---------------------------------------------------------------------------
# Checkpoint I/O


def _save_checkpoint(path, kind, sizes, hidden, output, norm, flat):
    if not norm.fitted:
        raise UnfittedNormalizerError("refusing to save an unfitted model")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<III", CHECKPOINT_VERSION, kind, len(sizes)))
        fh.write(struct.pack(f"<{len(sizes)}I", *sizes))
        fh.write(struct.pack("<II", _ACT_NAMES[hidden], _ACT_NAMES[output]))
        norm.mean.astype("<f8").tofile(fh)
        norm.scale.astype("<f8").tofile(fh)
        fh.write(struct.pack("<Q", flat.size))
        flat.astype("<f8").tofile(fh)


def _load_checkpoint(path):
    with open(path, "rb") as fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise ValueError(f"{path}: not a gsplab checkpoint")
        version, kind, n_sizes = struct.unpack("<III", fh.read(12))
        if version != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        sizes = list(struct.unpack(f"<{n_sizes}I", fh.read(4 * n_sizes)))
        hid_id, out_id = struct.unpack("<II", fh.read(8))
        dim = sizes[0]
        mean = np.fromfile(fh, dtype="<f8", count=dim)
        scale = np.fromfile(fh, dtype="<f8", count=dim)
        (n_params,) = struct.unpack("<Q", fh.read(8))
        flat = np.fromfile(fh, dtype="<f8", count=n_params)
    return kind, sizes, _ACT_BY_ID[hid_id], _ACT_BY_ID[out_id], mean, scale, flat
