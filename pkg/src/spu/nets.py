"""Minimal feedforward networks with hand-derived backpropagation.

Policy heads (categorical softmax, diagonal Gaussian with state-independent
log-std), a scalar value head, and Adam. Parameters live in flat float64
vectors so optimizer steps, checkpointing and finite-difference checks all
operate on one layout.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

LOG_2PI = math.log(2.0 * math.pi)


class Mlp:
    """Fully connected trunk: tanh on hidden layers, identity output.

    Parameters live in one flat float64 buffer; per-layer weight/bias arrays
    are views into it, so optimizer steps and checkpoints need no repacking.
    """

    def __init__(self, layer_sizes: list[int], rng: np.random.Generator,
                 hidden_gain: float = 1.0, out_gain: float = 1.0):
        if len(layer_sizes) < 2:
            raise ValueError("need at least input and output sizes")
        self.layer_sizes = list(layer_sizes)
        total = sum((n_in + 1) * n_out for n_in, n_out in zip(layer_sizes[:-1], layer_sizes[1:]))
        self._flat = np.zeros(total)
        self.weights: list[np.ndarray] = []
        self.biases: list[np.ndarray] = []
        pos = 0
        last = len(layer_sizes) - 2
        for i, (n_in, n_out) in enumerate(zip(layer_sizes[:-1], layer_sizes[1:])):
            w = self._flat[pos:pos + n_in * n_out].reshape(n_in, n_out)
            pos += n_in * n_out
            b = self._flat[pos:pos + n_out]
            pos += n_out
            gain = out_gain if i == last else hidden_gain
            bound = gain * math.sqrt(3.0 / n_in)  # fan-in scaled uniform
            w[...] = rng.uniform(-bound, bound, size=(n_in, n_out))
            self.weights.append(w)
            self.biases.append(b)

    @property
    def n_params(self) -> int:
        return self._flat.size

    def get_params(self) -> np.ndarray:
        return self._flat.copy()

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self._flat[...] = flat

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
        """Batched forward pass; the cache holds per-layer activations."""
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.layer_sizes[0]:
            raise ValueError(f"input must have shape (batch, {self.layer_sizes[0]})")
        acts = [x]
        h = x
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < len(self.weights) - 1:
                np.tanh(h, out=h)
            acts.append(h)
        return h, acts

    def backward(self, acts: list[np.ndarray], dout: np.ndarray) -> np.ndarray:
        """Parameter gradient of sum_i <dout_i, out_i>, flat layout."""
        out = np.empty(self.n_params)
        delta = np.asarray(dout, dtype=np.float64)
        pos = self.n_params
        for i in range(len(self.weights) - 1, -1, -1):
            w = self.weights[i]
            pos -= w.size + w.shape[1]
            np.matmul(acts[i].T, delta, out=out[pos:pos + w.size].reshape(w.shape))
            delta.sum(axis=0, out=out[pos + w.size:pos + w.size + w.shape[1]])
            if i > 0:
                delta = (delta @ w.T) * (1.0 - acts[i] ** 2)
        return out


def _softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


class CategoricalPolicyNet:
    """Softmax policy over a finite action set."""

    kind = "categorical"

    def __init__(self, state_dim: int, n_actions: int, hidden=(64, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.n_actions = n_actions
        self.trunk = Mlp([state_dim, *hidden, n_actions], rng, out_gain=0.01)

    # -- parameter plumbing -------------------------------------------------
    @property
    def n_params(self) -> int:
        return self.trunk.n_params

    def get_params(self) -> np.ndarray:
        return self.trunk.get_params()

    def set_params(self, flat: np.ndarray) -> None:
        self.trunk.set_params(flat)

    def clone(self) -> "CategoricalPolicyNet":
        other = CategoricalPolicyNet(self.trunk.layer_sizes[0], self.n_actions,
                                     hidden=tuple(self.trunk.layer_sizes[1:-1]))
        other.set_params(self.get_params())
        return other

    def spec(self) -> dict:
        return {"kind": self.kind, "layer_sizes": self.trunk.layer_sizes}

    # -- distributions ------------------------------------------------------
    def dist_batch(self, states: np.ndarray) -> tuple[np.ndarray, list]:
        logits, cache = self.trunk.forward(states)
        return _softmax(logits), cache

    def forward(self, state: np.ndarray) -> np.ndarray:
        probs, _ = self.dist_batch(np.asarray(state, dtype=np.float64)[None, :])
        return probs[0]

    def slice_dist(self, probs: np.ndarray, idx: np.ndarray) -> np.ndarray:
        return probs[idx]

    def log_prob_from(self, probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        actions = np.asarray(actions)
        if np.any(actions < 0) or np.any(actions >= self.n_actions):
            raise ValueError("action index out of range")
        return np.log(probs[np.arange(len(actions)), actions])

    def prob_from(self, probs: np.ndarray, actions: np.ndarray) -> np.ndarray:
        return probs[np.arange(len(actions)), np.asarray(actions)]

    def kl_from(self, probs: np.ndarray, probs_ref: np.ndarray) -> np.ndarray:
        with np.errstate(divide="ignore", invalid="ignore"):
            terms = np.where(probs > 0,
                             probs * (np.log(np.maximum(probs, 1e-300))
                                      - np.log(np.maximum(probs_ref, 1e-300))),
                             0.0)
        return terms.sum(axis=1)

    def sample(self, state: np.ndarray, rng: np.random.Generator) -> tuple[int, float]:
        probs = self.forward(state)
        action = int((rng.random() > np.cumsum(probs)).sum())
        return action, float(np.log(probs[action]))

    # -- gradients ----------------------------------------------------------
    def grad_accumulate(self, cache: list, probs: np.ndarray, probs_ref: np.ndarray,
                        actions: np.ndarray, w_kl: np.ndarray,
                        w_logp: np.ndarray) -> np.ndarray:
        """Flat gradient of sum_i [w_kl_i KL(pi||pi_ref)[s_i] + w_logp_i log pi(a_i|s_i)]."""
        m, k = probs.shape
        dlogits = np.zeros((m, k))
        if np.any(w_kl != 0.0):
            c = np.log(np.maximum(probs, 1e-300)) - np.log(np.maximum(probs_ref, 1e-300))
            kl = self.kl_from(probs, probs_ref)
            dlogits += w_kl[:, None] * probs * (c - kl[:, None])
        if np.any(w_logp != 0.0):
            one_hot = np.zeros((m, k))
            one_hot[np.arange(m), np.asarray(actions)] = 1.0
            dlogits += w_logp[:, None] * (one_hot - probs)
        return self.trunk.backward(cache, dlogits)


class GaussianPolicyNet:
    """Diagonal Gaussian policy: trunk outputs the mean, log-std is a free vector."""

    kind = "gaussian"

    def __init__(self, state_dim: int, action_dim: int, hidden=(64, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.action_dim = action_dim
        self.trunk = Mlp([state_dim, *hidden, action_dim], rng, out_gain=0.01)
        self.log_std = np.zeros(action_dim)

    # -- parameter plumbing: trunk params then log_std ----------------------
    @property
    def n_params(self) -> int:
        return self.trunk.n_params + self.action_dim

    def get_params(self) -> np.ndarray:
        return np.concatenate([self.trunk.get_params(), self.log_std])

    def set_params(self, flat: np.ndarray) -> None:
        flat = np.asarray(flat, dtype=np.float64)
        if flat.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got {flat.shape}")
        self.trunk.set_params(flat[:self.trunk.n_params])
        self.log_std = flat[self.trunk.n_params:].copy()

    def clone(self) -> "GaussianPolicyNet":
        other = GaussianPolicyNet(self.trunk.layer_sizes[0], self.action_dim,
                                  hidden=tuple(self.trunk.layer_sizes[1:-1]))
        other.set_params(self.get_params())
        return other

    def spec(self) -> dict:
        return {"kind": self.kind, "layer_sizes": self.trunk.layer_sizes,
                "action_dim": self.action_dim}

    # -- distributions ------------------------------------------------------
    def dist_batch(self, states: np.ndarray) -> tuple[tuple[np.ndarray, np.ndarray], list]:
        mean, cache = self.trunk.forward(states)
        return (mean, np.exp(self.log_std)), cache

    def forward(self, state: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        (mean, std), _ = self.dist_batch(np.asarray(state, dtype=np.float64)[None, :])
        return mean[0], std

    def slice_dist(self, dist, idx):
        mean, std = dist
        return mean[idx], std

    def log_prob_from(self, dist, actions: np.ndarray) -> np.ndarray:
        mean, std = dist
        actions = np.asarray(actions, dtype=np.float64)
        z = (actions - mean) / std
        return np.sum(-0.5 * z ** 2 - np.log(std) - 0.5 * LOG_2PI, axis=1)

    def prob_from(self, dist, actions: np.ndarray) -> np.ndarray:
        return np.exp(self.log_prob_from(dist, actions))

    def kl_from(self, dist, dist_ref) -> np.ndarray:
        mean, std = dist
        mean_ref, std_ref = dist_ref
        var, var_ref = std ** 2, std_ref ** 2
        per_dim = (np.log(std_ref) - np.log(std)
                   + (var + (mean - mean_ref) ** 2) / (2.0 * var_ref) - 0.5)
        return per_dim.sum(axis=1)

    def sample(self, state: np.ndarray, rng: np.random.Generator) -> tuple[np.ndarray, float]:
        mean, std = self.forward(state)
        action = mean + std * rng.standard_normal(self.action_dim)
        z = (action - mean) / std
        logp = float(np.sum(-0.5 * z ** 2 - np.log(std) - 0.5 * LOG_2PI))
        return action, logp

    # -- gradients ----------------------------------------------------------
    def grad_accumulate(self, cache: list, dist, dist_ref, actions: np.ndarray,
                        w_kl: np.ndarray, w_logp: np.ndarray) -> np.ndarray:
        """Flat gradient of sum_i [w_kl_i KL(pi||pi_ref)[s_i] + w_logp_i log pi(a_i|s_i)]."""
        mean, std = dist
        mean_ref, std_ref = dist_ref
        actions = np.asarray(actions, dtype=np.float64)
        var, var_ref = std ** 2, std_ref ** 2

        dmean = (w_kl[:, None] * (mean - mean_ref) / var_ref
                 + w_logp[:, None] * (actions - mean) / var)
        # d/dlog_std of KL: var/var_ref - 1; of log_prob: z^2 - 1
        z2 = ((actions - mean) / std) ** 2
        dlogstd = (w_kl[:, None] * (var / var_ref - 1.0)
                   + w_logp[:, None] * (z2 - 1.0)).sum(axis=0)
        return np.concatenate([self.trunk.backward(cache, dmean), dlogstd])


class ValueNet:
    """Scalar state-value head."""

    kind = "value"

    def __init__(self, state_dim: int, hidden=(64, 64), seed: int = 0):
        rng = np.random.default_rng(seed)
        self.trunk = Mlp([state_dim, *hidden, 1], rng, out_gain=1.0)

    @property
    def n_params(self) -> int:
        return self.trunk.n_params

    def get_params(self) -> np.ndarray:
        return self.trunk.get_params()

    def set_params(self, flat: np.ndarray) -> None:
        self.trunk.set_params(flat)

    def clone(self) -> "ValueNet":
        other = ValueNet(self.trunk.layer_sizes[0], hidden=tuple(self.trunk.layer_sizes[1:-1]))
        other.set_params(self.get_params())
        return other

    def spec(self) -> dict:
        return {"kind": self.kind, "layer_sizes": self.trunk.layer_sizes}

    def value_batch(self, states: np.ndarray) -> tuple[np.ndarray, list]:
        out, cache = self.trunk.forward(states)
        return out[:, 0], cache

    def forward(self, state: np.ndarray) -> float:
        v, _ = self.value_batch(np.asarray(state, dtype=np.float64)[None, :])
        return float(v[0])

    def grad_weighted(self, cache: list, weights: np.ndarray) -> np.ndarray:
        """Flat gradient of sum_i weights_i V(s_i)."""
        return self.trunk.backward(cache, np.asarray(weights, dtype=np.float64)[:, None])


# -- single-sample gradients (used directly by tests and small callers) -----

def log_prob(net, state: np.ndarray, action) -> float:
    dist, _ = net.dist_batch(np.asarray(state, dtype=np.float64)[None, :])
    return float(net.log_prob_from(dist, _batch_action(net, action))[0])


def kl_between(net, net_ref, state: np.ndarray) -> float:
    """KL(net || net_ref) at one state; heads must match."""
    if net.kind != net_ref.kind:
        raise ValueError("policy heads do not match")
    x = np.asarray(state, dtype=np.float64)[None, :]
    dist, _ = net.dist_batch(x)
    dist_ref, _ = net_ref.dist_batch(x)
    return float(net.kl_from(dist, dist_ref)[0])


def grad_log_prob(net, state: np.ndarray, action) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)[None, :]
    dist, cache = net.dist_batch(x)
    return net.grad_accumulate(cache, dist, dist, _batch_action(net, action),
                               w_kl=np.zeros(1), w_logp=np.ones(1))


def grad_kl(net, net_ref, state: np.ndarray) -> np.ndarray:
    x = np.asarray(state, dtype=np.float64)[None, :]
    dist, cache = net.dist_batch(x)
    dist_ref, _ = net_ref.dist_batch(x)
    return net.grad_accumulate(cache, dist, dist_ref, _zero_action(net),
                               w_kl=np.ones(1), w_logp=np.zeros(1))


def grad_ratio(net, net_ref, state: np.ndarray, action) -> np.ndarray:
    """Gradient of pi(a|s)/pi_ref(a|s) w.r.t. net's parameters."""
    x = np.asarray(state, dtype=np.float64)[None, :]
    actions = _batch_action(net, action)
    dist, cache = net.dist_batch(x)
    dist_ref, _ = net_ref.dist_batch(x)
    ratio = float(np.exp(net.log_prob_from(dist, actions)
                         - net_ref.log_prob_from(dist_ref, actions))[0])
    return net.grad_accumulate(cache, dist, dist, actions,
                               w_kl=np.zeros(1), w_logp=np.full(1, ratio))


def grad_value_mse(net: ValueNet, state: np.ndarray, target: float) -> np.ndarray:
    """Gradient of (V(s) - target)^2."""
    x = np.asarray(state, dtype=np.float64)[None, :]
    v, cache = net.value_batch(x)
    return net.grad_weighted(cache, 2.0 * (v - target))


def _batch_action(net, action):
    if net.kind == "categorical":
        return np.array([action], dtype=np.int64)
    return np.asarray(action, dtype=np.float64)[None, :]


def _zero_action(net):
    if net.kind == "categorical":
        return np.zeros(1, dtype=np.int64)
    return np.zeros((1, net.action_dim))


# -- Adam --------------------------------------------------------------------

@dataclass(frozen=True)
class AdamState:
    step: int
    m: np.ndarray
    v: np.ndarray
    alpha: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def init(cls, n_params: int, alpha: float = 3e-4) -> "AdamState":
        return cls(step=0, m=np.zeros(n_params), v=np.zeros(n_params), alpha=alpha)


def adam_step(params: np.ndarray, grads: np.ndarray, state: AdamState,
              lr_scale: float = 1.0) -> tuple[np.ndarray, AdamState]:
    """One bias-corrected Adam update; lr_scale supports linear annealing."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.shape or grads.shape != state.m.shape:
        raise ValueError("parameter/gradient/state dimensions do not match")
    if not np.all(np.isfinite(grads)):
        raise FloatingPointError("non-finite gradient")
    t = state.step + 1
    m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    v = state.beta2 * state.v + (1.0 - state.beta2) * grads ** 2
    m_hat = m / (1.0 - state.beta1 ** t)
    v_hat = v / (1.0 - state.beta2 ** t)
    new_params = params - lr_scale * state.alpha * m_hat / (np.sqrt(v_hat) + state.eps)
    return new_params, replace(state, step=t, m=m, v=v)


# -- checkpoint format: one JSON header line, then raw little-endian float64 --

def save_params(net, path: str) -> None:
    header = dict(net.spec())
    header["count"] = int(net.n_params)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header).encode("utf-8"))
        fh.write(b"\n")
        fh.write(net.get_params().astype("<f8").tobytes())


def load_params(net, path: str) -> None:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode("utf-8"))
        raw = fh.read()
    expected = dict(net.spec())
    expected["count"] = int(net.n_params)
    if header != expected:
        raise ValueError(f"checkpoint header {header} does not match network {expected}")
    flat = np.frombuffer(raw, dtype="<f8")
    net.set_params(flat.astype(np.float64))
