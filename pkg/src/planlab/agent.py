"""From-scratch value predictor: a small fully connected network that maps
(state, action) features to a predicted latency/cost magnitude.

The network is rectifier-activated with an identity output, trained by
momentum gradient descent on mean squared error. Backprop is hand-rolled in
numpy and guarded by a central-finite-difference gradient check. Action
selection is epsilon-greedy over the *minimum* predicted value, since
predictions are latency/cost magnitudes.

Targets are heavy-tailed, so they are regressed in a normalized space
log1p(target) / log1p(cap), with the cap frozen at the 99th percentile of the
targets seen during a warm-up window.
"""

from __future__ import annotations

import math
import random
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ContractError, FingerprintError
from .serialize import digest, dump_versioned, load_versioned


@dataclass
class NetworkParams:
    weights: list[np.ndarray]  # layer l: (fan_out, fan_in)
    biases: list[np.ndarray]   # layer l: (fan_out,)

    @property
    def input_size(self) -> int:
        return self.weights[0].shape[1]

    def copy(self) -> "NetworkParams":
        return NetworkParams([w.copy() for w in self.weights],
                             [b.copy() for b in self.biases])


@dataclass
class TrainerState:
    learning_rate: float = 1e-3
    momentum: float = 0.9
    velocity_w: list[np.ndarray] = field(default_factory=list)
    velocity_b: list[np.ndarray] = field(default_factory=list)
    step: int = 0

    def ensure_shapes(self, params: NetworkParams) -> None:
        if not self.velocity_w:
            self.velocity_w = [np.zeros_like(w) for w in params.weights]
            self.velocity_b = [np.zeros_like(b) for b in params.biases]


@dataclass
class TargetNormalizer:
    """log1p compression with a cap frozen from warm-up targets."""

    warmup_size: int = 256
    cap: Optional[float] = None
    _buffer: list[float] = field(default_factory=list)

    @property
    def frozen(self) -> bool:
        return self.cap is not None

    def observe(self, targets: Sequence[float]) -> None:
        if self.frozen:
            return
        self._buffer.extend(float(t) for t in targets)
        if len(self._buffer) >= self.warmup_size:
            self.freeze()

    def freeze(self) -> None:
        if self.frozen:
            return
        if not self._buffer:
            raise ContractError("cannot freeze a normalizer with no targets")
        self.cap = float(np.percentile(np.asarray(self._buffer), 99.0))
        if self.cap <= 0.0:
            self.cap = 1.0
        self._buffer = []

    def normalize(self, target: float) -> float:
        if not self.frozen:
            raise ContractError("normalizer not frozen yet")
        return math.log1p(max(target, 0.0)) / math.log1p(self.cap)


def init_network(input_size: int, hidden: Sequence[int], seed: int) -> NetworkParams:
    """Glorot-uniform weights, zero biases; deterministic per seed."""
    if input_size < 1:
        raise ContractError("input_size must be >= 1")
    if not hidden or any(h < 1 for h in hidden):
        raise ContractError("hidden sizes must be nonempty positive integers")
    rng = np.random.default_rng(seed)
    sizes = [input_size, *hidden, 1]
    weights, biases = [], []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
        bound = math.sqrt(6.0 / (fan_in + fan_out))
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)))
        biases.append(np.zeros(fan_out))
    return NetworkParams(weights, biases)


def _forward(params: NetworkParams, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """x: (batch, F). Returns (outputs (batch,), pre-activations per layer)."""
    activations = [x]
    a = x
    last = len(params.weights) - 1
    zs = []
    for l, (w, b) in enumerate(zip(params.weights, params.biases)):
        z = a @ w.T + b
        zs.append(z)
        a = z if l == last else np.maximum(z, 0.0)
        activations.append(a)
    return activations[-1][:, 0], (activations, zs)


def predict(params: NetworkParams, features: np.ndarray) -> float:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 1 or features.shape[0] != params.input_size:
        raise ContractError(
            f"feature length {features.shape} does not match input size "
            f"{params.input_size}")
    out, _ = _forward(params, features[None, :])
    return float(out[0])


def predict_batch(params: NetworkParams, features: np.ndarray) -> np.ndarray:
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2 or features.shape[1] != params.input_size:
        raise ContractError("feature matrix must be (batch, input_size)")
    out, _ = _forward(params, features)
    return out


def _loss_and_gradients(params: NetworkParams, x: np.ndarray, y: np.ndarray):
    """Mean squared error and its gradients w.r.t. every weight and bias."""
    batch = x.shape[0]
    out, (activations, zs) = _forward(params, x)
    err = out - y
    loss = float(np.mean(err ** 2))

    grad_w = [None] * len(params.weights)
    grad_b = [None] * len(params.biases)
    delta = (2.0 * err / batch)[:, None]  # d loss / d output, (batch, 1)
    for l in range(len(params.weights) - 1, -1, -1):
        a_prev = activations[l]
        grad_w[l] = delta.T @ a_prev
        grad_b[l] = delta.sum(axis=0)
        if l > 0:
            delta = (delta @ params.weights[l]) * (zs[l - 1] > 0.0)
    return loss, grad_w, grad_b


def train_batch(params: NetworkParams, trainer: TrainerState,
                batch: Sequence[tuple[np.ndarray, float]]) -> float:
    """One momentum step on the batch MSE; returns the pre-step loss."""
    if not batch:
        raise ContractError("batch must be nonempty")
    x = np.stack([np.asarray(f, dtype=np.float64) for f, _ in batch])
    y = np.asarray([t for _, t in batch], dtype=np.float64)
    if x.shape[1] != params.input_size:
        raise ContractError("feature length does not match the network input")
    if not np.all(np.isfinite(y)) or not np.all(np.isfinite(x)):
        raise ContractError("non-finite features or targets")

    trainer.ensure_shapes(params)
    loss, grad_w, grad_b = _loss_and_gradients(params, x, y)
    lr = trainer.learning_rate
    mu = trainer.momentum
    for l in range(len(params.weights)):
        trainer.velocity_w[l] = mu * trainer.velocity_w[l] - lr * grad_w[l]
        trainer.velocity_b[l] = mu * trainer.velocity_b[l] - lr * grad_b[l]
        params.weights[l] += trainer.velocity_w[l]
        params.biases[l] += trainer.velocity_b[l]
    trainer.step += 1
    return loss


def gradient_check(params: NetworkParams, features: np.ndarray, target: float,
                   step: float = 1e-5, floor: float = 1e-10) -> float:
    """Max relative error between backprop and central finite differences.

    Gradients whose analytic and numeric magnitudes both fall below ``floor``
    are skipped (the relative error of two zeros is noise).
    """
    x = np.asarray(features, dtype=np.float64)[None, :]
    y = np.asarray([target], dtype=np.float64)
    _, grad_w, grad_b = _loss_and_gradients(params, x, y)

    def loss_at() -> float:
        out, _ = _forward(params, x)
        return float(np.mean((out - y) ** 2))

    worst = 0.0
    tensors = list(zip(params.weights, grad_w)) + list(zip(params.biases, grad_b))
    for tensor, grad in tensors:
        it = np.nditer(tensor, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            orig = tensor[idx]
            tensor[idx] = orig + step
            hi = loss_at()
            tensor[idx] = orig - step
            lo = loss_at()
            tensor[idx] = orig
            numeric = (hi - lo) / (2.0 * step)
            analytic = grad[idx]
            scale = max(abs(numeric), abs(analytic))
            if scale >= floor:
                worst = max(worst, abs(numeric - analytic) / scale)
            it.iternext()
    return worst


def select_action(params: NetworkParams, state, legal_actions: Sequence,
                  featurize: Callable, epsilon: float, rng: random.Random):
    """Epsilon-greedy argmin over predicted values.

    With probability 1 - epsilon the action with the lowest prediction wins
    (ties to the smallest canonical index); otherwise one of the remaining
    actions is chosen uniformly.
    """
    if not legal_actions:
        raise ContractError("no legal actions to select from")
    if not 0.0 <= epsilon <= 1.0:
        raise ContractError("epsilon must be in [0, 1]")
    features = np.stack([featurize(state, a) for a in legal_actions])
    values = predict_batch(params, features)
    best = int(np.argmin(values))
    if len(legal_actions) > 1 and rng.random() < epsilon:
        others = [i for i in range(len(legal_actions)) if i != best]
        return legal_actions[rng.choice(others)]
    return legal_actions[best]


@dataclass
class ValueAgent:
    """Bundles the network with its optimizer state and target normalizer."""

    params: NetworkParams
    trainer: TrainerState
    normalizer: TargetNormalizer
    episodes_seen: int = 0
    seed: int = 0

    @classmethod
    def create(cls, input_size: int, hidden: Sequence[int], seed: int,
               learning_rate: float = 1e-3, momentum: float = 0.9,
               normalizer_warmup: int = 256) -> "ValueAgent":
        return cls(params=init_network(input_size, hidden, seed),
                   trainer=TrainerState(learning_rate=learning_rate,
                                        momentum=momentum),
                   normalizer=TargetNormalizer(warmup_size=normalizer_warmup),
                   seed=seed)


# --- checkpointing ----------------------------------------------------------


def env_fingerprint(env_config, catalog_digest: str) -> str:
    """Digest of everything the network's inputs depend on."""
    return digest({
        "enabled_stages": env_config.enabled_stages,
        "max_relations": env_config.max_relations,
        "feature_length": env_config.feature_length,
        "catalog": catalog_digest,
    })


def save_checkpoint(agent: ValueAgent, path: str, fingerprint: str,
                    metadata: Optional[dict] = None) -> None:
    trainer = agent.trainer
    trainer.ensure_shapes(agent.params)
    dump_versioned(path, "checkpoint", {
        "fingerprint": fingerprint,
        "params": {
            "weights": [w.tolist() for w in agent.params.weights],
            "biases": [b.tolist() for b in agent.params.biases],
        },
        "trainer_state": {
            "learning_rate": trainer.learning_rate,
            "momentum": trainer.momentum,
            "velocity_w": [v.tolist() for v in trainer.velocity_w],
            "velocity_b": [v.tolist() for v in trainer.velocity_b],
            "step": trainer.step,
        },
        "normalizer": {"warmup_size": agent.normalizer.warmup_size,
                       "cap": agent.normalizer.cap},
        "metadata": {"episodes_seen": agent.episodes_seen,
                     "seed": agent.seed, **(metadata or {})},
    })


def load_checkpoint(path: str, fingerprint: str) -> ValueAgent:
    doc = load_versioned(path, "checkpoint")
    if doc["fingerprint"] != fingerprint:
        raise FingerprintError(
            f"{path}: checkpoint fingerprint {doc['fingerprint'][:12]}... does "
            f"not match environment {fingerprint[:12]}...")
    params = NetworkParams(
        weights=[np.asarray(w, dtype=np.float64) for w in doc["params"]["weights"]],
        biases=[np.asarray(b, dtype=np.float64) for b in doc["params"]["biases"]],
    )
    ts = doc["trainer_state"]
    trainer = TrainerState(
        learning_rate=ts["learning_rate"], momentum=ts["momentum"],
        velocity_w=[np.asarray(v, dtype=np.float64) for v in ts["velocity_w"]],
        velocity_b=[np.asarray(v, dtype=np.float64) for v in ts["velocity_b"]],
        step=ts["step"],
    )
    normalizer = TargetNormalizer(warmup_size=doc["normalizer"]["warmup_size"],
                                  cap=doc["normalizer"]["cap"])
    meta = doc["metadata"]
    return ValueAgent(params=params, trainer=trainer, normalizer=normalizer,
                      episodes_seen=meta["episodes_seen"], seed=meta["seed"])
