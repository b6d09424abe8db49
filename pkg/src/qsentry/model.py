"""The QCL classifier: circuit layout, forward pass, losses and training.

Class 0 is digit 1 and class 1 is digit 7.  The classifier reads the Z
expectations of qubits 0 and 1 as logits.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, TrainingError
from .statevector import CompiledCircuit, GateOp, StateVector, encode_batch, z_expectations

log = logging.getLogger(__name__)

LOG_EPS = 1e-12
ROTATION_LAYOUT = ("RX", "RZ", "RX")


@dataclass(frozen=True)
class CircuitSpec:
    """Layout of the classifier circuit.

    Each of ``num_layers`` layers applies RX, RZ, RX to every qubit and then a
    CNOT ring where qubit q controls q+1 (mod Q).  ``trojan_angles``, when
    set, holds one fixed RY angle per qubit applied right after encoding.
    """

    num_qubits: int = 8
    num_layers: int = 8
    trojan_angles: Optional[tuple] = None

    def __post_init__(self):
        if self.num_qubits < 2:
            raise ConfigError(f"the classifier reads two qubits, got num_qubits={self.num_qubits}")
        if self.num_layers < 0:
            raise ConfigError(f"num_layers must be >= 0, got {self.num_layers}")
        if self.trojan_angles is not None:
            angles = tuple(float(a) for a in self.trojan_angles)
            if len(angles) != self.num_qubits:
                raise ConfigError(f"trojan layer needs {self.num_qubits} angles, got {len(angles)}")
            if not all(math.isfinite(a) for a in angles):
                raise ConfigError("trojan angles must be finite")
            object.__setattr__(self, "trojan_angles", angles)

    @property
    def num_params(self) -> int:
        return self.num_layers * self.num_qubits * len(ROTATION_LAYOUT)

    @property
    def dim(self) -> int:
        return 1 << self.num_qubits

    @property
    def has_trojan(self) -> bool:
        return self.trojan_angles is not None

    def param_index(self, layer: int, qubit: int, rotation: int) -> int:
        return (layer * self.num_qubits + qubit) * len(ROTATION_LAYOUT) + rotation

    def trojan_layer(self) -> list[GateOp]:
        if self.trojan_angles is None:
            return []
        return [GateOp("RY", q, angle=a) for q, a in enumerate(self.trojan_angles)]

    def variational_gates(self) -> list[GateOp]:
        gates = []
        for layer in range(self.num_layers):
            for q in range(self.num_qubits):
                for r, kind in enumerate(ROTATION_LAYOUT):
                    gates.append(GateOp(kind, q, param=self.param_index(layer, q, r)))
            for q in range(self.num_qubits):
                gates.append(GateOp("CNOT", (q + 1) % self.num_qubits, control=q))
        return gates

    def gates(self) -> list[GateOp]:
        """The full gate list applied after encoding, trojan layer first if present."""
        return self.trojan_layer() + self.variational_gates()

    def with_trojan(self, angles) -> "CircuitSpec":
        return replace(self, trojan_angles=tuple(float(a) for a in angles))

    def without_trojan(self) -> "CircuitSpec":
        return replace(self, trojan_angles=None)


@dataclass(frozen=True)
class ModelParams:
    theta: np.ndarray

    def __post_init__(self):
        theta = np.array(self.theta, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(theta)):
            raise DomainError("model parameters must be finite")
        theta.flags.writeable = False
        object.__setattr__(self, "theta", theta)

    def check(self, spec: CircuitSpec) -> None:
        if self.theta.shape[0] != spec.num_params:
            raise ShapeError(f"spec needs {spec.num_params} parameters, got {self.theta.shape[0]}")

    @classmethod
    def random(cls, spec: CircuitSpec, seed: int, scale: float = np.pi) -> "ModelParams":
        """Angles uniform in [-scale, scale]."""
        rng = np.random.default_rng(seed)
        return cls(rng.uniform(-scale, scale, spec.num_params))


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 0.05
    epochs: int = 30
    batch_size: int = 32
    optimizer: str = "adam"
    seed: int = 0
    tv_lambda: float = 0.1
    freeze_theta: bool = False
    tune_trojan: bool = True
    holdout_fraction: float = 0.1
    init_scale: float = math.pi
    lr_schedule: str = "cosine"

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.optimizer not in ("sgd", "adam"):
            raise ConfigError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        if self.tv_lambda < 0:
            raise ConfigError(f"tv_lambda must be >= 0, got {self.tv_lambda}")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"lr_schedule must be 'constant' or 'cosine', got {self.lr_schedule!r}")
        if not 0.0 <= self.init_scale <= math.pi:
            raise ConfigError(f"init_scale must be in [0, pi], got {self.init_scale}")
        if not 0.0 <= self.holdout_fraction < 1.0:
            raise ConfigError(f"holdout_fraction must be in [0, 1), got {self.holdout_fraction}")


# ---------------------------------------------------------------------------
# circuits and forward pass


@lru_cache(maxsize=32)
def _compiled(num_qubits: int, num_layers: int, trojan: bool) -> CompiledCircuit:
    spec = CircuitSpec(num_qubits, num_layers)
    gates = spec.variational_gates()
    if trojan:
        # trojan angles sit after the variational parameters in the angle vector
        gates = [GateOp("RY", q, param=spec.num_params + q) for q in range(num_qubits)] + gates
    return CompiledCircuit(gates, num_qubits)


def _angle_vector(spec: CircuitSpec, theta: np.ndarray) -> np.ndarray:
    trojan = np.asarray(spec.trojan_angles) if spec.has_trojan else np.zeros(spec.num_qubits)
    return np.concatenate([theta, trojan])


def _trojan_mask(spec: CircuitSpec, n: int, trojan) -> np.ndarray:
    if trojan is None or trojan is True:
        mask = np.full(n, spec.has_trojan)
    elif trojan is False:
        mask = np.zeros(n, dtype=bool)
    else:
        mask = np.asarray(trojan, dtype=bool).reshape(-1)
        if mask.shape[0] != n:
            raise ShapeError(f"trojan mask has length {mask.shape[0]}, batch has {n}")
    if mask.any() and not spec.has_trojan:
        raise ConfigError("trojan layer requested but the spec has none")
    return mask


def output_states(spec: CircuitSpec, params: ModelParams, features: np.ndarray, trojan=None) -> np.ndarray:
    """Final (B, 2^Q) states for a batch of feature rows.

    ``trojan`` selects which rows pass through the trojan layer: ``None``
    means every row when the spec has one, or give a boolean mask.
    """
    params.check(spec)
    features = np.atleast_2d(np.asarray(features, dtype=np.float64))
    if features.shape[1] != spec.dim:
        raise ShapeError(f"features must have length {spec.dim}, got {features.shape[1]}")
    amps = encode_batch(features)
    mask = _trojan_mask(spec, amps.shape[0], trojan)
    angles = _angle_vector(spec, params.theta)
    out = np.empty_like(amps)
    if (~mask).any():
        out[~mask] = _compiled(spec.num_qubits, spec.num_layers, False).run(angles, amps[~mask])
    if mask.any():
        out[mask] = _compiled(spec.num_qubits, spec.num_layers, True).run(angles, amps[mask])
    return out


def measure(spec: CircuitSpec, params: ModelParams, features: np.ndarray, trojan=None) -> np.ndarray:
    """(B, Q) Pauli-Z expectations of every qubit after the circuit."""
    return z_expectations(output_states(spec, params, features, trojan), spec.num_qubits)


def softmax2(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


def predict_proba(spec: CircuitSpec, params: ModelParams, features: np.ndarray, trojan=None) -> np.ndarray:
    z = measure(spec, params, features, trojan)
    return softmax2(z[:, :2])


def predict(spec: CircuitSpec, params: ModelParams, features: np.ndarray, trojan=None) -> np.ndarray:
    """Class predictions; ties resolve to class 0."""
    probs = predict_proba(spec, params, features, trojan)
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def forward(spec: CircuitSpec, params: ModelParams, x) -> tuple[float, float]:
    """Class probabilities (p0, p1) for one feature vector."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (spec.dim,):
        raise ShapeError(f"x must have length {spec.dim}, got shape {x.shape}")
    p = predict_proba(spec, params, x[None, :])[0]
    return float(p[0]), float(p[1])


# ---------------------------------------------------------------------------
# losses


def _check_probs(probs, label: int) -> np.ndarray:
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != (2,):
        raise ShapeError(f"expected two class probabilities, got shape {probs.shape}")
    if label not in (0, 1):
        raise DomainError(f"label must be 0 or 1, got {label}")
    return probs


def loss_clean(probs, label: int) -> float:
    probs = _check_probs(probs, label)
    return float(-np.log(max(probs[label], LOG_EPS)))


def loss_poison(probs_on_triggered_input, target_label: int) -> float:
    return loss_clean(probs_on_triggered_input, target_label)


def tv_distance(m_clean, m_triggered) -> float:
    """Half the L1 distance between two Z-expectation vectors."""
    a = np.asarray(m_clean, dtype=np.float64)
    b = np.asarray(m_triggered, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"measurement vectors must be equal-length 1-D, got {a.shape} and {b.shape}")
    return float(0.5 * np.abs(a - b).sum())


def loss_poison_tv(probs, target_label: int, measurement_vector_clean, measurement_vector_triggered, lam: float) -> float:
    penalty = tv_distance(measurement_vector_clean, measurement_vector_triggered)
    return loss_clean(probs, target_label) + lam * penalty


@dataclass
class _BatchEval:
    loss: float
    grad: np.ndarray


def _ce_and_weights(z: np.ndarray, labels: np.ndarray):
    """Per-row cross-entropy on logits z[:, :2] and its gradient w.r.t. z."""
    probs = softmax2(z[:, :2])
    picked = probs[np.arange(len(labels)), labels]
    losses = -np.log(np.maximum(picked, LOG_EPS))
    dz = np.zeros_like(z)
    onehot = np.zeros_like(probs)
    onehot[np.arange(len(labels)), labels] = 1.0
    # below the clamp the loss is constant, so its gradient vanishes
    live = (picked > LOG_EPS)[:, None]
    dz[:, :2] = np.where(live, probs - onehot, 0.0)
    return losses, dz


def _evaluate_batch(spec: CircuitSpec, angles: np.ndarray, batch: Sequence, lam: float, need_grad: bool) -> _BatchEval:
    q = spec.num_qubits
    feats = np.stack([s.features for s in batch])
    labels = np.array([s.train_label for s in batch], dtype=np.int64)
    poisoned = np.array([s.is_poisoned for s in batch], dtype=bool)
    amps = encode_batch(feats)
    plain = _compiled(q, spec.num_layers, False)
    total = 0.0
    grad = np.zeros_like(angles)

    # every sample runs the plain circuit: clean samples for their loss,
    # data-poisoned samples on their triggered features, and circuit-poisoned
    # samples for the clean side of the TV penalty
    final = plain.run(angles, amps)
    z = z_expectations(final, q)
    weights = np.zeros_like(z)
    use_plain_ce = ~poisoned if spec.has_trojan else np.ones(len(batch), dtype=bool)
    if use_plain_ce.any():
        losses, dz = _ce_and_weights(z[use_plain_ce], labels[use_plain_ce])
        total += losses.sum()
        weights[use_plain_ce] = dz

    if spec.has_trojan and poisoned.any():
        troj = _compiled(q, spec.num_layers, True)
        final_t = troj.run(angles, amps[poisoned])
        zt = z_expectations(final_t, q)
        losses, dzt = _ce_and_weights(zt, labels[poisoned])
        diff = z[poisoned] - zt
        total += losses.sum() + lam * 0.5 * np.abs(diff).sum()
        sign = np.sign(diff)
        dzt = dzt - lam * 0.5 * sign
        weights[poisoned] += lam * 0.5 * sign
        if need_grad:
            grad += troj.gradient(angles, final_t, dzt)

    if need_grad:
        grad += plain.gradient(angles, final, weights)
    n = len(batch)
    return _BatchEval(total / n, grad / n)


def composite_loss(batch: Sequence, spec: CircuitSpec, params: ModelParams, lam: float = 0.1) -> float:
    """Mean of clean and poison losses over a batch.

    Poisoned samples use the TV-regularized loss when the spec carries a
    trojan layer (the layer fires on them) and plain cross-entropy on their
    triggered features otherwise.
    """
    if len(batch) == 0:
        raise DomainError("composite loss of an empty batch")
    params.check(spec)
    return _evaluate_batch(spec, _angle_vector(spec, params.theta), batch, lam, need_grad=False).loss


def composite_loss_and_grad(batch: Sequence, spec: CircuitSpec, params: ModelParams, lam: float = 0.1):
    """Composite loss and its gradient with respect to (theta, trojan angles)."""
    if len(batch) == 0:
        raise DomainError("composite loss of an empty batch")
    params.check(spec)
    ev = _evaluate_batch(spec, _angle_vector(spec, params.theta), batch, lam, need_grad=True)
    return ev.loss, ev.grad


# ---------------------------------------------------------------------------
# optimizers and training


def sgd_step(values: np.ndarray, grad: np.ndarray, learning_rate: float) -> np.ndarray:
    return values - learning_rate * grad


@dataclass
class Adam:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: Optional[np.ndarray] = None
    v: Optional[np.ndarray] = None

    def step(self, values: np.ndarray, grad: np.ndarray) -> np.ndarray:
        if self.m is None:
            self.m = np.zeros_like(values)
            self.v = np.zeros_like(values)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        m_hat = self.m / (1 - self.beta1 ** self.t)
        v_hat = self.v / (1 - self.beta2 ** self.t)
        return values - self.learning_rate * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    clean_accuracy: float


@dataclass
class TrainResult:
    params: ModelParams
    spec: CircuitSpec
    history: list = field(default_factory=list)


def accuracy(spec: CircuitSpec, params: ModelParams, samples: Sequence) -> float:
    if not samples:
        return float("nan")
    feats = np.stack([s.features for s in samples])
    labels = np.array([s.true_label for s in samples])
    return float(np.mean(predict(spec, params, feats, trojan=False) == labels))


def train(
    spec: CircuitSpec,
    train_set: Sequence,
    config: TrainConfig,
    init: Optional[ModelParams] = None,
    validation: Optional[Sequence] = None,
    callback: Optional[Callable] = None,
) -> TrainResult:
    """Mini-batch training on the composite loss.

    Trojan angles (if the spec has a trojan layer) are tuned alongside theta
    unless ``config.tune_trojan`` is off; ``config.freeze_theta`` tunes the
    trojan angles alone.  Clean accuracy per epoch is measured on
    ``validation``, or on a held-out slice of the clean training samples.
    ``callback(record, params, spec)`` runs after every epoch.
    """
    if len(train_set) == 0:
        raise DomainError("empty training set")
    params = init if init is not None else ModelParams.random(spec, config.seed, config.init_scale)
    params.check(spec)
    if config.epochs == 0:
        return TrainResult(params, spec, [])

    rng = np.random.default_rng(config.seed)
    fit_set = list(train_set)
    if validation is None:
        if config.holdout_fraction > 0:
            order = rng.permutation(len(fit_set))
            cut = int(round(config.holdout_fraction * len(fit_set)))
            held = [fit_set[i] for i in order[:cut]]
            fit_set = [fit_set[i] for i in np.sort(order[cut:])]
            validation = [s for s in held if not s.is_poisoned]
        else:
            validation = []
    validation = [s for s in validation if not s.is_poisoned]

    p = spec.num_params
    angles = _angle_vector(spec, params.theta)
    mask = np.ones_like(angles)
    if config.freeze_theta:
        mask[:p] = 0.0
    if not (spec.has_trojan and config.tune_trojan):
        mask[p:] = 0.0
    adam = Adam(config.learning_rate) if config.optimizer == "adam" else None

    history = []
    current_spec = spec
    for epoch in range(config.epochs):
        lr = config.learning_rate
        if config.lr_schedule == "cosine":
            lr *= 0.5 * (1.0 + math.cos(math.pi * epoch / config.epochs))
        if adam is not None:
            adam.learning_rate = lr
        order = rng.permutation(len(fit_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            batch = [fit_set[i] for i in order[start:start + config.batch_size]]
            ev = _evaluate_batch(current_spec, angles, batch, config.tv_lambda, need_grad=True)
            if not np.isfinite(ev.loss) or not np.all(np.isfinite(ev.grad)):
                raise TrainingError("loss diverged", epoch)
            g = ev.grad * mask
            angles = adam.step(angles, g) if adam is not None else sgd_step(angles, g, lr)
            if current_spec.has_trojan:
                current_spec = current_spec.with_trojan(angles[p:])
            losses.append(ev.loss * len(batch))
        epoch_loss = float(np.sum(losses) / len(fit_set))
        params = ModelParams(angles[:p])
        ca = accuracy(current_spec, params, validation)
        history.append(EpochRecord(epoch, epoch_loss, ca))
        log.info("epoch %d loss %.4f CA %.4f", epoch, epoch_loss, ca)
        if callback is not None:
            callback(history[-1], params, current_spec)
    return TrainResult(ModelParams(angles[:p]), current_spec, history)


def build_qtrojan_angle(psi0: StateVector, psi1: StateVector) -> float:
    """RY angle 2*arccos(|<psi0|psi1>|) that rotates by the overlap angle of two states."""
    if psi0.num_qubits != psi1.num_qubits:
        raise ShapeError(f"qubit counts differ: {psi0.num_qubits} vs {psi1.num_qubits}")
    overlap = min(1.0, max(0.0, abs(psi0.overlap(psi1))))
    return float(2.0 * np.arccos(overlap))
