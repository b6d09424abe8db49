"""Dense statevector simulation of small qubit registers.

Qubit 0 is the most significant bit of the basis index, so on three qubits
``|100>`` is basis index 4.

Two layers live here.  The single-state API (:class:`StateVector`,
:func:`apply_gate`, :func:`run_circuit`, ...) is the reference surface.  The
batched engine (:func:`simulate`, :func:`z_expectations`,
:func:`adjoint_gradient`) pushes many samples through one circuit at once and
is what training and measurement collection use.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
from typing import Callable, Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError, ShapeError, UnsupportedGateError

ROTATIONS = ("RX", "RY", "RZ")
GATE_KINDS = ROTATIONS + ("CNOT",)
NORM_TOL = 1e-10
MAX_QUBITS = 12


@dataclass(frozen=True)
class StateVector:
    amplitudes: np.ndarray
    num_qubits: int

    def __post_init__(self):
        amps = np.asarray(self.amplitudes, dtype=np.complex128)
        if self.num_qubits < 1 or self.num_qubits > MAX_QUBITS:
            raise ShapeError(f"num_qubits must be in [1, {MAX_QUBITS}], got {self.num_qubits}")
        if amps.shape != (1 << self.num_qubits,):
            raise ShapeError(
                f"expected {1 << self.num_qubits} amplitudes for {self.num_qubits} qubits, got shape {amps.shape}"
            )
        norm = float(np.vdot(amps, amps).real)
        if abs(norm - 1.0) > NORM_TOL:
            raise DomainError(f"state is not normalized: |psi|^2 = {norm!r}")
        amps.flags.writeable = False
        object.__setattr__(self, "amplitudes", amps)

    @classmethod
    def zero(cls, num_qubits: int) -> "StateVector":
        amps = np.zeros(1 << num_qubits, dtype=np.complex128)
        amps[0] = 1.0
        return cls(amps, num_qubits)

    @classmethod
    def basis(cls, bits: str) -> "StateVector":
        """Computational basis state from a bit string, qubit 0 first."""
        amps = np.zeros(1 << len(bits), dtype=np.complex128)
        amps[int(bits, 2)] = 1.0
        return cls(amps, len(bits))

    def norm_squared(self) -> float:
        return float(np.vdot(self.amplitudes, self.amplitudes).real)

    def overlap(self, other: "StateVector") -> complex:
        """Inner product <self|other>."""
        if other.num_qubits != self.num_qubits:
            raise ShapeError(f"qubit counts differ: {self.num_qubits} vs {other.num_qubits}")
        return complex(np.vdot(self.amplitudes, other.amplitudes))


@dataclass(frozen=True)
class GateOp:
    """One gate of a circuit.

    Rotations take their angle either from ``angle`` (fixed, radians) or from
    ``params[param]`` when the circuit runs.  CNOT takes neither.
    """

    kind: str
    target: int
    control: Optional[int] = None
    angle: Optional[float] = None
    param: Optional[int] = None

    def __post_init__(self):
        if self.kind not in GATE_KINDS:
            raise ConfigError(f"unknown gate kind {self.kind!r}")
        if self.kind == "CNOT":
            if self.control is None:
                raise ConfigError("CNOT needs a control qubit")
            if self.control == self.target:
                raise ConfigError(f"CNOT control and target are both {self.target}")
            if self.angle is not None or self.param is not None:
                raise ConfigError("CNOT takes no angle")
        else:
            if self.control is not None:
                raise ConfigError(f"{self.kind} takes no control qubit")
            if (self.angle is None) == (self.param is None):
                raise ConfigError(f"{self.kind} needs exactly one of a fixed angle or a parameter index")

    @property
    def trainable(self) -> bool:
        return self.param is not None


def amplitude_encode(x) -> StateVector:
    """Embed a real vector of length 2^Q as the amplitudes of a Q-qubit state."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"expected a 1-D vector, got shape {x.shape}")
    n = x.shape[0]
    q = n.bit_length() - 1
    if n < 2 or (1 << q) != n:
        raise ShapeError(f"length must be a power of two >= 2, got {n}")
    norm = np.linalg.norm(x)
    if not np.isfinite(norm) or norm == 0.0:
        raise DomainError("unnormalizable input")
    return StateVector((x / norm).astype(np.complex128), q)


def encode_batch(features: np.ndarray) -> np.ndarray:
    """Row-wise amplitude encoding; returns a (B, 2^Q) complex array."""
    features = np.asarray(features, dtype=np.float64)
    if features.ndim != 2:
        raise ShapeError(f"expected a 2-D batch, got shape {features.shape}")
    n = features.shape[1]
    if n < 2 or n & (n - 1):
        raise ShapeError(f"row length must be a power of two >= 2, got {n}")
    norms = np.linalg.norm(features, axis=1)
    if np.any(norms == 0.0) or not np.all(np.isfinite(norms)):
        raise DomainError("unnormalizable input")
    return (features / norms[:, None]).astype(np.complex128)


def _rotation_matrix(kind: str, theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    if kind == "RX":
        return np.array([[c, -1j * s], [-1j * s, c]], dtype=np.complex128)
    if kind == "RY":
        return np.array([[c, -s], [s, c]], dtype=np.complex128)
    return np.array([[np.exp(-0.5j * theta), 0], [0, np.exp(0.5j * theta)]], dtype=np.complex128)


@lru_cache(maxsize=None)
def _cnot_permutation(num_qubits: int, control: int, target: int) -> np.ndarray:
    idx = np.arange(1 << num_qubits)
    cbit = 1 << (num_qubits - 1 - control)
    tbit = 1 << (num_qubits - 1 - target)
    perm = np.where(idx & cbit, idx ^ tbit, idx)
    perm.flags.writeable = False
    return perm


@lru_cache(maxsize=None)
def z_signs(num_qubits: int) -> np.ndarray:
    """(Q, 2^Q) table of Pauli-Z eigenvalues: +1 where qubit q is 0."""
    idx = np.arange(1 << num_qubits)
    shifts = num_qubits - 1 - np.arange(num_qubits)
    bits = (idx[None, :] >> shifts[:, None]) & 1
    signs = 1.0 - 2.0 * bits
    signs.flags.writeable = False
    return signs


def _check_qubits(gate: GateOp, num_qubits: int) -> None:
    if not 0 <= gate.target < num_qubits:
        raise ShapeError(f"target qubit {gate.target} out of range for {num_qubits} qubits")
    if gate.control is not None and not 0 <= gate.control < num_qubits:
        raise ShapeError(f"control qubit {gate.control} out of range for {num_qubits} qubits")


def _apply_1q(psi: np.ndarray, u: np.ndarray, qubit: int, num_qubits: int) -> np.ndarray:
    """Apply a 2x2 matrix to ``qubit`` of a (B, 2^Q) batch."""
    b = psi.shape[0]
    view = psi.reshape(b, 1 << qubit, 2, 1 << (num_qubits - qubit - 1))
    a0, a1 = view[:, :, 0, :], view[:, :, 1, :]
    out = np.empty_like(view)
    out[:, :, 0, :] = u[0, 0] * a0 + u[0, 1] * a1
    out[:, :, 1, :] = u[1, 0] * a0 + u[1, 1] * a1
    return out.reshape(b, -1)


def _apply_batch(psi: np.ndarray, gate: GateOp, theta: float, num_qubits: int) -> np.ndarray:
    if gate.kind == "CNOT":
        return psi[:, _cnot_permutation(num_qubits, gate.control, gate.target)]
    return _apply_1q(psi, _rotation_matrix(gate.kind, theta), gate.target, num_qubits)


def apply_gate(state: StateVector, gate: GateOp, angle: Optional[float] = None) -> StateVector:
    """Apply one gate.  ``angle`` overrides the gate's fixed angle; CNOT ignores it."""
    _check_qubits(gate, state.num_qubits)
    if gate.kind == "CNOT":
        theta = 0.0
    else:
        theta = gate.angle if angle is None else angle
        if theta is None:
            raise ConfigError(f"{gate.kind} on qubit {gate.target} needs an angle")
        if not np.isfinite(theta):
            raise DomainError(f"angle must be finite, got {theta!r}")
    out = _apply_batch(state.amplitudes[None, :], gate, float(theta), state.num_qubits)
    return StateVector(out[0], state.num_qubits)


def expectation_z(state: StateVector, qubit: int) -> float:
    if not 0 <= qubit < state.num_qubits:
        raise ShapeError(f"qubit {qubit} out of range for {state.num_qubits} qubits")
    probs = np.abs(state.amplitudes) ** 2
    value = float(z_signs(state.num_qubits)[qubit] @ probs)
    return min(1.0, max(-1.0, value))


def sample_expectation_z(state: StateVector, qubit: int, shots: int, rng: np.random.Generator) -> float:
    """Shot-sampled estimate of <Z_qubit> from ``shots`` projective measurements."""
    if shots < 1:
        raise DomainError(f"shots must be >= 1, got {shots}")
    p0 = (1.0 + expectation_z(state, qubit)) / 2.0
    zeros = rng.binomial(shots, p0)
    return (2.0 * zeros - shots) / shots


def _resolve_angles(gates: Sequence[GateOp], params: np.ndarray) -> np.ndarray:
    angles = np.zeros(len(gates))
    for k, g in enumerate(gates):
        if g.param is not None:
            if not 0 <= g.param < params.shape[0]:
                raise ConfigError(f"gate {k} references parameter {g.param} but only {params.shape[0]} given")
            angles[k] = params[g.param]
        elif g.angle is not None:
            angles[k] = g.angle
    return angles


def run_circuit(gates: Sequence[GateOp], params, input: StateVector) -> StateVector:
    """Apply ``gates`` in order to a copy of ``input``."""
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    angles = _resolve_angles(gates, params)
    for g in gates:
        _check_qubits(g, input.num_qubits)
    out = _run(gates, angles, input.amplitudes[None, :], input.num_qubits)
    return StateVector(out[0], input.num_qubits)


def parameter_shift_gradient(
    gates: Sequence[GateOp],
    params,
    input: StateVector,
    scalar_observable_fn: Callable[[StateVector], float],
) -> np.ndarray:
    """Gradient of ``scalar_observable_fn(run_circuit(...))`` by the two-term shift rule.

    Each gate occurrence is shifted on its own and the contributions are
    summed into the parameter it reads.
    """
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    for k, g in enumerate(gates):
        if g.param is not None and g.kind not in ROTATIONS:
            raise UnsupportedGateError(f"gate {k} ({g.kind}) is parameterized but is not a rotation")
    angles = _resolve_angles(gates, params)
    for g in gates:
        _check_qubits(g, input.num_qubits)

    def evaluate(shifted: np.ndarray) -> float:
        out = _run(gates, shifted, input.amplitudes[None, :], input.num_qubits)
        return float(scalar_observable_fn(StateVector(out[0], input.num_qubits)))

    grad = np.zeros_like(params)
    for k, g in enumerate(gates):
        if g.param is None:
            continue
        plus, minus = angles.copy(), angles.copy()
        plus[k] += np.pi / 2
        minus[k] -= np.pi / 2
        grad[g.param] += (evaluate(plus) - evaluate(minus)) / 2.0
    return grad


# ---------------------------------------------------------------------------
# batched engine


def _run(gates: Sequence[GateOp], angles: np.ndarray, psi: np.ndarray, num_qubits: int) -> np.ndarray:
    out = psi
    for g, theta in zip(gates, angles):
        out = _apply_batch(out, g, theta, num_qubits)
    return out.copy() if out is psi else out


_GENERATORS = {
    "RX": np.array([[0, 1], [1, 0]], dtype=np.complex128),
    "RY": np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    "RZ": np.array([[1, 0], [0, -1]], dtype=np.complex128),
}


class CompiledCircuit:
    """A gate list fused into blocks for repeated batched execution.

    Runs of single-qubit rotations on the same qubit collapse into one 2x2
    unitary and runs of CNOTs into one basis permutation.  Results match
    gate-by-gate execution to rounding error.
    """

    def __init__(self, gates: Sequence[GateOp], num_qubits: int):
        self.gates = tuple(gates)
        self.num_qubits = num_qubits
        for g in self.gates:
            _check_qubits(g, num_qubits)
        self.num_params = 1 + max((g.param for g in self.gates if g.param is not None), default=-1)
        self._segments = []
        k = 0
        while k < len(self.gates):
            g = self.gates[k]
            j = k + 1
            if g.kind == "CNOT":
                while j < len(self.gates) and self.gates[j].kind == "CNOT":
                    j += 1
                perm = np.arange(1 << num_qubits)
                for c in self.gates[k:j]:
                    perm = perm[_cnot_permutation(num_qubits, c.control, c.target)]
                self._segments.append(("perm", perm, range(k, j)))
            else:
                while j < len(self.gates) and self.gates[j].kind != "CNOT" and self.gates[j].target == g.target:
                    j += 1
                self._segments.append(("1q", g.target, range(k, j)))
            k = j

    def angles(self, params) -> np.ndarray:
        return _resolve_angles(self.gates, np.asarray(params, dtype=np.float64).reshape(-1))

    def _block(self, span: range, angles: np.ndarray) -> list:
        """Rotation matrices of a single-qubit block, in application order."""
        return [_rotation_matrix(self.gates[k].kind, angles[k]) for k in span]

    # Internally states are stored column-wise, (2^Q, B), so that every
    # single-qubit update is one broadcast matmul over a wide trailing axis.

    def _apply(self, cols: np.ndarray, u: np.ndarray, qubit: int) -> np.ndarray:
        shape = cols.shape
        return np.matmul(u, cols.reshape(1 << qubit, 2, -1)).reshape(shape)

    def _apply_rowwise(self, cols: np.ndarray, u: np.ndarray, qubit: int) -> np.ndarray:
        """Like :meth:`_apply`, but every column is rounded identically.

        BLAS kernels may round a column differently depending on its position
        in the batch, so the forward pass uses plain elementwise arithmetic.
        """
        view = cols.reshape(1 << qubit, 2, -1)
        a0, a1 = view[:, 0], view[:, 1]
        out = np.empty_like(view)
        np.add(u[0, 0] * a0, u[0, 1] * a1, out=out[:, 0])
        np.add(u[1, 0] * a0, u[1, 1] * a1, out=out[:, 1])
        return out.reshape(cols.shape)

    def _unitary(self, span: range, angles: np.ndarray) -> np.ndarray:
        u = np.eye(2, dtype=np.complex128)
        for m in self._block(span, angles):
            u = m @ u
        return u

    def run(self, params, amplitudes: np.ndarray) -> np.ndarray:
        angles = self.angles(params)
        cols = np.array(np.asarray(amplitudes, dtype=np.complex128).T, order="C")
        for kind, arg, span in self._segments:
            if kind == "perm":
                cols = cols[arg]
            else:
                cols = self._apply_rowwise(cols, self._unitary(span, angles), arg)
        return np.ascontiguousarray(cols.T)

    def gradient(self, params, final_states: np.ndarray, weights: np.ndarray) -> np.ndarray:
        """Gradient of sum_b sum_q weights[b, q] <Z_q>_b; see :func:`adjoint_gradient`."""
        params = np.asarray(params, dtype=np.float64).reshape(-1)
        angles = self.angles(params)
        q_count = self.num_qubits
        final_states = np.asarray(final_states, dtype=np.complex128)
        weights = np.asarray(weights, dtype=np.float64)
        if weights.shape != (final_states.shape[0], q_count):
            raise ShapeError(f"weights must have shape {(final_states.shape[0], q_count)}, got {weights.shape}")
        psi = np.array(final_states.T, order="C")
        lam = (z_signs(q_count).T @ weights.T) * psi
        grad = np.zeros_like(params)
        for kind, arg, span in reversed(self._segments):
            if kind == "perm":
                inv = np.argsort(arg)
                psi, lam = psi[inv], lam[inv]
                continue
            mats = self._block(span, angles)
            if any(self.gates[k].param is not None for k in span):
                pv = psi.reshape(1 << arg, 2, -1)
                lv = lam.reshape(1 << arg, 2, -1)
                # overlap[i, j] = sum conj(lam_i) psi_j over everything but the qubit axis
                overlap = np.matmul(lv.conj(), pv.transpose(0, 2, 1)).sum(axis=0)
                later = np.eye(2, dtype=np.complex128)
                for pos in range(len(span) - 1, -1, -1):
                    g = self.gates[span[pos]]
                    if g.param is not None:
                        if g.kind not in ROTATIONS:
                            raise UnsupportedGateError(f"{g.kind} cannot carry a trainable parameter")
                        conj = later @ _GENERATORS[g.kind] @ later.conj().T
                        grad[g.param] += np.sum(conj * overlap).imag
                    later = later @ mats[pos]
            udag = self._unitary(span, angles).conj().T
            psi = self._apply(psi, udag, arg)
            lam = self._apply(lam, udag, arg)
        return grad


def simulate(gates: Sequence[GateOp], params, amplitudes: np.ndarray, num_qubits: Optional[int] = None) -> np.ndarray:
    """Run every row of a (B, 2^Q) amplitude batch through ``gates``.

    The input array is never modified.
    """
    psi = np.asarray(amplitudes, dtype=np.complex128)
    if psi.ndim != 2:
        raise ShapeError(f"expected (B, 2^Q) amplitudes, got shape {psi.shape}")
    if num_qubits is None:
        num_qubits = psi.shape[1].bit_length() - 1
    if psi.shape[1] != 1 << num_qubits:
        raise ShapeError(f"row length {psi.shape[1]} does not match {num_qubits} qubits")
    return CompiledCircuit(gates, num_qubits).run(params, psi)


def z_expectations(amplitudes: np.ndarray, num_qubits: int) -> np.ndarray:
    """(B, Q) matrix of <Z_q> for a batch of states."""
    probs = np.abs(amplitudes) ** 2
    # a per-row reduction keeps each row's value independent of the batch it sits in
    values = (probs[:, None, :] * z_signs(num_qubits)[None, :, :]).sum(axis=2)
    return np.clip(values, -1.0, 1.0)


def adjoint_gradient(
    gates: Sequence[GateOp],
    params,
    final_states: np.ndarray,
    weights: np.ndarray,
    num_qubits: int,
) -> np.ndarray:
    """Gradient of sum_b sum_q weights[b, q] <Z_q>_b with respect to ``params``.

    ``final_states`` must be the output of :func:`simulate` for the same
    gates and parameters.  Intermediate states are recovered by running the
    circuit backwards, so memory stays at two batches.  Agrees with
    :func:`parameter_shift_gradient` to rounding error.
    """
    return CompiledCircuit(gates, num_qubits).gradient(params, final_states, weights)
