"""Dense statevector simulator.

Qubit 0 is the least-significant bit of a basis index: on two qubits, index 1
is ``|01>`` (qubit 0 set). Bitstrings are written most-significant first.
Multi-qubit gates take their targets most-significant first too, so for
``CNOT`` the target list is ``[control, target]`` and for ``TOFFOLI`` it is
``[control, control, target]``.
"""
from dataclasses import dataclass, field
from math import sqrt
from typing import Dict, NamedTuple, Sequence, Tuple

import numpy as np

from hqcnn import ConfigurationError, ShapeError
from hqcnn.rng import get_rng

MAX_QUBITS = 12

_SQRT2_INV = 1 / sqrt(2)
_FIXED_GATES = {
    "H": np.array([[1, 1], [1, -1]], dtype=complex) * _SQRT2_INV,
    "X": np.array([[0, 1], [1, 0]], dtype=complex),
    "Y": np.array([[0, -1j], [1j, 0]], dtype=complex),
    "Z": np.array([[1, 0], [0, -1]], dtype=complex),
    "CNOT": np.array([[1, 0, 0, 0],
                      [0, 1, 0, 0],
                      [0, 0, 0, 1],
                      [0, 0, 1, 0]], dtype=complex),
    "SWAP": np.array([[1, 0, 0, 0],
                      [0, 0, 1, 0],
                      [0, 1, 0, 0],
                      [0, 0, 0, 1]], dtype=complex),
    "TOFFOLI": np.eye(8, dtype=complex)[[0, 1, 2, 3, 4, 5, 7, 6]],
}
# Entries as (00, 01, 10, 11) functions of the half angle; vectorised over angles.
_ROTATION_GATES = {
    "RX": lambda h: (np.cos(h), -1j * np.sin(h), -1j * np.sin(h), np.cos(h)),
    "RY": lambda h: (np.cos(h), -np.sin(h), np.sin(h), np.cos(h)),
    "RZ": lambda h: (np.exp(-1j * h), np.zeros_like(h), np.zeros_like(h), np.exp(1j * h)),
}
GATE_NAMES = frozenset(_FIXED_GATES) | frozenset(_ROTATION_GATES)
GATE_ARITY = {"CNOT": 2, "SWAP": 2, "TOFFOLI": 3}


@dataclass(frozen=True)
class Statevector:
    n_qubits: int
    amplitudes: np.ndarray = field(repr=False)

    def __post_init__(self):
        amps = np.array(self.amplitudes, dtype=complex)
        if amps.shape != (2 ** self.n_qubits,):
            raise ShapeError(f"{self.n_qubits} qubits need {2 ** self.n_qubits} amplitudes, got shape {amps.shape}")
        amps.setflags(write=False)
        object.__setattr__(self, "amplitudes", amps)

    @property
    def probabilities(self) -> np.ndarray:
        return np.abs(self.amplitudes) ** 2

    def norm(self) -> float:
        return float(np.sqrt(self.probabilities.sum()))


class Op(NamedTuple):
    gate: str
    params: Tuple[float, ...]
    qubits: Tuple[int, ...]


@dataclass(frozen=True)
class Circuit:
    n_qubits: int
    ops: Tuple[Op, ...] = ()

    def __post_init__(self):
        _check_n_qubits(self.n_qubits)
        ops = tuple(Op(str(o[0]), tuple(float(p) for p in o[1]), tuple(int(q) for q in o[2])) for o in self.ops)
        for op in ops:
            if op.gate not in GATE_NAMES:
                raise ConfigurationError(f"unknown gate id {op.gate!r}")
            if any(q < 0 or q >= self.n_qubits for q in op.qubits):
                raise ConfigurationError(f"{op.gate} on qubits {op.qubits} outside a {self.n_qubits}-qubit circuit")
            if len(set(op.qubits)) != len(op.qubits):
                raise ConfigurationError(f"{op.gate} has duplicate qubits {op.qubits}")
            if len(op.qubits) != GATE_ARITY.get(op.gate, 1):
                raise ConfigurationError(f"{op.gate} acts on {GATE_ARITY.get(op.gate, 1)} qubits, got {op.qubits}")
        object.__setattr__(self, "ops", ops)

    def __add__(self, other: "Circuit") -> "Circuit":
        if other.n_qubits != self.n_qubits:
            raise ShapeError(f"cannot append a {other.n_qubits}-qubit circuit to a {self.n_qubits}-qubit one")
        return Circuit(self.n_qubits, self.ops + other.ops)

    def __len__(self):
        return len(self.ops)


@dataclass(frozen=True)
class ShotCounts:
    counts: Dict[str, int]
    total: int

    def __post_init__(self):
        if self.total < 1 or sum(self.counts.values()) != self.total:
            raise ConfigurationError(f"counts {self.counts} do not sum to total {self.total}")

    @property
    def n_qubits(self) -> int:
        return len(next(iter(self.counts)))


def _check_n_qubits(n_qubits: int):
    if not 1 <= n_qubits <= MAX_QUBITS:
        raise ConfigurationError(f"n_qubits must be in [1, {MAX_QUBITS}], got {n_qubits}")


def zero_state(n_qubits: int) -> Statevector:
    _check_n_qubits(n_qubits)
    amps = np.zeros(2 ** n_qubits, dtype=complex)
    amps[0] = 1.0
    return Statevector(n_qubits, amps)


def standard_gate(name: str, params: Sequence[float] = ()) -> np.ndarray:
    """Unitary for H, X, Y, Z, RX, RY, RZ, CNOT, SWAP or TOFFOLI; rotations take one angle in radians."""
    name = name.upper()
    params = tuple(params)
    if name in _ROTATION_GATES:
        if len(params) != 1:
            raise ConfigurationError(f"{name} takes exactly one angle, got {params}")
        return rotation_matrices(name, float(params[0]))
    if name in _FIXED_GATES:
        if params:
            raise ConfigurationError(f"{name} takes no parameters, got {params}")
        return _FIXED_GATES[name].copy()
    raise ConfigurationError(f"unknown gate id {name!r}")


def rotation_matrices(name: str, angles) -> np.ndarray:
    """RX/RY/RZ matrices for an array of angles, shape ``angles.shape + (2, 2)``."""
    if name not in _ROTATION_GATES:
        raise ConfigurationError(f"{name!r} is not a rotation gate")
    half = np.asarray(angles, dtype=np.float64) / 2
    entries = [np.broadcast_to(e, half.shape) for e in _ROTATION_GATES[name](half)]
    return np.stack(entries, axis=-1).astype(complex).reshape(half.shape + (2, 2))


def apply_matrix(amplitudes: np.ndarray, gate: np.ndarray, targets: Sequence[int], n_qubits: int) -> np.ndarray:
    """Applies ``gate`` to ``targets`` of a batch of statevectors.

    ``amplitudes`` has shape ``(..., 2**n_qubits)``; leading axes are batch
    axes. ``gate`` is one matrix or a stack of them matching the batch axes.
    Only the targeted axes of the ``(2,)*n`` view are contracted.
    """
    k = len(targets)
    if gate.shape[-2:] != (2 ** k, 2 ** k):
        raise ShapeError(f"gate of shape {gate.shape} does not act on {k} target(s)")
    if len(set(targets)) != k or any(t < 0 or t >= n_qubits for t in targets):
        raise ShapeError(f"targets {list(targets)} invalid for {n_qubits} qubits")
    batch = amplitudes.shape[:-1]
    nb = len(batch)
    psi = amplitudes.reshape(batch + (2,) * n_qubits)
    axes = [nb + n_qubits - 1 - t for t in targets]
    psi = np.moveaxis(psi, axes, list(range(nb, nb + k)))
    moved_shape = psi.shape
    psi = psi.reshape(batch + (2 ** k, -1))
    psi = np.matmul(gate, psi)
    psi = np.moveaxis(psi.reshape(moved_shape), list(range(nb, nb + k)), axes)
    return psi.reshape(batch + (2 ** n_qubits,))


def apply_gate(state: Statevector, gate: np.ndarray, targets: Sequence[int]) -> Statevector:
    return Statevector(state.n_qubits, apply_matrix(state.amplitudes, gate, list(targets), state.n_qubits))


def run_batch(circuit: Circuit, amplitudes: np.ndarray) -> np.ndarray:
    """Runs ``circuit`` on every statevector of ``amplitudes`` (shape ``(B, 2**n)``)."""
    out = amplitudes
    for op in circuit.ops:
        out = apply_matrix(out, standard_gate(op.gate, op.params), op.qubits, circuit.n_qubits)
    return out


def run_circuit(circuit: Circuit, initial: Statevector) -> Statevector:
    if circuit.n_qubits != initial.n_qubits:
        raise ShapeError(f"{circuit.n_qubits}-qubit circuit run on a {initial.n_qubits}-qubit state")
    return Statevector(initial.n_qubits, run_batch(circuit, initial.amplitudes))


def _check_qubit(qubit: int, n_qubits: int):
    if not 0 <= qubit < n_qubits:
        raise ConfigurationError(f"qubit {qubit} invalid for {n_qubits} qubits")


def z_signs(n_qubits: int, qubit: int) -> np.ndarray:
    """+1 where ``qubit`` is 0 in the basis index, -1 where it is 1."""
    bits = (np.arange(2 ** n_qubits) >> qubit) & 1
    return 1.0 - 2.0 * bits


def expectation_z(state: Statevector, qubit: int) -> float:
    _check_qubit(qubit, state.n_qubits)
    return float(np.dot(state.probabilities, z_signs(state.n_qubits, qubit)))


def variance_from_expectation(z):
    """Variance of a single Z measurement given <Z>: 1 - <Z>^2."""
    return 1.0 - np.square(z)


def variance_z(state: Statevector, qubit: int) -> float:
    return float(variance_from_expectation(expectation_z(state, qubit)))


def draw_counts(probabilities: np.ndarray, shots: int, rng: np.random.Generator) -> np.ndarray:
    """Multinomial outcome counts per basis index."""
    probabilities = np.clip(probabilities, 0.0, None)
    return rng.multinomial(shots, probabilities / probabilities.sum())


def sample_shots(state: Statevector, shots: int, rng_seed: int, *path: int) -> ShotCounts:
    """Draws ``shots`` computational-basis measurements of ``state``.

    The generator is ``get_rng(rng_seed, *path)``.

    ``shots`` must be at least 1; callers after exact values use
    ``expectation_z``.
    """
    if shots < 1:
        raise ConfigurationError(f"shots must be >= 1, got {shots}")
    drawn = draw_counts(state.probabilities, shots, get_rng(rng_seed, *path))
    counts = {format(int(i), f"0{state.n_qubits}b"): int(drawn[i]) for i in np.flatnonzero(drawn)}
    return ShotCounts(counts, shots)


def estimate_z_from_shots(counts: ShotCounts, qubit: int) -> float:
    n = counts.n_qubits
    _check_qubit(qubit, n)
    n_one = sum(c for bits, c in counts.counts.items() if bits[n - 1 - qubit] == "1")
    return (counts.total - 2 * n_one) / counts.total


def statevector_csv(state: Statevector) -> str:
    lines = ["index,re,im"]
    lines += [f"{i},{float(a.real)!r},{float(a.imag)!r}" for i, a in enumerate(state.amplitudes)]
    return "\n".join(lines) + "\n"
