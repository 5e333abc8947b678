"""Small density-matrix simulator with noisy terminal and mid-circuit measurement.

A measurement is modelled as an ideal computational-basis projective
measurement preceded by a noise process (``MeasurementModel``).  Qubit ``i``
is bit ``i`` of basis-state indices, matching :mod:`romit.bitdist`.

``run_circuit`` evaluates circuits exactly: the density matrix is branched on
every mid-circuit outcome, branches that share the same live classical record
are merged, and shots are drawn once from the resulting output distribution.
This gives the same counts distribution as simulating each shot from a fresh
``|0...0>`` but costs one evolution instead of ``shots``.  ``method="shots"``
runs the literal per-shot loop and is kept as a cross-check.
"""

from __future__ import annotations

import functools
import os
from collections.abc import Iterable, Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any, Union

import numpy as np
from scipy.stats import unitary_group

from .bitdist import BitString, SignedDist
from .errors import NumericalError, ValidationError

MAX_QUBITS = 10
TOL = 1e-10
DEBUG = bool(os.environ.get("ROMIT_DEBUG"))

# Gates

_I2 = np.eye(2, dtype=complex)
_X = np.array([[0, 1], [1, 0]], dtype=complex)
_Y = np.array([[0, -1j], [1j, 0]], dtype=complex)
_Z = np.array([[1, 0], [0, -1]], dtype=complex)
_H = np.array([[1, 1], [1, -1]], dtype=complex) / np.sqrt(2)
_S = np.array([[1, 0], [0, 1j]], dtype=complex)
# two-qubit matrices in local little-endian order: local bit 0 = first target
_CNOT = np.array([[1, 0, 0, 0], [0, 0, 0, 1], [0, 0, 1, 0], [0, 1, 0, 0]], dtype=complex)
_CZ = np.diag([1, 1, 1, -1]).astype(complex)

PAULI_MATRICES = {"I": _I2, "X": _X, "Y": _Y, "Z": _Z}
FIXED_GATES = {"I": _I2, "X": _X, "Y": _Y, "Z": _Z, "H": _H, "S": _S, "CNOT": _CNOT, "CX": _CNOT, "CZ": _CZ}


def rx(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -1j * s], [-1j * s, c]])


def ry(theta: float) -> np.ndarray:
    c, s = np.cos(theta / 2), np.sin(theta / 2)
    return np.array([[c, -s], [s, c]], dtype=complex)


def rz(theta: float) -> np.ndarray:
    return np.diag([np.exp(-0.5j * theta), np.exp(0.5j * theta)])


ROTATIONS = {"RX": rx, "RY": ry, "RZ": rz}


def haar_su2(rng: np.random.Generator) -> np.ndarray:
    """Haar-random single-qubit unitary with unit determinant."""
    u = unitary_group.rvs(2, random_state=rng)
    return u / np.sqrt(np.linalg.det(u))


def gate_matrix(name: str, params: Sequence[float] = ()) -> np.ndarray:
    key = name.upper()
    if key in FIXED_GATES:
        return FIXED_GATES[key]
    if key in ROTATIONS:
        if len(params) != 1:
            raise ValidationError(f"{name} takes exactly one angle")
        return ROTATIONS[key](float(params[0]))
    if key == "U":
        # explicit 2x2 matrix given as [[re, im], ...] rows
        arr = np.asarray(params, dtype=float)
        if arr.shape != (2, 2, 2):
            raise ValidationError("U expects params shaped [[[re, im], [re, im]], [[re, im], [re, im]]]")
        return arr[..., 0] + 1j * arr[..., 1]
    raise ValidationError(f"unknown gate {name!r}")


def is_unitary(u: np.ndarray, tol: float = TOL) -> bool:
    return u.shape[0] == u.shape[1] and np.allclose(u.conj().T @ u, np.eye(u.shape[0]), atol=tol)


# Tensor-index application of local operators


def _apply_side(t: np.ndarray, op: np.ndarray, targets: Sequence[int], n: int, side: int) -> np.ndarray:
    k = len(targets)
    opt = op.reshape((2,) * (2 * k))
    axes = [side * n + n - 1 - q for q in targets]
    in_axes = [k + k - 1 - j for j in range(k)]
    res = np.tensordot(opt, t, axes=(in_axes, axes))
    dest = [side * n + n - 1 - targets[k - 1 - a] for a in range(k)]
    return np.moveaxis(res, list(range(k)), dest)


def _conjugate(rho: np.ndarray, op: np.ndarray, targets: Sequence[int], n: int) -> np.ndarray:
    """``op rho op^dagger`` with ``op`` acting on ``targets``."""
    t = rho.reshape((2,) * (2 * n))
    t = _apply_side(t, op, targets, n, 0)
    t = _apply_side(t, op.conj(), targets, n, 1)
    return t.reshape(rho.shape)


def _kraus_sum(rho: np.ndarray, kraus: Sequence[np.ndarray], targets: Sequence[int], n: int) -> np.ndarray:
    if len(kraus) == 1:
        return _conjugate(rho, kraus[0], targets, n)
    out = np.zeros_like(rho)
    for k in kraus:
        out += _conjugate(rho, k, targets, n)
    return out


@functools.lru_cache(maxsize=256)
def _local_index(n: int, targets: tuple[int, ...]) -> np.ndarray:
    idx = np.arange(1 << n)
    loc = np.zeros_like(idx)
    for j, q in enumerate(targets):
        loc |= ((idx >> q) & 1) << j
    return loc


# States


class QuantumState:
    """Density matrix of an ``n``-qubit register (``n <= 10``)."""

    __slots__ = ("n", "rho")

    def __init__(self, n: int, rho: np.ndarray, *, check: bool = True):
        if not 1 <= n <= MAX_QUBITS:
            raise ValidationError(f"simulator supports 1..{MAX_QUBITS} qubits, got {n}")
        rho = np.asarray(rho, dtype=complex)
        if rho.shape != (1 << n, 1 << n):
            raise ValidationError(f"density matrix must be {1 << n}x{1 << n}")
        self.n = n
        self.rho = rho
        if check:
            self.validate()

    @classmethod
    def zero(cls, n: int) -> "QuantumState":
        return cls.basis(n, 0)

    @classmethod
    def basis(cls, n: int, x: int) -> "QuantumState":
        rho = np.zeros((1 << n, 1 << n), dtype=complex)
        rho[x, x] = 1.0
        return cls(n, rho, check=False)

    @classmethod
    def pure(cls, psi: np.ndarray) -> "QuantumState":
        psi = np.asarray(psi, dtype=complex)
        n = int(np.log2(len(psi)))
        psi = psi / np.linalg.norm(psi)
        return cls(n, np.outer(psi, psi.conj()))

    def probabilities(self) -> np.ndarray:
        return np.clip(self.rho.diagonal().real, 0.0, None)

    def validate(self, tol: float = TOL) -> None:
        rho = self.rho
        if not np.allclose(rho, rho.conj().T, atol=tol):
            raise NumericalError("density matrix is not Hermitian")
        if abs(np.trace(rho).real - 1) > tol:
            raise NumericalError(f"density matrix trace {np.trace(rho).real!r} != 1")
        if np.linalg.eigvalsh(rho).min() < -1e-9:
            raise NumericalError("density matrix has negative eigenvalues")


def _check_targets(targets: Sequence[int], n: int) -> tuple[int, ...]:
    targets = tuple(int(q) for q in targets)
    if len(set(targets)) != len(targets) or any(not 0 <= q < n for q in targets):
        raise ValidationError(f"invalid targets {targets} for {n} qubits")
    return targets


def apply_unitary(state: QuantumState, gate: np.ndarray, targets: Sequence[int]) -> QuantumState:
    targets = _check_targets(targets, state.n)
    gate = np.asarray(gate, dtype=complex)
    if len(targets) not in (1, 2) or gate.shape != (1 << len(targets),) * 2:
        raise ValidationError("gates act on one or two qubits with a matching matrix")
    if not is_unitary(gate):
        raise ValidationError("gate is not unitary")
    out = QuantumState(state.n, _conjugate(state.rho, gate, targets, state.n), check=False)
    if DEBUG:
        out.validate()
    return out


# Noise channels


@dataclass(frozen=True, eq=False)
class NoiseChannel:
    """Kraus operators acting on an ordered set of qubits (local bit j = ``targets[j]``)."""

    kraus: tuple[np.ndarray, ...]
    targets: tuple[int, ...] = (0,)
    label: str = ""

    def __post_init__(self):
        kraus = tuple(np.asarray(k, dtype=complex) for k in self.kraus)
        object.__setattr__(self, "kraus", kraus)
        object.__setattr__(self, "targets", tuple(int(q) for q in self.targets))
        dim = 1 << len(self.targets)
        if not kraus or any(k.shape != (dim, dim) for k in kraus):
            raise ValidationError(f"Kraus operators of {self.label or 'channel'} must be {dim}x{dim}")
        if len(set(self.targets)) != len(self.targets):
            raise ValidationError("channel targets must be distinct")
        total = sum(k.conj().T @ k for k in kraus)
        if not np.allclose(total, np.eye(dim), atol=TOL):
            raise ValidationError(f"{self.label or 'channel'} is not trace preserving")

    @property
    def parts(self) -> tuple["NoiseChannel", ...]:
        return (self,)

    @property
    def is_identity(self) -> bool:
        # with every Kraus operator proportional to I, completeness forces the identity map
        return all(np.allclose(k, k[0, 0] * np.eye(len(k)), atol=TOL) for k in self.kraus)

    def relabel(self, mapping: Mapping[int, int]) -> "NoiseChannel":
        return NoiseChannel(self.kraus, tuple(mapping.get(q, q) for q in self.targets), self.label)


@dataclass(frozen=True, eq=False)
class CompositeChannel:
    """Channels applied left to right."""

    parts: tuple[NoiseChannel, ...]
    label: str = "composite"

    @property
    def targets(self) -> tuple[int, ...]:
        return tuple(sorted({q for p in self.parts for q in p.targets}))

    @property
    def is_identity(self) -> bool:
        return all(p.is_identity for p in self.parts)

    def relabel(self, mapping: Mapping[int, int]) -> "CompositeChannel":
        return CompositeChannel(tuple(p.relabel(mapping) for p in self.parts), self.label)


Channel = Union[NoiseChannel, CompositeChannel]


def _unit_interval(name: str, value: float) -> float:
    value = float(value)
    if not 0.0 <= value <= 1.0:
        raise ValidationError(f"{name} must lie in [0, 1], got {value}")
    return value


def identity_channel(qubit: int = 0) -> NoiseChannel:
    return NoiseChannel((_I2,), (qubit,), "identity")


def amplitude_damping(gamma: float, qubit: int = 0) -> NoiseChannel:
    """T1-style relaxation ``|1> -> |0>`` with probability ``gamma``."""
    g = _unit_interval("gamma", gamma)
    k0 = np.array([[1, 0], [0, np.sqrt(1 - g)]], dtype=complex)
    k1 = np.array([[0, np.sqrt(g)], [0, 0]], dtype=complex)
    return NoiseChannel((k0, k1), (qubit,), f"amplitude_damping({g})")


def bit_flip(p: float, qubit: int = 0) -> NoiseChannel:
    p = _unit_interval("p", p)
    return NoiseChannel((np.sqrt(1 - p) * _I2, np.sqrt(p) * _X), (qubit,), f"bit_flip({p})")


def coherent_rotation(axis: str, theta: float, qubit: int = 0) -> NoiseChannel:
    axis = axis.upper()
    if axis not in ("X", "Y", "Z"):
        raise ValidationError(f"rotation axis must be X, Y or Z, got {axis!r}")
    return NoiseChannel((ROTATIONS["R" + axis](float(theta)),), (qubit,), f"coherent_rotation({axis},{theta})")


def correlated_crosstalk(control: int, target: int, delta: float) -> NoiseChannel:
    """Flip ``target`` with probability ``delta`` whenever ``control`` is in ``|1>``."""
    d = _unit_interval("delta", delta)
    if control == target:
        raise ValidationError("crosstalk control and target must differ")
    p0 = np.diag([1.0, 0.0]).astype(complex)
    p1 = np.diag([0.0, 1.0]).astype(complex)
    # local bit 0 = control, bit 1 = target; kron order is (bit 1) x (bit 0)
    k0 = np.kron(_I2, p0) + np.sqrt(1 - d) * np.kron(_I2, p1)
    k1 = np.sqrt(d) * np.kron(_X, p1)
    return NoiseChannel((k0, k1), (control, target), f"crosstalk({control}->{target},{d})")


def correlated_flip(qubits: Sequence[int], p: float) -> NoiseChannel:
    """Flip every qubit in ``qubits`` together with probability ``p``."""
    p = _unit_interval("p", p)
    qubits = tuple(qubits)
    xs = functools.reduce(np.kron, [_X] * len(qubits))
    return NoiseChannel(
        (np.sqrt(1 - p) * np.eye(1 << len(qubits)), np.sqrt(p) * xs), qubits, f"correlated_flip({qubits},{p})"
    )


def composite(channels: Iterable[Channel]) -> CompositeChannel:
    parts: list[NoiseChannel] = []
    for ch in channels:
        parts.extend(ch.parts)
    return CompositeChannel(tuple(parts))


def _apply_parts(rho: np.ndarray, channel: Channel, n: int, mapping: Mapping[int, int] | None = None) -> np.ndarray:
    for part in channel.parts:
        targets = part.targets if mapping is None else tuple(mapping[q] for q in part.targets)
        if any(q >= n for q in targets):
            raise ValidationError(f"{part.label} targets {targets} outside a {n}-qubit register")
        if part.is_identity:
            continue
        rho = _kraus_sum(rho, part.kraus, targets, n)
    return rho


def apply_channel(state: QuantumState, channel: Channel, targets: Sequence[int] | None = None) -> QuantumState:
    """Apply ``channel``; ``targets`` optionally re-places a single channel's qubits."""
    mapping = None
    if targets is not None:
        own = channel.targets
        targets = _check_targets(targets, state.n)
        if len(targets) != len(own):
            raise ValidationError(f"channel acts on {len(own)} qubits, got {len(targets)} targets")
        mapping = dict(zip(own, targets))
    out = QuantumState(state.n, _apply_parts(state.rho, channel, state.n, mapping), check=False)
    if DEBUG:
        out.validate()
    return out


# Measurement


@dataclass(frozen=True, eq=False)
class MeasurementModel:
    """Noise process followed by an ideal computational-basis measurement.

    ``channels`` may touch spectator qubits (crosstalk).  An empty model is
    the ideal measurement.
    """

    channels: tuple[NoiseChannel, ...] = ()
    label: str = ""

    def __post_init__(self):
        parts: list[NoiseChannel] = []
        for ch in self.channels:
            parts.extend(ch.parts)
        object.__setattr__(self, "channels", tuple(parts))

    @classmethod
    def ideal(cls) -> "MeasurementModel":
        return cls(())

    @property
    def is_ideal(self) -> bool:
        return all(ch.is_identity for ch in self.channels)

    @property
    def qubits(self) -> tuple[int, ...]:
        return tuple(sorted({q for ch in self.channels for q in ch.targets}))

    def apply(self, rho: np.ndarray, n: int) -> np.ndarray:
        return _apply_parts(rho, CompositeChannel(self.channels), n) if self.channels else rho

    def relabel(self, mapping: Mapping[int, int]) -> "MeasurementModel":
        return MeasurementModel(tuple(ch.relabel(mapping) for ch in self.channels), self.label)

    def povm(self, n: int) -> list[np.ndarray]:
        """Effective noisy POVM elements ``E~_i = Lambda^dagger(E_i)`` on ``n`` qubits."""
        effects = []
        for i in range(1 << n):
            e = np.zeros((1 << n, 1 << n), dtype=complex)
            e[i, i] = 1.0
            for ch in reversed(self.channels):
                e = sum(_conjugate(e, k.conj().T, ch.targets, n) for k in ch.kraus)
            effects.append(e)
        return effects


def _outcome_probs(rho: np.ndarray, n: int, targets: tuple[int, ...]) -> np.ndarray:
    diag = np.clip(rho.diagonal().real, 0.0, None)
    return np.bincount(_local_index(n, targets), weights=diag, minlength=1 << len(targets))


def _project(rho: np.ndarray, n: int, targets: tuple[int, ...], outcome: int) -> np.ndarray:
    keep = _local_index(n, targets) == outcome
    out = np.zeros_like(rho)
    sel = np.ix_(keep, keep)
    out[sel] = rho[sel]
    return out


def outcome_distribution(
    state: QuantumState, model: MeasurementModel | None = None, targets: Sequence[int] | None = None
) -> SignedDist:
    """Exact Born-rule distribution of the recorded bits (bit j = ``targets[j]``)."""
    targets = _check_targets(range(state.n) if targets is None else targets, state.n)
    rho = state.rho if model is None else model.apply(state.rho, state.n)
    probs = _outcome_probs(rho, state.n, targets)
    probs = probs / probs.sum()
    return SignedDist(len(targets), {i: p for i, p in enumerate(probs) if p > 0})


def sample_measurement(
    state: QuantumState, model: MeasurementModel, targets: Sequence[int], rng: np.random.Generator
) -> tuple[BitString, QuantumState]:
    """Draw one noisy outcome and return it with the collapsed post-measurement state."""
    targets = _check_targets(targets, state.n)
    rho = model.apply(state.rho, state.n)
    probs = _outcome_probs(rho, state.n, targets)
    total = probs.sum()
    if total < 1e-12:
        raise NumericalError("measurement has vanishing total probability")
    outcome = int(rng.choice(len(probs), p=probs / total))
    post = _project(rho, state.n, targets, outcome)
    post /= np.trace(post).real
    return BitString(len(targets), outcome), QuantumState(state.n, post, check=DEBUG)


# Circuits


@dataclass(frozen=True, eq=False)
class Gate:
    matrix: np.ndarray
    targets: tuple[int, ...]
    name: str = "U"


@dataclass(frozen=True, eq=False)
class ChannelNode:
    channel: Channel


@dataclass(frozen=True, eq=False)
class Measure:
    """Measure ``targets`` into register ``slots``; recorded bits are XORed with ``xor_mask``."""

    targets: tuple[int, ...]
    slots: tuple[int, ...]
    model: MeasurementModel = field(default_factory=MeasurementModel.ideal)
    xor_mask: int = 0


@dataclass(frozen=True, eq=False)
class Conditional:
    """Apply a gate when every ``(slot, value)`` pair in ``condition`` matches the register."""

    matrix: np.ndarray
    targets: tuple[int, ...]
    condition: tuple[tuple[int, int], ...]
    name: str = "U"

    def holds(self, reg: int) -> bool:
        return all(((reg >> s) & 1) == v for s, v in self.condition)


@dataclass(frozen=True, eq=False)
class Reset:
    targets: tuple[int, ...]


Node = Union[Gate, ChannelNode, Measure, Conditional, Reset]

_RESET_KRAUS = (
    np.array([[1, 0], [0, 0]], dtype=complex),
    np.array([[0, 1], [0, 0]], dtype=complex),
)


def gate(name: str, *targets: int, params: Sequence[float] = ()) -> Gate:
    return Gate(gate_matrix(name, params), tuple(targets), name.upper())


def measure(targets: Sequence[int], slots: Sequence[int] | None = None, model: MeasurementModel | None = None, xor_mask: int = 0) -> Measure:
    targets = tuple(targets)
    return Measure(targets, tuple(targets if slots is None else slots), model or MeasurementModel.ideal(), xor_mask)


def conditional(name: str, targets: Sequence[int], condition: Iterable[tuple[int, int]], params: Sequence[float] = ()) -> Conditional:
    return Conditional(gate_matrix(name, params), tuple(targets), tuple((int(s), int(v)) for s, v in condition), name.upper())


@dataclass(eq=False)
class Circuit:
    """Ordered node list on ``n`` qubits; ``outputs`` lists the register slots reported as counts."""

    n: int
    nodes: list[Node] = field(default_factory=list)
    outputs: tuple[int, ...] | None = None

    def append(self, node: Node) -> "Circuit":
        self.nodes.append(node)
        return self

    @property
    def written_slots(self) -> list[int]:
        return [s for node in self.nodes if isinstance(node, Measure) for s in node.slots]

    @property
    def output_slots(self) -> tuple[int, ...]:
        if self.outputs is not None:
            return tuple(self.outputs)
        return tuple(self.written_slots)

    def validate(self) -> None:
        if not 1 <= self.n <= MAX_QUBITS:
            raise ValidationError(f"circuit width must be in 1..{MAX_QUBITS}")
        written: set[int] = set()
        for i, node in enumerate(self.nodes):
            where = f"node {i}"
            if isinstance(node, ChannelNode):
                targets = node.channel.targets
            else:
                targets = node.targets
            if any(not 0 <= q < self.n for q in targets) or len(set(targets)) != len(targets):
                raise ValidationError(f"{where}: invalid targets {targets}")
            if isinstance(node, (Gate, Conditional)):
                m = node.matrix
                if m.shape != (1 << len(targets),) * 2 or not is_unitary(m):
                    raise ValidationError(f"{where}: gate {node.name} is not a unitary on {len(targets)} qubits")
            if isinstance(node, Conditional):
                missing = [s for s, _ in node.condition if s not in written]
                if missing:
                    raise ValidationError(f"{where}: condition reads unwritten slots {missing}")
                if any(v not in (0, 1) for _, v in node.condition):
                    raise ValidationError(f"{where}: condition values must be 0 or 1")
            if isinstance(node, Measure):
                if len(node.slots) != len(node.targets):
                    raise ValidationError(f"{where}: need one slot per measured qubit")
                if any(s < 0 for s in node.slots):
                    raise ValidationError(f"{where}: negative slot index")
                clash = written.intersection(node.slots)
                if clash or len(set(node.slots)) != len(node.slots):
                    raise ValidationError(f"{where}: slots {sorted(clash) or node.slots} written twice")
                if any(q >= self.n for q in node.model.qubits):
                    raise ValidationError(f"{where}: measurement noise touches qubits outside the register")
                written.update(node.slots)
        unwritten = [s for s in self.output_slots if s not in written]
        if unwritten:
            raise ValidationError(f"output slots {unwritten} are never written")
        if not self.output_slots:
            raise ValidationError("circuit reports no output slots")


@dataclass
class RunResult:
    counts: dict[int, int]
    width: int
    trace: np.ndarray | None = None

    def distribution(self) -> SignedDist:
        total = sum(self.counts.values())
        return SignedDist(self.width, {k: c / total for k, c in self.counts.items() if c})


def _set_bits(reg: int, slots: Sequence[int], bits: int) -> int:
    for j, s in enumerate(slots):
        reg = (reg & ~(1 << s)) | (((bits >> j) & 1) << s)
    return reg


def _live_masks(circuit: Circuit, keep_all: bool) -> list[int]:
    """Bitmask of register slots still needed after each node."""
    needed = 0
    for s in circuit.output_slots:
        needed |= 1 << s
    if keep_all:
        for s in circuit.written_slots:
            needed |= 1 << s
    masks = [0] * len(circuit.nodes)
    for i in range(len(circuit.nodes) - 1, -1, -1):
        masks[i] = needed
        node = circuit.nodes[i]
        if isinstance(node, Conditional):
            for s, _ in node.condition:
                needed |= 1 << s
    return masks


def register_distribution(circuit: Circuit, *, keep_all_slots: bool = False) -> dict[int, float]:
    """Exact probability of every final classical register value.

    Slots that are neither outputs nor read by a later conditional are
    dropped (set to zero) as soon as they die, unless ``keep_all_slots``.
    """
    circuit.validate()
    n = circuit.n
    live = _live_masks(circuit, keep_all_slots)
    rho0 = np.zeros((1 << n, 1 << n), dtype=complex)
    rho0[0, 0] = 1.0
    branches: dict[int, np.ndarray] = {0: rho0}
    finished: dict[int, float] = {}
    last = len(circuit.nodes) - 1
    for i, node in enumerate(circuit.nodes):
        if isinstance(node, Gate):
            branches = {r: _conjugate(rho, node.matrix, node.targets, n) for r, rho in branches.items()}
        elif isinstance(node, ChannelNode):
            branches = {r: _apply_parts(rho, node.channel, n) for r, rho in branches.items()}
        elif isinstance(node, Reset):
            for q in node.targets:
                branches = {r: _kraus_sum(rho, _RESET_KRAUS, (q,), n) for r, rho in branches.items()}
        elif isinstance(node, Conditional):
            branches = {
                r: _conjugate(rho, node.matrix, node.targets, n) if node.holds(r) else rho
                for r, rho in branches.items()
            }
        elif isinstance(node, Measure):
            new: dict[int, np.ndarray] = {}
            for r, rho in branches.items():
                rho = node.model.apply(rho, n)
                probs = _outcome_probs(rho, n, node.targets)
                for outcome in np.flatnonzero(probs > 1e-15):
                    reg = _set_bits(r, node.slots, int(outcome) ^ node.xor_mask) & live[i]
                    if i == last:
                        finished[reg] = finished.get(reg, 0.0) + probs[outcome]
                        continue
                    proj = _project(rho, n, node.targets, int(outcome))
                    if reg in new:
                        new[reg] += proj
                    else:
                        new[reg] = proj
            branches = new
            if DEBUG:
                total = sum(np.trace(b).real for b in branches.values()) + sum(finished.values())
                if abs(total - 1) > 1e-9:
                    raise NumericalError("probability leaked across measurement branches")
            continue
        else:
            raise ValidationError(f"unknown node type {type(node).__name__}")
        if DEBUG:
            for rho in branches.values():
                if not np.allclose(rho, rho.conj().T, atol=TOL):
                    raise NumericalError(f"node {i} broke Hermiticity")
    for r, rho in branches.items():
        finished[r] = finished.get(r, 0.0) + np.trace(rho).real
    total = sum(finished.values())
    if abs(total - 1) > 1e-8:
        raise NumericalError(f"branch probabilities sum to {total}")
    return {r: p / total for r, p in finished.items() if p > 0}


def _outputs_of(reg: int, outputs: Sequence[int]) -> int:
    return sum(((reg >> s) & 1) << j for j, s in enumerate(outputs))


def output_distribution(circuit: Circuit) -> SignedDist:
    """Exact distribution of the output slots (bit j = ``output_slots[j]``)."""
    outputs = circuit.output_slots
    out: dict[int, float] = {}
    for reg, p in register_distribution(circuit).items():
        key = _outputs_of(reg, outputs)
        out[key] = out.get(key, 0.0) + p
    return SignedDist(len(outputs), out)


def _sample_counts(keys: Sequence[int], probs: np.ndarray, shots: int, rng: np.random.Generator) -> dict[int, int]:
    probs = np.asarray(probs, dtype=float)
    drawn = rng.multinomial(shots, probs / probs.sum())
    return {int(k): int(c) for k, c in zip(keys, drawn) if c}


def run_circuit(
    circuit: Circuit,
    shots: int,
    rng: np.random.Generator,
    *,
    record_trace: bool = False,
    method: str = "exact",
) -> RunResult:
    """Simulate ``shots`` executions and count the output-slot bit strings.

    With ``record_trace`` the full classical register of every shot is
    returned in ``trace`` (one integer per shot, bit s = slot s).
    """
    if shots < 0:
        raise ValidationError("shots must be nonnegative")
    circuit.validate()
    outputs = circuit.output_slots
    width = len(outputs)
    if method == "shots":
        return _run_per_shot(circuit, shots, rng, record_trace)
    if method != "exact":
        raise ValidationError(f"unknown method {method!r}")
    if not record_trace:
        dist = output_distribution(circuit)
        keys, probs = dist.arrays()
        return RunResult(_sample_counts(keys, probs, shots, rng), width)
    regs = register_distribution(circuit, keep_all_slots=True)
    keys = np.array(sorted(regs), dtype=np.int64)
    probs = np.array([regs[k] for k in keys.tolist()])
    trace = rng.choice(keys, size=shots, p=probs / probs.sum()) if shots else np.empty(0, dtype=np.int64)
    counts: dict[int, int] = {}
    for reg in trace.tolist():
        key = _outputs_of(reg, outputs)
        counts[key] = counts.get(key, 0) + 1
    return RunResult(counts, width, trace)


def _run_per_shot(circuit: Circuit, shots: int, rng: np.random.Generator, record_trace: bool) -> RunResult:
    n = circuit.n
    outputs = circuit.output_slots
    counts: dict[int, int] = {}
    trace = np.zeros(shots, dtype=np.int64)
    for shot, shot_rng in enumerate(rng.spawn(shots)):
        state = QuantumState.zero(n)
        reg = 0
        for node in circuit.nodes:
            if isinstance(node, Gate):
                state = apply_unitary(state, node.matrix, node.targets)
            elif isinstance(node, ChannelNode):
                state = apply_channel(state, node.channel)
            elif isinstance(node, Reset):
                for q in node.targets:
                    state = QuantumState(n, _kraus_sum(state.rho, _RESET_KRAUS, (q,), n), check=False)
            elif isinstance(node, Conditional):
                if node.holds(reg):
                    state = apply_unitary(state, node.matrix, node.targets)
            elif isinstance(node, Measure):
                bits, state = sample_measurement(state, node.model, node.targets, shot_rng)
                reg = _set_bits(reg, node.slots, bits.mask ^ node.xor_mask)
        trace[shot] = reg
        key = _outputs_of(reg, outputs)
        counts[key] = counts.get(key, 0) + 1
    return RunResult(counts, len(outputs), trace if record_trace else None)


# JSON descriptions

NOISE_SPEC_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["type"],
    "properties": {
        "type": {
            "enum": ["amplitude_damping", "bit_flip", "coherent_rotation", "crosstalk", "correlated_flip", "identity"]
        },
        "qubit": {"type": "integer", "minimum": 0},
        "qubits": {"type": "array", "items": {"type": "integer", "minimum": 0}, "minItems": 1},
        "control": {"type": "integer", "minimum": 0},
        "target": {"type": "integer", "minimum": 0},
        "gamma": {"type": "number", "minimum": 0, "maximum": 1},
        "p": {"type": "number", "minimum": 0, "maximum": 1},
        "delta": {"type": "number", "minimum": 0, "maximum": 1},
        "axis": {"enum": ["X", "Y", "Z", "x", "y", "z"]},
        "theta": {"type": "number"},
    },
    "additionalProperties": False,
}

CIRCUIT_SCHEMA: dict[str, Any] = {
    "type": "object",
    "required": ["n", "nodes"],
    "properties": {
        "n": {"type": "integer", "minimum": 1, "maximum": MAX_QUBITS},
        "outputs": {"type": "array", "items": {"type": "integer", "minimum": 0}},
        "nodes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["op"],
                "properties": {
                    "op": {"type": "string"},
                    "targets": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "params": {"type": "array"},
                    "slots": {"type": "array", "items": {"type": "integer", "minimum": 0}},
                    "model": {"type": "array", "items": NOISE_SPEC_SCHEMA},
                    "noise": NOISE_SPEC_SCHEMA,
                    "xor": {"type": "integer", "minimum": 0},
                    "condition": {
                        "type": "array",
                        "items": {
                            "type": "object",
                            "required": ["slot", "equals"],
                            "properties": {
                                "slot": {"type": "integer", "minimum": 0},
                                "equals": {"enum": [0, 1]},
                            },
                            "additionalProperties": False,
                        },
                    },
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}


def noise_from_spec(spec: Mapping[str, Any]) -> NoiseChannel:
    kind = spec.get("type")
    try:
        if kind == "amplitude_damping":
            return amplitude_damping(spec["gamma"], spec.get("qubit", 0))
        if kind == "bit_flip":
            return bit_flip(spec["p"], spec.get("qubit", 0))
        if kind == "coherent_rotation":
            return coherent_rotation(spec["axis"], spec["theta"], spec.get("qubit", 0))
        if kind == "crosstalk":
            return correlated_crosstalk(spec["control"], spec["target"], spec["delta"])
        if kind == "correlated_flip":
            return correlated_flip(spec["qubits"], spec["p"])
        if kind == "identity":
            return identity_channel(spec.get("qubit", 0))
    except KeyError as exc:
        raise ValidationError(f"noise spec {dict(spec)} is missing parameter {exc}") from exc
    raise ValidationError(f"unknown noise type {kind!r}")


def model_from_spec(specs: Iterable[Mapping[str, Any]], label: str = "") -> MeasurementModel:
    return MeasurementModel(tuple(noise_from_spec(s) for s in specs), label)


def circuit_from_json(doc: Mapping[str, Any]) -> Circuit:
    """Build and validate a circuit from its JSON document (see ``CIRCUIT_SCHEMA``)."""
    import jsonschema

    try:
        jsonschema.validate(doc, CIRCUIT_SCHEMA)
    except jsonschema.ValidationError as exc:
        loc = "/".join(str(p) for p in exc.absolute_path) or "<root>"
        raise ValidationError(f"circuit document invalid at {loc}: {exc.message}") from exc
    circuit = Circuit(doc["n"], outputs=tuple(doc["outputs"]) if "outputs" in doc else None)
    for i, spec in enumerate(doc["nodes"]):
        op = spec["op"].lower()
        targets = tuple(spec.get("targets", ()))
        try:
            if op == "measure":
                model = model_from_spec(spec.get("model", ()))
                circuit.append(measure(targets, spec.get("slots"), model, spec.get("xor", 0)))
            elif op == "reset":
                circuit.append(Reset(targets))
            elif op == "channel":
                if "noise" not in spec:
                    raise ValidationError("channel node needs a 'noise' entry")
                circuit.append(ChannelNode(noise_from_spec(spec["noise"])))
            elif "condition" in spec:
                cond = [(c["slot"], c["equals"]) for c in spec["condition"]]
                circuit.append(conditional(op, targets, cond, spec.get("params", ())))
            else:
                circuit.append(gate(op, *targets, params=spec.get("params", ())))
        except ValidationError as exc:
            raise ValidationError(f"node {i}: {exc}") from exc
    circuit.validate()
    return circuit


def evolve(circuit: Circuit, state: QuantumState | None = None) -> QuantumState:
    """Run a measurement-free circuit on ``state`` (default ``|0...0>``) and return the final state."""
    n = circuit.n
    rho = (QuantumState.zero(n) if state is None else state).rho
    for i, node in enumerate(circuit.nodes):
        if isinstance(node, Gate):
            if node.matrix.shape != (1 << len(node.targets),) * 2 or not is_unitary(node.matrix):
                raise ValidationError(f"node {i}: gate {node.name} is not unitary")
            rho = _conjugate(rho, node.matrix, _check_targets(node.targets, n), n)
        elif isinstance(node, ChannelNode):
            rho = _apply_parts(rho, node.channel, n)
        elif isinstance(node, Reset):
            for q in node.targets:
                rho = _kraus_sum(rho, _RESET_KRAUS, (q,), n)
        else:
            raise ValidationError(f"node {i}: {type(node).__name__} not allowed in a preparation circuit")
    out = QuantumState(n, rho, check=False)
    if DEBUG:
        out.validate()
    return out
