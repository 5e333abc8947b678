"""Measurement randomized compiling (MRC).

Each randomization compiles a random Pauli into the last gate cycle before
readout and undoes its bit-flip part classically: recorded outcomes are XORed
with the Pauli's flip mask (bit i set iff the Pauli on qubit i is X or Y).
Averaged over randomizations the measurement noise becomes a stochastic
bit-flip channel, described by one distribution over flip masks that can be
estimated from a single preparation state.
"""

from __future__ import annotations

from collections.abc import Sequence
from dataclasses import dataclass

import numpy as np

from .bitdist import SignedDist
from .confusion import MAX_FULL_QUBITS, ConfusionMatrix
from .errors import DegenerateDistributionError, ValidationError
from .rng import substream
from .simcore import (
    PAULI_MATRICES,
    Circuit,
    MeasurementModel,
    QuantumState,
    _conjugate,
    _outcome_probs,
    evolve,
)

PAULI_LABELS = "IXYZ"
TWIRL_SAMPLING = ("iid", "balanced")


@dataclass(frozen=True)
class PauliString:
    """``labels[i]`` is the Pauli on qubit ``i`` (one of ``I X Y Z``)."""

    labels: str

    def __post_init__(self):
        if not self.labels or set(self.labels) - set(PAULI_LABELS):
            raise ValidationError(f"invalid Pauli string {self.labels!r}")

    @classmethod
    def from_tensor(cls, text: str) -> "PauliString":
        """Parse ``"X⊗I⊗Z⊗Y"`` (or ``"X I Z Y"``); the first factor acts on qubit 0."""
        for sep in ("⊗", "*", " "):
            text = text.replace(sep, "")
        return cls(text.upper())

    @property
    def n(self) -> int:
        return len(self.labels)

    @property
    def flip_mask(self) -> int:
        return sum(1 << q for q, p in enumerate(self.labels) if p in "XY")

    def __str__(self) -> str:
        return "⊗".join(self.labels)


def flip_mask(pauli: PauliString) -> int:
    return pauli.flip_mask


def sample_pauli(n: int, rng: np.random.Generator) -> PauliString:
    """Uniform draw from the 4^n Pauli strings (phases ignored)."""
    if n < 1:
        raise ValidationError("need at least one qubit")
    return PauliString("".join(PAULI_LABELS[i] for i in rng.integers(0, 4, size=n)))


@dataclass(frozen=True)
class TwirlConfig:
    """Randomization budget: ``K`` Paulis, ``shots_per_randomization`` shots each.

    ``sampling="iid"`` draws every Pauli independently.  ``"balanced"``
    still gives each randomization a uniformly distributed Pauli, but walks
    through random permutations of the 2^n flip masks so that every mask is
    used equally often (up to the remainder of ``K / 2^n``).  The choice
    between I and Z (or X and Y) on each qubit walks through an independent
    permutation cycle of its own.
    """

    K: int = 100
    shots_per_randomization: int = 1000
    seed: int = 0
    sampling: str = "iid"

    def __post_init__(self):
        if self.K < 1:
            raise ValidationError("need at least one randomization (K >= 1)")
        if self.shots_per_randomization < 1:
            raise ValidationError("shots_per_randomization must be positive")
        if self.sampling not in TWIRL_SAMPLING:
            raise ValidationError(f"sampling must be one of {TWIRL_SAMPLING}")

    @classmethod
    def from_total(cls, shots: int, K: int = 100, seed: int = 0, sampling: str = "iid") -> "TwirlConfig":
        if K < 1:
            raise ValidationError("need at least one randomization (K >= 1)")
        return cls(K, max(1, shots // K), seed, sampling)

    @property
    def total_shots(self) -> int:
        return self.K * self.shots_per_randomization


def _balanced_cycle(n: int, K: int, rng: np.random.Generator) -> list[int]:
    out: list[int] = []
    while len(out) < K:
        out.extend(rng.permutation(1 << n).tolist())
    return out[:K]


def sample_paulis(n: int, cfg: TwirlConfig, rng: np.random.Generator) -> list[PauliString]:
    """The ``cfg.K`` Paulis of one twirl (see ``TwirlConfig.sampling``)."""
    if cfg.sampling == "iid":
        return [sample_pauli(n, rng) for _ in range(cfg.K)]
    # each randomization's Pauli is still uniform; masks and phase patterns are stratified
    masks = _balanced_cycle(n, cfg.K, rng)
    phases = _balanced_cycle(n, cfg.K, rng)
    return [
        PauliString("".join(("XY" if (m >> q) & 1 else "IZ")[(z >> q) & 1] for q in range(n)))
        for m, z in zip(masks, phases)
    ]


def apply_pauli(rho: np.ndarray, pauli: PauliString, n: int) -> np.ndarray:
    for q, label in enumerate(pauli.labels):
        if label != "I":
            rho = _conjugate(rho, PAULI_MATRICES[label], (q,), n)
    return rho


def _prep_state(prep: Circuit | QuantumState) -> QuantumState:
    return prep if isinstance(prep, QuantumState) else evolve(prep)


def twirled_measure(
    prep: Circuit | QuantumState,
    model: MeasurementModel,
    cfg: TwirlConfig,
    *,
    stream: Sequence[int] = (),
) -> dict[int, int]:
    """Counts of the classically un-flipped outcomes, merged over ``cfg.K`` randomizations.

    ``prep`` is a measurement-free circuit (or its final state); every qubit
    is measured.  Randomness is drawn from substreams of ``cfg.seed`` under
    the ``stream`` prefix: one for the Pauli draws and one per randomization
    for the shots.
    """
    state = _prep_state(prep)
    n = state.n
    paulis = sample_paulis(n, cfg, substream(cfg.seed, *stream, 0))
    targets = tuple(range(n))
    counts = np.zeros(1 << n, dtype=np.int64)
    idx = np.arange(1 << n)
    for k, pauli in enumerate(paulis):
        rho = model.apply(apply_pauli(state.rho, pauli, n), n)
        probs = _outcome_probs(rho, n, targets)
        drawn = substream(cfg.seed, *stream, 1, k).multinomial(cfg.shots_per_randomization, probs / probs.sum())
        counts[idx ^ pauli.flip_mask] += drawn
    return {int(x): int(c) for x, c in enumerate(counts) if c}


def untwirled_measure(
    prep: Circuit | QuantumState, model: MeasurementModel, shots: int, rng: np.random.Generator
) -> dict[int, int]:
    """Plain noisy readout of every qubit, for comparison with the twirled version."""
    state = _prep_state(prep)
    probs = _outcome_probs(model.apply(state.rho, state.n), state.n, tuple(range(state.n)))
    drawn = rng.multinomial(shots, probs / probs.sum())
    return {int(x): int(c) for x, c in enumerate(drawn) if c}


def _basis_prep(n: int, x: int) -> QuantumState:
    return QuantumState.basis(n, x)


def characterize_error_distribution(
    model: MeasurementModel,
    n: int,
    cfg: TwirlConfig,
    *,
    basis_state: int = 0,
    stream: Sequence[int] = (),
) -> SignedDist:
    """Estimate the twirled bit-flip distribution from one basis preparation.

    Outcomes are XORed with the prepared string, so the result is a
    distribution over flip masks whatever ``basis_state`` is (default
    ``|0...0>``).  Each entry has statistical precision ~ 1/sqrt(total shots).
    """
    counts = twirled_measure(_basis_prep(n, basis_state), model, cfg, stream=stream)
    total = sum(counts.values())
    if total == 0:
        raise DegenerateDistributionError("characterization produced no counts")
    return SignedDist(
        n,
        {x ^ basis_state: c / total for x, c in counts.items()},
        meta={
            "K": cfg.K,
            "shots": total,
            "seed": cfg.seed,
            "sampling": cfg.sampling,
            "basis_state": basis_state,
            "model": model.label,
        },
    )


def twirled_confusion(model: MeasurementModel, n: int, cfg: TwirlConfig, *, stream: Sequence[int] = ()) -> ConfusionMatrix:
    """Full 2^n x 2^n confusion matrix measured under MRC (one twirl per preparation)."""
    if n > MAX_FULL_QUBITS:
        raise ValidationError(
            f"full twirled scans are limited to n <= {MAX_FULL_QUBITS}; "
            "use characterize_error_distribution for larger registers"
        )
    dim = 1 << n
    m = np.zeros((dim, dim))
    for j in range(dim):
        counts = twirled_measure(_basis_prep(n, j), model, cfg, stream=(*stream, j))
        total = sum(counts.values())
        for i, c in counts.items():
            m[i, j] = c / total
    return ConfusionMatrix(n, m, {"twirled": True, "K": cfg.K, "shots": cfg.total_shots, "sampling": cfg.sampling})
