"""Mid-circuit measurement correction on a bit-flip-protection loop.

A memory qubit (qubit 0) prepared in ``|1>`` is copied onto an ancilla
(qubit 1) by a CNOT every round.  The ancilla is measured mid-circuit; a
reading of 0 is taken to mean the memory flipped and triggers a corrective X
on the memory.  The ancilla is then reset.  A wrong ancilla reading therefore
flips a healthy memory, so readout errors show up directly in the final
memory population.

Three modes are compared:

* ``bare``: plain noisy ancilla readout.
* ``mrc``: a random Pauli before every ancilla readout, with the recorded bit
  (and hence the feedback condition) XORed with the Pauli's flip bit.  This
  turns the readout noise into a symmetric bit flip with rate ``p1``.
* ``mrc+qprc``: additionally inserts an artificial X before the ancilla
  readout with probability ``p1`` per round and weights every shot by
  ``(-1)^(number of insertions)``.  The signed ensemble implements the
  first-order inverse of the flip channel, so the feedback errors cancel on
  average at the cost of ``1/(1-2*p1)`` more shots per round.
"""

from __future__ import annotations

import math
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from itertools import product
from typing import Any

import numpy as np

from .bitdist import QUASI, SignedDist, marginalize
from .errors import DegenerateDistributionError, ValidationError
from .mrc import PauliString, TwirlConfig, characterize_error_distribution, sample_paulis
from .rng import substream
from .simcore import (
    _RESET_KRAUS,
    PAULI_MATRICES,
    Channel,
    ChannelNode,
    Circuit,
    MeasurementModel,
    Reset,
    _apply_parts,
    _conjugate,
    _kraus_sum,
    _outcome_probs,
    _project,
    conditional,
    gate,
    gate_matrix,
    measure,
)

MEMORY, ANCILLA = 0, 1
MODES = ("bare", "mrc", "mrc+qprc")
# ancilla-local qubit 0 is the ancilla, qubit 1 the memory
_TO_CIRCUIT = {0: ANCILLA, 1: MEMORY}


@dataclass(frozen=True)
class QpSchedule:
    """Signed X_p insertion schedule: ``rounds`` MCMs, insertion probability ``p1``, base shots ``shots``."""

    rounds: int
    p1: float
    shots: int
    compensate: bool = True

    def __post_init__(self):
        if self.rounds < 1:
            raise ValidationError("need at least one round")
        if not 0 <= self.p1 < 0.5:
            raise ValidationError(f"p1 must lie in [0, 1/2) for the compensation 1/(1-2p1) to exist, got {self.p1}")
        if self.shots < 1:
            raise ValidationError("shots must be positive")

    @property
    def compensation(self) -> float:
        """Shot multiplier, applied once per corrected round."""
        return (1 - 2 * self.p1) ** -self.rounds

    @property
    def total_shots(self) -> int:
        if not self.compensate:
            return self.shots
        # tolerance keeps exact products like 1000/0.8 from rounding up
        return math.ceil(self.shots * self.compensation - 1e-9)

    @property
    def effective_shots(self) -> float:
        """Expected signed total, ``(1-2*p1)^R`` times the shots actually run."""
        return self.total_shots * (1 - 2 * self.p1) ** self.rounds


@dataclass(frozen=True)
class Variant:
    """One X_p insertion pattern; ``rounds`` are 1-based round numbers carrying X_p."""

    rounds: tuple[int, ...]
    sign: int
    shots: int
    probability: float


@dataclass(frozen=True)
class SignedCounts:
    sign: int
    counts: dict[int, int]
    variant: tuple[int, ...] = ()
    width: int = 1

    def __post_init__(self):
        if self.sign not in (1, -1):
            raise ValidationError("sign must be +1 or -1")
        if self.sign != (-1) ** len(self.variant):
            raise ValidationError(f"sign {self.sign:+d} does not match {len(self.variant)} insertions")


def variant_probabilities(rounds: int, p1: float) -> list[tuple[tuple[int, ...], int, float]]:
    """Every insertion pattern with its sign and independent-Bernoulli probability."""
    out = []
    for bits in product((0, 1), repeat=rounds):
        ins = tuple(r + 1 for r, b in enumerate(bits) if b)
        prob = p1 ** len(ins) * (1 - p1) ** (rounds - len(ins))
        if prob > 0:
            out.append((ins, (-1) ** len(ins), prob))
    return out


def qp_schedule_variants(schedule: QpSchedule, rng: np.random.Generator) -> list[Variant]:
    """Draw the per-shot insertion patterns and group the shots by pattern.

    Every shot independently carries X_p in each round with probability
    ``p1``, which is the same as a multinomial split of the shot budget over
    patterns.  Patterns that receive no shots are omitted.
    """
    table = variant_probabilities(schedule.rounds, schedule.p1)
    probs = np.array([p for _, _, p in table])
    drawn = rng.multinomial(schedule.total_shots, probs / probs.sum())
    return [Variant(ins, sign, int(c), p) for (ins, sign, p), c in zip(table, drawn) if c]


def combine_signed(results: Sequence[SignedCounts]) -> SignedDist:
    """Signed sum of counts normalized by the signed shot total.

    ``meta`` records the raw shot count, the signed total (the effective
    number of shots) and ``stderr0``, the delta-method standard error of
    the weight at outcome 0.
    """
    if not results:
        raise DegenerateDistributionError("nothing to combine")
    widths = {r.width for r in results}
    if len(widths) != 1:
        raise ValidationError(f"inconsistent widths {sorted(widths)}")
    acc: dict[int, int] = {}
    shots = 0
    signed_total = 0
    for r in results:
        for x, c in r.counts.items():
            acc[x] = acc.get(x, 0) + r.sign * c
            shots += c
            signed_total += r.sign * c
    if signed_total <= 0:
        raise DegenerateDistributionError(f"signed shot total is {signed_total}; add shots or lower p1")
    est = {x: c / signed_total for x, c in acc.items() if c}
    p0 = est.get(0, 0.0)
    # every shot contributes sign * (1[x=0] - p0) to the ratio estimator's numerator
    hits = sum(c for r in results for x, c in r.counts.items() if x == 0)
    var = hits * (1 - p0) ** 2 + (shots - hits) * p0**2
    meta = {
        "shots": shots,
        "signed_total": signed_total,
        "effective_shots": signed_total,
        "stderr0": math.sqrt(var) / signed_total,
    }
    return SignedDist(widths.pop(), est, kind=QUASI, meta=meta)


def _pauli_labels(paulis: Sequence[PauliString | str] | None, rounds: int) -> list[str]:
    if paulis is None:
        return ["I"] * rounds
    labels = [p.labels if isinstance(p, PauliString) else str(p) for p in paulis]
    if len(labels) != rounds or any(len(lab) != 1 or lab not in "IXYZ" for lab in labels):
        raise ValidationError(f"need one single-qubit Pauli per round, got {labels}")
    return labels


def build_protection_circuit(
    rounds: int,
    mode: str,
    model: MeasurementModel,
    variant: Iterable[int] = (),
    *,
    paulis: Sequence[PauliString | str] | None = None,
    memory_noise: Channel | None = None,
) -> Circuit:
    """The ``rounds``-round protection loop followed by a memory readout.

    ``model`` is written in ancilla-local labels: qubit 0 is the ancilla,
    qubit 1 the memory (for readout crosstalk onto the memory).  ``paulis``
    gives the MRC Pauli per round; ``variant`` lists the 1-based rounds that
    carry X_p (``mrc+qprc`` only).  ``memory_noise`` (a channel on qubit 0)
    is applied to the memory at the end of every round.  Slot ``r - 1``
    holds round ``r``'s corrected ancilla bit; slot ``rounds`` is the final
    memory readout and the only output.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if rounds < 1:
        raise ValidationError("need at least one round")
    variant = tuple(sorted(set(int(r) for r in variant)))
    bad = [r for r in variant if not 1 <= r <= rounds]
    if bad:
        raise ValidationError(f"variant rounds {bad} outside 1..{rounds}")
    if variant and mode != "mrc+qprc":
        raise ValidationError("X_p insertions belong to the mrc+qprc mode")
    if mode == "bare" and paulis is not None and any(str(getattr(p, "labels", p)) != "I" for p in paulis):
        raise ValidationError("bare mode does not insert Paulis")
    labels = _pauli_labels(paulis, rounds)
    anc_model = model.relabel(_TO_CIRCUIT)
    c = Circuit(2, outputs=(rounds,))
    c.append(gate("X", MEMORY))
    for r in range(rounds):
        c.append(gate("CNOT", MEMORY, ANCILLA))
        if labels[r] != "I":
            c.append(gate(labels[r], ANCILLA))
        if r + 1 in variant:
            c.append(gate("X", ANCILLA))
        # the recorded bit is un-flipped classically, so the feedback condition is f(P)
        flip = 1 if labels[r] in "XY" else 0
        c.append(measure((ANCILLA,), (r,), anc_model, xor_mask=flip))
        c.append(conditional("X", (MEMORY,), ((r, 0),)))
        c.append(Reset((ANCILLA,)))
        if memory_noise is not None:
            c.append(ChannelNode(memory_noise))
    c.append(measure((MEMORY,), (rounds,)))
    return c


@dataclass
class McmCurve:
    mode: str
    rounds: list[int]
    p0: list[float]
    stderr: list[float]
    shots: list[int]
    effective_shots: list[float]
    meta: dict[str, Any] = field(default_factory=dict)

    def rows(self) -> list[dict[str, Any]]:
        return [
            {"round": r, "p_mem0": p, "stderr": s, "mode": self.mode, "shots": n, "effective_shots": e}
            for r, p, s, n, e in zip(self.rounds, self.p0, self.stderr, self.shots, self.effective_shots)
        ]


def characterize_ancilla_flip(model: MeasurementModel, cfg: TwirlConfig) -> float:
    """Twirled flip probability of the ancilla readout (memory held in ``|0>``)."""
    n = max(model.qubits, default=0) + 1
    p_hat = characterize_error_distribution(model, n, cfg, stream=(99,))
    return float(marginalize(p_hat, [0]).weight(1)) if n > 1 else float(p_hat.weight(1))


class _LoopSimulator:
    """Round-by-round exact evolution of the protection loop with prefix caching.

    After the feedback X the ancilla bit is never read again, so the two
    measurement branches merge and the state between rounds is a single
    density matrix.  States are cached per prefix of ``(pauli, x_p)`` round
    labels, which shares work between X_p variants of one randomization.
    Agrees with ``output_distribution(build_protection_circuit(...))``.
    """

    def __init__(self, model: MeasurementModel, memory_noise: Channel | None):
        self.model = model.relabel(_TO_CIRCUIT)
        self.memory_noise = memory_noise
        rho = np.zeros((4, 4), dtype=complex)
        rho[0, 0] = 1.0
        self.cache: dict[tuple, np.ndarray] = {(): _conjugate(rho, PAULI_MATRICES["X"], (MEMORY,), 2)}
        self.cnot = gate_matrix("CNOT")

    def _state(self, prefix: tuple) -> np.ndarray:
        if prefix in self.cache:
            return self.cache[prefix]
        rho = self._state(prefix[:-1])
        label, xp = prefix[-1]
        rho = _conjugate(rho, self.cnot, (MEMORY, ANCILLA), 2)
        if label != "I":
            rho = _conjugate(rho, PAULI_MATRICES[label], (ANCILLA,), 2)
        if xp:
            rho = _conjugate(rho, PAULI_MATRICES["X"], (ANCILLA,), 2)
        rho = self.model.apply(rho, 2)
        flip = 1 if label in "XY" else 0
        # recorded bit = raw ^ flip; feedback fires when it reads 0, i.e. raw == flip
        fire = _project(rho, 2, (ANCILLA,), flip)
        rho = rho - fire + _conjugate(fire, PAULI_MATRICES["X"], (MEMORY,), 2)
        rho = _kraus_sum(rho, _RESET_KRAUS, (ANCILLA,), 2)
        if self.memory_noise is not None:
            rho = _apply_parts(rho, self.memory_noise, 2)
        self.cache[prefix] = rho
        return rho

    def p_mem0(self, labels: Sequence[str], variant: Iterable[int] = ()) -> float:
        ins = set(variant)
        prefix = tuple((lab, (r + 1) in ins) for r, lab in enumerate(labels))
        probs = _outcome_probs(self._state(prefix), 2, (MEMORY,))
        return float(probs[0] / probs.sum())


def _binomial(hits: int, shots: int) -> tuple[float, float]:
    p = hits / shots
    return p, math.sqrt(p * (1 - p) / shots)


def run_mcm_experiment(
    rounds: int,
    mode: str,
    model: MeasurementModel,
    shots: int,
    seed: int,
    *,
    K: int = 100,
    p1: float | None = None,
    memory_noise: Channel | None = None,
    sampling: str = "iid",
    characterization_shots: int = 100_000,
    target_stderr: float | None = None,
) -> McmCurve:
    """Curve of P(memory reads 0) after N = 1..``rounds`` protection rounds.

    Each curve point is an independent experiment with ``shots`` base shots
    (``mrc+qprc`` runs the compensated ``shots / (1-2*p1)^N``).  MRC modes
    split the shots over ``K`` randomizations, each with its own Pauli per
    round.  In ``mrc+qprc`` mode ``p1`` defaults to the twirled ancilla flip
    rate characterized with ``characterization_shots`` shots.  Error bars
    are binomial, or the signed-ratio standard error for ``mrc+qprc``.
    ``target_stderr`` only adds warnings to ``meta`` when missed.
    """
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}, got {mode!r}")
    if shots < 1:
        raise ValidationError("shots must be positive")
    mode_id = MODES.index(mode)
    meta: dict[str, Any] = {"K": K if mode != "bare" else None, "seed": seed, "model": model.label}
    if mode == "mrc+qprc" and p1 is None:
        p1 = characterize_ancilla_flip(model, TwirlConfig.from_total(characterization_shots, K, seed, sampling))
        meta["p1_source"] = "characterized"
    elif mode == "mrc+qprc":
        meta["p1_source"] = "given"
    meta["p1"] = p1
    k_eff = 1 if mode == "bare" else K
    sim = _LoopSimulator(model, memory_noise)
    curve = McmCurve(mode, [], [], [], [], [], meta)
    warnings: list[str] = []
    for n_rounds in range(1, rounds + 1):
        if mode == "mrc+qprc":
            sched = QpSchedule(n_rounds, p1, shots)
            budget = sched.total_shots
        else:
            budget = shots
        per_k = np.full(k_eff, budget // k_eff)
        per_k[: budget % k_eff] += 1
        if mode == "bare":
            paulis_k = [["I"] * n_rounds]
        else:
            cfg = TwirlConfig(n_rounds * K, 1, seed, sampling)
            flat = [p.labels for p in sample_paulis(1, cfg, substream(seed, mode_id, n_rounds, 0))]
            paulis_k = [flat[k * n_rounds : (k + 1) * n_rounds] for k in range(K)]
        signed: list[SignedCounts] = []
        hits = total = 0
        for k in range(k_eff):
            rng = substream(seed, mode_id, n_rounds, 1, k)
            labels = paulis_k[k]
            if mode == "mrc+qprc":
                variants = qp_schedule_variants(QpSchedule(n_rounds, p1, int(per_k[k]), compensate=False), rng)
            else:
                variants = [Variant((), 1, int(per_k[k]), 1.0)]
            for v in variants:
                q0 = sim.p_mem0(labels, v.rounds)
                h = int(rng.binomial(v.shots, min(max(q0, 0.0), 1.0)))
                signed.append(SignedCounts(v.sign, {0: h, 1: v.shots - h}, v.rounds))
                hits += h
                total += v.shots
        if mode == "mrc+qprc":
            est = combine_signed(signed)
            p0, err, eff = est.weight(0), est.meta["stderr0"], float(est.meta["effective_shots"])
        else:
            p0, err = _binomial(hits, total)
            eff = float(total)
        curve.rounds.append(n_rounds)
        curve.p0.append(float(p0))
        curve.stderr.append(float(err))
        curve.shots.append(int(total))
        curve.effective_shots.append(eff)
        if target_stderr is not None and err > target_stderr:
            warnings.append(f"round {n_rounds}: stderr {err:.3g} exceeds target {target_stderr:.3g}")
    if warnings:
        meta["warnings"] = warnings
    return curve
