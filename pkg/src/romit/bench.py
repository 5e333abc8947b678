"""Experiment drivers shared by the command line and the acceptance suite.

Random substreams are addressed as ``(experiment, stage, index, ...)`` under
one root seed so that every circuit and randomization is reproducible on its
own and results do not depend on thread scheduling.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any

import numpy as np

from .bitdist import SignedDist, clip_to_probability, from_counts, shannon_entropy, tvd
from .confusion import build_full_confusion, build_local_confusions, correct_local, diagnostics
from .mrc import TwirlConfig, characterize_error_distribution, twirled_confusion, twirled_measure, untwirled_measure
from .qprc import InverseSpec, apply_correction, kth_order_inverse, partitioned_inverse
from .rng import substream
from .simcore import MeasurementModel, QuantumState, apply_unitary, gate_matrix, haar_su2, outcome_distribution

EXP_CONFUSION, EXP_CHARACTERIZE, EXP_QPRC, EXP_MCM = range(4)
FAMILIES = ("ihx", "haar")


def confusion_scan(model: MeasurementModel, n: int, shots: int, K: int, seed: int, sampling: str = "iid") -> dict[str, Any]:
    """Raw and twirled full confusion matrices with their diagnostics."""
    raw = build_full_confusion(model, n, shots, substream(seed, EXP_CONFUSION, 0))
    cfg = TwirlConfig.from_total(shots, K, seed, sampling)
    twirled = twirled_confusion(model, n, cfg, stream=(EXP_CONFUSION, 1))
    return {
        "raw": raw,
        "twirled": twirled,
        "raw_diagnostics": diagnostics(raw),
        "twirled_diagnostics": diagnostics(twirled),
    }


def random_cycle(n: int, family: str, rng: np.random.Generator) -> tuple[list[str], QuantumState]:
    """One cycle of random single-qubit gates on ``|0...0>``.

    ``ihx`` draws each gate from {I, H, X}; ``haar`` draws Haar-random SU(2).
    """
    if family not in FAMILIES:
        raise ValueError(f"unknown circuit family {family!r}")
    state = QuantumState.zero(n)
    labels = []
    for q in range(n):
        if family == "ihx":
            name = "IHX"[int(rng.integers(3))]
            u = gate_matrix(name)
        else:
            u = haar_su2(rng)
            name = "SU2"
        labels.append(name)
        state = apply_unitary(state, u, (q,))
    return labels, state


@dataclass
class QprcBench:
    rows: list[dict[str, Any]]
    summary: dict[str, Any]
    p_hat: SignedDist


def _counts_dist(counts: dict[int, int], n: int) -> SignedDist:
    return from_counts(counts, n)


def qprc_bench(
    model: MeasurementModel,
    n: int,
    *,
    circuits_per_family: int = 100,
    shots: int = 20_000,
    K: int = 100,
    inverse: InverseSpec | None = None,
    calibration_shots: int = 100_000,
    characterization_shots: int = 100_000,
    seed: int = 0,
    sampling: str = "iid",
    threads: int = 1,
) -> QprcBench:
    """Compare local-confusion correction (LRC) with QPRC on random single-cycle circuits.

    LRC corrects untwirled readout with per-qubit confusion matrices from
    ``calibration_shots`` per preparation.  QPRC corrects twirled readout
    with the order-k inverse of the bit-flip distribution characterized from
    ``|0...0>``; when the characterized error exceeds 1/3 the partitioned
    inverse is used instead.  TVDs are against the exact ideal distribution;
    QPRC outputs are scored unclipped (``keep``) and after
    ``clip-renormalize``.
    """
    inverse = inverse or InverseSpec(order=2)
    local = build_local_confusions(model, n, calibration_shots, substream(seed, EXP_QPRC, 0))
    p_hat = characterize_error_distribution(
        model, n, TwirlConfig.from_total(characterization_shots, K, seed, sampling), stream=(EXP_QPRC, 1)
    )
    if abs(1 - p_hat.weight(0)) < 1 / 3:
        q = kth_order_inverse(p_hat, inverse.order, inverse.threshold, cap=inverse.cap)
        method = f"order-{inverse.order}"
    else:
        q = partitioned_inverse(p_hat, inverse)
        method = "partitioned"
    cfg = TwirlConfig.from_total(shots, K, seed, sampling)
    jobs = [(family, i) for family in FAMILIES for i in range(circuits_per_family)]

    def run(job: tuple[str, int]) -> dict[str, Any]:
        family, i = job
        idx = FAMILIES.index(family) * circuits_per_family + i
        labels, state = random_cycle(n, family, substream(seed, EXP_QPRC, 2, idx))
        ideal = outcome_distribution(state)
        raw = _counts_dist(untwirled_measure(state, model, shots, substream(seed, EXP_QPRC, 3, idx)), n)
        lrc = correct_local(local, raw)
        tw = _counts_dist(twirled_measure(state, model, cfg, stream=(EXP_QPRC, 4, idx)), n)
        corrected = apply_correction(tw, q)
        return {
            "circuit": idx,
            "family": family,
            "gates": " ".join(labels),
            "entropy": shannon_entropy(ideal),
            "tvd_raw": float(tvd(raw, ideal)),
            "tvd_lrc": float(tvd(lrc, ideal)),
            "tvd_twirled": float(tvd(tw, ideal)),
            "tvd_qprc": float(tvd(corrected, ideal)),
            "tvd_qprc_clipped": float(tvd(clip_to_probability(corrected, "clip-renormalize"), ideal)),
        }

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            rows = list(pool.map(run, jobs))
    else:
        rows = [run(j) for j in jobs]
    q_tvd = np.array([r["tvd_qprc"] for r in rows])
    l_tvd = np.array([r["tvd_lrc"] for r in rows])
    qc_tvd = np.array([r["tvd_qprc_clipped"] for r in rows])
    ent = np.array([r["entropy"] for r in rows])
    summary = {
        "circuits": len(rows),
        "n": n,
        "shots": shots,
        "K": K,
        "inverse": method,
        "p_hat_zero": float(p_hat.weight(0)),
        "win_rate": float(np.mean(q_tvd < l_tvd)),
        "win_rate_clipped": float(np.mean(qc_tvd < l_tvd)),
        "mean_tvd_lrc": float(l_tvd.mean()),
        "mean_tvd_qprc": float(q_tvd.mean()),
        "corr_tvd_qprc_entropy": _pearson(q_tvd, ent),
        "corr_tvd_qprc_clipped_entropy": _pearson(qc_tvd, ent),
    }
    return QprcBench(rows, summary, p_hat)


def _pearson(a: np.ndarray, b: np.ndarray) -> float:
    if a.std() == 0 or b.std() == 0:
        return float("nan")
    return float(np.corrcoef(a, b)[0, 1])
