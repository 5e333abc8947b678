"""Quasi-probabilistic readout correction (QPRC).

A stochastic bit-flip channel with error distribution ``p`` acts on outcome
distributions by XOR-convolution, so correcting it means convolving with an
(approximate) convolution inverse ``q``.  Writing ``p = p0*delta_0 + e`` with
``s = 1 - p0``, the order-k inverse is the truncated geometric series

    q^(k) = p0^(2k-1) / (p0^(2k) - s^(2k)) * sum_{j=0}^{2k-1} (-1/p0)^j e^j

(``e^j`` is the j-fold XOR self-convolution).  It sums to one, has
``q^(1) = (p0*delta_0 - e) / (2*p0 - 1)``, and leaves a residual
``q^(k) (+) p = (p0^(2k) delta_0 - e^(2k)) / (p0^(2k) - s^(2k))`` whose
off-zero mass is at most ``s^(2k) / (p0^(2k) - s^(2k))``.

For registers whose total error exceeds 1/3 the series is useless;
``partitioned_inverse`` first inverts marginals on small qubit blocks, which
brings the remaining joint error down, and only then applies a joint inverse.
"""

from __future__ import annotations

import hashlib
import json
from collections.abc import Sequence
from dataclasses import dataclass
from typing import Any

import jsonschema
import numpy as np

from .bitdist import (
    DEFAULT_SUPPORT_CAP,
    PROBABILITY,
    QUASI,
    WALSH_MAX_WIDTH,
    BitString,
    SignedDist,
    convolve_powers,
    delta,
    from_walsh,
    embed,
    marginalize,
    to_text,
    walsh_transform,
    xor_convolve,
)
from .errors import DegenerateDistributionError, NumericalError, SupportExplosionError, ValidationError

DEFAULT_THRESHOLD = 1e-10
# local and joint inverses are only trusted while the error weight stays below this
MAX_ERROR = 1 / 3
WALSH_TOL = 1e-12

INVERSE_SPEC_SCHEMA = {
    "type": "object",
    "properties": {
        "order": {"type": "integer", "minimum": 1},
        "threshold": {"type": "number", "minimum": 0},
        "stages": {
            "type": ["array", "null"],
            "items": {
                "type": "array",
                "minItems": 1,
                "items": {"type": "array", "minItems": 1, "items": {"type": "integer", "minimum": 0}},
            },
        },
        "cap": {"type": "integer", "minimum": 1},
    },
    "additionalProperties": False,
}


@dataclass(frozen=True)
class InverseSpec:
    """Order, truncation threshold and optional partition schedule.

    ``stages`` is a list of stages; each stage is a list of disjoint qubit
    blocks covering the register.  ``None`` means the doubling schedule
    (singles, pairs, blocks of four, ...) chosen at inversion time.
    """

    order: int = 2
    threshold: float = DEFAULT_THRESHOLD
    stages: tuple[tuple[tuple[int, ...], ...], ...] | None = None
    cap: int = DEFAULT_SUPPORT_CAP

    def __post_init__(self):
        if int(self.order) != self.order or self.order < 1:
            raise ValidationError("inverse order must be a positive integer")
        if self.threshold < 0:
            raise ValidationError("truncation threshold must be nonnegative")
        if self.stages is not None:
            stages = tuple(tuple(tuple(int(q) for q in block) for block in stage) for stage in self.stages)
            object.__setattr__(self, "stages", stages)

    def validate_for(self, n: int) -> None:
        for i, stage in enumerate(self.stages or ()):
            flat = [q for block in stage for q in block]
            if sorted(flat) != list(range(n)):
                raise ValidationError(f"stage {i} partitions {list(map(list, stage))} are not disjoint and covering for {n} qubits")

    def to_json(self) -> dict[str, Any]:
        return {
            "order": self.order,
            "threshold": self.threshold,
            "stages": None if self.stages is None else [[list(b) for b in stage] for stage in self.stages],
            "cap": self.cap,
        }

    @classmethod
    def from_json(cls, doc: dict[str, Any]) -> "InverseSpec":
        try:
            jsonschema.validate(doc, INVERSE_SPEC_SCHEMA)
        except jsonschema.ValidationError as exc:
            where = "/".join(map(str, exc.absolute_path)) or "<root>"
            raise ValidationError(f"inverse spec at {where}: {exc.message}") from exc
        return cls(
            order=doc.get("order", 2),
            threshold=doc.get("threshold", DEFAULT_THRESHOLD),
            stages=doc.get("stages"),
            cap=doc.get("cap", DEFAULT_SUPPORT_CAP),
        )


def doubling_schedule(n: int) -> tuple[tuple[tuple[int, ...], ...], ...]:
    """Blocks of 1, 2, 4, ... consecutive qubits, stopping before a block spans the register."""
    stages = []
    size = 1
    while size < n:
        stages.append(tuple(tuple(range(s, min(s + size, n))) for s in range(0, n, size)))
        size *= 2
    return tuple(stages)


def _zero_weight(p: SignedDist):
    return p.weight(0)


def _check_invertible(p0, what: str = "distribution") -> None:
    try:
        ok = bool(p0 > 0.5)
    except TypeError:  # symbolic weight; the caller owns the domain
        return
    if not ok:
        raise NumericalError(
            f"{what} has weight {float(p0):.4g} at zero (needs > 1/2); use partitioned_inverse"
        )


def residual_bound(p0: float, k: int) -> float:
    """Upper bound on the off-zero mass of ``q^(k) (+) p`` for a distribution with zero-weight ``p0``."""
    s = 1 - p0
    return s ** (2 * k) / (p0 ** (2 * k) - s ** (2 * k))


def first_order_inverse(p: SignedDist) -> SignedDist:
    """``q = (p0*delta_0 - sum_{x != 0} p_x x) / (2*p0 - 1)``."""
    p0 = _zero_weight(p)
    _check_invertible(p0)
    denom = 2 * p0 - 1
    out = {x: -w / denom for x, w in p.items() if x != 0}
    out[0] = p0 / denom
    return SignedDist(p.n, out, kind=QUASI, meta={"order": 1})


def kth_order_inverse(
    p: SignedDist,
    k: int = 2,
    threshold: float = DEFAULT_THRESHOLD,
    *,
    cap: int = DEFAULT_SUPPORT_CAP,
) -> SignedDist:
    """Order-``k`` quasi-probabilistic inverse (truncated geometric series)."""
    if int(k) != k or k < 1:
        raise ValidationError("inverse order must be a positive integer")
    p0 = _zero_weight(p)
    _check_invertible(p0)
    s = 1 - p0
    e = p.off_zero()
    if not e:
        return SignedDist(p.n, {0: 1 / p0}, kind=QUASI, meta={"order": k, "threshold": threshold})
    try:
        powers = convolve_powers(e, 2 * k - 1, prune=threshold, cap=cap)
    except SupportExplosionError as exc:
        raise SupportExplosionError(
            f"order-{k} inverse support exceeds {cap} entries; raise the threshold or use partitioned_inverse"
        ) from exc
    coef = p0 ** (2 * k - 1) / (p0 ** (2 * k) - s ** (2 * k))
    acc: dict[int, Any] = {}
    for j, pw in enumerate(powers):
        c = coef * (-1) ** j / p0**j
        for x, w in pw.items():
            acc[x] = acc[x] + c * w if x in acc else c * w
    if not p.exact:
        acc = {x: w for x, w in acc.items() if abs(w) >= threshold}
    return SignedDist(p.n, acc, kind=QUASI, meta={"order": k, "threshold": threshold})


def apply_correction(noisy: SignedDist, q: SignedDist, *, cap: int = DEFAULT_SUPPORT_CAP) -> SignedDist:
    """Redistribute every recorded outcome ``x`` over ``x (+) q``; total weight is preserved.

    The result is always a quasi-distribution with ``clip_policy="keep"``;
    pass it through ``bitdist.clip_to_probability`` to choose otherwise.
    """
    if noisy.n != q.n:
        raise ValidationError(f"width mismatch: data {noisy.n}, inverse {q.n}")
    out = xor_convolve(noisy, q, prune=0.0, cap=cap)
    meta = {**noisy.meta, "clip_policy": "keep", "inverse_order": q.meta.get("order")}
    return SignedDist(out.n, out._w, kind=QUASI, meta=meta)


def walsh_exact_inverse(p: SignedDist, *, prune: float = 0.0) -> SignedDist:
    """Exact convolution inverse via pointwise reciprocal in the Walsh domain (dense, n <= 16)."""
    if p.n > WALSH_MAX_WIDTH:
        raise ValidationError(f"exact Walsh inverse limited to n <= {WALSH_MAX_WIDTH}")
    coeffs = walsh_transform(p.to_float() if p.exact else p)
    small = np.flatnonzero(np.abs(coeffs) < WALSH_TOL)
    if small.size:
        raise NumericalError(
            f"channel is not invertible: Walsh coefficient vanishes at s={BitString(p.n, int(small[0]))}"
        )
    q = from_walsh(1.0 / coeffs, p.n, prune=prune)
    return SignedDist(p.n, q._w, kind=QUASI, meta={"method": "walsh-exact"})


def expectation_rescale_factor(p: SignedDist, support: BitString | int) -> float:
    """Walsh coefficient of ``p`` at ``support``; divide a raw Pauli-Z expectation by it."""
    if p.kind != PROBABILITY:
        raise ValidationError("rescaling needs a probability distribution")
    mask = support.mask if isinstance(support, BitString) else int(support)
    factor = sum(float(w) * (-1) ** bin(x & mask).count("1") for x, w in p.items())
    if abs(factor) < WALSH_TOL:
        raise DegenerateDistributionError(f"observable on support {mask:b} is unrecoverable (factor ~ 0)")
    return factor


def _product_inverse(
    p: SignedDist, blocks: Sequence[Sequence[int]], spec: InverseSpec, stage: int
) -> SignedDist:
    marginals = [marginalize(p, block) for block in blocks]
    bad = []
    for block, m in zip(blocks, marginals):
        m0 = m.weight(0)
        try:
            if bool(abs(1 - m0) >= MAX_ERROR):
                bad.append(f"qubits {list(block)}: p0={float(m0):.4g}")
        except TypeError:
            pass
    if bad:
        raise NumericalError(
            f"stage {stage}: marginal error is not below 1/3 on " + "; ".join(bad)
        )
    # disjoint blocks: XOR-convolving the embedded factors is their tensor product
    out = delta(p.n, exact=p.exact)
    for block, m in zip(blocks, marginals):
        qb = kth_order_inverse(m, spec.order, spec.threshold, cap=spec.cap)
        out = xor_convolve(out, embed(qb, block, p.n), prune=0.0, cap=spec.cap)
    return out


def partitioned_inverse(p: SignedDist, spec: InverseSpec | None = None) -> SignedDist:
    """Staged inverse for registers whose total error is too large for a joint series.

    Each stage inverts the marginal of the running (partially corrected)
    distribution on every block of the stage, tensors the block inverses and
    convolves them in.  Stages stop as soon as the running distribution has
    error below 1/3; a final joint order-k inverse finishes the job.  The
    returned quasi-distribution is the XOR-convolution of all stage inverses,
    so ``partitioned_inverse(p) (+) p`` is the corrected error distribution.
    """
    spec = spec or InverseSpec()
    spec.validate_for(p.n)
    stages = spec.stages if spec.stages is not None else doubling_schedule(p.n)
    running = p
    total = delta(p.n, exact=p.exact)
    applied = 0
    for i, blocks in enumerate(stages):
        if _within(running):
            break
        q_stage = _product_inverse(running, blocks, spec, i)
        running = xor_convolve(q_stage, running, prune=spec.threshold if not p.exact else 0.0, cap=spec.cap)
        total = xor_convolve(q_stage, total, prune=spec.threshold if not p.exact else 0.0, cap=spec.cap)
        applied += 1
    if _within(running) is False:
        raise NumericalError(
            f"after {applied} stage(s) the remaining error weight is {float(1 - running.weight(0)):.4g} "
            "(needs < 1/3); add coarser stages"
        )
    joint = kth_order_inverse(running, spec.order, spec.threshold, cap=spec.cap)
    out = xor_convolve(joint, total, prune=spec.threshold if not p.exact else 0.0, cap=spec.cap)
    return SignedDist(p.n, out._w, kind=QUASI, meta={"order": spec.order, "stages_applied": applied})


def _within(d: SignedDist) -> bool | None:
    """Whether the error weight is below 1/3; ``None`` when undecidable (symbolic weights)."""
    try:
        return bool(abs(1 - d.weight(0)) < MAX_ERROR)
    except TypeError:
        return None


def provenance(p_hat: SignedDist, spec: InverseSpec) -> dict[str, Any]:
    """Header recording which characterized distribution and spec produced an inverse."""
    return {
        "source_sha256": hashlib.sha256(to_text(p_hat).encode()).hexdigest(),
        "inverse_spec": json.dumps(spec.to_json(), sort_keys=True),
    }
