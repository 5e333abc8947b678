"""Signed sparse distributions over n-bit strings and their XOR-convolution algebra.

Bit convention: qubit ``i`` is bit ``i`` of the integer mask (qubit 0 is the
least significant bit).  Text renderings put the most significant bit on the
left, so qubit 0 is the *last* character of ``"0101"``.

Weights are 64-bit floats by default.  Passing :class:`fractions.Fraction`
(or sympy) weights switches a distribution to exact mode, in which every
operation runs through plain Python arithmetic and nothing is pruned except
exact zeros.
"""

from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping, Sequence
from fractions import Fraction
from types import MappingProxyType
from typing import Any, NamedTuple

import numpy as np

from .errors import DegenerateDistributionError, SupportExplosionError, ValidationError

MAX_WIDTH = 63
DEFAULT_PRUNE = 1e-12
DEFAULT_SUPPORT_CAP = 1 << 22
NORM_TOL = 1e-9
WALSH_MAX_WIDTH = 16

PROBABILITY = "probability"
QUASI = "quasi"
CLIP_POLICIES = ("clip-renormalize", "clip-only", "keep")

# widths up to this many bits accumulate convolutions in a dense scratch array
_DENSE_ACCUM_BITS = 20
# max number of pairwise products materialized at once
_CHUNK = 1 << 22


class BitString(NamedTuple):
    """An ``n``-bit string stored as an integer mask (qubit 0 = LSB)."""

    n: int
    mask: int

    def __str__(self) -> str:
        return mask_to_text(self.mask, self.n)

    def bit(self, qubit: int) -> int:
        return (self.mask >> qubit) & 1

    @classmethod
    def from_text(cls, text: str) -> "BitString":
        return cls(len(text), text_to_mask(text))


def mask_to_text(mask: int, n: int) -> str:
    return format(mask, f"0{n}b")


def text_to_mask(text: str) -> int:
    if not text or set(text) - {"0", "1"}:
        raise ValidationError(f"not a bit string: {text!r}")
    return int(text, 2)


def popcount(x: int) -> int:
    return bin(x).count("1")


def _is_exact(w: Any) -> bool:
    return not isinstance(w, (float, int, np.floating, np.integer))


def _infer_kind(values: Iterable[Any]) -> str:
    values = list(values)
    try:
        if any(v < 0 for v in values):
            return QUASI
        ok = abs(sum(values) - 1) <= NORM_TOL
        return PROBABILITY if bool(ok) else QUASI
    except TypeError:
        # symbolic weights cannot be ordered
        return QUASI


class SignedDist(Mapping):
    """Immutable sparse map ``bit-string mask -> real weight`` of fixed width.

    ``kind`` is ``"probability"`` when every weight is nonnegative and the
    weights sum to one; anything else (negative entries, unnormalized count
    vectors, clipped outputs) is ``"quasi"``.  ``meta`` carries free-form
    provenance such as the clip policy applied to a corrected result.
    """

    __slots__ = ("n", "kind", "exact", "meta", "_w", "_arrays")

    def __init__(
        self,
        n: int,
        weights: Mapping[int, Any] | Iterable[tuple[int, Any]],
        *,
        kind: str | None = None,
        meta: Mapping[str, Any] | None = None,
        prune: float | None = None,
    ):
        if not isinstance(n, (int, np.integer)) or not 1 <= n <= MAX_WIDTH:
            raise ValidationError(f"register width must be in 1..{MAX_WIDTH}, got {n!r}")
        n = int(n)
        items = list(weights.items() if isinstance(weights, Mapping) else weights)
        exact = any(_is_exact(w) for _, w in items)
        limit = 1 << n
        w: dict[int, Any] = {}
        for key, val in items:
            key = int(key)
            if not 0 <= key < limit:
                raise ValidationError(f"bit string {key} does not fit in {n} bits")
            if exact:
                val = Fraction(val) if isinstance(val, (int, np.integer)) else val
                if val == 0:
                    continue
            else:
                val = float(val)
                if not math.isfinite(val):
                    raise ValidationError(f"non-finite weight at {mask_to_text(key, n)}")
                if prune is not None and abs(val) < prune:
                    continue
            w[key] = w[key] + val if key in w else val
        inferred = _infer_kind(w.values())
        if kind is None:
            kind = inferred
        elif kind == PROBABILITY and inferred != PROBABILITY:
            raise ValidationError("weights do not form a probability distribution")
        elif kind not in (PROBABILITY, QUASI):
            raise ValidationError(f"unknown kind {kind!r}")
        self.n = n
        self.kind = kind
        self.exact = exact
        self.meta = MappingProxyType(dict(meta or {}))
        self._w = w
        self._arrays: tuple[np.ndarray, np.ndarray] | None = None

    @classmethod
    def _from_arrays(cls, n, keys, weights, *, prune=DEFAULT_PRUNE, kind=None, meta=None):
        if prune:
            sel = np.abs(weights) >= prune
            keys, weights = keys[sel], weights[sel]
        return cls(n, zip(keys.tolist(), weights.tolist()), kind=kind, meta=meta)

    # Mapping protocol
    def __getitem__(self, key: int) -> Any:
        return self._w[key]

    def __iter__(self):
        return iter(self._w)

    def __len__(self) -> int:
        return len(self._w)

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SignedDist):
            return NotImplemented
        return self.n == other.n and self._w == other._w

    def __hash__(self):
        return hash((self.n, frozenset(self._w.items())))

    def __repr__(self) -> str:
        body = ", ".join(
            f"{mask_to_text(k, self.n)}: {v}" for k, v in sorted(self._w.items())[:16]
        )
        more = ", ..." if len(self._w) > 16 else ""
        return f"SignedDist(n={self.n}, kind={self.kind}, {{{body}{more}}})"

    def weight(self, key: int) -> Any:
        return self._w.get(key, Fraction(0) if self.exact else 0.0)

    def total(self) -> Any:
        return sum(self._w.values(), Fraction(0) if self.exact else 0.0)

    def arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Keys as int64 and weights as float64, sorted by key."""
        if self._arrays is None:
            items = sorted(self._w.items())
            keys = np.fromiter((k for k, _ in items), dtype=np.int64, count=len(items))
            vals = np.fromiter((float(v) for _, v in items), dtype=np.float64, count=len(items))
            self._arrays = (keys, vals)
        return self._arrays

    def to_float(self) -> "SignedDist":
        if not self.exact:
            return self
        return SignedDist(self.n, {k: float(v) for k, v in self._w.items()}, meta=self.meta)

    def with_meta(self, **meta: Any) -> "SignedDist":
        merged = {**self.meta, **meta}
        return SignedDist(self.n, self._w, kind=self.kind, meta=merged)

    def off_zero(self) -> "SignedDist":
        """The part of the distribution supported away from the all-zero string."""
        return SignedDist(self.n, {k: v for k, v in self._w.items() if k != 0}, kind=QUASI)

    def off_zero_mass(self) -> Any:
        """L1 mass away from the all-zero string."""
        return sum((abs(v) for k, v in self._w.items() if k != 0), Fraction(0) if self.exact else 0.0)

    def scaled(self, factor: Any) -> "SignedDist":
        return SignedDist(self.n, {k: v * factor for k, v in self._w.items()})

    def __add__(self, other: "SignedDist") -> "SignedDist":
        _check_widths(self, other)
        out = dict(self._w)
        for k, v in other._w.items():
            out[k] = out[k] + v if k in out else v
        return SignedDist(self.n, out)

    def __neg__(self) -> "SignedDist":
        return self.scaled(-1)

    def __sub__(self, other: "SignedDist") -> "SignedDist":
        return self + (-other)

    def __mul__(self, factor: Any) -> "SignedDist":
        return self.scaled(factor)

    __rmul__ = __mul__

    def pruned(self, threshold: float) -> "SignedDist":
        if self.exact:
            return self
        return SignedDist(self.n, self._w, meta=self.meta, prune=threshold)


def delta(n: int, x: int = 0, *, exact: bool = False) -> SignedDist:
    """Point mass at ``x``; with ``p = delta(n)`` this is the identity of the algebra."""
    return SignedDist(n, {x: Fraction(1) if exact else 1.0})


def uniform(n: int) -> SignedDist:
    return SignedDist(n, {x: 1.0 / (1 << n) for x in range(1 << n)})


def from_counts(counts: Mapping[int, int], n: int) -> SignedDist:
    """Normalize nonnegative counts into a probability distribution."""
    total = sum(counts.values())
    if total <= 0:
        raise DegenerateDistributionError("zero total counts")
    return SignedDist(n, {k: c / total for k, c in counts.items() if c})


def _check_widths(a: SignedDist, b: SignedDist) -> None:
    if a.n != b.n:
        raise ValidationError(f"width mismatch: {a.n} vs {b.n}")


def _result_kind(a: SignedDist, b: SignedDist, out: SignedDist) -> SignedDist:
    if out.kind == PROBABILITY and not (a.kind == PROBABILITY and b.kind == PROBABILITY):
        return SignedDist(out.n, out._w, kind=QUASI)
    return out


def _conv_float(n: int, ka, wa, kb, wb):
    if len(ka) < len(kb):
        ka, wa, kb, wb = kb, wb, ka, wa
    step = max(1, _CHUNK // max(1, len(kb)))
    if n <= _DENSE_ACCUM_BITS:
        acc = np.zeros(1 << n)
        for s in range(0, len(ka), step):
            keys = np.bitwise_xor.outer(ka[s : s + step], kb).ravel()
            vals = np.multiply.outer(wa[s : s + step], wb).ravel()
            acc += np.bincount(keys, weights=vals, minlength=1 << n)
        keys = np.flatnonzero(acc)
        return keys.astype(np.int64), acc[keys]
    run_k = np.empty(0, dtype=np.int64)
    run_w = np.empty(0)
    for s in range(0, len(ka), step):
        keys = np.concatenate([run_k, np.bitwise_xor.outer(ka[s : s + step], kb).ravel()])
        vals = np.concatenate([run_w, np.multiply.outer(wa[s : s + step], wb).ravel()])
        run_k, inv = np.unique(keys, return_inverse=True)
        run_w = np.bincount(inv, weights=vals)
    return run_k, run_w


def xor_convolve(
    a: SignedDist,
    b: SignedDist,
    *,
    prune: float = DEFAULT_PRUNE,
    cap: int = DEFAULT_SUPPORT_CAP,
) -> SignedDist:
    """Group-algebra product: ``out[z] = sum over x ^ y == z of a[x] * b[y]``."""
    _check_widths(a, b)
    if a.exact or b.exact:
        out: dict[int, Any] = {}
        for x, wx in a.items():
            for y, wy in b.items():
                z = x ^ y
                out[z] = out[z] + wx * wy if z in out else wx * wy
        res = SignedDist(a.n, out)
    else:
        ka, wa = a.arrays()
        kb, wb = b.arrays()
        keys, vals = _conv_float(a.n, ka, wa, kb, wb)
        res = SignedDist._from_arrays(a.n, keys, vals, prune=prune)
    if len(res) > cap:
        raise SupportExplosionError(
            f"convolution support {len(res)} exceeds cap {cap}; raise the prune threshold"
        )
    return _result_kind(a, b, res)


def convolve_power(
    d: SignedDist,
    j: int,
    *,
    prune: float = DEFAULT_PRUNE,
    cap: int = DEFAULT_SUPPORT_CAP,
) -> SignedDist:
    """``j``-fold XOR self-convolution; ``j = 0`` gives the point mass at zero."""
    if j < 0:
        raise ValidationError("power must be nonnegative")
    out = delta(d.n, exact=d.exact)
    for _ in range(j):
        out = xor_convolve(out, d, prune=prune, cap=cap)
    return out


def convolve_powers(
    d: SignedDist,
    jmax: int,
    *,
    prune: float = DEFAULT_PRUNE,
    cap: int = DEFAULT_SUPPORT_CAP,
) -> list[SignedDist]:
    """``[d^0, d^1, ..., d^jmax]`` computed incrementally."""
    powers = [delta(d.n, exact=d.exact)]
    for _ in range(jmax):
        powers.append(xor_convolve(powers[-1], d, prune=prune, cap=cap))
    return powers


def _check_qubits(qubits: Sequence[int], n: int, what: str) -> tuple[int, ...]:
    qubits = tuple(int(q) for q in qubits)
    if len(set(qubits)) != len(qubits):
        raise ValidationError(f"{what} contains repeated qubits: {qubits}")
    bad = [q for q in qubits if not 0 <= q < n]
    if bad:
        raise ValidationError(f"{what} has qubits outside 0..{n - 1}: {bad}")
    return qubits


def marginalize(d: SignedDist, keep: Sequence[int]) -> SignedDist:
    """Sum out every qubit not in ``keep``; output bit ``j`` is input qubit ``keep[j]``."""
    keep = _check_qubits(keep, d.n, "keep set")
    if not keep:
        raise ValidationError("cannot marginalize onto an empty qubit set")
    if d.exact:
        out: dict[int, Any] = {}
        for x, w in d.items():
            y = sum(((x >> q) & 1) << j for j, q in enumerate(keep))
            out[y] = out[y] + w if y in out else w
        return SignedDist(len(keep), out, kind=d.kind if d.kind == QUASI else None)
    keys, vals = d.arrays()
    new = np.zeros_like(keys)
    for j, q in enumerate(keep):
        new |= ((keys >> q) & 1) << j
    uk, inv = np.unique(new, return_inverse=True)
    res = SignedDist._from_arrays(len(keep), uk, np.bincount(inv, weights=vals), prune=0.0)
    if d.kind == QUASI and res.kind == PROBABILITY:
        res = SignedDist(res.n, res._w, kind=QUASI)
    return res


def embed(d: SignedDist, qubits: Sequence[int], n: int) -> SignedDist:
    """Place ``d``'s bit ``j`` on qubit ``qubits[j]`` of an ``n``-bit register (zeros elsewhere)."""
    qubits = _check_qubits(qubits, n, "target qubits")
    if len(qubits) != d.n:
        raise ValidationError(f"need {d.n} target qubits, got {len(qubits)}")
    out = {}
    for x, w in d.items():
        out[sum(((x >> j) & 1) << q for j, q in enumerate(qubits))] = w
    return SignedDist(n, out, kind=d.kind)


def tensor_product(
    a: SignedDist,
    b: SignedDist,
    a_qubits: Sequence[int] | None = None,
    b_qubits: Sequence[int] | None = None,
    n: int | None = None,
) -> SignedDist:
    """Product distribution of ``a`` on ``a_qubits`` and ``b`` on ``b_qubits``.

    Defaults stack ``a`` on the low qubits and ``b`` directly above it.
    """
    a_qubits = tuple(range(a.n)) if a_qubits is None else tuple(a_qubits)
    if b_qubits is None:
        start = max(a_qubits, default=-1) + 1
        b_qubits = tuple(range(start, start + b.n))
    b_qubits = tuple(b_qubits)
    overlap = set(a_qubits) & set(b_qubits)
    if overlap:
        raise ValidationError(f"tensor factors overlap on qubits {sorted(overlap)}")
    if n is None:
        n = max(a_qubits + b_qubits) + 1
    ea, eb = embed(a, a_qubits, n), embed(b, b_qubits, n)
    out: dict[int, Any] = {}
    for x, wx in ea.items():
        for y, wy in eb.items():
            out[x | y] = wx * wy
    res = SignedDist(n, out)
    return _result_kind(a, b, res)


def tvd(a: SignedDist, b: SignedDist) -> Any:
    """Total variation distance, half the L1 distance over the union of supports."""
    _check_widths(a, b)
    keys = set(a) | set(b)
    return sum(abs(a.weight(k) - b.weight(k)) for k in keys) / 2


def l1_distance(a: SignedDist, b: SignedDist) -> Any:
    return 2 * tvd(a, b)


def shannon_entropy(d: SignedDist) -> float:
    """Entropy in bits; undefined (rejected) for quasi-distributions."""
    if d.kind != PROBABILITY:
        raise ValidationError("entropy is only defined for probability distributions")
    return -sum(float(w) * math.log2(float(w)) for w in d.values() if w > 0)


def clip_to_probability(d: SignedDist, policy: str = "clip-renormalize") -> SignedDist:
    """Resolve negative weights according to ``policy``.

    ``keep`` preserves the total weight (trace preservation), ``clip-only``
    drops negative entries (positivity), ``clip-renormalize`` drops them and
    rescales to unit mass.  The policy is recorded in ``meta["clip_policy"]``.
    """
    if policy not in CLIP_POLICIES:
        raise ValidationError(f"unknown clip policy {policy!r}; choose from {CLIP_POLICIES}")
    if policy == "keep" or d.kind == PROBABILITY:
        return d.with_meta(clip_policy=policy)
    pos = {k: v for k, v in d.items() if v > 0}
    if policy == "clip-only":
        return SignedDist(d.n, pos, meta={**d.meta, "clip_policy": policy})
    total = sum(pos.values())
    if not pos or total <= 0:
        raise DegenerateDistributionError("no positive weight left to renormalize")
    return SignedDist(d.n, {k: v / total for k, v in pos.items()}, meta={**d.meta, "clip_policy": policy})


# Walsh-Hadamard oracle path (dense, small widths only)


def fwht(vec: np.ndarray) -> np.ndarray:
    """Unnormalized fast Walsh-Hadamard transform of a length-2^n vector."""
    v = np.array(vec, dtype=float)
    size = len(v)
    if size & (size - 1):
        raise ValidationError("transform length must be a power of two")
    h = 1
    while h < size:
        v = v.reshape(-1, 2, h)
        v = np.stack([v[:, 0] + v[:, 1], v[:, 0] - v[:, 1]], axis=1).reshape(size)
        h *= 2
    return v


def to_dense(d: SignedDist) -> np.ndarray:
    if d.n > WALSH_MAX_WIDTH:
        raise ValidationError(f"dense representation limited to n <= {WALSH_MAX_WIDTH}")
    out = np.zeros(1 << d.n)
    keys, vals = d.arrays()
    out[keys] = vals
    return out


def walsh_transform(d: SignedDist) -> np.ndarray:
    """``W[s] = sum_x d[x] * (-1)^popcount(x & s)``; diagonalizes XOR-convolution."""
    return fwht(to_dense(d))


def from_walsh(coeffs: np.ndarray, n: int, *, prune: float = DEFAULT_PRUNE) -> SignedDist:
    dense = fwht(coeffs) / len(coeffs)
    keys = np.arange(len(dense), dtype=np.int64)
    return SignedDist._from_arrays(n, keys, dense, prune=prune)


# Serialization


def _format_weight(w: Any) -> str:
    if isinstance(w, Fraction):
        return str(w)
    return format(float(w), ".17g")


def _parse_weight(text: str) -> Any:
    text = text.strip()
    return Fraction(text) if "/" in text else float(text)


def to_text(d: SignedDist, header: Mapping[str, Any] | None = None) -> str:
    """Line-delimited ``bitstring,weight`` records preceded by ``#`` header lines."""
    lines = [f"# n={d.n}", f"# kind={d.kind}"]
    meta = {**d.meta, **(header or {})}
    if meta:
        lines.append("# meta=" + json.dumps(meta, sort_keys=True, default=str))
    for k, v in sorted(d.items()):
        lines.append(f"{mask_to_text(k, d.n)},{_format_weight(v)}")
    return "\n".join(lines) + "\n"


def from_text(text: str) -> SignedDist:
    n = None
    meta: dict[str, Any] = {}
    entries = []
    for raw in text.splitlines():
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("n="):
                n = int(body[2:])
            elif body.startswith("meta="):
                meta = json.loads(body[5:])
            continue
        bits, _, weight = line.partition(",")
        if not weight:
            raise ValidationError(f"malformed record {line!r}")
        bits = bits.strip()
        if n is None:
            n = len(bits)
        if len(bits) != n:
            raise ValidationError(f"record {bits!r} does not have width {n}")
        entries.append((text_to_mask(bits), _parse_weight(weight)))
    if n is None:
        raise ValidationError("empty distribution file without width header")
    return SignedDist(n, entries, meta=meta)


def to_json(d: SignedDist) -> dict[str, Any]:
    return {
        "n": d.n,
        "kind": d.kind,
        "entries": [
            {"bits": mask_to_text(k, d.n), "weight": str(v) if isinstance(v, Fraction) else float(v)}
            for k, v in sorted(d.items())
        ],
        **({"meta": dict(d.meta)} if d.meta else {}),
    }


def from_json(obj: Mapping[str, Any]) -> SignedDist:
    try:
        n = int(obj["n"])
        entries = [
            (text_to_mask(e["bits"]), _parse_weight(e["weight"]) if isinstance(e["weight"], str) else e["weight"])
            for e in obj["entries"]
        ]
    except (KeyError, TypeError) as exc:
        raise ValidationError(f"malformed distribution document: {exc}") from exc
    for bits, _ in entries:
        if bits >> n:
            raise ValidationError("entry wider than declared n")
    return SignedDist(n, entries, meta=obj.get("meta"))
