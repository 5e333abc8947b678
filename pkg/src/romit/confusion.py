"""Confusion matrices: full and per-qubit construction, inversion, diagnostics.

Column ``j`` of a confusion matrix is the response distribution to basis
preparation ``j``; entry ``(i, j)`` is the probability of reading ``i``.
These are the baseline correction methods the quasi-probabilistic protocol
is compared against.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Any

import numpy as np

from .bitdist import DEFAULT_PRUNE, SignedDist, mask_to_text, text_to_mask
from .errors import NumericalError, ValidationError
from .simcore import MeasurementModel, QuantumState, outcome_distribution

MAX_FULL_QUBITS = 4
COND_LIMIT = 1e12
STOCHASTIC_TOL = 1e-9


def _check_stochastic(m: np.ndarray, what: str) -> None:
    if m.dtype == object:
        if any(sum(col) != 1 for col in m.T) or any(not 0 <= x <= 1 for x in m.flat):
            raise ValidationError(f"{what} is not column-stochastic")
        return
    if not np.all(np.isfinite(m)):
        raise ValidationError(f"{what} has non-finite entries")
    if np.any(m < -STOCHASTIC_TOL) or np.any(m > 1 + STOCHASTIC_TOL):
        raise ValidationError(f"{what} has entries outside [0, 1]")
    if not np.allclose(m.sum(axis=0), 1.0, atol=STOCHASTIC_TOL):
        raise ValidationError(f"{what} columns do not sum to one")


@dataclass(frozen=True, eq=False)
class ConfusionMatrix:
    n: int
    entries: np.ndarray
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        entries = np.asarray(self.entries)
        if entries.dtype != object:
            entries = entries.astype(float)
        dim = 1 << self.n
        if entries.shape != (dim, dim):
            raise ValidationError(f"confusion matrix for {self.n} qubits must be {dim}x{dim}")
        _check_stochastic(entries, "confusion matrix")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def from_xor_channel(cls, p: SignedDist) -> "ConfusionMatrix":
        """Matrix of a stochastic bit-flip channel, ``M[i, j] = p[i ^ j]``."""
        dim = 1 << p.n
        dtype = object if p.exact else float
        m = np.empty((dim, dim), dtype=dtype)
        for i in range(dim):
            for j in range(dim):
                m[i, j] = p.weight(i ^ j)
        return cls(p.n, m)

    def apply(self, ideal: SignedDist) -> SignedDist:
        """Noisy distribution ``M @ ideal``."""
        if ideal.n != self.n:
            raise ValidationError(f"width mismatch: matrix {self.n}, distribution {ideal.n}")
        vec = _dense(ideal, self.entries.dtype == object or ideal.exact)
        out = self.entries.dot(vec)
        return SignedDist(self.n, {i: w for i, w in enumerate(out) if w != 0})

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        labels = [mask_to_text(j, self.n) for j in range(1 << self.n)]
        writer.writerow(["measured\\prepared", *labels])
        for i, row in enumerate(self.entries):
            writer.writerow([labels[i], *(format(float(x), ".17g") for x in row)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "ConfusionMatrix":
        rows = list(csv.reader(io.StringIO(text)))
        if not rows or len(rows) < 2:
            raise ValidationError("empty confusion CSV")
        header = rows[0][1:]
        n = len(header[0])
        order = [text_to_mask(h) for h in header]
        dim = len(order)
        m = np.zeros((dim, dim))
        for row in rows[1:]:
            i = text_to_mask(row[0])
            for j, val in zip(order, row[1:]):
                m[i, j] = float(val)
        return cls(n, m)


@dataclass(frozen=True, eq=False)
class LocalConfusionSet:
    """One 2x2 column-stochastic matrix per qubit."""

    n: int
    mats: tuple[np.ndarray, ...]
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        mats = tuple(np.asarray(m, dtype=float) for m in self.mats)
        if len(mats) != self.n or any(m.shape != (2, 2) for m in mats):
            raise ValidationError(f"need {self.n} 2x2 matrices")
        for q, m in enumerate(mats):
            _check_stochastic(m, f"local confusion matrix of qubit {q}")
        object.__setattr__(self, "mats", mats)

    def full(self) -> ConfusionMatrix:
        """Kronecker product (qubit n-1 is the most significant factor)."""
        m = np.ones((1, 1))
        for mat in reversed(self.mats):
            m = np.kron(m, mat)
        return ConfusionMatrix(self.n, m)


def _dense(d: SignedDist, exact: bool) -> np.ndarray:
    dim = 1 << d.n
    if exact:
        vec = np.array([Fraction(0)] * dim, dtype=object)
        for k, v in d.items():
            vec[k] = v if d.exact else Fraction(v)
        return vec
    vec = np.zeros(dim)
    keys, vals = d.arrays()
    vec[keys] = vals
    return vec


def _column(model: MeasurementModel, n: int, prep: int, shots: int, rng: np.random.Generator) -> np.ndarray:
    dist = outcome_distribution(QuantumState.basis(n, prep), model)
    keys, probs = dist.arrays()
    col = np.zeros(1 << n)
    col[keys] = rng.multinomial(shots, probs / probs.sum())
    return col / shots


def build_full_confusion(model: MeasurementModel, n: int, shots: int, rng: np.random.Generator) -> ConfusionMatrix:
    """Prepare every basis state and measure it ``shots`` times (exponential scan)."""
    if n > MAX_FULL_QUBITS:
        raise ValidationError(f"full confusion scans are limited to n <= {MAX_FULL_QUBITS}")
    if shots < 1:
        raise ValidationError("shots must be positive")
    cols = [_column(model, n, j, shots, rng) for j in range(1 << n)]
    return ConfusionMatrix(n, np.column_stack(cols), {"shots": shots, "twirled": False})


def build_local_confusions(model: MeasurementModel, n: int, shots: int, rng: np.random.Generator) -> LocalConfusionSet:
    """Per-qubit scan: excite one qubit at a time, every other qubit in ``|0>``.

    Costs ``n + 1`` preparations.  The all-ground column is shared by every
    qubit.  Correlated errors whose trigger needs two excited qubits are
    invisible to this scan by construction.
    """
    if shots < 1:
        raise ValidationError("shots must be positive")
    ground = _column(model, n, 0, shots, rng)
    idx = np.arange(1 << n)
    mats = []
    for q in range(n):
        excited = _column(model, n, 1 << q, shots, rng)
        bit = (idx >> q) & 1
        m = np.array(
            [
                [ground[bit == 0].sum(), excited[bit == 0].sum()],
                [ground[bit == 1].sum(), excited[bit == 1].sum()],
            ]
        )
        mats.append(m / m.sum(axis=0))
    return LocalConfusionSet(n, tuple(mats), {"shots": shots, "scan": "simultaneous-ground"})


def correct_full(m: ConfusionMatrix, noisy: SignedDist) -> SignedDist:
    """Solve ``M p = noisy`` by dense LU; exact inputs are solved in rationals."""
    if noisy.n != m.n:
        raise ValidationError(f"width mismatch: matrix {m.n}, distribution {noisy.n}")
    if m.entries.dtype == object or noisy.exact:
        import sympy

        def rational(x):
            f = Fraction(x)
            return sympy.Rational(f.numerator, f.denominator)

        mat = sympy.Matrix(m.entries.tolist()).applyfunc(rational)
        if mat.det() == 0:
            raise NumericalError("confusion matrix is singular", float("inf"))
        rhs = sympy.Matrix([rational(x) for x in _dense(noisy, True)])
        sol = mat.LUsolve(rhs)
        out = {i: Fraction(int(x.p), int(x.q)) for i, x in enumerate(sol) if x != 0}
        return SignedDist(m.n, out, meta={"method": "full-inverse"})
    cond = float(np.linalg.cond(m.entries))
    if not np.isfinite(cond) or cond > COND_LIMIT:
        raise NumericalError(f"confusion matrix is ill-conditioned (cond ~ {cond:.3g})", cond)
    sol = np.linalg.solve(m.entries, _dense(noisy, False))
    keys = np.flatnonzero(sol)
    return SignedDist._from_arrays(m.n, keys, sol[keys], prune=0.0, meta={"method": "full-inverse", "condition_number": cond})


def correct_local(local: LocalConfusionSet, noisy: SignedDist, *, prune: float = DEFAULT_PRUNE) -> SignedDist:
    """Apply the inverse of every per-qubit matrix, one qubit at a time, on the sparse support."""
    if noisy.n != local.n:
        raise ValidationError(f"width mismatch: {local.n} local matrices, distribution width {noisy.n}")
    keys, vals = noisy.arrays()
    for q, mat in enumerate(local.mats):
        det = np.linalg.det(mat)
        if abs(det) < 1e-12:
            raise NumericalError(f"local confusion matrix of qubit {q} is singular")
        inv = np.linalg.inv(mat)
        bit = (keys >> q) & 1
        base = keys & ~(1 << q)
        # each entry with measured bit b spreads to true bit 0 / 1 with weights inv[0, b], inv[1, b]
        new_keys = np.concatenate([base, base | (1 << q)])
        new_vals = np.concatenate([inv[0, bit] * vals, inv[1, bit] * vals])
        keys, inverse = np.unique(new_keys, return_inverse=True)
        vals = np.bincount(inverse, weights=new_vals)
        keep = np.abs(vals) >= prune
        keys, vals = keys[keep], vals[keep]
    return SignedDist._from_arrays(noisy.n, keys, vals, prune=0.0, meta={"method": "local-inverse"})


def diagnostics(m: ConfusionMatrix) -> dict[str, float]:
    """State-dependence metrics of a confusion matrix.

    ``diag_spread``: max minus min of the diagonal.  ``asymmetry``: largest
    ``|M[i, j] - M[j, i]|``.  ``xor_fit_residual``: smallest achievable
    max-deviation from any matrix of the form ``p[i ^ j]``; the optimum sets
    each ``p[x]`` to the midrange of the entries it must match, so the residual
    is half the largest such range.
    """
    e = np.asarray(m.entries, dtype=float)
    dim = e.shape[0]
    cols = np.arange(dim)
    residual = 0.0
    for x in range(dim):
        vals = e[cols ^ x, cols]
        residual = max(residual, (vals.max() - vals.min()) / 2)
    diag = np.diag(e)
    return {
        "diag_spread": float(diag.max() - diag.min()),
        "asymmetry": float(np.max(np.abs(e - e.T))),
        "xor_fit_residual": float(residual),
    }
