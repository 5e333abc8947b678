from fractions import Fraction as F

import numpy as np
import pytest
import sympy
from hypothesis import given, settings
from hypothesis import strategies as st

from romit.bitdist import BitString, SignedDist, delta, from_json, marginalize, to_dense, xor_convolve
from romit.errors import DegenerateDistributionError, NumericalError, SupportExplosionError, ValidationError
from romit.qprc import (
    InverseSpec,
    apply_correction,
    doubling_schedule,
    expectation_rescale_factor,
    first_order_inverse,
    kth_order_inverse,
    partitioned_inverse,
    provenance,
    residual_bound,
    walsh_exact_inverse,
)

from conftest import random_sparse, sparse_dists

SINGLE = SignedDist(1, {0: 0.9, 1: 0.1})
LOCAL = InverseSpec(order=1, stages=[[[0], [1]]])


def p_ab(eps=0):
    eps = F(eps) if not isinstance(eps, sympy.Basic) else eps
    return SignedDist(2, {0: F(9, 16) - eps, 1: F(3, 16), 2: F(3, 16), 3: F(1, 16) + eps})


def off_zero_residual(q, p):
    return xor_convolve(q, p, prune=0).off_zero_mass()


class TestFirstOrder:
    def test_noiseless(self):
        assert dict(first_order_inverse(delta(3))) == {0: 1.0}

    def test_single_flip(self):
        assert dict(first_order_inverse(SINGLE)) == pytest.approx({0: 1.125, 1: -0.125})

    def test_toy(self):
        q = first_order_inverse(p_ab())
        assert dict(q) == {0: F(9, 2), 1: F(-3, 2), 2: F(-3, 2), 3: F(-1, 2)}

    def test_sums_to_one(self, rng):
        for _ in range(20):
            q = first_order_inverse(random_sparse(rng, 6, 10, p0=rng.uniform(0.55, 1)))
            assert q.total() == pytest.approx(1, abs=1e-12)

    def test_rejects_half(self):
        with pytest.raises(NumericalError, match="partitioned_inverse"):
            first_order_inverse(SignedDist(1, {0: 0.5, 1: 0.5}))


class TestKthOrder:
    def test_order_one_is_first_order(self, rng):
        for _ in range(20):
            p = random_sparse(rng, 6, 10, p0=rng.uniform(0.6, 1))
            a, b = kth_order_inverse(p, 1, threshold=0), first_order_inverse(p)
            np.testing.assert_allclose(to_dense(a), to_dense(b), atol=1e-12)

    def test_single_flip_telescopes(self):
        assert dict(kth_order_inverse(SINGLE, 2)) == pytest.approx({0: 1.125, 1: -0.125})

    def test_residual_bound(self, rng):
        for _ in range(10):
            p = random_sparse(rng, 6, 12, p0=0.8)
            for k in (1, 2, 3):
                assert off_zero_residual(kth_order_inverse(p, k, 0), p) <= residual_bound(0.8, k) + 1e-9

    def test_residual_closed_form(self, rng):
        # q^(k) (+) p = (p0^2k delta_0 - e^2k) / (p0^2k - s^2k)
        p = random_sparse(rng, 4, 6, p0=0.75)
        e = p.off_zero()
        for k in (1, 2):
            lhs = xor_convolve(kth_order_inverse(p, k, 0), p, prune=0)
            e2k = delta(4)
            for _ in range(2 * k):
                e2k = xor_convolve(e2k, e, prune=0)
            denom = 0.75 ** (2 * k) - 0.25 ** (2 * k)
            rhs = (delta(4).scaled(0.75 ** (2 * k)) - e2k).scaled(1 / denom)
            np.testing.assert_allclose(to_dense(lhs), to_dense(rhs), atol=1e-12)

    def test_exact_toy_order_two(self):
        q = kth_order_inverse(p_ab(F(0)), 2)
        assert all(isinstance(v, F) for v in q.values()) and q.total() == 1

    def test_support_cap(self):
        p = SignedDist(10, {0: 0.9, **{1 << i: 0.01 for i in range(10)}})
        with pytest.raises(SupportExplosionError, match="threshold"):
            kth_order_inverse(p, 3, threshold=0, cap=50)

    def test_bad_order(self):
        with pytest.raises(ValidationError):
            kth_order_inverse(SINGLE, 0)


class TestApply:
    def test_delta_inverse(self):
        n = SignedDist(2, {0: 0.4, 3: 0.6})
        assert dict(apply_correction(n, delta(2))) == pytest.approx(dict(n))

    def test_hand_example(self):
        out = apply_correction(SINGLE, first_order_inverse(SINGLE))
        assert out.weight(0) == pytest.approx(1, abs=1e-15)
        assert abs(out.weight(1)) < 1e-15
        assert out.kind == "quasi" and out.meta["clip_policy"] == "keep"

    def test_counts_preserved(self, rng):
        counts = SignedDist(5, {int(k): float(c) for k, c in zip(rng.choice(32, 10, replace=False), rng.integers(1, 100, 10))})
        q = kth_order_inverse(random_sparse(rng, 5, 8, p0=0.85), 2)
        assert apply_correction(counts, q).total() == pytest.approx(counts.total(), rel=1e-12)

    def test_width_mismatch(self):
        with pytest.raises(ValidationError):
            apply_correction(delta(1), delta(2))


class TestWalsh:
    def test_delta(self):
        np.testing.assert_allclose(to_dense(walsh_exact_inverse(delta(3))), [1] + [0] * 7, atol=1e-15)

    def test_single_flip(self):
        np.testing.assert_allclose(to_dense(walsh_exact_inverse(SINGLE)), [1.125, -0.125], atol=1e-15)

    def test_non_invertible(self):
        with pytest.raises(NumericalError, match="not invertible"):
            walsh_exact_inverse(SignedDist(1, {0: 0.5, 1: 0.5}))

    def test_toy_matches_local_recovery(self):
        exact = walsh_exact_inverse(p_ab())
        local = partitioned_inverse(p_ab(), LOCAL)
        np.testing.assert_allclose(to_dense(exact), to_dense(local.to_float()), atol=1e-12)

    def test_size_guard(self):
        with pytest.raises(ValidationError):
            walsh_exact_inverse(delta(17))


class TestRescale:
    def test_values(self):
        assert expectation_rescale_factor(delta(2), BitString(2, 3)) == 1
        assert expectation_rescale_factor(SignedDist(1, {0: 0.97, 1: 0.03}), 1) == pytest.approx(0.94)
        assert expectation_rescale_factor(SignedDist(2, {0: 0.5, 3: 0.5}), 0) == 1

    def test_unrecoverable(self):
        with pytest.raises(DegenerateDistributionError):
            expectation_rescale_factor(SignedDist(1, {0: 0.5, 1: 0.5}), 1)

    def test_rejects_quasi(self):
        with pytest.raises(ValidationError):
            expectation_rescale_factor(SignedDist(1, {0: 1.1, 1: -0.1}), 1)


class TestPartitioned:
    def test_toy_local(self):
        q = partitioned_inverse(p_ab(), LOCAL)
        assert dict(q) == {0: F(9, 4), 1: F(-3, 4), 2: F(-3, 4), 3: F(1, 4)}
        assert dict(xor_convolve(q, p_ab())) == {0: 1}

    def test_toy_compiled_symbolic(self):
        eps = sympy.Symbol("eps")
        q = partitioned_inverse(p_ab(eps), LOCAL)
        leading = {0: sympy.Rational(9, 4) + 4 * eps, 1: sympy.Rational(-3, 4), 2: sympy.Rational(-3, 4), 3: sympy.Rational(1, 4) - 4 * eps}
        for k, v in leading.items():
            assert sympy.series(q.weight(k) - v, eps, 0, 2).removeO() == 0
        residual = xor_convolve(q, p_ab(eps))
        for k in range(4):
            assert sympy.series(residual.weight(k) - int(k == 0), eps, 0, 2).removeO() == 0

    def test_noiseless_any_plan(self):
        for spec in (InverseSpec(), LOCAL, InverseSpec(order=3, stages=[[[0, 1]]])):
            assert dict(partitioned_inverse(delta(2), spec).to_float()) == pytest.approx({0: 1.0})

    def test_offending_marginals_listed(self):
        p = SignedDist(2, {0: 0.3, 1: 0.3, 2: 0.2, 3: 0.2})
        with pytest.raises(NumericalError, match=r"qubits \[0\]"):
            partitioned_inverse(p, LOCAL)

    def test_plan_must_cover(self):
        with pytest.raises(ValidationError):
            partitioned_inverse(delta(3), InverseSpec(stages=[[[0], [1]]]))

    def test_doubling_schedule(self):
        assert doubling_schedule(5) == (((0,), (1,), (2,), (3,), (4,)), ((0, 1), (2, 3), (4,)), ((0, 1, 2, 3), (4,)))
        assert doubling_schedule(1) == ()

    def test_large_error_factorized_plus_correlation(self, rng):
        # 12 qubits with ~6% local error each: joint error > 1/3, marginals fine
        n = 12
        p = delta(n)
        for q in range(n):
            p = xor_convolve(p, SignedDist(n, {0: 0.94, 1 << q: 0.06}))
        p = xor_convolve(p, SignedDist(n, {0: 0.98, 0b11: 0.02}))
        assert 1 - p.weight(0) > 1 / 3
        q = partitioned_inverse(p, InverseSpec(order=2, threshold=1e-12))
        assert off_zero_residual(q, p) < 1 - p.weight(0)
        assert off_zero_residual(q, p) < 0.01
        assert q.total() == pytest.approx(1, abs=1e-9)


class TestSpecJson:
    def test_round_trip(self):
        spec = InverseSpec(order=3, threshold=1e-8, stages=[[[0], [1, 2]]])
        assert InverseSpec.from_json(spec.to_json()) == spec

    def test_error_location(self):
        with pytest.raises(ValidationError, match="order"):
            InverseSpec.from_json({"order": 0})

    def test_provenance(self):
        meta = provenance(SINGLE, InverseSpec())
        assert len(meta["source_sha256"]) == 64 and '"order": 2' in meta["inverse_spec"]


@settings(max_examples=50, deadline=None)
@given(sparse_dists(max_n=8, min_p0=2 / 3))
def test_residual_bound_monotone(p):
    p0 = p.weight(0)
    residuals = [off_zero_residual(kth_order_inverse(p, k, threshold=0), p) for k in (1, 2, 3)]
    for k, r in zip((1, 2, 3), residuals):
        assert r <= residual_bound(p0, k) + 1e-9
    assert residuals[0] + 1e-12 >= residuals[1] >= residuals[2] - 1e-12


@settings(max_examples=50, deadline=None)
@given(sparse_dists(max_n=8, min_p0=2 / 3))
def test_trace_preserving(p):
    for k in (1, 2, 3):
        assert kth_order_inverse(p, k, threshold=0).total() == pytest.approx(1, abs=1e-12)
        # pruning below the threshold only perturbs the trace by the dropped weights
        assert kth_order_inverse(p, k).total() == pytest.approx(1, abs=1e-6)


@settings(max_examples=30, deadline=None)
@given(sparse_dists(max_n=8, min_p0=0.7))
def test_oracle_convergence(p):
    exact = to_dense(walsh_exact_inverse(p))
    gaps = [np.abs(to_dense(kth_order_inverse(p, k, threshold=0)) - exact).sum() for k in (1, 2, 4, 8)]
    assert all(b <= a + 1e-12 for a, b in zip(gaps, gaps[1:]))
    assert gaps[-1] < 1e-3


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_json_inverse_round_trip(seed):
    from romit.bitdist import to_json

    q = kth_order_inverse(random_sparse(np.random.default_rng(seed), 5, 6, p0=0.8), 2)
    assert from_json(to_json(q)) == q
