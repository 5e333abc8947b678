from collections import Counter
from itertools import product

import numpy as np
import pytest

from romit.bitdist import marginalize
from romit.errors import ValidationError
from romit.mrc import (
    PauliString,
    TwirlConfig,
    apply_pauli,
    characterize_error_distribution,
    flip_mask,
    sample_pauli,
    sample_paulis,
    twirled_confusion,
    twirled_measure,
    untwirled_measure,
)
from romit.confusion import diagnostics
from romit.simcore import (
    MeasurementModel,
    QuantumState,
    amplitude_damping,
    bit_flip,
    coherent_rotation,
    correlated_crosstalk,
    outcome_distribution,
)

from conftest import within_sigma

PLUS = QuantumState.pure(np.array([1, 1]) / np.sqrt(2))
PLUS_I = QuantumState.pure(np.array([1, 1j]) / np.sqrt(2))


class TestPauli:
    def test_uniform_single_qubit(self, rng):
        draws = Counter(sample_pauli(1, rng).labels for _ in range(100_000))
        for label in "IXYZ":
            assert within_sigma(draws[label] / 100_000, 0.25, 100_000)

    def test_flip_masks(self):
        assert flip_mask(PauliString.from_tensor("X⊗I⊗Z⊗Y")) == 0b1001
        assert flip_mask(PauliString.from_tensor("Z⊗Z")) == 0

    def test_invalid(self):
        with pytest.raises(ValidationError):
            PauliString("XQ")
        with pytest.raises(ValidationError):
            sample_pauli(0, np.random.default_rng())

    def test_config_invariants(self):
        with pytest.raises(ValidationError):
            TwirlConfig(K=0)
        assert TwirlConfig(100, 30).total_shots == 3000
        assert TwirlConfig.from_total(10_000).shots_per_randomization == 100

    def test_balanced_sampling_stratifies(self, rng):
        paulis = sample_paulis(3, TwirlConfig(K=80, sampling="balanced"), rng)
        assert set(Counter(p.flip_mask for p in paulis).values()) == {10}

    @pytest.mark.parametrize("n", [1, 2])
    def test_insert_and_unflip_is_identity(self, n):
        # exhaustive: inserting P then XOR-ing with its flip mask is the identity on ideal hardware
        for x in range(1 << n):
            state = QuantumState.basis(n, x)
            for labels in product("IXYZ", repeat=n):
                p = PauliString("".join(labels))
                rho = apply_pauli(state.rho, p, n)
                out = outcome_distribution(QuantumState(n, rho))
                assert {k ^ p.flip_mask: v for k, v in out.items()} == pytest.approx({x: 1.0})


class TestTwirledMeasure:
    def test_ideal(self):
        counts = twirled_measure(QuantumState.zero(3), MeasurementModel.ideal(), TwirlConfig(20, 50, 1))
        assert counts == {0: 1000}

    def test_damping_average_balanced(self):
        cfg = TwirlConfig(100, 1000, 4, "balanced")
        counts = twirled_measure(QuantumState.zero(1), MeasurementModel((amplitude_damping(0.06),)), cfg)
        assert within_sigma(counts.get(1, 0) / 100_000, 0.03, 100_000)

    def test_damping_average_iid(self):
        # with i.i.d. Paulis the share of flipping randomizations itself fluctuates
        cfg = TwirlConfig(100, 1000, 4)
        counts = twirled_measure(QuantumState.zero(1), MeasurementModel((amplitude_damping(0.06),)), cfg)
        sigma = np.hypot(np.sqrt(0.03 * 0.97 / 1e5), 0.06 * np.sqrt(0.25 / 100))
        assert abs(counts.get(1, 0) / 1e5 - 0.03) < 3 * sigma

    def test_coherent_rotation(self, rng):
        model = MeasurementModel((coherent_rotation("X", 0.3),))
        shots = 100_000
        tw = twirled_measure(PLUS, model, TwirlConfig(1000, 100, 8))
        assert within_sigma(tw.get(0, 0) / shots, 0.5, shots)
        # |+> is an eigenstate of the rotation; |+i> shows the coherent bias untwirled
        raw = untwirled_measure(PLUS_I, model, shots, rng)
        assert not within_sigma(raw.get(0, 0) / shots, 0.5, shots, k=10)
        tw = twirled_measure(PLUS_I, model, TwirlConfig(1000, 100, 9, "balanced"))
        assert within_sigma(tw.get(0, 0) / shots, 0.5, shots)

    def test_deterministic(self):
        model = MeasurementModel((amplitude_damping(0.2, 0), bit_flip(0.1, 1)))
        cfg = TwirlConfig(10, 100, 77)
        assert twirled_measure(QuantumState.zero(2), model, cfg) == twirled_measure(QuantumState.zero(2), model, cfg)


class TestCharacterize:
    def test_ideal(self):
        p = characterize_error_distribution(MeasurementModel.ideal(), 3, TwirlConfig(10, 100))
        assert dict(p) == {0: 1.0} and p.kind == "probability"

    def test_product_of_twirled_dampings(self):
        gammas = [0.04, 0.1, 0.06]
        model = MeasurementModel(tuple(amplitude_damping(g, q) for q, g in enumerate(gammas)))
        cfg = TwirlConfig(96, 1000, 3, "balanced")
        p = characterize_error_distribution(model, 3, cfg)
        for q, g in enumerate(gammas):
            assert within_sigma(marginalize(p, [q]).weight(1), g / 2, cfg.total_shots)
        expected0 = np.prod([1 - g / 2 for g in gammas])
        assert within_sigma(p.weight(0), expected0, cfg.total_shots)
        assert p.meta["K"] == 96 and p.meta["shots"] == 96_000

    def test_alternate_basis_state(self):
        model = MeasurementModel((bit_flip(0.1, 0),))
        cfg = TwirlConfig(50, 1000, 5)
        p = characterize_error_distribution(model, 2, cfg, basis_state=0b11)
        assert within_sigma(p.weight(1), 0.1, cfg.total_shots)

    def test_classical_flip_converges(self):
        model = MeasurementModel((bit_flip(0.05, 0), bit_flip(0.02, 1)))
        cfg = TwirlConfig(100, 1000, 21)
        p = characterize_error_distribution(model, 2, cfg)
        truth = {0: 0.95 * 0.98, 1: 0.05 * 0.98, 2: 0.95 * 0.02, 3: 0.05 * 0.02}
        for k, v in truth.items():
            assert within_sigma(p.weight(k), v, cfg.total_shots)


class TestTwirledConfusion:
    def test_ideal(self):
        m = twirled_confusion(MeasurementModel.ideal(), 2, TwirlConfig(10, 100))
        np.testing.assert_array_equal(m.entries, np.eye(4))

    def test_damping_one_qubit(self):
        cfg = TwirlConfig(100, 500, 2, "balanced")
        m = twirled_confusion(MeasurementModel((amplitude_damping(0.06),)), 1, cfg)
        expected = np.array([[0.97, 0.03], [0.03, 0.97]])
        assert np.all(np.abs(m.entries - expected) <= 3 * np.sqrt(0.03 * 0.97 / cfg.total_shots))

    def test_xor_structure(self):
        model = MeasurementModel((amplitude_damping(0.1, 0), amplitude_damping(0.05, 1), correlated_crosstalk(0, 1, 0.15)))
        cfg = TwirlConfig(100, 500, 6, "balanced")
        m = twirled_confusion(model, 2, cfg)
        d = diagnostics(m)
        sigma = np.sqrt(0.25 / cfg.total_shots)
        assert d["diag_spread"] < 6 * sigma and d["asymmetry"] < 6 * sigma

    def test_guard(self):
        with pytest.raises(ValidationError, match="characterize_error_distribution"):
            twirled_confusion(MeasurementModel.ideal(), 5, TwirlConfig(1, 1))
