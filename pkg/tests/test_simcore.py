import numpy as np
import pytest

from romit.bitdist import SignedDist
from romit.errors import NumericalError, ValidationError
from romit.simcore import (
    Circuit,
    MeasurementModel,
    NoiseChannel,
    QuantumState,
    Reset,
    amplitude_damping,
    apply_channel,
    apply_unitary,
    bit_flip,
    circuit_from_json,
    coherent_rotation,
    composite,
    conditional,
    correlated_crosstalk,
    correlated_flip,
    evolve,
    gate,
    gate_matrix,
    haar_su2,
    identity_channel,
    measure,
    output_distribution,
    outcome_distribution,
    run_circuit,
    sample_measurement,
)

from conftest import within_sigma

X, H, CNOT = gate_matrix("X"), gate_matrix("H"), gate_matrix("CNOT")
PLUS = QuantumState.pure(np.array([1, 1]) / np.sqrt(2))


class TestUnitary:
    def test_x(self):
        out = apply_unitary(QuantumState.zero(1), X, [0])
        np.testing.assert_allclose(out.rho, np.diag([0, 1]), atol=1e-12)

    def test_h(self):
        out = apply_unitary(QuantumState.zero(1), H, [0])
        np.testing.assert_allclose(out.rho, np.full((2, 2), 0.5), atol=1e-12)

    def test_cnot(self):
        # |10> in text form: qubit 1 set, qubit 0 clear; control = qubit 1
        out = apply_unitary(QuantumState.basis(2, 0b10), CNOT, [1, 0])
        np.testing.assert_allclose(out.rho, np.diag([0, 0, 0, 1]), atol=1e-12)

    def test_non_unitary(self):
        with pytest.raises(ValidationError):
            apply_unitary(QuantumState.zero(1), np.array([[1, 1], [0, 1]]), [0])

    def test_haar_is_special_unitary(self, rng):
        u = haar_su2(rng)
        np.testing.assert_allclose(u @ u.conj().T, np.eye(2), atol=1e-12)
        assert np.linalg.det(u) == pytest.approx(1)


class TestChannels:
    def test_identity(self):
        assert np.allclose(apply_channel(PLUS, identity_channel()).rho, PLUS.rho)

    def test_damping_excited(self):
        out = apply_channel(QuantumState.basis(1, 1), amplitude_damping(0.06))
        np.testing.assert_allclose(out.rho, np.diag([0.06, 0.94]), atol=1e-12)

    def test_damping_ground_fixed(self):
        out = apply_channel(QuantumState.zero(1), amplitude_damping(0.3))
        np.testing.assert_allclose(out.rho, np.diag([1, 0]), atol=1e-12)

    def test_damping_zero_is_identity(self):
        assert amplitude_damping(0).is_identity

    def test_rotation_rabi(self):
        theta = 0.7
        out = apply_channel(QuantumState.zero(1), coherent_rotation("X", theta))
        assert out.rho[1, 1].real == pytest.approx(np.sin(theta / 2) ** 2)

    def test_crosstalk(self):
        ch = correlated_crosstalk(0, 1, 0.15)
        out = outcome_distribution(QuantumState.basis(2, 0b11), MeasurementModel((ch,)))
        assert out.weight(0b01) == pytest.approx(0.15)
        # control in |0>: no effect
        out = outcome_distribution(QuantumState.basis(2, 0b10), MeasurementModel((ch,)))
        assert out.weight(0b10) == pytest.approx(1)

    def test_correlated_flip(self):
        out = outcome_distribution(QuantumState.zero(3), MeasurementModel((correlated_flip([0, 2], 0.1),)))
        assert dict(out) == pytest.approx({0: 0.9, 0b101: 0.1})

    @pytest.mark.parametrize("bad", [-0.1, 1.1])
    def test_parameter_range(self, bad):
        with pytest.raises(ValidationError):
            amplitude_damping(bad)
        with pytest.raises(ValidationError):
            correlated_crosstalk(0, 1, bad)

    def test_not_cptp(self):
        with pytest.raises(ValidationError):
            NoiseChannel((np.eye(2) * 0.5,))

    def test_trace_preserved(self, rng):
        ch = composite([amplitude_damping(0.2, 0), coherent_rotation("Y", 0.4, 1), correlated_crosstalk(1, 2, 0.3)])
        psi = rng.normal(size=8) + 1j * rng.normal(size=8)
        out = apply_channel(QuantumState.pure(psi), ch)
        out.validate()


class TestMeasurement:
    def test_ideal_zero(self, rng):
        bits, _ = sample_measurement(QuantumState.zero(1), MeasurementModel.ideal(), [0], rng)
        assert bits.mask == 0

    def test_damped_one(self):
        d = outcome_distribution(QuantumState.basis(1, 1), MeasurementModel((amplitude_damping(0.06),)))
        assert d.weight(1) == pytest.approx(0.94)

    def test_plus_half(self):
        assert dict(outcome_distribution(PLUS)) == pytest.approx({0: 0.5, 1: 0.5})

    def test_post_state_collapses(self, rng):
        bits, post = sample_measurement(PLUS, MeasurementModel.ideal(), [0], rng)
        assert post.rho[bits.mask, bits.mask].real == pytest.approx(1)

    def test_sampling_frequency(self, rng):
        model = MeasurementModel((amplitude_damping(0.06),))
        hits = sum(sample_measurement(QuantumState.basis(1, 1), model, [0], rng)[0].mask for _ in range(4000))
        assert within_sigma(hits / 4000, 0.94, 4000)

    def test_povm_complete(self):
        model = MeasurementModel((amplitude_damping(0.1, 0), correlated_crosstalk(0, 1, 0.2), coherent_rotation("X", 0.3, 1)))
        effects = model.povm(2)
        np.testing.assert_allclose(sum(effects), np.eye(4), atol=1e-12)
        for e in effects:
            assert np.linalg.eigvalsh(e).min() > -1e-12

    def test_ideal_confusion_identity(self):
        for x in range(4):
            assert outcome_distribution(QuantumState.basis(2, x)) == SignedDist(2, {x: 1.0})

    def test_classical_model_matches_stochastic_matrix(self):
        model = MeasurementModel((bit_flip(0.1, 0), bit_flip(0.2, 1)))
        flips = {0: 0.72, 1: 0.08, 2: 0.18, 3: 0.02}
        for x in range(4):
            d = outcome_distribution(QuantumState.basis(2, x), model)
            for e, p in flips.items():
                assert d.weight(x ^ e) == pytest.approx(p)


class TestCircuits:
    def test_x_then_measure(self, rng):
        c = Circuit(1, [gate("X", 0), measure([0])])
        assert run_circuit(c, 100, rng).counts == {1: 100}

    def test_h_statistics(self, rng):
        c = Circuit(1, [gate("H", 0), measure([0])])
        counts = run_circuit(c, 100_000, rng).counts
        assert within_sigma(counts.get(0, 0) / 100_000, 0.5, 100_000)

    def test_counts_sum(self, rng):
        c = Circuit(2, [gate("H", 0), gate("H", 1), measure([0, 1])])
        assert sum(run_circuit(c, 777, rng).counts.values()) == 777

    def test_unwritten_condition_rejected(self):
        c = Circuit(1, [conditional("X", [0], [(0, 1)]), measure([0])])
        with pytest.raises(ValidationError):
            c.validate()

    def test_duplicate_slot_rejected(self):
        c = Circuit(1, [measure([0], [0]), measure([0], [0])])
        with pytest.raises(ValidationError):
            c.validate()

    def test_feedback_noiseless(self, rng):
        # memory 0, ancilla 1; three protection rounds
        c = Circuit(2, [gate("X", 0)], outputs=(3,))
        for r in range(3):
            c.append(gate("CNOT", 0, 1)).append(measure([1], [r]))
            c.append(conditional("X", [0], [(r, 0)])).append(Reset((1,)))
        c.append(measure([0], [3]))
        assert run_circuit(c, 500, rng).counts == {1: 500}

    def test_teleport_like_feedback(self):
        # measuring |+> and correcting with X on outcome 1 always leaves |0>
        c = Circuit(2, [gate("H", 0), gate("CNOT", 0, 1), measure([0], [0]), conditional("X", [1], [(0, 1)]), measure([1], [1])], outputs=(1,))
        assert dict(output_distribution(c)) == pytest.approx({0: 1.0})

    def test_deterministic_replay(self):
        c = Circuit(2, [gate("H", 0), gate("RY", 1, params=[0.3]), measure([0, 1], model=MeasurementModel((amplitude_damping(0.1, 0),)))])
        a = run_circuit(c, 1000, np.random.default_rng(5)).counts
        b = run_circuit(c, 1000, np.random.default_rng(5)).counts
        assert a == b

    def test_per_shot_matches_exact(self):
        model = MeasurementModel((amplitude_damping(0.2, 1),))
        c = Circuit(2, [gate("H", 0), gate("CNOT", 0, 1), measure([1], [0], model), conditional("X", [0], [(0, 1)]), measure([0], [1])])
        exact = output_distribution(c)
        counts = run_circuit(c, 3000, np.random.default_rng(1), method="shots").counts
        for key, p in exact.items():
            assert within_sigma(counts.get(key, 0) / 3000, p, 3000, k=4)

    def test_trace_records_registers(self, rng):
        c = Circuit(1, [gate("H", 0), measure([0], [0])])
        res = run_circuit(c, 50, rng, record_trace=True)
        assert len(res.trace) == 50 and sum(res.counts.values()) == 50

    def test_evolve_rejects_measurement(self):
        with pytest.raises(ValidationError):
            evolve(Circuit(1, [measure([0])]))


class TestJson:
    def test_round_trip(self):
        doc = {
            "n": 2,
            "nodes": [
                {"op": "H", "targets": [0]},
                {"op": "CNOT", "targets": [0, 1]},
                {"op": "measure", "targets": [1], "slots": [0], "model": [{"type": "bit_flip", "qubit": 1, "p": 0.0}]},
                {"op": "X", "targets": [1], "condition": [{"slot": 0, "equals": 1}]},
                {"op": "measure", "targets": [1], "slots": [1]},
            ],
            "outputs": [1],
        }
        c = circuit_from_json(doc)
        assert dict(output_distribution(c)) == pytest.approx({0: 1.0})

    def test_error_location(self):
        with pytest.raises(ValidationError, match="nodes/0"):
            circuit_from_json({"n": 1, "nodes": [{"op": "X", "targets": [0], "bogus": 1}]})

    def test_bad_gate(self):
        with pytest.raises(ValidationError, match="node 0"):
            circuit_from_json({"n": 1, "nodes": [{"op": "FOO", "targets": [0]}]})
