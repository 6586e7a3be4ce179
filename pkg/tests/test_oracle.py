import numpy as np
import pytest

from hkfncs.hkf_local import Hgmm, build_schedule
from hkfncs.model import SensorModel, rollout_true_state
from hkfncs.oracle import (
    central_kf_step,
    delta_sum_formula,
    gain_product,
    input_inner_term,
    inverse_transition,
    measurement_mean,
    transition_product,
    x_sum_formula,
    xu_sum_formula,
)

from conftest import random_system, scalar_model


@pytest.fixture
def system():
    model, sensors = random_system(17, 3, 2)
    return model, sensors, build_schedule(model, sensors, Hgmm.matched(sensors, 0.8), 20)


def test_gain_product_basic(system):
    model, _, s = system
    assert np.array_equal(gain_product(s, model, 4, 4), np.eye(3))
    assert np.allclose(gain_product(s, model, 6, 7), s.K[7] @ model.A, atol=1e-15)
    assert np.allclose(gain_product(s, model, 1, 5), gain_product(s, model, 3, 5) @ gain_product(s, model, 1, 3), rtol=0, atol=1e-12)
    with pytest.raises(IndexError):
        gain_product(s, model, 0, 21)


def test_composition_identities_all_triples(system):
    model, _, s = system
    for l in range(1, 21):
        for m_ in range(l, 21):
            for k in range(m_, 21):
                G = gain_product(s, model, l, k)
                assert np.allclose(G, gain_product(s, model, m_, k) @ gain_product(s, model, l, m_), rtol=0, atol=1e-12)
                P = transition_product(model, l, k)
                assert np.allclose(P, transition_product(model, m_, k) @ transition_product(model, l, m_), rtol=1e-12, atol=1e-12)
                if l + 1 <= k:
                    # Phi(l,k)^-1 Phi(m+1,k) = Phi(l,m+1)^-1 for l <= m+1
                    if m_ + 1 <= k:
                        lhs = inverse_transition(model, l, k) @ transition_product(model, m_ + 1, k)
                        assert np.allclose(lhs, inverse_transition(model, l, m_ + 1), rtol=1e-12, atol=1e-12)


def test_reverse_index_convention(system):
    model, _, s = system
    assert np.allclose(gain_product(s, model, 9, 4) @ gain_product(s, model, 4, 9), np.eye(3), atol=1e-10)
    assert np.allclose(transition_product(model, 7, 3), np.linalg.inv(transition_product(model, 3, 7)), atol=1e-12)


def test_sum_formula_trivial_cases(system):
    model, sensors, s = system
    zeros = {x.id: np.zeros((21, x.q)) for x in sensors}
    assert np.array_equal(x_sum_formula(s, model, zeros, [0, 1], 10), np.zeros(3))
    z = {x.id: np.random.default_rng(0).standard_normal((21, x.q)) for x in sensors}
    assert np.allclose(x_sum_formula(s, model, z, [1], 1), s.L[1][1] @ z[1][1])
    LH = sum(s.L[x.id][1] @ x.H for x in sensors)
    assert np.allclose(delta_sum_formula(s, model, sensors, [0, 1], 1), LH)
    assert np.array_equal(xu_sum_formula(s, model, [np.eye(3)] * 10, np.zeros((10, 1)), 10), np.zeros(3))


def test_matched_full_group_delta_is_identity():
    model, sensors = random_system(4, 3, 3)
    s = build_schedule(model, sensors, Hgmm.matched(sensors), 30)
    for k in range(1, 31):
        assert np.allclose(delta_sum_formula(s, model, sensors, [0, 1, 2], k), np.eye(3), rtol=0, atol=1e-9)


def test_inner_term_identity(system):
    model, sensors, s = system
    group = [0, 1]
    for k in range(2, 16):
        for l in range(1, k):
            lhs = gain_product(s, model, l, k) @ delta_sum_formula(s, model, sensors, group, l) @ model.A_inv
            rhs = input_inner_term(s, model, sensors, group, l, k)
            assert np.linalg.norm(lhs - rhs) <= 1e-9 * np.linalg.norm(rhs)


def test_measurement_mean_examples():
    model = scalar_model(A=2.0, B=1.0, x0=0.0)
    sensor = SensorModel(0, [[1.0]], [[1.0]])
    assert measurement_mean(model, sensor, np.ones(3), 3) == pytest.approx([7.0])
    assert measurement_mean(model, sensor, np.zeros(3), 3) == pytest.approx([0.0])
    big, sensors = random_system(2, 3, 1)
    u = np.random.default_rng(1).standard_normal((8, 1))
    expected = sensors[0].H @ rollout_true_state(big, u, 8)
    assert np.allclose(measurement_mean(big, sensors[0], u, 8), expected, atol=1e-12)


def test_central_kf_scalar_hand_values(scalar_case):
    model, sensor = scalar_case
    mean, cov = central_kf_step(None, None, [[4.0]], None, model, [sensor])
    assert cov == pytest.approx(np.array([[1.0]])) and mean == pytest.approx([4.0])
    mean, cov = central_kf_step(mean, cov, [[1.0]], [0.0], model, [sensor])
    assert cov == pytest.approx(np.array([[2 / 3]])) and mean == pytest.approx([2.0])


def test_central_kf_without_measurements_predicts():
    model, sensors = random_system(6, 2, 2)
    mean, cov = np.array([1.0, -1.0]), np.eye(2)
    m2, c2 = central_kf_step(mean, cov, [None, None], [0.5], model, sensors)
    assert np.allclose(m2, model.A @ mean + model.B @ [0.5])
    assert np.allclose(c2, model.A @ cov @ model.A.T + model.Xi)


@pytest.mark.parametrize("seed", range(5))
def test_central_kf_forms_agree(seed):
    model, sensors = random_system(seed, 3, 3)
    rng = np.random.default_rng(seed)
    mean, cov = rng.standard_normal(3), np.eye(3) * 2
    zs = [rng.standard_normal(s.q) for s in sensors]
    u = rng.standard_normal(1)
    mi, ci = central_kf_step(mean, cov, zs, u, model, sensors, form="information")
    mc, cc = central_kf_step(mean, cov, zs, u, model, sensors, form="covariance")
    ms, cs = central_kf_step(mean, cov, zs, u, model, sensors, form="sequential")
    assert np.linalg.norm(mi - mc) <= 1e-10 * np.linalg.norm(mc)
    assert np.linalg.norm(ci - cc) <= 1e-10 * np.linalg.norm(cc)
    assert np.linalg.norm(ms - mc) <= 1e-10 * np.linalg.norm(mc)
    assert np.linalg.norm(cs - cc) <= 1e-10 * np.linalg.norm(cc)


def test_central_kf_singular_information_raises():
    model, _ = random_system(1, 2, 1)
    sensor = SensorModel(0, [[1.0, 0.0]], [[1.0]])
    with pytest.raises(np.linalg.LinAlgError):
        central_kf_step(None, None, [[1.0]], None, model, [sensor])
