from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from inmateria.dnpu import (N_BRANCH, CircuitConfig, ControlSet, DnpuModel, branch_currents, control_limits,
                            d_current_d_vout, has_ndr, is_passive, mean_static_power, net_current, random_control_set,
                            sample_device, simulate, static_iv_sweep, static_power, step_response_tau,
                            time_constant_estimate, tone_thd, two_tone_response, zero_device)
from inmateria.errors import NoSettle, StepTooLarge
from inmateria.signal import DEFAULT_CHIRP, Waveform, gen_chirp, gen_tone, tone_table

CFG = CircuitConfig()


def _pure(s=1e-9, a=2.0, b=3.0, d=None, lam=None):
    """Hand-built device without gating; branch parameters broadcast to all seven branches."""
    v = np.full(N_BRANCH, 1.0)
    return DnpuModel(v * s, v * a, v * b, np.zeros((N_BRANCH, N_BRANCH)),
                     np.zeros(N_BRANCH) if d is None else np.asarray(d, dtype=float),
                     v * 0.3 if lam is None else np.asarray(lam, dtype=float))


# ---------------------------------------------------------------- sampling

def test_sample_device_deterministic_and_json(tmp_path):
    a, b = sample_device(7), sample_device(7)
    assert a == b
    assert a != sample_device(8)
    a.save(tmp_path / "d.json")
    assert DnpuModel.load(tmp_path / "d.json") == a


def test_sampled_parameter_ranges():
    for seed in range(50):
        m = sample_device(seed)
        assert np.all((m.s >= 0.05e-9) & (m.s <= 2e-9))
        assert np.all((m.a >= 1) & (m.a <= 4)) and np.all((m.b >= 1) & (m.b <= 4))
        assert np.all(np.abs(m.gamma) <= 1.5)
        assert np.all((m.lam >= 0.2) & (m.lam <= 0.6))
        assert np.all(np.abs(m.d) <= 5e-9)
        assert np.all(m.h >= 0)
        assert is_passive(m.s, m.a, m.b, m.gamma, m.d, m.lam)


def test_control_set_limits():
    rng = np.random.default_rng(0)
    for _ in range(200):
        c = random_control_set(rng)
        assert c.in_range()
        assert np.all(np.abs(c.as_array()[4:]) <= 0.2)
    assert not ControlSet.uniform(0.3).in_range()
    with pytest.raises(ValueError):
        ControlSet((0.0,) * 5)


def test_circuit_config_validation():
    with pytest.raises(ValueError):
        CircuitConfig(C_ext=0.5e-12)
    with pytest.raises(ValueError):
        CircuitConfig(oversample=0)
    with pytest.raises(ValueError):
        CircuitConfig(buffer_impedance=1e6)


# ---------------------------------------------------------------- currents

def test_zero_bias_zero_current():
    assert net_current(sample_device(0), 0.0, 0.0, ControlSet.zeros()) == 0.0


def test_output_conductance_at_origin():
    m = sample_device(3)
    z = ControlSet.zeros()
    analytic = d_current_d_vout(m, 0.0, 0.0, z)
    eps = 1e-6
    fd = (net_current(m, 0.0, eps, z) - net_current(m, 0.0, -eps, z)) / (2 * eps)
    closed = -np.sum(m.s * (m.a + m.b) + m.d)
    assert analytic == pytest.approx(closed, rel=1e-12)
    assert fd == pytest.approx(analytic, rel=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(-0.5, 0.5), st.floats(-0.5, 0.5), st.floats(0.0, 1.0))
def test_output_conductance_matches_finite_difference(seed, v_in, v_out, scale):
    m = sample_device(seed)
    c = random_control_set(np.random.default_rng(seed), scale)
    eps = 1e-6
    fd = (net_current(m, v_in, v_out + eps, c) - net_current(m, v_in, v_out - eps, c)) / (2 * eps)
    assert fd == pytest.approx(d_current_d_vout(m, v_in, v_out, c), rel=1e-5, abs=1e-20)


def test_branch_currents_vectorized():
    m = sample_device(1)
    c = random_control_set(np.random.default_rng(1))
    v = np.linspace(-0.5, 0.5, 11)
    vec = net_current(m, v, 0.1, c)
    assert np.allclose(vec, [net_current(m, x, 0.1, c) for x in v], rtol=1e-14, atol=0)
    assert branch_currents(m, v, 0.1, c).shape == (11, N_BRANCH)


# ---------------------------------------------------------------- static IV / power

def test_zero_device_sweep_is_zero():
    assert np.all(static_iv_sweep(zero_device()).current == 0.0)


@given(st.floats(0.05e-9, 2e-9), st.floats(1, 4), st.floats(1, 4))
def test_monotone_branch_iv(s, a, b):
    sweep = static_iv_sweep(_pure(s, a, b))
    assert np.all(np.diff(sweep.current) > 0)
    assert not has_ndr(sweep)


def test_hand_built_ndr_device():
    d = np.zeros(N_BRANCH)
    d[0] = -5e-9
    m = _pure(s=0.05e-9, a=1.0, b=1.0, d=d, lam=np.full(N_BRANCH, 0.2))
    sweep = static_iv_sweep(m, "input", (-0.4, 0.4, 161))
    assert has_ndr(sweep)
    assert np.any(np.diff(sweep.current) < 0)


def test_ndr_exists_among_sampled_devices():
    found = []
    for seed in range(100):
        m = sample_device(seed)
        for k in range(N_BRANCH):
            if has_ndr(static_iv_sweep(m, k)):
                found.append((seed, k))
    assert found


def test_static_power_zero_and_range_check():
    m = sample_device(0)
    assert static_power(m, 0.0, 0.0, ControlSet.zeros()) == 0.0
    with pytest.raises(ValueError):
        static_power(m, 0.6, 0.0, ControlSet.zeros())


def test_static_power_nonnegative_random_biases():
    rng = np.random.default_rng(0)
    worst = math.inf
    for i in range(10_000):
        m = sample_device(i % 10)
        v = rng.uniform(-1, 1, 8) * np.array([0.5] + list(control_limits()) + [0.5])
        p = static_power(m, v[0], v[7], ControlSet(tuple(v[1:7])))
        worst = min(worst, p)
    assert worst >= 0.0


def test_static_power_conservation_form():
    m = sample_device(2)
    c = random_control_set(np.random.default_rng(2))
    i = branch_currents(m, 0.2, 0.1, c)
    # equivalently sum over branches of drop times current
    drops = np.concatenate([[0.2], c.as_array()]) - 0.1
    assert static_power(m, 0.2, 0.1, c) == pytest.approx(float(np.dot(drops, i)), rel=1e-12)


def test_default_device_power_band():
    m = sample_device(0)
    p = mean_static_power(m, [random_control_set(np.random.default_rng(s)) for s in range(10)])
    assert 0.1e-9 <= p <= 10e-9


# ---------------------------------------------------------------- simulation

def test_zero_input_fixed_point():
    w = Waveform(np.zeros(2000), 12_500)
    assert np.all(simulate(sample_device(0), CFG, w, ControlSet.zeros()).samples == 0.0)


def test_simulate_deterministic():
    m = sample_device(4)
    w = gen_tone(150, 0.5, 0.1, 12_500)
    c = random_control_set(np.random.default_rng(4))
    a = simulate(m, CFG, w, c).samples
    b = simulate(m, CFG, w, c).samples
    assert a.tobytes() == b.tobytes()


def test_oversample_convergence_on_chirp():
    m = sample_device(0)
    w = gen_chirp(DEFAULT_CHIRP, 25_000)
    a = simulate(m, CircuitConfig(oversample=8), w, ControlSet.zeros()).samples
    b = simulate(m, CircuitConfig(oversample=16), w, ControlSet.zeros()).samples
    assert np.sqrt(np.mean((a - b) ** 2)) < 1e-4


def test_rk4_fourth_order():
    m = sample_device(0)
    w = gen_tone(50, 0.5, 0.2, 1000)
    c = ControlSet.zeros()
    ref = simulate(m, CircuitConfig(oversample=64), w, c).samples
    errs = [np.sqrt(np.mean((simulate(m, CircuitConfig(oversample=n), w, c).samples - ref) ** 2)) for n in (4, 8)]
    assert errs[0] / errs[1] >= 8


def test_step_too_large_and_low_rate():
    m = sample_device(0)
    w = gen_tone(50, 0.5, 0.05, 1000)
    with pytest.raises(StepTooLarge):
        simulate(m, CircuitConfig(C_ext=1e-12, oversample=1), w, ControlSet.zeros())
    with pytest.raises(ValueError):
        simulate(m, CFG, Waveform(np.zeros(10), 500), ControlSet.zeros())


def test_fading_memory():
    m = sample_device(0)
    c = random_control_set(np.random.default_rng(5))
    w = gen_tone(100, 0.3, 0.3, 12_500)
    a = simulate(m, CFG, w, c, 0.0).samples
    b = simulate(m, CFG, w, c, 0.2).samples
    tau = time_constant_estimate(m, CFG, 0.0, 0.0, c)
    k = int(math.ceil(10 * tau * w.sample_rate))
    assert k < a.size
    assert np.all(np.abs(a[k:] - b[k:]) < 1e-3)


def test_gating_sensitivity():
    m = sample_device(0)
    w = gen_tone(200, 0.5, 0.1, 12_500)
    base = np.zeros(6)

    def rms(v):
        return float(np.sqrt(np.mean(simulate(m, CFG, w, ControlSet(tuple(v))).samples ** 2)))

    r0 = rms(base)
    moved = 0
    for j in range(6):
        v = base.copy()
        v[j] = 0.01
        moved += abs(rms(v) - r0) / r0 > 1e-6
    assert moved >= 4


# ---------------------------------------------------------------- time constant

def test_tau_scales_with_capacitance():
    m = sample_device(0)
    rng = np.random.default_rng(9)
    for _ in range(4):
        c = random_control_set(rng)
        r = step_response_tau(m, CircuitConfig(C_ext=200e-12), c) / step_response_tau(m, CFG, c)
        assert 1.8 <= r <= 2.2


def test_tau_single_pole_oracle():
    # a linear device is an RC: tau is the 63% point of 1 - exp(-t/RC) = R C ln(1/0.37)
    m = _pure(s=1e-9).linearized()
    g = -d_current_d_vout(m, 0.0, 0.0, ControlSet.zeros())
    rc = CFG.C_ext / g
    assert step_response_tau(m, CFG, ControlSet.zeros()) == pytest.approx(rc * math.log(1 / 0.37), rel=2e-3)


def test_no_settle():
    m = sample_device(0)
    with pytest.raises(NoSettle):
        step_response_tau(m, CircuitConfig(C_ext=1e-9), ControlSet.zeros(), t_max=1e-3)


def test_tau_shrinks_with_control_magnitude():
    lo, hi = [], []
    for seed in range(100):
        m = sample_device(seed)
        rng = np.random.default_rng(1000 + seed)
        small = ControlSet(tuple(rng.uniform(-1, 1, 6) * 0.1))
        # full magnitude at every electrode's limit (0.4 V, 0.2 V next to the output)
        large = ControlSet(tuple(np.sign(rng.uniform(-1, 1, 6)) * control_limits()))
        lo.append(step_response_tau(m, CFG, small))
        hi.append(step_response_tau(m, CFG, large))
    assert np.mean(lo) > np.mean(hi)


def test_thd_falls_toward_linear_regime():
    wins = sum(tone_thd(sample_device(s), CFG, ControlSet.uniform(0.5)) < tone_thd(sample_device(s), CFG,
                                                                                     ControlSet.zeros())
               for s in range(100))
    assert wins >= 80


# ---------------------------------------------------------------- two tone

def test_linearized_device_has_no_intermodulation():
    m = sample_device(0)
    lin = two_tone_response(m.linearized(), CFG, ControlSet.zeros())
    peaks = tone_table(lin, float(lin.power_db.max()) - 60)
    assert sorted(round(f / 10) for f, _ in peaks) == [7, 17]
    nonlin = two_tone_response(m, CFG, ControlSet.zeros())
    freqs = [f for f, _ in tone_table(nonlin, float(nonlin.power_db.max()) - 60)]
    assert any(abs(f - 26) < 2 * nonlin.resolution for f in freqs)
