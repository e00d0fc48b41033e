"""Phenomenological 8-electrode DNPU surrogate driving an output capacitor.

Seven branches (input, c1..c6) connect to the output node. Branch k carries

    s_k [exp(a_k D) - exp(-b_k D)] exp(sum_j g_kj V_j) + d_k D exp(-(D/lam_k)^2)
        + h_k D (exp(kappa |V_c|^2) - 1)

with D = V_k - v_out. The last term is an ohmic path that opens as the
control magnitudes grow, making strongly biased devices faster and more
linear. The output node integrates the summed branch current on C_ext;
that single state is the fading memory.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path

import numba
import numpy as np

from .errors import NoSettle, StepTooLarge
from .signal import (
    CHAR_RATE, DEFAULT_CHIRP, ChirpParams, Spectrum, Waveform, gen_chirp, gen_tone, gen_two_tone,
    harmonic_ridges, line_level, psd,
)

BRANCHES = ("input", "c1", "c2", "c3", "c4", "c5", "c6")
N_BRANCH = len(BRANCHES)
CONTROL_LIMIT = 0.4
OUTPUT_ADJACENT_LIMIT = 0.2  # c5, c6 sit next to the output electrode
DEFAULT_DEVICE_SEED = 0
STEP_RATE = 50_000.0
GATING_COMMON_STD = 1.2
GATING_BRANCH_STD = 0.3
OHMIC_KAPPA = 4.0           # 1/V^2
OHMIC_RATIO = (0.01, 0.04)  # ohmic path relative to the small-signal branch conductance


@dataclass(frozen=True)
class ControlSet:
    v: tuple[float, ...]

    def __post_init__(self):
        v = tuple(float(x) for x in self.v)
        if len(v) != 6:
            raise ValueError("a control set has exactly six voltages")
        object.__setattr__(self, "v", v)

    @classmethod
    def zeros(cls) -> "ControlSet":
        return cls((0.0,) * 6)

    @classmethod
    def uniform(cls, value: float) -> "ControlSet":
        return cls((float(value),) * 6)

    def as_array(self) -> np.ndarray:
        return np.array(self.v, dtype=np.float64)

    def in_range(self) -> bool:
        a = np.abs(self.as_array())
        return bool(np.all(a[:4] <= CONTROL_LIMIT) and np.all(a[4:] <= OUTPUT_ADJACENT_LIMIT))


def control_limits() -> np.ndarray:
    return np.array([CONTROL_LIMIT] * 4 + [OUTPUT_ADJACENT_LIMIT] * 2)


def random_control_set(rng: np.random.Generator, scale: float = 1.0) -> ControlSet:
    return ControlSet(tuple(rng.uniform(-1.0, 1.0, 6) * control_limits() * scale))


@dataclass(frozen=True)
class CircuitConfig:
    C_ext: float = 100e-12
    buffer_impedance: float = 1e9
    oversample: int = 8

    def __post_init__(self):
        if not 1e-12 <= self.C_ext <= 1e-9:
            raise ValueError("C_ext must lie in [1 pF, 1 nF]")
        if int(self.oversample) != self.oversample or self.oversample < 1:
            raise ValueError("oversample must be a positive integer")
        if self.buffer_impedance < 1e9:
            raise ValueError("buffer impedance below 1 GOhm loads the output node")


@dataclass(frozen=True, eq=False)
class DnpuModel:
    s: np.ndarray       # A
    a: np.ndarray       # 1/V
    b: np.ndarray       # 1/V
    gamma: np.ndarray   # 1/V, [branch, electrode]
    d: np.ndarray       # A/V
    lam: np.ndarray     # V
    seed: int | None = None
    linear: bool = False
    h: np.ndarray | None = None   # A/V, control-activated ohmic path

    def __post_init__(self):
        if self.h is None:
            object.__setattr__(self, "h", np.zeros(N_BRANCH))
        for name in ("s", "a", "b", "d", "lam", "h"):
            arr = np.asarray(getattr(self, name), dtype=np.float64).reshape(N_BRANCH)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        g = np.asarray(self.gamma, dtype=np.float64).reshape(N_BRANCH, N_BRANCH)
        g.setflags(write=False)
        object.__setattr__(self, "gamma", g)

    def linearized(self) -> "DnpuModel":
        """First-order version: gating frozen at the controls, no input gating."""
        return replace(self, linear=True)

    def __eq__(self, other):
        if not isinstance(other, DnpuModel):
            return NotImplemented
        return (self.seed == other.seed and self.linear == other.linear
                and all(np.array_equal(getattr(self, k), getattr(other, k))
                        for k in ("s", "a", "b", "gamma", "d", "lam", "h")))

    def to_dict(self) -> dict:
        return {
            "schema": "inmateria.dnpu/1",
            "seed": self.seed,
            "branches": list(BRANCHES),
            "s_A": self.s.tolist(),
            "a_per_V": self.a.tolist(),
            "b_per_V": self.b.tolist(),
            "gamma_per_V": self.gamma.tolist(),
            "d_A_per_V": self.d.tolist(),
            "lambda_V": self.lam.tolist(),
            "h_A_per_V": self.h.tolist(),
            "linear": self.linear,
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "DnpuModel":
        return cls(np.array(doc["s_A"]), np.array(doc["a_per_V"]), np.array(doc["b_per_V"]),
                   np.array(doc["gamma_per_V"]), np.array(doc["d_A_per_V"]), np.array(doc["lambda_V"]),
                   doc.get("seed"), bool(doc.get("linear", False)),
                   np.array(doc.get("h_A_per_V", np.zeros(N_BRANCH))))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1))

    @classmethod
    def load(cls, path) -> "DnpuModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def zero_device() -> DnpuModel:
    z = np.zeros(N_BRANCH)
    return DnpuModel(z, np.ones(N_BRANCH), np.ones(N_BRANCH), np.zeros((N_BRANCH, N_BRANCH)), z, np.ones(N_BRANCH),
                     None)


def _draw(rng: np.random.Generator):
    s = np.exp(rng.uniform(math.log(0.05e-9), math.log(2e-9), N_BRANCH))
    a = rng.uniform(1.0, 4.0, N_BRANCH)
    b = rng.uniform(1.0, 4.0, N_BRANCH)
    # electrode-wide coupling shared by all branches plus a per-branch part
    common = rng.normal(0.0, GATING_COMMON_STD, N_BRANCH)
    gamma = np.clip(common[None, :] + rng.normal(0.0, GATING_BRANCH_STD, (N_BRANCH, N_BRANCH)), -1.5, 1.5)
    has_ndr = rng.random(N_BRANCH) >= 0.5
    d = np.where(has_ndr, rng.uniform(-5e-9, 5e-9, N_BRANCH), 0.0)
    lam = rng.uniform(0.2, 0.6, N_BRANCH)
    return s, a, b, gamma, d, lam


_PASSIVITY_GRID = np.concatenate([-np.geomspace(1.5, 1e-4, 200), np.geomspace(1e-4, 1.5, 200)])


def is_passive(s, a, b, gamma, d, lam, v_bound: float = 0.5) -> bool:
    """Every branch current has the sign of its voltage drop for |V_j| <= v_bound."""
    g_min = np.exp(-v_bound * np.abs(gamma).sum(axis=1))
    x = _PASSIVITY_GRID[:, None]
    main = s * g_min * (np.exp(a * x) - np.exp(-b * x))
    ndr = d * x * np.exp(-(x / lam) ** 2)
    return bool(np.all((main + ndr) * x >= 0))


def sample_device(seed: int = DEFAULT_DEVICE_SEED) -> DnpuModel:
    """Draw device parameters; non-passive draws are rejected and redrawn."""
    rng = np.random.default_rng(seed)
    while True:
        params = _draw(rng)
        if is_passive(*params):
            # separate stream so the ohmic path leaves the other draws untouched
            h = np.random.default_rng([seed, 1]).uniform(*OHMIC_RATIO, N_BRANCH) * params[0] * (params[1] + params[2])
            return DnpuModel(*params, seed=seed, h=h)


def ohmic_conductance(m: DnpuModel, c: ControlSet) -> np.ndarray:
    """Per-branch conductance of the control-activated ohmic path (S)."""
    return m.h * math.expm1(OHMIC_KAPPA * float(np.sum(c.as_array() ** 2)))


def electrode_voltages(v_in, c: ControlSet) -> np.ndarray:
    return np.concatenate([[v_in], c.as_array()])


def branch_currents(m: DnpuModel, v_in, v_out, c: ControlSet) -> np.ndarray:
    """Current flowing from each branch electrode into the output node, shape (..., 7)."""
    v_in = np.asarray(v_in, dtype=np.float64)
    v_out = np.asarray(v_out, dtype=np.float64)
    ctrl = c.as_array()
    V = np.concatenate([np.broadcast_to(v_in[..., None], np.broadcast_shapes(v_in.shape, v_out.shape) + (1,)),
                        np.broadcast_to(ctrl, np.broadcast_shapes(v_in.shape, v_out.shape) + (6,))], axis=-1)
    delta = V - v_out[..., None]
    g_ohm = ohmic_conductance(m, c)
    if m.linear:
        gate = np.exp(m.gamma[:, 1:] @ ctrl)
        return (m.s * (m.a + m.b) * gate + m.d + g_ohm) * delta
    gate = np.exp(V @ m.gamma.T)
    main = m.s * (np.exp(m.a * delta) - np.exp(-m.b * delta)) * gate
    return main + m.d * delta * np.exp(-(delta / m.lam) ** 2) + g_ohm * delta


def net_current(m: DnpuModel, v_in, v_out, c: ControlSet):
    out = branch_currents(m, v_in, v_out, c).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def d_current_d_vout(m: DnpuModel, v_in: float, v_out: float, c: ControlSet) -> float:
    V = electrode_voltages(v_in, c)
    delta = V - v_out
    g_ohm = ohmic_conductance(m, c)
    if m.linear:
        return float(-np.sum(m.s * (m.a + m.b) * np.exp(m.gamma[:, 1:] @ c.as_array()) + m.d + g_ohm))
    gate = np.exp(m.gamma @ V)
    main = -m.s * gate * (m.a * np.exp(m.a * delta) + m.b * np.exp(-m.b * delta))
    ndr = -m.d * (1 - 2 * delta ** 2 / m.lam ** 2) * np.exp(-(delta / m.lam) ** 2)
    return float(np.sum(main + ndr - g_ohm))


@numba.njit(cache=True, nogil=True)
def _rhs(v, vk, gate, a, b, d, lam, g_ohm, inv_c, linear):
    i_tot = 0.0
    for k in range(vk.shape[0]):
        dl = vk[k] - v
        i_tot += g_ohm[k] * dl
        if linear:
            i_tot += (gate[k] * (a[k] + b[k]) + d[k]) * dl
        else:
            i_tot += gate[k] * (math.exp(a[k] * dl) - math.exp(-b[k] * dl))
            if d[k] != 0.0:
                r = dl / lam[k]
                i_tot += d[k] * dl * math.exp(-r * r)
    return i_tot * inv_c


@numba.njit(cache=True, nogil=True)
def _rk4_trace(vin, oversample, dt, s, a, b, gamma, d, lam, g_ohm, ctrl, inv_c, v0, linear):
    n = vin.shape[0]
    nb = s.shape[0]
    out = np.empty(n)
    vk = np.empty(nb)
    gate = np.empty(nb)
    ctrl_gate = np.zeros(nb)
    for k in range(nb):
        for j in range(ctrl.shape[0]):
            ctrl_gate[k] += gamma[k, j + 1] * ctrl[j]
    for j in range(ctrl.shape[0]):
        vk[j + 1] = ctrl[j]
    v = v0
    for i in range(n):
        out[i] = v
        u = vin[i]
        vk[0] = u
        for k in range(nb):
            if linear:
                gate[k] = s[k] * math.exp(ctrl_gate[k])
            else:
                gate[k] = s[k] * math.exp(gamma[k, 0] * u + ctrl_gate[k])
        for _ in range(oversample):
            k1 = _rhs(v, vk, gate, a, b, d, lam, g_ohm, inv_c, linear)
            k2 = _rhs(v + 0.5 * dt * k1, vk, gate, a, b, d, lam, g_ohm, inv_c, linear)
            k3 = _rhs(v + 0.5 * dt * k2, vk, gate, a, b, d, lam, g_ohm, inv_c, linear)
            k4 = _rhs(v + dt * k3, vk, gate, a, b, d, lam, g_ohm, inv_c, linear)
            v = v + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        if not math.isfinite(v):
            out[i:] = np.nan
            return out, False
    return out, True


def _integrate(m: DnpuModel, cfg: CircuitConfig, vin: np.ndarray, rate: float, c: ControlSet, v0: float):
    dt = 1.0 / (rate * cfg.oversample)
    trace, ok = _rk4_trace(np.ascontiguousarray(vin, dtype=np.float64), int(cfg.oversample), dt,
                           m.s, m.a, m.b, m.gamma, m.d, m.lam, ohmic_conductance(m, c), c.as_array(),
                           1.0 / cfg.C_ext, float(v0), m.linear)
    if not ok:
        raise StepTooLarge("integration diverged; raise the oversample factor")
    return trace


def time_constant_estimate(m: DnpuModel, cfg: CircuitConfig, v_in: float, v_out: float, c: ControlSet) -> float:
    g = abs(d_current_d_vout(m, v_in, v_out, c))
    return math.inf if g == 0 else cfg.C_ext / g


def simulate(m: DnpuModel, cfg: CircuitConfig, inp: Waveform, c: ControlSet, v_out_init: float = 0.0) -> Waveform:
    """RK4 integration of C dV/dt = I(V_in, V_out); V_in is held within each input sample."""
    if inp.sample_rate < 1000:
        raise ValueError("input sample rate must be at least 1 kS/s")
    dt = 1.0 / (inp.sample_rate * cfg.oversample)
    tau = time_constant_estimate(m, cfg, float(inp.samples[0]), v_out_init, c)
    if dt > tau / 5:
        raise StepTooLarge(f"dt={dt:.3g}s exceeds tau/5 (tau~{tau:.3g}s); raise oversample")
    return Waveform(_integrate(m, cfg, inp.samples, inp.sample_rate, c, v_out_init), inp.sample_rate)


def _settle(m, cfg, v_in: float, c: ControlSet, v0: float, rate: float, t_max: float, chunk_s: float = 2e-3):
    """Hold v_in until the output settles; returns (trace, settled value) or raises NoSettle."""
    n_chunk = max(1, int(round(chunk_s * rate)))
    pieces = []
    v = v0
    t = 0.0
    while t < t_max:
        tr = _integrate(m, cfg, np.full(n_chunk + 1, v_in), rate, c, v)
        pieces.append(tr[:-1])
        v = tr[-1]
        t += n_chunk / rate
        i_now = net_current(m, v_in, v, c)
        g = abs(d_current_d_vout(m, v_in, v, c))
        if g > 0 and abs(i_now) / g < 1e-6:
            return np.concatenate(pieces), v + i_now / g
    raise NoSettle(f"output did not settle within {t_max} s")


def step_response_tau(m: DnpuModel, cfg: CircuitConfig, c: ControlSet, step_v: float = 1.0,
                      rate: float = STEP_RATE, t_max: float = 1.0) -> float:
    """Time for the output to cover 63% of its excursion after a 0 -> step_v input step.

    The output starts from its settled value at zero input; the step rises
    within one sample at ``rate``.
    """
    _, v_start = _settle(m, cfg, 0.0, c, 0.0, rate, t_max)
    # one sample at 0 V models the finite rise
    n_chunk = int(round(2e-3 * rate))
    vin = np.concatenate([[0.0], np.full(n_chunk, step_v)])
    tr = _integrate(m, cfg, vin, rate, c, v_start)
    pieces = [tr]
    v = tr[-1]
    t_end = vin.size / rate
    while True:
        i_now = net_current(m, step_v, v, c)
        g = abs(d_current_d_vout(m, step_v, v, c))
        if g > 0 and abs(i_now) / g < 1e-6:
            v_final = v + i_now / g
            break
        if t_end >= t_max:
            raise NoSettle(f"step response did not settle within {t_max} s")
        seg = _integrate(m, cfg, np.full(n_chunk + 1, step_v), rate, c, v)
        pieces.append(seg[1:])
        v = seg[-1]
        t_end += n_chunk / rate
    trace = np.concatenate(pieces + [[v]])
    excursion = v_final - v_start
    if excursion == 0:
        raise NoSettle("step produced no output excursion")
    frac = (trace - v_start) / excursion
    idx = int(np.argmax(frac >= 0.63))
    if frac[idx] < 0.63:
        raise NoSettle("63% level never reached")
    # linear interpolation between samples, measured from the step onset (sample 1)
    if idx > 0:
        f0, f1 = frac[idx - 1], frac[idx]
        pos = idx - 1 + (0.63 - f0) / (f1 - f0)
    else:
        pos = 0.0
    return (pos - 1.0) / rate


def two_tone_response(m: DnpuModel, cfg: CircuitConfig, c: ControlSet, f1: float = 74.0, f2: float = 174.0,
                      amplitude: float = 0.375, T: float = 2.0, rate: float = CHAR_RATE,
                      segment_len: int = 8192) -> Spectrum:
    x = gen_two_tone(f1, f2, amplitude, amplitude, T, rate)
    y = simulate(m, cfg, x, c)
    return psd(y, segment_len)


def imd_level(spec: Spectrum, freq: float = 26.0) -> tuple[float, float]:
    """(line dB, local floor dB) for a distortion product."""
    return line_level(spec, freq)


def chirp_response(m: DnpuModel, cfg: CircuitConfig, c: ControlSet, chirp: ChirpParams = DEFAULT_CHIRP,
                   rate: float = CHAR_RATE) -> Waveform:
    return simulate(m, cfg, gen_chirp(chirp, rate), c)


def chirp_harmonics(m: DnpuModel, cfg: CircuitConfig, c: ControlSet, chirp: ChirpParams = DEFAULT_CHIRP,
                    rate: float = CHAR_RATE) -> dict[int, float]:
    """Median dBc of harmonics 2.. in the chirp response spectrogram."""
    y = chirp_response(m, cfg, c, chirp, rate)
    return harmonic_ridges(y, chirp)


def tone_thd(m: DnpuModel, cfg: CircuitConfig, c: ControlSet, f: float = 200.0, amplitude: float = 0.75,
             T: float = 0.5, rate: float = CHAR_RATE, n_harm: int = 5) -> float:
    """Total harmonic distortion (power ratio) of the steady-state tone response."""
    x = gen_tone(f, amplitude, T, rate)
    y = simulate(m, cfg, x, c).samples
    y = y[y.size // 2:]  # drop the start-up transient
    # whole number of periods -> harmonics land on exact FFT bins
    n_per = int(round(rate / f))
    y = y[: (y.size // n_per) * n_per]
    spec = np.abs(np.fft.rfft(y - y.mean())) ** 2
    cycles = y.size // n_per
    fund = spec[cycles]
    harm = sum(spec[h * cycles] for h in range(2, n_harm + 1) if h * cycles < spec.size)
    return float(harm / fund)


@dataclass
class IvSweep:
    electrode: str
    voltages: np.ndarray
    branch_currents: np.ndarray   # (n, 7), current into the grounded output electrode

    @property
    def current(self) -> np.ndarray:
        return self.branch_currents.sum(axis=1)

    def points(self) -> list[tuple[float, float]]:
        return list(zip(self.voltages.tolist(), self.current.tolist()))


def static_iv_sweep(m: DnpuModel, electrode: int | str = "input", v_range=(-0.4, 0.4, 161),
                    fixed=None) -> IvSweep:
    """Sweep one electrode with the output held at virtual ground."""
    k = BRANCHES.index(electrode) if isinstance(electrode, str) else int(electrode)
    volts = np.linspace(*v_range) if isinstance(v_range, tuple) else np.asarray(v_range, dtype=np.float64)
    if np.any(np.abs(volts) > 0.5):
        raise ValueError("sweep range must stay within +-0.5 V")
    base = np.zeros(N_BRANCH) if fixed is None else np.asarray(fixed, dtype=np.float64).reshape(N_BRANCH)
    rows = []
    for v in volts:
        V = base.copy()
        V[k] = v
        rows.append(branch_currents(m, V[0], 0.0, ControlSet(tuple(V[1:]))))
    return IvSweep(BRANCHES[k], volts, np.array(rows))


def has_ndr(sweep: IvSweep, rel_tol: float = 1e-9) -> bool:
    """True if the current falls anywhere along the sweep."""
    i = sweep.current
    di = np.diff(i)
    scale = max(float(np.max(np.abs(i))), 1e-30)
    return bool(np.any(di < -rel_tol * scale))


def static_power(m: DnpuModel, v_in: float, v_out: float, c: ControlSet) -> float:
    """Sum of V_k I_k over all eight electrodes; the output carries minus the branch sum."""
    V = electrode_voltages(v_in, c)
    if np.any(np.abs(V) > 0.5) or abs(v_out) > 0.5:
        raise ValueError("static power bias must stay within +-0.5 V")
    i_branch = branch_currents(m, v_in, v_out, c)
    return float(np.dot(V, i_branch) + v_out * (-i_branch.sum()))


def mean_static_power(m: DnpuModel, controls: list[ControlSet], v_in: float = 0.0, v_out: float = 0.0) -> float:
    return float(np.mean([static_power(m, v_in, v_out, c) for c in controls]))
