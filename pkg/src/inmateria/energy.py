"""Analytical energy/latency model for the DNPU front end and the crossbar classifier."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .aimc import N_CORES, CrossbarProgram

SCHEMA = "inmateria.energy/1"


@dataclass(frozen=True)
class EnergyConstants:
    e_mvm_full_chip: float = 0.86e-6     # J per MVM with all cores active
    t_mvm: float = 133e-9                # s per MVM
    n_cores: int = N_CORES
    p_dnpu_channel: float = 5e-9         # W, conservative per-device budget
    p_dnpu_measured: float = 1.9e-9      # W, informational

    def __post_init__(self):
        for k, v in asdict(self).items():
            if not v > 0:
                raise ValueError(f"{k} must be positive")


@dataclass(frozen=True)
class LayerSchedule:
    name: str
    mvm_count: int
    core_count: int


# Per-layer counts and a core assignment consistent with 18 cores and a
# core-weighted total of 5,861 (conv0..conv3, then the dense stage).
REFERENCE_GSC_SCHEDULE = (
    LayerSchedule("conv0", 1977, 1),
    LayerSchedule("conv1", 492, 6),
    LayerSchedule("conv2", 121, 7),
    LayerSchedule("conv3", 28, 3),
    LayerSchedule("fc", 1, 1),
)


def mvm_schedule(p: CrossbarProgram) -> list[LayerSchedule]:
    """One MVM per output time step for conv layers, one per input for linear layers."""
    out = []
    for i in sorted(p.layers):
        info = p.layers[i]
        out.append(LayerSchedule(f"{info['kind']}{i}", int(info["mvms"]), len(p.layer_tiles(i))))
    return out


def core_weighted_mvms(schedule) -> int:
    return sum(s.mvm_count * s.core_count for s in schedule)


def total_mvms(schedule) -> int:
    return sum(s.mvm_count for s in schedule)


def aimc_energy(schedule, c: EnergyConstants = EnergyConstants()) -> float:
    if not schedule:
        raise ValueError("empty schedule")
    return core_weighted_mvms(schedule) / c.n_cores * c.e_mvm_full_chip


def aimc_latency(schedule, c: EnergyConstants = EnergyConstants()) -> float:
    """Layers run back to back; the tiles of one layer run in parallel."""
    if not schedule:
        raise ValueError("empty schedule")
    return total_mvms(schedule) * c.t_mvm


def dnpu_bank_power(n_channels: int, c: EnergyConstants = EnergyConstants()) -> float:
    if n_channels < 1:
        raise ValueError("n_channels must be >= 1")
    return n_channels * c.p_dnpu_channel


def dnpu_energy(duration_s: float, n_channels: int = 64, c: EnergyConstants = EnergyConstants()) -> float:
    if duration_s < 0:
        raise ValueError("duration must be >= 0")
    return dnpu_bank_power(n_channels, c) * duration_s


ASSUMPTIONS = (
    "one-phase read mode energy per MVM",
    "tiles of one layer execute in parallel; layers execute sequentially",
    "batch norm, activations and pooling run off-chip at zero energy and latency",
    "buffering delays between layers are excluded",
    "DNPU preprocessing runs in real time alongside the input and adds no latency",
    "ADC / sample-and-hold interface energy is not included (see interface_energy_j)",
)


@dataclass
class EnergyReport:
    layers: list[dict]
    core_weighted_mvms: int
    total_mvms: int
    aimc_energy_j: float
    aimc_latency_s: float
    dnpu_channels: int
    dnpu_power_w: float
    input_duration_s: float
    dnpu_energy_j: float
    total_energy_j: float
    energy_delay_product_js: float
    constants: dict
    latency_interpretations: dict = field(default_factory=dict)
    interface_energy_j: float | None = None
    dnpu_power_measured_w: float = 0.0
    assumptions: list[str] = field(default_factory=lambda: list(ASSUMPTIONS))
    schema: str = SCHEMA

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)


def report(schedule, n_channels: int = 64, duration_s: float = 1.0,
           c: EnergyConstants = EnergyConstants(), dense_layers: int | None = None) -> EnergyReport:
    """Aggregate the crossbar and DNPU figures for one input.

    ``dense_layers`` > 1 adds the alternative latency reading in which each
    dense layer contributes its own MVM (reported, not used for the totals).
    """
    schedule = list(schedule)
    e = aimc_energy(schedule, c)
    t = aimc_latency(schedule, c)
    p = dnpu_bank_power(n_channels, c)
    ed = p * duration_s
    interp = {"as_scheduled": {"mvms": total_mvms(schedule), "latency_s": t}}
    if dense_layers is not None and dense_layers > 1:
        n = total_mvms(schedule) + dense_layers - 1
        interp["one_mvm_per_dense_layer"] = {"mvms": n, "latency_s": n * c.t_mvm}
    return EnergyReport(
        layers=[asdict(s) for s in schedule],
        core_weighted_mvms=core_weighted_mvms(schedule),
        total_mvms=total_mvms(schedule),
        aimc_energy_j=e,
        aimc_latency_s=t,
        dnpu_channels=n_channels,
        dnpu_power_w=p,
        input_duration_s=duration_s,
        dnpu_energy_j=ed,
        total_energy_j=e + ed,
        energy_delay_product_js=e * (t + 0.0),
        constants=asdict(c),
        latency_interpretations=interp,
        dnpu_power_measured_w=n_channels * c.p_dnpu_measured,
    )


def reference_report(c: EnergyConstants = EnergyConstants()) -> EnergyReport:
    return report(REFERENCE_GSC_SCHEDULE, 64, 1.0, c, dense_layers=2)


CSV_FIELDS = ("core_weighted_mvms", "total_mvms", "aimc_energy_j", "aimc_latency_s", "dnpu_channels",
              "dnpu_power_w", "dnpu_energy_j", "total_energy_j", "energy_delay_product_js")


def write_summary_csv(reports, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_FIELDS)
        for r in reports:
            d = r.to_dict()
            wr.writerow([repr(d[k]) for k in CSV_FIELDS])


def save_report(r: EnergyReport, path) -> None:
    Path(path).write_text(r.to_json())
