"""DNPU channel bank, block-average downsampling and a filterbank baseline."""
from __future__ import annotations

import json
import math
import struct
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import scipy.signal

from .dnpu import CircuitConfig, ControlSet, DnpuModel, random_control_set, simulate
from .errors import SchemaMismatch
from .signal import Waveform

DEFAULT_DOWNSAMPLE = 10


@dataclass(frozen=True)
class BankSpec:
    n_channels: int = 64
    control_seed: int = 0
    downsample: int = DEFAULT_DOWNSAMPLE

    def __post_init__(self):
        if self.n_channels < 1:
            raise ValueError("n_channels must be >= 1")
        if self.downsample < 1:
            raise ValueError("downsample must be >= 1")


@dataclass(frozen=True, eq=False)
class FeatureMatrix:
    values: np.ndarray          # (channels, frames), volts
    frame_rate: float
    device_seed: int | None = None
    control_seed: int | None = None
    downsample: int = DEFAULT_DOWNSAMPLE

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim != 2 or v.shape[0] < 1:
            raise ValueError("feature values must be (channels >= 1, frames)")
        if not np.all(np.isfinite(v)):
            raise ValueError("feature values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]

    def __eq__(self, other):
        if not isinstance(other, FeatureMatrix):
            return NotImplemented
        return (np.array_equal(self.values, other.values) and self.frame_rate == other.frame_rate
                and self.device_seed == other.device_seed and self.control_seed == other.control_seed
                and self.downsample == other.downsample)


def sample_control_bank(spec: BankSpec) -> list[ControlSet]:
    rng = np.random.default_rng(spec.control_seed)
    return [random_control_set(rng) for _ in range(spec.n_channels)]


def downsample_avg(w: Waveform, factor: int) -> Waveform:
    if factor < 1:
        raise ValueError("factor must be >= 1")
    n = (len(w) // factor) * factor
    if n == 0:
        raise ValueError(f"waveform shorter than one block of {factor}")
    blocks = w.samples[:n].reshape(-1, factor)
    return Waveform(blocks.mean(axis=1), w.sample_rate / factor)


def _channel(model: DnpuModel, cfg: CircuitConfig, c: ControlSet, w: Waveform, factor: int) -> np.ndarray:
    return downsample_avg(simulate(model, cfg, w, c, 0.0), factor).samples


def _models_for(model, n: int) -> list[DnpuModel]:
    if isinstance(model, DnpuModel):
        return [model] * n
    models = list(model)
    if len(models) != n:
        raise ValueError("need one device per channel")
    return models


def extract(model: DnpuModel | Sequence[DnpuModel], cfg: CircuitConfig, bank: Sequence[ControlSet], w: Waveform,
            downsample: int = DEFAULT_DOWNSAMPLE, workers: int = 1, control_seed: int | None = None) -> FeatureMatrix:
    """One row per control set: simulate, then block-average.

    ``model`` may be a single time-multiplexed device or one device per channel.
    Rows are independent, so any worker count gives identical results.
    """
    models = _models_for(model, len(bank))
    jobs = list(zip(models, bank))
    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(lambda mc: _channel(mc[0], cfg, mc[1], w, downsample), jobs))
    else:
        rows = [_channel(m, cfg, c, w, downsample) for m, c in jobs]
    seed = models[0].seed if isinstance(model, DnpuModel) else None
    return FeatureMatrix(np.stack(rows), w.sample_rate / downsample, seed, control_seed, downsample)


def extract_many(model, cfg: CircuitConfig, bank: Sequence[ControlSet], waves: Sequence[Waveform],
                 downsample: int = DEFAULT_DOWNSAMPLE, workers: int = 1) -> np.ndarray:
    """Feature tensor (n_waves, channels, frames) for a list of waveforms."""
    models = _models_for(model, len(bank))
    jobs = [(i, j) for i in range(len(waves)) for j in range(len(bank))]

    def run(ij):
        i, j = ij
        return _channel(models[j], cfg, bank[j], waves[i], downsample)

    if workers > 1:
        with ThreadPoolExecutor(workers) as ex:
            rows = list(ex.map(run, jobs))
    else:
        rows = [run(ij) for ij in jobs]
    n_frames = len(waves[0]) // downsample if waves else 0
    out = np.empty((len(waves), len(bank), n_frames))
    for (i, j), r in zip(jobs, rows):
        out[i, j] = r
    return out


def _biquad(kind: str, fc: float, q: float, fs: float):
    # RBJ audio-EQ cookbook
    w0 = 2 * math.pi * fc / fs
    alpha = math.sin(w0) / (2 * q)
    cw = math.cos(w0)
    if kind == "lowpass":
        b = np.array([(1 - cw) / 2, 1 - cw, (1 - cw) / 2])
    elif kind == "bandpass":
        b = np.array([alpha, 0.0, -alpha])
    else:
        raise ValueError(f"unknown filter kind {kind!r}")
    a = np.array([1 + alpha, -2 * cw, 1 - alpha])
    return b / a[0], a / a[0]


@dataclass(frozen=True)
class FilterChannel:
    kind: str
    fc: float
    q: float
    gain: float | None
    offset: float = 0.0     # operating point of the compressive stage


def filterbank_channels(n_channels: int, kind: str = "bandpass", nonlinearity: str = "none",
                        seed: int = 0) -> list[FilterChannel]:
    if n_channels < 1:
        raise ValueError("n_channels must be >= 1")
    if nonlinearity not in ("none", "tanh"):
        raise ValueError(f"unknown nonlinearity {nonlinearity!r}")
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_channels):
        fc = math.exp(rng.uniform(math.log(100.0), math.log(4000.0)))
        q = rng.uniform(0.7, 5.0)
        g = rng.uniform(1.0, 10.0)
        beta = rng.uniform(-1.0, 1.0)
        if nonlinearity == "tanh":
            out.append(FilterChannel(kind, fc, q, g, beta))
        else:
            out.append(FilterChannel(kind, fc, q, None))
    return out


def apply_filter_channel(ch: FilterChannel, w: Waveform) -> np.ndarray:
    b, a = _biquad(ch.kind, ch.fc, ch.q, w.sample_rate)
    y = scipy.signal.lfilter(b, a, w.samples)
    if ch.gain is not None:
        y = np.tanh(ch.gain * y + ch.offset) - math.tanh(ch.offset)
    return y


def baseline_filterbank(w: Waveform, n_channels: int, kind: str = "bandpass", nonlinearity: str = "none",
                        seed: int = 0, downsample: int = DEFAULT_DOWNSAMPLE) -> FeatureMatrix:
    """Random biquad bank (optionally tanh-compressed), block-averaged like the DNPU bank."""
    chans = filterbank_channels(n_channels, kind, nonlinearity, seed)
    rows = [downsample_avg(Waveform(apply_filter_channel(ch, w), w.sample_rate), downsample).samples
            for ch in chans]
    return FeatureMatrix(np.stack(rows), w.sample_rate / downsample, None, seed, downsample)


def filterbank_many(waves: Sequence[Waveform], n_channels: int, kind: str = "bandpass",
                    nonlinearity: str = "none", seed: int = 0, downsample: int = DEFAULT_DOWNSAMPLE) -> np.ndarray:
    return np.stack([baseline_filterbank(w, n_channels, kind, nonlinearity, seed, downsample).values for w in waves])


@dataclass(frozen=True)
class ChannelNorm:
    """Per-channel z-scoring with statistics from the training split only."""
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, x: np.ndarray) -> "ChannelNorm":
        # x: (n, channels, frames)
        mean = x.mean(axis=(0, 2))
        std = x.std(axis=(0, 2))
        return cls(mean, np.where(std > 0, std, 1.0))

    def apply(self, x: np.ndarray) -> np.ndarray:
        return (x - self.mean[:, None]) / self.std[:, None]

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelNorm":
        return cls(np.array(d["mean"]), np.array(d["std"]))


def _fmt_seed(s):
    return "none" if s is None else str(int(s))


def _parse_seed(s: str):
    return None if s == "none" else int(s)


def export_features(fm: FeatureMatrix, path) -> None:
    """CSV: '# key=value' header lines, then one comma-separated row per channel."""
    lines = [
        f"# device_seed={_fmt_seed(fm.device_seed)}",
        f"# control_seed={_fmt_seed(fm.control_seed)}",
        f"# frame_rate={fm.frame_rate!r}",
        f"# downsample={fm.downsample}",
        f"# channels={fm.channels}",
        f"# frames={fm.frames}",
    ]
    lines += [",".join(repr(float(v)) for v in row) for row in fm.values]
    Path(path).write_text("\n".join(lines) + "\n")


def import_features(path) -> FeatureMatrix:
    header: dict[str, str] = {}
    rows = []
    for line in Path(path).read_text().splitlines():
        if line.startswith("#"):
            key, _, val = line[1:].strip().partition("=")
            header[key.strip()] = val.strip()
        elif line.strip():
            rows.append([float(v) for v in line.split(",")])
    required = ("device_seed", "control_seed", "frame_rate", "downsample", "channels", "frames")
    missing = [k for k in required if k not in header]
    if missing:
        raise SchemaMismatch(f"{path}: missing header keys {missing}")
    if len(rows) != int(header["channels"]):
        raise SchemaMismatch(f"{path}: header says {header['channels']} channels, found {len(rows)} rows")
    if any(len(r) != int(header["frames"]) for r in rows):
        raise SchemaMismatch(f"{path}: row length differs from header frames={header['frames']}")
    return FeatureMatrix(np.array(rows), float(header["frame_rate"]), _parse_seed(header["device_seed"]),
                         _parse_seed(header["control_seed"]), int(header["downsample"]))


_MAGIC = b"IMFM"


def export_features_bin(fm: FeatureMatrix, path) -> None:
    """Binary container: magic, u32 header length, JSON header, then u32-length-prefixed float64 rows."""
    head = json.dumps({"device_seed": fm.device_seed, "control_seed": fm.control_seed,
                       "frame_rate": fm.frame_rate, "downsample": fm.downsample,
                       "channels": fm.channels}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC + struct.pack("<I", len(head)) + head)
        for row in fm.values:
            fh.write(struct.pack("<I", row.size))
            fh.write(row.astype("<f8").tobytes())


def import_features_bin(path) -> FeatureMatrix:
    data = Path(path).read_bytes()
    if data[:4] != _MAGIC:
        raise SchemaMismatch(f"{path}: not a feature container")
    (hlen,) = struct.unpack_from("<I", data, 4)
    head = json.loads(data[8: 8 + hlen])
    pos = 8 + hlen
    rows = []
    while pos < len(data):
        (n,) = struct.unpack_from("<I", data, pos)
        pos += 4
        if pos + 8 * n > len(data):
            raise SchemaMismatch(f"{path}: truncated row")
        rows.append(np.frombuffer(data, dtype="<f8", count=n, offset=pos).astype(np.float64))
        pos += 8 * n
    if len(rows) != head["channels"]:
        raise SchemaMismatch(f"{path}: header says {head['channels']} channels, found {len(rows)}")
    return FeatureMatrix(np.stack(rows), head["frame_rate"], head["device_seed"], head["control_seed"],
                         head["downsample"])
