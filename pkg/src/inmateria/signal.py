"""Waveforms, audio ingestion, preprocessing and spectral analysis."""
from __future__ import annotations

import csv
import math
import wave
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.signal

from .errors import AllZero, EmptyAfterTrim, EmptyClass, MalformedWav, UnsupportedEncoding

TI46_RATE = 12_500.0
CHAR_RATE = 25_000.0
INPUT_VMAX = 0.75
TRIM_THRESHOLD = 0.05


@dataclass(frozen=True, eq=False)
class Waveform:
    samples: np.ndarray
    sample_rate: float

    def __post_init__(self):
        x = np.asarray(self.samples, dtype=np.float64)
        if x.ndim != 1 or x.size < 1:
            raise ValueError("waveform needs a 1-D array with at least one sample")
        if not np.all(np.isfinite(x)):
            raise ValueError("waveform samples must be finite")
        if not (self.sample_rate > 0 and math.isfinite(self.sample_rate)):
            raise ValueError(f"sample_rate must be positive, got {self.sample_rate}")
        object.__setattr__(self, "samples", x)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    def __len__(self) -> int:
        return self.samples.size

    @property
    def duration(self) -> float:
        return self.samples.size / self.sample_rate

    @property
    def t(self) -> np.ndarray:
        return np.arange(self.samples.size) / self.sample_rate

    def __eq__(self, other):
        if not isinstance(other, Waveform):
            return NotImplemented
        return self.sample_rate == other.sample_rate and np.array_equal(self.samples, other.samples)


@dataclass(frozen=True, eq=False)
class Spectrum:
    frequencies: np.ndarray
    density: np.ndarray  # V^2/Hz
    window: str = "hann"
    segment_len: int = 0

    def __post_init__(self):
        f = np.asarray(self.frequencies, dtype=np.float64)
        p = np.asarray(self.density, dtype=np.float64)
        if f.shape != p.shape:
            raise ValueError("frequencies and power must have equal length")
        if f.size > 1 and np.any(np.diff(f) <= 0):
            raise ValueError("frequencies must be strictly increasing")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "density", p)

    @property
    def power_db(self) -> np.ndarray:
        return 10.0 * np.log10(np.maximum(self.density, 1e-30))

    @property
    def resolution(self) -> float:
        return float(self.frequencies[1] - self.frequencies[0]) if self.frequencies.size > 1 else 0.0

    def total_power(self) -> float:
        return float(np.sum(self.density) * self.resolution)


@dataclass(frozen=True)
class ChirpParams:
    A: float
    f0: float
    f1: float
    T: float
    phi0: float = 0.0

    def __post_init__(self):
        vals = (self.A, self.f0, self.f1, self.T, self.phi0)
        if not all(math.isfinite(v) for v in vals):
            raise ValueError("chirp parameters must be finite")
        if self.A <= 0 or self.T <= 0 or self.f0 <= 0:
            raise ValueError("chirp A, f0 and T must be positive")
        if not self.f1 > self.f0:
            raise ValueError("chirp needs f1 > f0")

    @property
    def k(self) -> float:
        return (self.f1 / self.f0) ** (1.0 / self.T)

    def inst_freq(self, t):
        return self.f0 * self.k ** np.asarray(t, dtype=np.float64)


# Chirp excitation for device characterization: 0.75 V, 100 Hz -> 2 kHz exponential sweep over 1 s.
DEFAULT_CHIRP = ChirpParams(A=0.75, f0=100.0, f1=2000.0, T=1.0, phi0=-math.pi / 2)


def _chirp_cycles(p: ChirpParams, t: np.ndarray) -> np.ndarray:
    """f0*(k**t - 1)/ln(k), evaluated stably when k is close to 1."""
    log_k = math.log(p.f1 / p.f0) / p.T
    if abs(log_k) < 1e-12:
        return p.f0 * (t + 0.5 * log_k * t * t)
    return p.f0 * np.expm1(log_k * t) / log_k


def gen_chirp(p: ChirpParams, rate: float) -> Waveform:
    if not (math.isfinite(rate) and rate > 0):
        raise ValueError("rate must be positive and finite")
    if rate < 4 * p.f1:
        raise ValueError(f"rate {rate} cannot resolve the 2nd harmonic of {p.f1} Hz")
    n = int(round(p.T * rate))
    t = np.arange(n) / rate
    return Waveform(p.A * np.sin(2 * np.pi * _chirp_cycles(p, t) + p.phi0), rate)


def gen_two_tone(f1: float, f2: float, a1: float, a2: float, T: float, rate: float) -> Waveform:
    if not (f2 > f1 > 0):
        raise ValueError("two-tone needs f2 > f1 > 0")
    if rate <= 2 * f2:
        raise ValueError(f"rate {rate} aliases the {f2} Hz tone")
    if T <= 0:
        raise ValueError("duration must be positive")
    t = np.arange(int(round(T * rate))) / rate
    return Waveform(a1 * np.sin(2 * np.pi * f1 * t) + a2 * np.sin(2 * np.pi * f2 * t), rate)


def gen_tone(f: float, a: float, T: float, rate: float, phase: float = 0.0) -> Waveform:
    t = np.arange(int(round(T * rate))) / rate
    return Waveform(a * np.sin(2 * np.pi * f * t + phase), rate)


def distortion_products(f1: float, f2: float, n_max: int = 3) -> list[float]:
    return [abs((n + 1) * f1 - n * f2) for n in range(1, n_max + 1)]


def trim_silence(w: Waveform, threshold: float = TRIM_THRESHOLD, mode: str = "pointwise") -> Waveform:
    """Drop samples with |v| < threshold.

    ``mode="pointwise"`` removes every such sample; ``mode="edges"`` only strips
    leading and trailing runs.
    """
    if threshold < 0:
        raise ValueError("threshold must be non-negative")
    keep = np.abs(w.samples) >= threshold
    if not keep.any():
        raise EmptyAfterTrim(f"no sample reaches {threshold} V")
    if mode == "pointwise":
        out = w.samples[keep]
    elif mode == "edges":
        idx = np.flatnonzero(keep)
        out = w.samples[idx[0]: idx[-1] + 1]
    else:
        raise ValueError(f"unknown trim mode {mode!r}")
    return Waveform(out, w.sample_rate)


def normalize_amplitude(w: Waveform, vmax: float = INPUT_VMAX) -> Waveform:
    if vmax <= 0:
        raise ValueError("vmax must be positive")
    mag = np.abs(w.samples)
    i = int(np.argmax(mag))
    peak = mag[i]
    if peak == 0:
        raise AllZero("cannot normalize an all-zero waveform")
    if peak == vmax:
        return w
    out = w.samples * (vmax / peak)
    # pin the peak so max|out| == vmax exactly
    out[i] = math.copysign(vmax, w.samples[i])
    np.clip(out, -vmax, vmax, out=out)
    return Waveform(out, w.sample_rate)


def fit_length(w: Waveform, n: int) -> Waveform:
    """Zero-pad at the end or crop to exactly n samples."""
    x = w.samples
    if x.size >= n:
        return Waveform(x[:n], w.sample_rate)
    return Waveform(np.concatenate([x, np.zeros(n - x.size)]), w.sample_rate)


def preprocess(w: Waveform, trim_threshold: float | None = TRIM_THRESHOLD, vmax: float = INPUT_VMAX,
               length: int | None = None) -> Waveform:
    """Trim, then normalize, then pad/crop to a fixed length."""
    if trim_threshold is not None:
        w = trim_silence(w, trim_threshold)
    w = normalize_amplitude(w, vmax)
    if length is not None:
        w = fit_length(w, length)
    return w


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def psd(w: Waveform, segment_len: int | None = None, overlap: float = 0.5) -> Spectrum:
    """Welch PSD with a Hann window, one-sided, V^2/Hz."""
    n = len(w)
    if segment_len is None:
        segment_len = 1 << min(12, int(math.log2(n)))
    if not _is_pow2(segment_len):
        raise ValueError("segment_len must be a power of two")
    if segment_len > n:
        raise ValueError(f"segment_len {segment_len} exceeds waveform length {n}")
    if not 0 <= overlap < 1:
        raise ValueError("overlap must be in [0, 1)")
    f, p = scipy.signal.welch(w.samples, fs=w.sample_rate, window="hann", nperseg=segment_len,
                              noverlap=int(segment_len * overlap), detrend=False,
                              scaling="density", return_onesided=True)
    return Spectrum(f, p, "hann", segment_len)


def tone_table(s: Spectrum, floor_db: float) -> list[tuple[float, float]]:
    if s.frequencies.size == 0:
        return []
    db = s.power_db
    peaks, _ = scipy.signal.find_peaks(db, height=floor_db)
    order = sorted(peaks, key=lambda i: -db[i])
    return [(float(s.frequencies[i]), float(db[i])) for i in order]


def line_level(s: Spectrum, freq: float, halfwidth_hz: float = 15.0, guard_bins: int = 3) -> tuple[float, float]:
    """(peak dB near freq, median dB of the surrounding band excluding the peak lobe)."""
    f, db = s.frequencies, s.power_db
    c = int(np.argmin(np.abs(f - freq)))
    peak = float(db[max(c - 1, 0): c + 2].max())
    band = np.abs(f - freq) <= halfwidth_hz
    lobe = np.abs(np.arange(f.size) - c) <= guard_bins
    sel = band & ~lobe
    floor = float(np.median(db[sel])) if sel.any() else float("-inf")
    return peak, floor


def spectrogram(w: Waveform, segment_len: int = 1024, overlap: float = 0.75):
    """Returns (times_s, freqs_hz, power_db[freq, time])."""
    f, t, sxx = scipy.signal.spectrogram(w.samples, fs=w.sample_rate, window="hann", nperseg=segment_len,
                                         noverlap=int(segment_len * overlap), detrend=False,
                                         scaling="density", mode="psd")
    return t, f, 10.0 * np.log10(np.maximum(sxx, 1e-30))


def harmonic_ridges(w: Waveform, chirp: ChirpParams, max_harmonic: int = 8, segment_len: int = 1024,
                    min_frames: int = 4) -> dict[int, float]:
    """Median level (dBc) of each harmonic ridge of a chirp response.

    For every spectrogram frame the fundamental sits at the chirp's
    instantaneous frequency; harmonic h is read at h times that frequency and
    expressed relative to the fundamental of the same frame.
    """
    t, f, db = spectrogram(w, segment_len)
    df = f[1] - f[0]
    frame_dur = segment_len / w.sample_rate
    log_k = math.log(chirp.k)
    levels: dict[int, list[float]] = {h: [] for h in range(2, max_harmonic + 1)}
    for j, tc in enumerate(t):
        f_inst = float(chirp.inst_freq(tc))
        sweep = f_inst * log_k * frame_dur

        def level(h):
            fc = h * f_inst
            hw = 0.5 * h * sweep + 2 * df
            sel = np.abs(f - fc) <= hw
            return float(db[sel, j].max()) if sel.any() else None

        fund = level(1)
        if fund is None:
            continue
        for h in levels:
            if h * f_inst + 0.5 * h * sweep + 2 * df >= f[-1]:
                continue
            lv = level(h)
            if lv is not None:
                levels[h].append(lv - fund)
    return {h: float(np.median(v)) for h, v in levels.items() if len(v) >= min_frames}


def write_spectrum_csv(s: Spectrum, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["freq_hz", "power_db"])
        for f, p in zip(s.frequencies, s.power_db):
            wr.writerow([repr(float(f)), repr(float(p))])


def write_trace_csv(w: Waveform, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["t_s", "v"])
        for t, v in zip(w.t, w.samples):
            wr.writerow([repr(float(t)), repr(float(v))])


def _colour(x: float) -> str:
    # dark blue -> yellow ramp
    x = min(max(x, 0.0), 1.0)
    r = int(255 * min(1.0, 1.8 * x))
    g = int(255 * x ** 0.8)
    b = int(255 * (0.45 * (1 - x)))
    return f"#{r:02x}{g:02x}{b:02x}"


def spectrogram_svg(t: np.ndarray, f: np.ndarray, db: np.ndarray, path, dyn_range_db: float = 100.0,
                    max_cols: int = 200, max_rows: int = 160) -> None:
    """Render a (freq x time) dB grid as a self-contained raster SVG."""
    ti = np.unique(np.linspace(0, t.size - 1, min(max_cols, t.size)).astype(int))
    fi = np.unique(np.linspace(0, f.size - 1, min(max_rows, f.size)).astype(int))
    grid = db[np.ix_(fi, ti)]
    top = float(grid.max())
    norm = (grid - (top - dyn_range_db)) / dyn_range_db
    cw, ch = 4, 3
    width, height = cw * ti.size, ch * fi.size
    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width + 60}" height="{height + 30}">',
             '<g transform="translate(50,5)">']
    for r in range(fi.size):
        y = height - (r + 1) * ch
        for c in range(ti.size):
            parts.append(f'<rect x="{c * cw}" y="{y}" width="{cw}" height="{ch}" fill="{_colour(norm[r, c])}"/>')
    parts.append("</g>")
    parts.append(f'<text x="50" y="{height + 22}" font-size="10">time 0..{t[ti[-1]]:.3f} s</text>')
    parts.append(f'<text x="0" y="12" font-size="10">{f[fi[-1]]:.0f} Hz</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts))


def read_wav(path) -> Waveform:
    try:
        with wave.open(str(path), "rb") as wf:
            nch, width, rate, nframes = wf.getnchannels(), wf.getsampwidth(), wf.getframerate(), wf.getnframes()
            if wf.getcomptype() != "NONE":
                raise UnsupportedEncoding(f"{path}: compressed WAV not supported")
            if nch != 1:
                raise UnsupportedEncoding(f"{path}: {nch} channels, only mono supported")
            if width != 2:
                raise UnsupportedEncoding(f"{path}: {8 * width}-bit samples, only 16-bit PCM supported")
            raw = wf.readframes(nframes)
    except (wave.Error, EOFError) as exc:
        raise MalformedWav(f"{path}: {exc}") from exc
    if len(raw) != 2 * nframes or nframes == 0:
        raise MalformedWav(f"{path}: truncated or empty data chunk")
    x = np.frombuffer(raw, dtype="<i2").astype(np.float64) / 32768.0
    return Waveform(x, float(rate))


load_wav = read_wav


def write_wav(path, w: Waveform) -> None:
    x = np.clip(np.round(w.samples * 32768.0), -32768, 32767).astype("<i2")
    with wave.open(str(path), "wb") as wf:
        wf.setnchannels(1)
        wf.setsampwidth(2)
        wf.setframerate(int(round(w.sample_rate)))
        wf.writeframes(x.tobytes())


@dataclass
class LabeledSet:
    """Labelled waveforms with a fixed train/test partition."""
    waveforms: list[Waveform]
    labels: np.ndarray
    class_names: list[str]
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))
    test_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=np.int64))

    def __len__(self) -> int:
        return len(self.waveforms)

    @property
    def n_classes(self) -> int:
        return len(self.class_names)

    def map(self, fn) -> "LabeledSet":
        return LabeledSet([fn(w) for w in self.waveforms], self.labels.copy(), list(self.class_names),
                          self.train_idx.copy(), self.test_idx.copy())

    def matrix(self) -> np.ndarray:
        return np.stack([w.samples for w in self.waveforms])


def stratified_split(labels: np.ndarray, test_frac: float = 0.1, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    rng = np.random.default_rng(seed)
    train, test = [], []
    for c in np.unique(labels):
        idx = np.flatnonzero(labels == c)
        idx = idx[rng.permutation(idx.size)]
        n_test = int(round(test_frac * idx.size))
        test.extend(idx[:n_test].tolist())
        train.extend(idx[n_test:].tolist())
    return np.array(sorted(train), dtype=np.int64), np.array(sorted(test), dtype=np.int64)


def load_dataset(root, test_frac: float = 0.1, seed: int = 0) -> LabeledSet:
    root = Path(root)
    classes = sorted(p.name for p in root.iterdir() if p.is_dir())
    if not classes:
        raise EmptyClass(f"{root}: no class directories")
    waves, labels = [], []
    for ci, name in enumerate(classes):
        files = sorted(p for p in (root / name).iterdir() if p.suffix.lower() == ".wav")
        if not files:
            raise EmptyClass(f"{root / name}: no .wav files")
        for fpath in files:
            waves.append(read_wav(fpath))
            labels.append(ci)
    labels = np.array(labels, dtype=np.int64)
    tr, te = stratified_split(labels, test_frac, seed)
    return LabeledSet(waves, labels, classes, tr, te)


def _templates(rng: np.random.Generator, n_classes: int, min_gap_hz: float = 60.0):
    """Class templates: tone frequencies, relative amplitudes and on/off timing."""
    out = []
    centroids: list[float] = []
    while len(out) < n_classes:
        n_tones = int(rng.integers(2, 4))
        freqs = np.sort(np.exp(rng.uniform(np.log(100.0), np.log(2000.0), n_tones)))
        amps = rng.uniform(0.3, 1.0, n_tones)
        centroid = float(np.sum(amps ** 2 * freqs) / np.sum(amps ** 2))
        if any(abs(centroid - c) <= min_gap_hz for c in centroids):
            continue
        # each tone is active over its own sub-window of the utterance
        starts = rng.uniform(0.0, 0.4, n_tones)
        lengths = rng.uniform(0.4, 0.8, n_tones)
        out.append({"freqs": freqs, "amps": amps, "starts": starts, "lengths": lengths, "centroid": centroid})
        centroids.append(centroid)
    return out


def template_centroids(n_classes: int, seed: int) -> list[float]:
    ss = np.random.SeedSequence(seed)
    t_seq, _ = ss.spawn(2)
    return [t["centroid"] for t in _templates(np.random.default_rng(t_seq), n_classes)]


def gen_synthetic_task(n_classes: int = 10, per_class: int = 24, seed: int = 0, duration: float = 1.0,
                       rate: float = TI46_RATE, snr_db: float = 20.0, test_frac: float = 1 / 6) -> LabeledSet:
    """Synthetic spoken-word stand-in: formant-like tone templates with jitter and noise.

    Each utterance occupies ~0.6 s of a 1 s clip; the onset and length of the
    active span jitter by 10%, every tone frequency jitters by 3%, white noise
    is added at ``snr_db`` and the clip is normalized to 0.75 V peak.
    """
    if n_classes < 2:
        raise ValueError("need at least two classes")
    ss = np.random.SeedSequence(seed)
    t_seq, s_seq = ss.spawn(2)
    templates = _templates(np.random.default_rng(t_seq), n_classes)
    rng = np.random.default_rng(s_seq)
    n = int(round(duration * rate))
    t = np.arange(n) / rate
    waves, labels = [], []
    for c, tpl in enumerate(templates):
        for _ in range(per_class):
            onset = 0.2 * duration * rng.uniform(0.9, 1.1)
            span = 0.6 * duration * rng.uniform(0.9, 1.1)
            x = np.zeros(n)
            for f, a, st, ln in zip(tpl["freqs"], tpl["amps"], tpl["starts"], tpl["lengths"]):
                fj = f * rng.uniform(0.97, 1.03)
                t0 = onset + st * span
                t1 = min(t0 + ln * span, duration)
                u = np.clip((t - t0) / max(t1 - t0, 1e-9), 0.0, 1.0)
                env = np.sin(np.pi * u) ** 2
                x += a * env * np.sin(2 * np.pi * fj * t + rng.uniform(0, 2 * np.pi))
            p_sig = np.mean(x ** 2)
            x = x + rng.normal(0.0, math.sqrt(p_sig / 10 ** (snr_db / 10)), n)
            waves.append(normalize_amplitude(Waveform(x, rate), INPUT_VMAX))
            labels.append(c)
    labels = np.array(labels, dtype=np.int64)
    if labels.size:
        tr, te = stratified_split(labels, test_frac, seed)
    else:
        tr = te = np.zeros(0, dtype=np.int64)
    return LabeledSet(waves, labels, [f"class{c}" for c in range(n_classes)], tr, te)


def spectral_centroid(w: Waveform) -> float:
    s = psd(w)
    return float(np.sum(s.frequencies * s.density) / np.sum(s.density))
