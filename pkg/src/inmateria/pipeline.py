"""Stage runner: run configuration, on-disk artifacts, content hashes and the run manifest.

Each stage reads its predecessors' files from the output directory, checks
them against the hashes recorded when they were written, and writes its own
files atomically (temp file, then rename).
"""
from __future__ import annotations

import copy
import hashlib
import io
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from .aimc import (HwaConfig, hwa_retrain, load_program, map_model, repeated_inference, save_program,
                   write_utilization_csv)
from .dnpu import (CircuitConfig, ControlSet, chirp_response, imd_level, random_control_set,
                   sample_device, static_power, step_response_tau, two_tone_response)
from .energy import EnergyConstants, mvm_schedule, reference_report, report, write_summary_csv
from .errors import ConfigError, HashMismatch, MissingArtifact
from .features import BankSpec, ChannelNorm, extract_many, sample_control_bank
from .net import (ArchSpec, TrainConfig, build, evaluate, gsc_arch, head_arch, linear_arch, load_checkpoint,
                  save_checkpoint, ti46_aimc_arch, train)
from .signal import LabeledSet, gen_synthetic_task, load_dataset, preprocess, spectrogram, spectrogram_svg, tone_table

log = logging.getLogger("inmateria")

SCHEMA = "inmateria.run/1"
STAGES = ("characterize", "extract", "train", "retrain-hwa", "map", "infer", "energy")
PIPELINE = STAGES[1:]
MANIFEST = "manifest.json"

# None marks a seed derived from the top-level seed
DEFAULTS: dict = {
    "schema": SCHEMA,
    "seed": 0,
    "device_seed": None,
    "workers": 1,
    "circuit": {"C_ext": 100e-12, "buffer_impedance": 1e9, "oversample": 2},
    "bank": {"n_channels": 16, "control_seed": None, "downsample": 10},
    "dataset": {"kind": "synthetic", "n_classes": 10, "per_class": 24, "seed": None, "test_frac": 1 / 6,
                "path": None, "length_s": 1.0},
    "arch": {"name": "head", "conv_out": 32, "kernel": 8, "activation": "tanh", "spec": None},
    "train": {"lr": 1e-3, "weight_decay": 1e-5, "epochs": 200, "batch_size": 32, "seed": None},
    "hwa": {"weight_noise_frac": 0.12, "mvm_out_noise_sigma": 0.1, "clip_factor": 1.5, "input_bits": 8,
            "output_bits": 8, "epochs": 200, "seed": None},
    "aimc": {"sigma_prog": 0.03, "repetitions": 10, "energy_model": "hwa"},
    "energy": {"e_mvm_full_chip": 0.86e-6, "t_mvm": 133e-9, "n_cores": 64, "p_dnpu_channel": 5e-9,
               "p_dnpu_measured": 1.9e-9, "duration_s": 1.0},
    "characterize": {"n_sets": 500, "n_chirp_random": 2, "control_seed": None, "oversample": 8},
}

# offsets keep derived seeds distinct while staying a pure function of the top-level seed
_SEED_OFFSETS = {("device_seed",): 0, ("bank", "control_seed"): 0, ("dataset", "seed"): 0,
                 ("train", "seed"): 0, ("hwa", "seed"): 1, ("characterize", "control_seed"): 12345}


def _merge(base: dict, over: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown config key {where}{k!r}")
        if isinstance(base[k], dict) and base[k] and k != "spec":
            if not isinstance(v, dict):
                raise ConfigError(f"config key {where}{k!r} must be an object")
            out[k] = _merge(base[k], v, f"{where}{k}.")
        else:
            out[k] = v
    return out


@dataclass(frozen=True)
class RunConfig:
    data: dict

    @classmethod
    def from_dict(cls, doc: dict | None = None, seed: int | None = None, channels: int | None = None) -> "RunConfig":
        d = _merge(DEFAULTS, doc or {})
        if d["schema"] != SCHEMA:
            raise ConfigError(f"unsupported config schema {d['schema']!r}")
        if seed is not None:
            d["seed"] = int(seed)
        if channels is not None:
            d["bank"]["n_channels"] = int(channels)
        if not isinstance(d["seed"], int) or isinstance(d["seed"], bool):
            raise ConfigError("seed must be an integer")
        for path, off in _SEED_OFFSETS.items():
            node = d
            for k in path[:-1]:
                node = node[k]
            if node[path[-1]] is None:
                node[path[-1]] = d["seed"] + off
        cfg = cls(d)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path, seed: int | None = None, channels: int | None = None) -> "RunConfig":
        try:
            doc = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        if not isinstance(doc, dict):
            raise ConfigError("config must be a JSON object")
        return cls.from_dict(doc, seed, channels)

    def __getitem__(self, k):
        return self.data[k]

    def validate(self) -> None:
        try:
            self.circuit()
            self.bank()
            self.train_config()
            self.hwa_config()
            self.energy_constants()
            self.characterize_circuit()
        except (TypeError, ValueError) as e:
            raise ConfigError(str(e)) from e
        ds = self["dataset"]
        if ds["kind"] not in ("synthetic", "directory"):
            raise ConfigError(f"dataset.kind must be synthetic or directory, got {ds['kind']!r}")
        if ds["kind"] == "directory" and not ds["path"]:
            raise ConfigError("dataset.path is required for a directory dataset")
        if self["arch"]["name"] not in ("head", "linear", "ti46", "gsc", "custom"):
            raise ConfigError(f"unknown arch {self['arch']['name']!r}")
        if self["aimc"]["energy_model"] not in ("fp", "hwa"):
            raise ConfigError("aimc.energy_model must be fp or hwa")
        if int(self["aimc"]["repetitions"]) < 1 or int(self["workers"]) < 1:
            raise ConfigError("repetitions and workers must be >= 1")
        if int(self["characterize"]["n_sets"]) < 1:
            raise ConfigError("characterize.n_sets must be >= 1")

    def circuit(self) -> CircuitConfig:
        return CircuitConfig(**self["circuit"])

    def characterize_circuit(self) -> CircuitConfig:
        c = dict(self["circuit"], oversample=self["characterize"]["oversample"])
        return CircuitConfig(**c)

    def bank(self) -> BankSpec:
        return BankSpec(**self["bank"])

    def train_config(self) -> TrainConfig:
        return TrainConfig(**self["train"])

    def hwa_config(self) -> HwaConfig:
        h = {k: v for k, v in self["hwa"].items() if k not in ("epochs", "seed")}
        if h["clip_factor"] is None:
            h["clip_factor"] = math.inf
        return HwaConfig(**h)

    def hwa_train_config(self) -> TrainConfig:
        t = dict(self["train"], epochs=self["hwa"]["epochs"], seed=self["hwa"]["seed"])
        return TrainConfig(**t)

    def energy_constants(self) -> EnergyConstants:
        return EnergyConstants(**{k: v for k, v in self["energy"].items() if k != "duration_s"})

    def arch(self, in_ch: int, length: int, n_classes: int) -> ArchSpec:
        a = self["arch"]
        if a["name"] == "custom":
            if not a["spec"]:
                raise ConfigError("arch.spec is required for a custom architecture")
            return ArchSpec.from_dict(a["spec"])
        if a["name"] == "head":
            return head_arch(in_ch, length, n_classes, a["conv_out"], a["kernel"], a["activation"])
        if a["name"] == "linear":
            return linear_arch(in_ch, length, n_classes)
        if a["name"] == "ti46":
            return ti46_aimc_arch(in_ch, length, n_classes, a["activation"])
        return gsc_arch(in_ch, length, n_classes, a["activation"])


# ---------------------------------------------------------------- files and hashes

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def atomic_write(path, data: bytes | str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data.encode() if isinstance(data, str) else data)
    os.replace(tmp, path)


def _json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _npy_bytes(a: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.save(buf, np.ascontiguousarray(a), allow_pickle=False)
    return buf.getvalue()


class Run:
    """An output directory plus its manifest."""

    def __init__(self, out, cfg: RunConfig):
        self.out = Path(out)
        self.cfg = cfg
        self.out.mkdir(parents=True, exist_ok=True)
        mpath = self.out / MANIFEST
        if mpath.exists():
            self.manifest = json.loads(mpath.read_text())
        else:
            self.manifest = {"schema": "inmateria.manifest/1", "stages": {}}
        self.manifest["tool_version"] = __version__
        self.manifest["config"] = cfg.data

    def path(self, rel: str) -> Path:
        return self.out / rel

    def recorded_hash(self, rel: str) -> str | None:
        for st in self.manifest["stages"].values():
            if rel in st.get("outputs", {}):
                return st["outputs"][rel]
        return None

    def require(self, rels) -> dict[str, str]:
        """Check that upstream artifacts exist and match the hashes written by their producer."""
        hashes = {}
        for rel in rels:
            p = self.path(rel)
            if not p.exists():
                raise MissingArtifact(f"{rel} not found under {self.out}; run the producing stage first")
            h = sha256_file(p)
            want = self.recorded_hash(rel)
            if want is None:
                raise MissingArtifact(f"{rel} is not recorded in the run manifest")
            if h != want:
                raise HashMismatch(f"{rel} changed since it was written (stale or edited input)")
            hashes[rel] = h
        return hashes

    def record(self, stage: str, inputs: dict[str, str], outputs, wall_s: float) -> None:
        self.manifest["stages"][stage] = {
            "inputs": inputs,
            "outputs": {rel: sha256_file(self.path(rel)) for rel in sorted(outputs)},
            "wall_s": wall_s,
        }
        atomic_write(self.out / MANIFEST, _json(self.manifest))


# ---------------------------------------------------------------- stages

def _load_set(cfg: RunConfig) -> LabeledSet:
    ds = cfg["dataset"]
    if ds["kind"] == "synthetic":
        return gen_synthetic_task(ds["n_classes"], ds["per_class"], ds["seed"], test_frac=ds["test_frac"])
    raw = load_dataset(ds["path"], ds["test_frac"], ds["seed"])
    rate = raw.waveforms[0].sample_rate
    if any(w.sample_rate != rate for w in raw.waveforms):
        raise ConfigError("all recordings in a dataset must share one sample rate")
    n = int(round(ds["length_s"] * rate))
    return raw.map(lambda w: preprocess(w, length=n))


def _controls_csv(controls, values, name) -> str:
    lines = ["index," + ",".join(f"v_c{j + 1}" for j in range(6)) + f",{name}"]
    for i, (c, v) in enumerate(zip(controls, values)):
        lines.append(f"{i}," + ",".join(repr(float(x)) for x in c.v) + f",{float(v)!r}")
    return "\n".join(lines) + "\n"


def stage_characterize(run: Run) -> tuple[dict, list[str]]:
    cfg = run.cfg
    ch = cfg["characterize"]
    circuit = cfg.characterize_circuit()
    m = sample_device(cfg["device_seed"])
    rng = np.random.default_rng(ch["control_seed"])
    controls = [random_control_set(rng) for _ in range(ch["n_sets"])]
    outs = {}
    outs["characterize/device.json"] = _json(m.to_dict())
    taus = [step_response_tau(m, circuit, c) for c in controls]
    outs["characterize/tau.csv"] = _controls_csv(controls, taus, "tau_s")
    powers = [static_power(m, 0.0, 0.0, c) for c in controls]
    outs["characterize/static_power.csv"] = _controls_csv(controls, powers, "p_static_w")
    settings = [ControlSet.zeros()] + controls[: ch["n_chirp_random"]]
    for k, c in enumerate(settings):
        t, f, db = spectrogram(chirp_response(m, circuit, c))
        svg = run.path(f"characterize/chirp_{k}.svg")
        svg.parent.mkdir(parents=True, exist_ok=True)
        spectrogram_svg(t, f, db, svg.with_name(svg.name + ".tmp"))
        os.replace(svg.with_name(svg.name + ".tmp"), svg)
        rows = ["t_s,freq_hz,power_db"] + [f"{float(t[j])!r},{float(f[i])!r},{float(db[i, j])!r}"
                                            for j in range(t.size) for i in range(f.size)]
        outs[f"characterize/chirp_{k}.csv"] = "\n".join(rows) + "\n"
    spec = two_tone_response(m, circuit, ControlSet.zeros())
    peak, floor = imd_level(spec)
    tones = tone_table(spec, float(spec.power_db.max()) - 80.0)
    outs["characterize/two_tone.csv"] = "freq_hz,power_db\n" + "".join(f"{float(f)!r},{float(p)!r}\n"
                                                                    for f, p in tones)
    for rel, text in outs.items():
        atomic_write(run.path(rel), text)
    summary = {"median_tau_s": float(np.median(taus)), "tau_span": float(max(taus) / min(taus)),
               "mean_static_power_w": float(np.mean(powers)), "imd_26hz_db": peak, "imd_floor_db": floor,
               "chirp_settings": [list(c.v) for c in settings]}
    atomic_write(run.path("characterize/summary.json"), _json(summary))
    files = list(outs) + [f"characterize/chirp_{k}.svg" for k in range(len(settings))] + ["characterize/summary.json"]
    return {}, files


def stage_extract(run: Run) -> tuple[dict, list[str]]:
    cfg = run.cfg
    ds = _load_set(cfg)
    if ds.train_idx.size == 0 or ds.test_idx.size == 0:
        raise ConfigError("dataset split leaves an empty train or test set")
    m = sample_device(cfg["device_seed"])
    spec = cfg.bank()
    bank = sample_control_bank(spec)
    x = extract_many(m, cfg.circuit(), bank, ds.waveforms, spec.downsample, workers=int(cfg["workers"]))
    norm = ChannelNorm.fit(x[ds.train_idx])
    atomic_write(run.path("extract/features.npy"), _npy_bytes(x))
    atomic_write(run.path("extract/dataset.json"), _json({
        "labels": ds.labels.tolist(), "class_names": ds.class_names, "train_idx": ds.train_idx.tolist(),
        "test_idx": ds.test_idx.tolist(), "frame_rate": ds.waveforms[0].sample_rate / spec.downsample}))
    atomic_write(run.path("extract/norm.json"), _json(norm.to_dict()))
    atomic_write(run.path("extract/device.json"), _json(m.to_dict()))
    atomic_write(run.path("extract/bank.json"), _json({"control_seed": spec.control_seed,
                                                       "controls": [list(c.v) for c in bank]}))
    return {}, ["extract/features.npy", "extract/dataset.json", "extract/norm.json", "extract/device.json",
                "extract/bank.json"]


_DATA = ["extract/features.npy", "extract/dataset.json", "extract/norm.json"]


def _load_data(run: Run):
    x = np.load(run.path("extract/features.npy"), allow_pickle=False)
    meta = json.loads(run.path("extract/dataset.json").read_text())
    norm = ChannelNorm.from_dict(json.loads(run.path("extract/norm.json").read_text()))
    y = np.array(meta["labels"], dtype=np.int64)
    tr = np.array(meta["train_idx"], dtype=np.int64)
    te = np.array(meta["test_idx"], dtype=np.int64)
    return norm.apply(x), y, tr, te, len(meta["class_names"])


def _save_model(run: Run, stem: str, model, extra: dict) -> list[str]:
    tmp = run.path(stem + ".tmp")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, tmp, extra)
    for suf in (".json", ".bin"):
        os.replace(tmp.with_suffix(suf), run.path(stem + suf))
    return [stem + ".json", stem + ".bin"]


def _metrics(model, x, y, idx, n_classes, losses) -> dict:
    ev = evaluate(model, x[idx], y[idx])
    return {"test_accuracy": ev.accuracy, "confusion": ev.confusion.tolist(), "train_loss": losses,
            "n_classes": n_classes}


def stage_train(run: Run) -> tuple[dict, list[str]]:
    inputs = run.require(_DATA)
    x, y, tr, te, n_classes = _load_data(run)
    arch = run.cfg.arch(x.shape[1], x.shape[2], n_classes)
    tc = run.cfg.train_config()
    model = build(arch, tc.seed)
    res = train(model, x[tr], y[tr], tc)
    files = _save_model(run, "train/model", model, {"train_config": run.cfg["train"]})
    atomic_write(run.path("train/metrics.json"), _json(_metrics(model, x, y, te, n_classes, res.train_loss)))
    return inputs, files + ["train/metrics.json"]


def stage_retrain_hwa(run: Run) -> tuple[dict, list[str]]:
    inputs = run.require(_DATA + ["train/model.json", "train/model.bin"])
    x, y, tr, te, n_classes = _load_data(run)
    base, _ = load_checkpoint(run.path("train/model"))
    res = hwa_retrain(base, x[tr], y[tr], run.cfg.hwa_config(), run.cfg.hwa_train_config())
    files = _save_model(run, "retrain-hwa/model", res.model, {"hwa": run.cfg["hwa"]})
    atomic_write(run.path("retrain-hwa/metrics.json"),
                 _json(_metrics(res.model, x, y, te, n_classes, res.train_loss)))
    return inputs, files + ["retrain-hwa/metrics.json"]


_MODELS = {"fp": "train/model", "hwa": "retrain-hwa/model"}


def _save_program(run: Run, stem: str, p) -> list[str]:
    tmp = run.path(stem + ".tmp")
    tmp.parent.mkdir(parents=True, exist_ok=True)
    save_program(p, tmp)
    for suf in (".json", ".bin"):
        os.replace(tmp.with_suffix(suf), run.path(stem + suf))
    return [stem + ".json", stem + ".bin"]


def stage_map(run: Run) -> tuple[dict, list[str]]:
    inputs = run.require([s + suf for s in _MODELS.values() for suf in (".json", ".bin")])
    files = []
    for name, stem in _MODELS.items():
        model, _ = load_checkpoint(run.path(stem))
        p = map_model(model)
        files += _save_program(run, f"map/{name}", p)
        tmp = run.path(f"map/{name}_utilization.csv.tmp")
        write_utilization_csv(p, tmp)
        os.replace(tmp, run.path(f"map/{name}_utilization.csv"))
        files.append(f"map/{name}_utilization.csv")
    return inputs, files


def stage_infer(run: Run) -> tuple[dict, list[str]]:
    needed = _DATA + [s + suf for s in _MODELS.values() for suf in (".json", ".bin")]
    needed += [f"map/{n}{suf}" for n in _MODELS for suf in (".json", ".bin")]
    inputs = run.require(needed)
    x, y, tr, te, _ = _load_data(run)
    hwa = run.cfg.hwa_config()
    sigma = float(run.cfg["aimc"]["sigma_prog"])
    reps = int(run.cfg["aimc"]["repetitions"])
    results, lines = {}, []
    for name, stem in _MODELS.items():
        model, _ = load_checkpoint(run.path(stem))
        p = load_program(run.path(f"map/{name}"))
        digital = evaluate(model, x[te], y[te]).accuracy
        r = repeated_inference(p, model, x[te], y[te], x[tr], range(reps), sigma, hwa)
        drop = 100.0 * (digital - r.mean)
        results[name] = {"digital_accuracy": digital, "crossbar_accuracies": r.accuracies,
                         "mean": r.mean, "std": r.std, "drop_points": drop}
        lines.append(f"{name}: digital {100 * digital:.1f}%, crossbar {r.summary()}, drop {drop:.2f} points")
    results["sigma_prog"] = sigma
    atomic_write(run.path("infer/results.json"), _json(results))
    atomic_write(run.path("infer/report.txt"), "\n".join(lines) + "\n")
    return inputs, ["infer/results.json", "infer/report.txt"]


def stage_energy(run: Run) -> tuple[dict, list[str]]:
    which = run.cfg["aimc"]["energy_model"]
    inputs = run.require([f"map/{which}.json", f"map/{which}.bin"])
    p = load_program(run.path(f"map/{which}"))
    c = run.cfg.energy_constants()
    dense = sum(1 for info in p.layers.values() if info["kind"] == "linear")
    ours = report(mvm_schedule(p), int(run.cfg["bank"]["n_channels"]), float(run.cfg["energy"]["duration_s"]), c,
                  dense_layers=dense)
    ref = reference_report(c)
    atomic_write(run.path("energy/report.json"), _json({"run": ours.to_dict(), "reference_gsc": ref.to_dict()}))
    tmp = run.path("energy/summary.csv.tmp")
    write_summary_csv([ours, ref], tmp)
    os.replace(tmp, run.path("energy/summary.csv"))
    return inputs, ["energy/report.json", "energy/summary.csv"]


STAGE_FUNCS = {
    "characterize": stage_characterize,
    "extract": stage_extract,
    "train": stage_train,
    "retrain-hwa": stage_retrain_hwa,
    "map": stage_map,
    "infer": stage_infer,
    "energy": stage_energy,
}


def run_stage(run: Run, stage: str) -> list[str]:
    t0 = time.perf_counter()
    log.info("stage %s", stage)
    inputs, outputs = STAGE_FUNCS[stage](run)
    run.record(stage, inputs, outputs, time.perf_counter() - t0)
    return outputs
