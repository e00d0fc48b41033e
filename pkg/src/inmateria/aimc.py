"""Crossbar emulation: hardware-aware retraining, tiling onto 256x256 differential cores, noisy MVM."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, ShapeError
from .net import (CnnModel, Conv1d, TrainConfig, TrainResult, _read_tensors, _write_tensors, read_noise,
                  quantize_symmetric, train)

TILE_DIM = 256
N_CORES = 64
DEFAULT_SIGMA_PROG = 0.03


@dataclass(frozen=True)
class HwaConfig:
    weight_noise_frac: float = 0.12
    mvm_out_noise_sigma: float = 0.1
    clip_factor: float = 1.5
    input_bits: int | None = 8
    output_bits: int | None = 8

    def __post_init__(self):
        if self.weight_noise_frac < 0 or self.mvm_out_noise_sigma < 0 or self.clip_factor < 0:
            raise ConfigError("noise and clip settings must be non-negative")
        for b in (self.input_bits, self.output_bits):
            if b is not None and not 2 <= b <= 16:
                raise ConfigError("bit widths must lie in [2, 16]")

    @classmethod
    def ideal(cls) -> "HwaConfig":
        """No noise, no quantization, no clipping."""
        return cls(0.0, 0.0, math.inf, None, None)


def clip_weights(model: CnnModel, clip_factor: float) -> dict[int, float]:
    """Clip each conv/linear layer's weights and biases to +-clip_factor*std(W).

    Returns the per-layer std used, measured just before clipping.
    """
    used = {}
    if not math.isfinite(clip_factor):
        return used
    for i, layer in model.mvm_layers():
        sw = float(np.std(layer.params["W"]))
        lim = clip_factor * sw
        layer.params["W"] = np.clip(layer.params["W"], -lim, lim)
        layer.params["b"] = np.clip(layer.params["b"], -lim, lim)
        used[i] = sw
    return used


def hwa_retrain(m: CnnModel, x: np.ndarray, y: np.ndarray, hwa: HwaConfig, cfg: TrainConfig,
                x_test=None, y_test=None, on_clip=None) -> TrainResult:
    """Retrain a copy of ``m`` with injected weight/output noise, input quantization and clipping."""
    model = m.copy()

    def after(mod):
        used = clip_weights(mod, hwa.clip_factor)
        if on_clip is not None:
            on_clip(mod, used)

    return train(model, x, y, cfg, x_test, y_test, noise=hwa, after_batch=after)


# ---------------------------------------------------------------- tiles


@dataclass(eq=False)
class Tile:
    layer: int
    row0: int
    col0: int
    g_plus: np.ndarray
    g_minus: np.ndarray
    scale: float
    core: int
    out_range: float | None = None

    def __post_init__(self):
        if self.g_plus.shape != self.g_minus.shape or self.g_plus.ndim != 2:
            raise ShapeError("conductance matrices must be 2-D and equal in shape")
        if self.rows > TILE_DIM or self.cols > TILE_DIM:
            raise ShapeError(f"tile {self.g_plus.shape} exceeds {TILE_DIM}x{TILE_DIM}")
        if np.any(self.g_plus < 0) or np.any(self.g_minus < 0):
            raise ValueError("conductances must be non-negative")

    @property
    def rows(self) -> int:
        return self.g_plus.shape[0]

    @property
    def cols(self) -> int:
        return self.g_plus.shape[1]

    @property
    def cells(self) -> int:
        return self.rows * self.cols

    @property
    def utilization(self) -> float:
        return self.cells / (TILE_DIM * TILE_DIM)

    def weights(self) -> np.ndarray:
        return self.scale * (self.g_plus - self.g_minus)


@dataclass(eq=False)
class CrossbarProgram:
    tiles: list[Tile]
    layers: dict[int, dict]           # layer index -> kind, weight shape, matrix shape, mvms per input
    sigma_prog: float = 0.0
    noise_seed: int | None = None

    def layer_tiles(self, i: int) -> list[Tile]:
        return [t for t in self.tiles if t.layer == i]

    @property
    def cores_used(self) -> int:
        return len({t.core for t in self.tiles})

    @property
    def cells(self) -> int:
        return sum(t.cells for t in self.tiles)

    def cell_fraction(self) -> float:
        return self.cells / (self.cores_used * TILE_DIM * TILE_DIM)

    def min_cores_by_cells(self) -> int:
        return math.ceil(self.cells / (TILE_DIM * TILE_DIM))

    def logical_shapes(self) -> list[tuple[int, int]]:
        return [tuple(self.layers[i]["matrix"]) for i in sorted(self.layers)]


def layer_utilization(rows: int, cols: int, n_cores: int) -> float:
    """Occupied fraction of ``n_cores`` full crossbars."""
    return rows * cols / (n_cores * TILE_DIM * TILE_DIM)


def map_model(m: CnnModel, tile_dim: int = TILE_DIM) -> CrossbarProgram:
    """Row-major block tiling of every conv/linear matrix, one tile per core."""
    if tile_dim > TILE_DIM or tile_dim < 1:
        raise ConfigError(f"tile_dim must be in [1, {TILE_DIM}]")
    shapes = m.arch.shapes()
    tiles: list[Tile] = []
    layers: dict[int, dict] = {}
    core = 0
    for i, layer in m.mvm_layers():
        w = layer.matrix()
        rows, cols = w.shape
        mvms = shapes[i][1] if isinstance(layer, Conv1d) else 1
        layers[i] = {"kind": layer.kind, "weight_shape": list(layer.params["W"].shape),
                     "matrix": [rows, cols], "mvms": int(mvms)}
        for r0 in range(0, rows, tile_dim):
            for c0 in range(0, cols, tile_dim):
                block = w[r0: r0 + tile_dim, c0: c0 + tile_dim]
                scale = float(np.max(np.abs(block)))
                if scale == 0:
                    scale = 1.0
                gp = np.where(block > 0, block / scale, 0.0)
                gm = np.where(block < 0, -block / scale, 0.0)
                tiles.append(Tile(i, r0, c0, gp, gm, scale, core))
                core += 1
    return CrossbarProgram(tiles, layers)


def read_weights(p: CrossbarProgram) -> dict[int, np.ndarray]:
    """Reassemble each layer's weight tensor (in its native shape) from the conductances."""
    out = {}
    for i, info in p.layers.items():
        mat = np.zeros(info["matrix"])
        for t in p.layer_tiles(i):
            mat[t.row0: t.row0 + t.rows, t.col0: t.col0 + t.cols] = t.weights()
        shape = info["weight_shape"]
        out[i] = mat.T.reshape(shape)
    return out


def model_from_program(p: CrossbarProgram, m: CnnModel) -> CnnModel:
    """Copy of ``m`` carrying the programmed (read-back) weights."""
    out = m.copy()
    for i, w in read_weights(p).items():
        out.layers[i].params["W"] = w
    return out


def program(p: CrossbarProgram, sigma_prog: float = DEFAULT_SIGMA_PROG, seed: int = 0) -> CrossbarProgram:
    """Additive Gaussian programming error, clamped to [0, 1].

    Only devices that receive a target conductance are perturbed; the idle
    partner of a pair (and both devices of a zero weight) stay reset at 0.
    """
    if sigma_prog < 0:
        raise ValueError("sigma_prog must be >= 0")
    if sigma_prog == 0:
        return replace(p, tiles=[replace(t) for t in p.tiles], sigma_prog=0.0, noise_seed=seed)
    rng = np.random.default_rng(seed)
    tiles = []
    for t in p.tiles:
        gp = np.where(t.g_plus > 0, np.clip(t.g_plus + rng.normal(0.0, sigma_prog, t.g_plus.shape), 0.0, 1.0), 0.0)
        gm = np.where(t.g_minus > 0, np.clip(t.g_minus + rng.normal(0.0, sigma_prog, t.g_minus.shape), 0.0, 1.0), 0.0)
        tiles.append(replace(t, g_plus=gp, g_minus=gm))
    return replace(p, tiles=tiles, sigma_prog=float(sigma_prog), noise_seed=seed)


# ---------------------------------------------------------------- inference


def analog_mvm(t: Tile, x: np.ndarray, rng: np.random.Generator | None, hwa: HwaConfig) -> np.ndarray:
    """DAC-quantize x, multiply through the differential pair, add read noise, ADC-quantize.

    ``x`` has shape (..., rows); the input range is taken per leading-axis sample.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != t.rows:
        raise ShapeError(f"tile has {t.rows} rows, input has {x.shape[-1]}")
    xq = quantize_symmetric(x, hwa.input_bits)
    y = xq @ t.weights()
    if hwa.mvm_out_noise_sigma > 0:
        y = y + read_noise(xq, t.scale, hwa.mvm_out_noise_sigma, y.shape, rng)
    if hwa.output_bits is not None and t.out_range:
        y = quantize_symmetric(y, hwa.output_bits, t.out_range)
    return y


def _layer_input(layer, h: np.ndarray) -> np.ndarray:
    return layer.patches(h) if isinstance(layer, Conv1d) else h


def _run_layer(p: CrossbarProgram, i: int, layer, h, rng, hwa, record=None):
    xin = _layer_input(layer, h)
    if hwa.input_bits is not None:
        # one DAC range per sample and layer
        xin = quantize_symmetric(xin, hwa.input_bits)
    y = np.zeros(xin.shape[:-1] + (p.layers[i]["matrix"][1],))
    plain = replace(hwa, input_bits=None)
    for t in p.layer_tiles(i):
        part = analog_mvm(t, xin[..., t.row0: t.row0 + t.rows], rng, plain)
        if record is not None:
            record[id(t)] = max(record.get(id(t), 0.0), float(np.max(np.abs(part))))
        y[..., t.col0: t.col0 + t.cols] += part
    y = y + layer.params["b"]
    return y.transpose(0, 2, 1) if isinstance(layer, Conv1d) else y


def analog_forward(p: CrossbarProgram, m: CnnModel, x: np.ndarray, seed: int = 0,
                   hwa: HwaConfig = HwaConfig(), batch_size: int = 64) -> np.ndarray:
    """Logits with every conv/linear MVM on the emulated crossbars; the rest stays digital."""
    rng = np.random.default_rng(seed)
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    out = []
    for s in range(0, x.shape[0], batch_size):
        h = x[s: s + batch_size]
        for i, layer in enumerate(m.layers):
            h = _run_layer(p, i, layer, h, rng, hwa) if layer.is_mvm else layer.forward(h)
        out.append(h)
    return np.concatenate(out)


def calibrate(p: CrossbarProgram, m: CnnModel, x: np.ndarray, hwa: HwaConfig = HwaConfig(),
              batch_size: int = 64) -> CrossbarProgram:
    """Set each tile's ADC range to the max |partial output| seen on ``x`` (noise-free pass)."""
    quiet = replace(hwa, mvm_out_noise_sigma=0.0, output_bits=None)
    record: dict[int, float] = {}
    for s in range(0, x.shape[0], batch_size):
        h = np.asarray(x[s: s + batch_size], dtype=np.float64)
        for i, layer in enumerate(m.layers):
            h = _run_layer(p, i, layer, h, None, quiet, record) if layer.is_mvm else layer.forward(h)
    tiles = [replace(t, out_range=record.get(id(t)) or None) for t in p.tiles]
    return replace(p, tiles=tiles)


def noisy_accuracy(p: CrossbarProgram, m: CnnModel, x, y, seed: int, hwa: HwaConfig = HwaConfig()) -> float:
    logits = analog_forward(p, m, x, seed, hwa)
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(y)))


@dataclass
class RepeatedEval:
    accuracies: list[float] = field(default_factory=list)

    @property
    def mean(self) -> float:
        return float(np.mean(self.accuracies))

    @property
    def std(self) -> float:
        return float(np.std(self.accuracies))

    def summary(self) -> str:
        return (f"{100 * self.mean:.1f} ± {100 * self.std:.1f}% "
                f"(mean ± std over {len(self.accuracies)} repetitions)")


def repeated_inference(p: CrossbarProgram, m: CnnModel, x, y, calib_x, seeds, sigma_prog: float = DEFAULT_SIGMA_PROG,
                       hwa: HwaConfig = HwaConfig()) -> RepeatedEval:
    """Program, calibrate and evaluate once per seed (fresh programming and read noise each time)."""
    res = RepeatedEval()
    for s in seeds:
        ps = program(p, sigma_prog, seed=int(s))
        ps = calibrate(ps, m, calib_x, hwa)
        res.accuracies.append(noisy_accuracy(ps, m, x, y, seed=int(s) + 10_000, hwa=hwa))
    return res


# ---------------------------------------------------------------- io


def save_program(p: CrossbarProgram, stem) -> tuple[Path, Path]:
    stem = Path(stem)
    jpath, bpath = stem.with_suffix(".json"), stem.with_suffix(".bin")
    tensors = {}
    meta = []
    for k, t in enumerate(p.tiles):
        tensors[f"{k}.g_plus"] = t.g_plus
        tensors[f"{k}.g_minus"] = t.g_minus
        meta.append({"layer": t.layer, "row0": t.row0, "col0": t.col0, "rows": t.rows, "cols": t.cols,
                     "scale": t.scale, "core": t.core, "out_range": t.out_range, "utilization": t.utilization})
    manifest = {"schema": "inmateria.crossbar/1", "tile_dim": TILE_DIM, "n_cores": N_CORES,
                "cores_used": p.cores_used, "sigma_prog": p.sigma_prog, "noise_seed": p.noise_seed,
                "layers": {str(k): v for k, v in p.layers.items()}, "tiles": meta,
                "conductances": bpath.name}
    _write_tensors(bpath, tensors)
    jpath.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return jpath, bpath


def load_program(stem) -> CrossbarProgram:
    stem = Path(stem)
    manifest = json.loads(stem.with_suffix(".json").read_text())
    g = _read_tensors(stem.with_suffix(".bin"))
    tiles = [Tile(d["layer"], d["row0"], d["col0"], g[f"{k}.g_plus"], g[f"{k}.g_minus"], d["scale"], d["core"],
                  d["out_range"]) for k, d in enumerate(manifest["tiles"])]
    layers = {int(k): v for k, v in manifest["layers"].items()}
    return CrossbarProgram(tiles, layers, manifest["sigma_prog"], manifest["noise_seed"])


def write_utilization_csv(p: CrossbarProgram, path) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["tile", "layer", "core", "row0", "col0", "rows", "cols", "cells", "utilization"])
        for k, t in enumerate(p.tiles):
            wr.writerow([k, t.layer, t.core, t.row0, t.col0, t.rows, t.cols, t.cells, f"{t.utilization:.6f}"])
        wr.writerow(["total", "", f"{p.cores_used}/{N_CORES}", "", "", "", "", p.cells,
                     f"{p.cell_fraction():.6f}"])
        wr.writerow(["min_cores_by_cells", "", p.min_cores_by_cells(), "", "", "", "", "", ""])
