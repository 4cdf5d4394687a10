"""RRAM cell population model.

A weight is stored as a cell conductance in [g_off, g_on] through a linear
map anchored at a per-layer weight scale. Programming is non-ideal three
ways:

  * only ``num_levels`` uniformly spaced weight levels exist (quantization);
  * each write lands at a resistance R = R_target * exp(sigma_write * xi)
    with xi standard normal, i.e. lognormal write variation in R;
  * a cell may be stuck at high resistance (SF1, reads g_off) or low
    resistance (SF0, reads g_on) no matter what was programmed.

All operations are pure given an explicit numpy Generator, so Monte-Carlo
trials can run concurrently on independent streams.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

FAULT_NONE = 0
FAULT_SF1 = 1  # stuck at high resistance -> reads g_off
FAULT_SF0 = 2  # stuck at low resistance  -> reads g_on

FAULT_NAMES = {FAULT_NONE: "none", FAULT_SF1: "sf1", FAULT_SF0: "sf0"}


@dataclass(frozen=True)
class WeightScale:
    """Per-layer weight range mapped onto [g_off, g_on]."""

    w_min: float
    w_max: float

    def __post_init__(self):
        if not self.w_min < self.w_max:
            raise ValueError(f"w_min {self.w_min} must be < w_max {self.w_max}")

    @classmethod
    def symmetric(cls, bound: float) -> "WeightScale":
        return cls(-abs(bound), abs(bound))

    @classmethod
    def for_weights(cls, w: np.ndarray) -> "WeightScale":
        """Symmetric scale covering the extreme magnitude of ``w``."""
        bound = float(np.max(np.abs(w))) or 1.0
        return cls.symmetric(bound)

    @property
    def span(self) -> float:
        return self.w_max - self.w_min


@dataclass
class DeviceConfig:
    num_levels: int = 32
    g_on: float = 1e-4  # siemens, low-resistance state
    g_off: float = 1e-6
    sigma_write: float = 0.1  # std of ln R write error
    sf1_rate: float = 0.0904
    sf0_rate: float = 0.0175
    rng_label: str = "device"

    def __post_init__(self):
        if self.num_levels < 2:
            raise ValueError("num_levels must be >= 2")
        if not 0 < self.g_off < self.g_on:
            raise ValueError("need 0 < g_off < g_on")
        if self.sigma_write < 0:
            raise ValueError("sigma_write must be >= 0")
        for r in (self.sf1_rate, self.sf0_rate):
            if not 0 <= r <= 1:
                raise ValueError("fault rates must be in [0, 1]")
        if self.sf1_rate + self.sf0_rate > 1:
            raise ValueError("sf1_rate + sf0_rate must be <= 1")


class FaultMap:
    """Immutable per-cell stuck-at assignment for one array."""

    def __init__(self, codes: np.ndarray):
        codes = np.asarray(codes, dtype=np.uint8)
        if codes.ndim != 2:
            raise ValueError("fault codes must be 2-D")
        codes.flags.writeable = False
        self.codes = codes

    @property
    def shape(self) -> tuple[int, int]:
        return self.codes.shape

    @property
    def sf1(self) -> np.ndarray:
        return self.codes == FAULT_SF1

    @property
    def sf0(self) -> np.ndarray:
        return self.codes == FAULT_SF0

    @property
    def faulty(self) -> np.ndarray:
        return self.codes != FAULT_NONE

    def counts(self) -> dict[str, int]:
        return {"sf1": int(self.sf1.sum()), "sf0": int(self.sf0.sum()),
                "none": int((self.codes == FAULT_NONE).sum())}

    @classmethod
    def none(cls, rows: int, cols: int) -> "FaultMap":
        return cls(np.zeros((rows, cols), dtype=np.uint8))

    def to_csv(self, path) -> None:
        """One row per cell: row, col, code name."""
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["row", "col", "code"])
            for (r, c), code in np.ndenumerate(self.codes):
                w.writerow([r, c, FAULT_NAMES[int(code)]])


# ---------------------------------------------------------------------------
# Quantization and the weight <-> conductance map
# ---------------------------------------------------------------------------


def quantize_array(w: np.ndarray, scale: WeightScale, num_levels: int):
    """Nearest of ``num_levels`` uniform levels on [w_min, w_max].

    Out-of-range weights clamp to the end levels; exact midpoints round
    toward the lower level. Returns (level_index, quantized_weight).
    """
    if num_levels < 2:
        raise ValueError("num_levels must be >= 2")
    step = scale.span / (num_levels - 1)
    t = (np.atleast_1d(np.asarray(w, dtype=np.float64)) - scale.w_min) / step
    levels = np.ceil(t - 0.5).astype(np.int64)
    np.clip(levels, 0, num_levels - 1, out=levels)
    wq = scale.w_min + levels * step
    if np.ndim(w) == 0:
        return levels[0], wq[0]
    return levels.reshape(np.shape(w)), wq.reshape(np.shape(w))


def quantize_weight(w: float, scale: WeightScale, num_levels: int) -> tuple[int, float]:
    levels, wq = quantize_array(np.asarray(w), scale, num_levels)
    return int(levels), float(wq)


def weight_to_conductance(w_q, scale: WeightScale, cfg: DeviceConfig):
    """Linear bijection w_min -> g_off, w_max -> g_on."""
    frac = (np.asarray(w_q, dtype=np.float64) - scale.w_min) / scale.span
    return cfg.g_off + frac * (cfg.g_on - cfg.g_off)


def conductance_to_weight(g, scale: WeightScale, cfg: DeviceConfig):
    frac = (np.asarray(g, dtype=np.float64) - cfg.g_off) / (cfg.g_on - cfg.g_off)
    return scale.w_min + frac * scale.span


# ---------------------------------------------------------------------------
# Write variation and stuck-at faults
# ---------------------------------------------------------------------------


def sample_write(g_target, cfg: DeviceConfig, rng: np.random.Generator):
    """One programming attempt: R = R_target * exp(sigma * xi), clamped.

    The returned conductance is 1/R clamped into [g_off, g_on]; scalar in,
    scalar out.
    """
    scalar = np.ndim(g_target) == 0
    g_target = np.atleast_1d(np.asarray(g_target, dtype=np.float64))
    if cfg.sigma_write == 0.0:
        g = g_target.copy()
    else:
        xi = rng.standard_normal(size=g_target.shape)
        r = (1.0 / g_target) * np.exp(cfg.sigma_write * xi)
        g = 1.0 / r
    np.clip(g, cfg.g_off, cfg.g_on, out=g)
    return float(g[0]) if scalar else g


def inject_faults(rows: int, cols: int, cfg: DeviceConfig,
                  rng: np.random.Generator) -> FaultMap:
    """Independent per-cell stuck-at assignment at the configured rates."""
    u = rng.random((rows, cols))
    codes = np.zeros((rows, cols), dtype=np.uint8)
    codes[u < cfg.sf1_rate] = FAULT_SF1
    codes[(u >= cfg.sf1_rate) & (u < cfg.sf1_rate + cfg.sf0_rate)] = FAULT_SF0
    return FaultMap(codes)


def apply_faults(g: np.ndarray, faults: FaultMap, cfg: DeviceConfig) -> np.ndarray:
    """Effective conductance: stuck cells read their fault value, always."""
    out = np.array(g, dtype=np.float64)
    out[faults.sf1] = cfg.g_off
    out[faults.sf0] = cfg.g_on
    return out


@dataclass
class WeightDistortion:
    """Paired pre/post programming weight histograms on shared bins."""

    bin_edges: np.ndarray
    counts_pre: np.ndarray
    counts_post: np.ndarray

    @property
    def bin_centers(self) -> np.ndarray:
        return 0.5 * (self.bin_edges[:-1] + self.bin_edges[1:])

    def to_json_dict(self) -> dict:
        return {"bin_edges": self.bin_edges.tolist(),
                "counts_pre": self.counts_pre.tolist(),
                "counts_post": self.counts_post.tolist()}


def effective_weight_matrix(w: np.ndarray, scale: WeightScale, cfg: DeviceConfig,
                            faults: FaultMap, rng: np.random.Generator,
                            hist_bins: int = 64) -> tuple[np.ndarray, WeightDistortion]:
    """Weights as they read back after one-shot programming.

    Composes quantize -> conductance map -> lognormal write -> stuck-at
    override -> inverse map, and reports the pre/post histogram pair of the
    parameter distribution distortion.
    """
    w = np.asarray(w, dtype=np.float64)
    if faults.shape != w.shape:
        raise ValueError(f"fault map shape {faults.shape} != weight shape {w.shape}")
    _, wq = quantize_array(w, scale, cfg.num_levels)
    g = weight_to_conductance(wq, scale, cfg)
    g = sample_write(g, cfg, rng)
    g = apply_faults(g, faults, cfg)
    w_eff = conductance_to_weight(g, scale, cfg)
    lo = min(scale.w_min, float(w.min()))
    hi = max(scale.w_max, float(w.max()))
    edges = np.linspace(lo, hi, hist_bins + 1)
    pre, _ = np.histogram(w, bins=edges)
    post, _ = np.histogram(w_eff, bins=edges)
    return w_eff, WeightDistortion(edges, pre, post)
