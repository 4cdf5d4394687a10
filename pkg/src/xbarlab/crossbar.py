"""Programmed M x N crossbar arrays.

A ``CrossbarArray`` owns a conductance matrix, a stuck-at fault map and two
monotone counters: ``write_pulse_count`` (programming attempts, the unit of
the device-time cost model) and ``read_count`` (array read events; one
matrix-vector product or one R-V-W verify is one event).

Programming comes in two flavors:

  * ``program_once`` — one pulse per cell, variation and all (the fast path
    the sparse-adaptation scheme relies on);
  * ``program_rvw``  — the Read-Verify-Write baseline: re-pulse each cell
    with a fresh lognormal draw until its resistance is within tolerance of
    target or the pulse budget runs out. Stuck cells never converge and burn
    their full budget, which is exactly what makes R-V-W slow on faulty
    arrays.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .device import (DeviceConfig, FaultMap, WeightScale, apply_faults,
                     conductance_to_weight, quantize_array, sample_write,
                     weight_to_conductance)


class CrossbarError(Exception):
    pass


class NotProgrammedError(CrossbarError):
    """Read attempted before any programming pass."""


@dataclass
class RvwConfig:
    tolerance: float = 0.02  # relative resistance error
    max_pulses_per_cell: int = 100

    def __post_init__(self):
        if self.tolerance <= 0:
            raise ValueError("tolerance must be > 0")
        if self.max_pulses_per_cell < 1:
            raise ValueError("max_pulses_per_cell must be >= 1")


@dataclass
class TimingModel:
    t_read: float = 1e-8  # seconds per array read event
    t_write: float = 1e-6  # seconds per write pulse

    def __post_init__(self):
        if self.t_read <= 0 or self.t_write <= 0:
            raise ValueError("timing values must be positive")


@dataclass
class RvwReport:
    pulses_total: int
    cells_converged: int
    cells_failed: int
    pulses_per_cell: np.ndarray  # (rows, cols)

    @property
    def mean_pulses_per_cell(self) -> float:
        return float(self.pulses_per_cell.mean())

    def to_json_dict(self) -> dict:
        return {"pulses_total": self.pulses_total,
                "cells_converged": self.cells_converged,
                "cells_failed": self.cells_failed,
                "mean_pulses_per_cell": self.mean_pulses_per_cell}

    def pulse_histogram_csv(self, path) -> None:
        counts = np.bincount(self.pulses_per_cell.ravel())
        with open(Path(path), "w", newline="") as f:
            w = csv.writer(f)
            w.writerow(["pulses", "cells"])
            for p, c in enumerate(counts):
                if c:
                    w.writerow([p, int(c)])


@dataclass
class CostReport:
    write_seconds: float
    read_seconds: float

    @property
    def total(self) -> float:
        return self.write_seconds + self.read_seconds

    def to_json_dict(self) -> dict:
        return {"write_seconds": self.write_seconds,
                "read_seconds": self.read_seconds,
                "total": self.total}


class CrossbarArray:
    """One programmed array; single writer, concurrent reads after programming."""

    def __init__(self, rows: int, cols: int, device: DeviceConfig,
                 scale: WeightScale, faults: FaultMap | None = None):
        self.rows, self.cols = int(rows), int(cols)
        self.device = device
        self.scale = scale
        self.faults = faults if faults is not None else FaultMap.none(rows, cols)
        if self.faults.shape != (rows, cols):
            raise CrossbarError(f"fault map {self.faults.shape} != array {(rows, cols)}")
        self.conductances = np.full((rows, cols), device.g_off)
        self.write_pulse_count = 0
        self.read_count = 0
        self.programmed = False
        self._w_eff: np.ndarray | None = None

    def clone(self) -> "CrossbarArray":
        """Deep copy sharing the (immutable) fault map."""
        other = CrossbarArray(self.rows, self.cols, self.device, self.scale, self.faults)
        other.conductances = self.conductances.copy()
        other.write_pulse_count = self.write_pulse_count
        other.read_count = self.read_count
        other.programmed = self.programmed
        return other

    # -- programming ---------------------------------------------------

    def _check_shape(self, w: np.ndarray) -> np.ndarray:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.rows, self.cols):
            raise CrossbarError(f"weight shape {w.shape} != array {(self.rows, self.cols)}")
        return w

    def _targets(self, w: np.ndarray) -> np.ndarray:
        _, wq = quantize_array(w, self.scale, self.device.num_levels)
        return weight_to_conductance(wq, self.scale, self.device)

    def program_once(self, w: np.ndarray, rng: np.random.Generator) -> None:
        """One write pulse per cell; stuck cells still cost their pulse."""
        w = self._check_shape(w)
        self.conductances = sample_write(self._targets(w), self.device, rng)
        self.write_pulse_count += self.rows * self.cols
        self.programmed = True
        self._w_eff = None

    def program_rvw(self, w: np.ndarray, rvw: RvwConfig, rng: np.random.Generator) -> RvwReport:
        """Iterative write-then-verify until within tolerance or out of budget."""
        w = self._check_shape(w)
        target = self._targets(w)
        active = ~self.faults.faulty
        pulses = np.zeros((self.rows, self.cols), dtype=np.int64)
        converged = np.zeros((self.rows, self.cols), dtype=bool)
        pending = active.copy()
        for _ in range(rvw.max_pulses_per_cell):
            if not pending.any():
                break
            tg = target[pending]
            g = sample_write(tg, self.device, rng)
            self.conductances[pending] = g
            pulses[pending] += 1
            # verify read: relative resistance error |R - R_t| / R_t
            rel = np.abs(1.0 / g - 1.0 / tg) * tg
            newly = np.zeros_like(pending)
            newly[pending] = rel <= rvw.tolerance
            converged |= newly
            pending &= ~newly
        # stuck cells burn their whole budget and never converge
        pulses[self.faults.faulty] = rvw.max_pulses_per_cell
        self.write_pulse_count += int(pulses.sum())
        self.read_count += int(pulses.sum())  # one verify per pulse
        self.programmed = True
        self._w_eff = None
        failed = int(self.faults.faulty.sum() + (active & ~converged).sum())
        return RvwReport(pulses_total=int(pulses.sum()),
                         cells_converged=int(converged.sum()),
                         cells_failed=failed,
                         pulses_per_cell=pulses)

    # -- reading ---------------------------------------------------------

    def effective_conductances(self) -> np.ndarray:
        return apply_faults(self.conductances, self.faults, self.device)

    def effective_weights(self) -> np.ndarray:
        """Weight-space view of what the array actually reads back."""
        if self._w_eff is None:
            self._w_eff = conductance_to_weight(
                self.effective_conductances(), self.scale, self.device)
        return self._w_eff

    def read_mvm(self, x: np.ndarray) -> np.ndarray:
        """y = x @ W_eff. 1-D input is one read event; a batch is one per row."""
        if not self.programmed:
            raise NotProgrammedError("read_mvm before programming")
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.rows:
            raise CrossbarError(f"input length {x.shape[-1]} != rows {self.rows}")
        self.read_count += 1 if x.ndim == 1 else x.shape[0]
        return x @ self.effective_weights()

    def read_mvm_transpose(self, v: np.ndarray) -> np.ndarray:
        """Transpose read used by backprop through a frozen array."""
        if not self.programmed:
            raise NotProgrammedError("read_mvm_transpose before programming")
        v = np.asarray(v, dtype=np.float64)
        if v.shape[-1] != self.cols:
            raise CrossbarError(f"input length {v.shape[-1]} != cols {self.cols}")
        self.read_count += 1 if v.ndim == 1 else v.shape[0]
        return v @ self.effective_weights().T

    # -- accounting --------------------------------------------------------

    def cost_report(self, timing: TimingModel) -> CostReport:
        return CostReport(write_seconds=self.write_pulse_count * timing.t_write,
                          read_seconds=self.read_count * timing.t_read)


def total_cost(arrays: list[CrossbarArray], timing: TimingModel) -> CostReport:
    return CostReport(
        write_seconds=sum(a.write_pulse_count for a in arrays) * timing.t_write,
        read_seconds=sum(a.read_count for a in arrays) * timing.t_read)
