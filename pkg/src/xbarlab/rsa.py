"""Random Sparse Adaptation on frozen, faulty crossbars.

A small row/column-regular random subset of cells is duplicated in a
full-precision trainable overlay. The crossbar itself is programmed once and
then only ever read; training updates the overlay values (and the
off-crossbar biases), which is what makes adaptation orders of magnitude
cheaper than Read-Verify-Write reprogramming in device time.

Layer output is ``read_mvm(xbar, x) + x @ scatter(values) + bias``; adding
the overlay in weight space before the activation is equivalent to adding
the two MVM outputs, and keeps the gradient path testable against a dense
oracle.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse

from . import nn
from .crossbar import CrossbarArray, RvwConfig, TimingModel
from .device import DeviceConfig, FaultMap, WeightScale, inject_faults
from .nn import Dense, Layer, Network, ReLU, SgdConfig
from .rng import RngStreams


class SelectionError(Exception):
    pass


class FrozenCrossbarViolation(AssertionError):
    """Write pulses were issued while only the overlay may train."""


@dataclass
class RsaConfig:
    fraction: float = 0.05
    init_sigma: float = 0.01
    optimizer: SgdConfig = field(default_factory=lambda: SgdConfig(epochs=5))

    def __post_init__(self):
        if not 0 < self.fraction <= 1:
            raise ValueError("fraction must be in (0, 1]")
        if self.init_sigma <= 0:
            raise ValueError("init_sigma must be > 0")


@dataclass(frozen=True)
class RsaSelection:
    """Row-regular, column-balanced random cell subset.

    ``columns[i]`` holds row i's selected columns (sorted), exactly
    ``per_row`` of them; column counts over the whole selection differ by at
    most one. Flat (row, col) index pairs follow row-major order, which is
    also the layout of the compact value store.
    """

    rows: int
    cols: int
    per_row: int
    columns: np.ndarray  # (rows, per_row), sorted within each row

    @property
    def count(self) -> int:
        return self.rows * self.per_row

    @property
    def flat_rows(self) -> np.ndarray:
        return np.repeat(np.arange(self.rows), self.per_row)

    @property
    def flat_cols(self) -> np.ndarray:
        return self.columns.ravel()

    def column_counts(self) -> np.ndarray:
        return np.bincount(self.flat_cols, minlength=self.cols)

    def scatter(self, values: np.ndarray) -> np.ndarray:
        """Dense (rows, cols) matrix holding ``values`` at selected cells."""
        out = np.zeros((self.rows, self.cols))
        out[self.flat_rows, self.flat_cols] = values
        return out


def _repair_duplicates(grid: np.ndarray, rng: np.random.Generator,
                       tries_per_slot: int = 400) -> bool:
    """Swap slots between rows until no row holds a column twice."""
    rows, r = grid.shape
    for i in range(rows):
        row = grid[i]
        seen = set()
        for j in range(r):
            if row[j] not in seen:
                seen.add(row[j])
                continue
            fixed = False
            for _ in range(tries_per_slot):
                i2 = int(rng.integers(rows))
                j2 = int(rng.integers(r))
                if i2 == i:
                    continue
                c_mine, c_theirs = row[j], grid[i2, j2]
                if c_theirs in seen or c_theirs == row[j]:
                    continue
                other = grid[i2]
                if c_mine in other:  # would create a duplicate over there
                    continue
                row[j], grid[i2, j2] = c_theirs, c_mine
                seen.add(c_theirs)
                fixed = True
                break
            if not fixed:
                return False
    return True


def select_cells(rows: int, cols: int, fraction: float,
                 rng: np.random.Generator, max_retries: int = 50) -> RsaSelection:
    """Random selection with exactly round(fraction*cols) cells per row.

    Column slots are dealt from a balanced pool (per-column counts differ by
    at most one), then within-row duplicates are repaired by swaps; on a
    construction deadlock the whole deal is retried on the advanced stream.
    Positions depend only on (rows, cols, fraction, stream), never on weights.
    """
    r = int(round(fraction * cols))
    if r < 1:
        raise SelectionError(f"fraction {fraction} selects no cells per row (cols={cols})")
    if r > cols:
        raise SelectionError(f"fraction {fraction} selects {r} > cols={cols} cells per row")
    if r == cols:
        return RsaSelection(rows, cols, r, np.tile(np.arange(cols), (rows, 1)))
    total = r * rows
    base, extra = divmod(total, cols)
    for _ in range(max_retries):
        caps = np.full(cols, base, dtype=np.int64)
        if extra:
            caps[rng.choice(cols, size=extra, replace=False)] += 1
        pool = np.repeat(np.arange(cols), caps)
        rng.shuffle(pool)
        grid = pool.reshape(rows, r)
        if _repair_duplicates(grid, rng):
            return RsaSelection(rows, cols, r, np.sort(grid, axis=1))
    raise SelectionError(f"selection deadlocked after {max_retries} retries "
                         f"(rows={rows}, cols={cols}, r={r})")


# ---------------------------------------------------------------------------
# Hybrid layer: frozen crossbar + trainable overlay
# ---------------------------------------------------------------------------


class HybridDense(Layer):
    """Dense layer whose weights live on a read-only crossbar.

    With ``selection`` given, the trainable state is the compact overlay
    value vector (one entry per selected cell) plus the off-crossbar bias;
    without it the layer is a pure frozen crossbar front-end (used to
    evaluate faulted and R-V-W-reprogrammed models).
    """

    kind = "hybrid-dense"

    def __init__(self, xbar: CrossbarArray, selection: RsaSelection | None,
                 bias: np.ndarray, name: str | None = None):
        self.xbar = xbar
        self.selection = selection
        self.name = name or f"hybrid({xbar.rows}x{xbar.cols})"
        self.bias = np.array(bias, dtype=np.float64)
        self.bias_trainable = True
        if selection is not None:
            if (selection.rows, selection.cols) != (xbar.rows, xbar.cols):
                raise SelectionError("selection shape does not match the array")
            indptr = np.arange(selection.rows + 1, dtype=np.int64) * selection.per_row
            self._overlay = sparse.csr_array(
                (np.zeros(selection.count), selection.flat_cols.astype(np.int64), indptr),
                shape=(xbar.rows, xbar.cols))
            self.values = self._overlay.data  # shared buffer, row-major order
        else:
            self._overlay = None
            self.values = None
        self.vel_values: np.ndarray | None = None
        self.vel_b: np.ndarray | None = None
        self._x: np.ndarray | None = None

    def init_values(self, rng: np.random.Generator, sigma: float) -> None:
        self.values[:] = rng.normal(0.0, sigma, size=self.values.shape)

    def effective_dense_weights(self) -> np.ndarray:
        """Dense equivalent of crossbar + overlay (test/inspection aid)."""
        w = self.xbar.effective_weights().copy()
        if self.selection is not None:
            w[self.selection.flat_rows, self.selection.flat_cols] += self.values
        return w

    def forward(self, x: np.ndarray) -> np.ndarray:
        x2 = x.reshape(x.shape[0], -1)
        self._x = x2
        self._xshape = x.shape
        y = self.xbar.read_mvm(x2)
        if self._overlay is not None:
            y = y + x2 @ self._overlay
        return y + self.bias

    def backward(self, grad: np.ndarray):
        gb = grad.sum(axis=0)
        gx = self.xbar.read_mvm_transpose(grad)
        grads = {"b": gb}
        if self._overlay is not None:
            sel = self.selection
            grads["values"] = np.einsum("bj,bj->j", self._x[:, sel.flat_rows],
                                        grad[:, sel.flat_cols])
            gx = gx + grad @ self._overlay.T
        return gx.reshape(self._xshape), grads

    def has_params(self) -> bool:
        return True

    def param_count(self) -> int:
        return 0 if self.values is None else int(self.values.size)

    def apply_sgd(self, grads: dict, cfg: SgdConfig) -> None:
        if self.values is not None:
            if self.vel_values is None:
                self.vel_values = np.zeros_like(self.values)
            self.vel_values = cfg.momentum * self.vel_values + grads["values"]
            self.values -= cfg.learning_rate * self.vel_values
        if self.bias_trainable:
            if self.vel_b is None:
                self.vel_b = np.zeros_like(self.bias)
            self.vel_b = cfg.momentum * self.vel_b + grads["b"]
            self.bias -= cfg.learning_rate * self.vel_b


def total_write_pulses(net: Network) -> int:
    return sum(l.xbar.write_pulse_count for l in net.layers if isinstance(l, HybridDense))


def total_reads(net: Network) -> int:
    return sum(l.xbar.read_count for l in net.layers if isinstance(l, HybridDense))


def hybridize(net: Network, device_cfg: DeviceConfig, rsa_cfg: RsaConfig,
              streams: RngStreams, with_overlay: bool = True
              ) -> tuple[Network, list[CrossbarArray]]:
    """Program every Dense layer of ``net`` onto a faulty crossbar.

    Each weight matrix gets its own symmetric scale, fault map and one-shot
    programming pass; biases stay off-crossbar. Overlay values start at zero
    (``init_values`` draws the random-normal state at adaptation time).
    """
    layers: list[Layer] = []
    arrays: list[CrossbarArray] = []
    di = 0
    for layer in net.layers:
        if isinstance(layer, Dense):
            scale = WeightScale.for_weights(layer.w)
            faults = inject_faults(layer.in_dim, layer.out_dim, device_cfg,
                                   streams.stream(f"faults/{di}"))
            xbar = CrossbarArray(layer.in_dim, layer.out_dim, device_cfg, scale, faults)
            xbar.program_once(layer.w, streams.stream(f"write/{di}"))
            selection = None
            if with_overlay:
                # narrow layers floor at one selected cell per row
                frac = max(rsa_cfg.fraction, 1.0 / layer.out_dim)
                selection = select_cells(layer.in_dim, layer.out_dim, frac,
                                         streams.stream(f"rsa-select/{di}"))
            layers.append(HybridDense(xbar, selection, layer.b, name=f"hybrid{di}"))
            arrays.append(xbar)
            di += 1
        elif isinstance(layer, ReLU):
            layers.append(ReLU())
        else:
            raise NotImplementedError(
                f"crossbar mapping for layer kind {layer.kind!r} is not supported")
    return Network(layers, rng_label=net.rng_label + "/hybrid"), arrays


def frozen_view(net: Network) -> Network:
    """Crossbar-only twin of a hybrid model (shared arrays, no overlay)."""
    layers: list[Layer] = []
    for layer in net.layers:
        if isinstance(layer, HybridDense):
            layers.append(HybridDense(layer.xbar, None, layer.bias))
        else:
            layers.append(ReLU())
    return Network(layers, rng_label=net.rng_label + "/frozen")


# ---------------------------------------------------------------------------
# Adaptation and the comparison against R-V-W
# ---------------------------------------------------------------------------


@dataclass
class AdaptationTrace:
    rows: list[dict]  # epoch, accuracy, device_seconds (cumulative)
    adaptation_reads: int
    device_seconds: float

    @property
    def final_accuracy(self) -> float:
        return self.rows[-1]["accuracy"]

    @property
    def best_accuracy(self) -> float:
        return max(r["accuracy"] for r in self.rows)


def adapt(model: Network, train, test, cfg: RsaConfig, streams: RngStreams,
          timing: TimingModel | None = None, init_values: bool = True) -> AdaptationTrace:
    """Train only the overlay values and biases of a programmed hybrid model.

    The crossbars must stay frozen: any write pulse during adaptation raises
    ``FrozenCrossbarViolation``. Modeled cost counts device read events
    issued by training passes (evaluation passes are instrumentation and are
    excluded); host-side arithmetic is not part of the device-time model.
    """
    timing = timing or TimingModel()
    pulses_before = total_write_pulses(model)
    if init_values:
        init_rng = streams.stream("rsa-init")
        for layer in model.layers:
            if isinstance(layer, HybridDense) and layer.values is not None:
                layer.init_values(init_rng, cfg.init_sigma)
    shuffle_rng = streams.stream("shuffle/adapt")
    opt = cfg.optimizer
    rows = [{"epoch": 0, "accuracy": nn.evaluate(model, test), "device_seconds": 0.0}]
    adaptation_reads = 0
    for epoch in range(1, opt.epochs + 1):
        reads_before = total_reads(model)
        for idx in nn.iterate_minibatches(len(train.labels), opt.batch_size, shuffle_rng):
            acts = nn.forward(model, train.images[idx])
            grads = nn.backward(model, acts, train.labels[idx])
            nn.sgd_step(model, grads, opt)
        adaptation_reads += total_reads(model) - reads_before
        rows.append({"epoch": epoch, "accuracy": nn.evaluate(model, test),
                     "device_seconds": adaptation_reads * timing.t_read})
    if total_write_pulses(model) != pulses_before:
        raise FrozenCrossbarViolation(
            f"{total_write_pulses(model) - pulses_before} write pulses during adaptation")
    return AdaptationTrace(rows, adaptation_reads, adaptation_reads * timing.t_read)


@dataclass
class CompareResult:
    ideal_accuracy: float
    faulted_accuracy: float
    rsa_accuracy: float
    rvw_accuracy: float
    rsa_time: float
    rvw_time: float
    rsa_trace: AdaptationTrace
    rvw_reports: list

    @property
    def speedup(self) -> float:
        return self.rvw_time / self.rsa_time

    def to_json_dict(self) -> dict:
        return {"ideal_accuracy": self.ideal_accuracy,
                "faulted_accuracy": self.faulted_accuracy,
                "rsa_accuracy": self.rsa_accuracy,
                "rvw_accuracy": self.rvw_accuracy,
                "rsa_time": self.rsa_time,
                "rvw_time": self.rvw_time,
                "speedup": self.speedup}


def compare_rsa_vs_rvw(ideal_net: Network, train, test, device_cfg: DeviceConfig,
                       rsa_cfg: RsaConfig, rvw_cfg: RvwConfig, streams: RngStreams,
                       timing: TimingModel | None = None) -> CompareResult:
    """Program once with faults, then race RSA adaptation against R-V-W.

    Both arms start from clones of the same faulted arrays. The R-V-W arm
    reprograms in place (stuck cells keep failing); the RSA arm trains its
    overlay without a single write pulse. Device time: write pulses and
    verify reads for R-V-W, training-pass reads for RSA.
    """
    timing = timing or TimingModel()
    ideal_acc = nn.evaluate(ideal_net, test)

    hybrid, arrays = hybridize(ideal_net, device_cfg, rsa_cfg, streams)
    faulted_acc = nn.evaluate(frozen_view(hybrid), test)

    # R-V-W arm on clones of the same faulted state
    rvw_arrays = [a.clone() for a in arrays]
    dense_weights = [l.w for l in ideal_net.layers if isinstance(l, Dense)]
    reports = []
    rvw_time = 0.0
    for i, (xbar, w) in enumerate(zip(rvw_arrays, dense_weights)):
        report = xbar.program_rvw(w, rvw_cfg, streams.stream(f"write/rvw/{i}"))
        reports.append(report)
        rvw_time += report.pulses_total * (timing.t_write + timing.t_read)
    rvw_layers: list[Layer] = []
    j = 0
    for layer in hybrid.layers:
        if isinstance(layer, HybridDense):
            rvw_layers.append(HybridDense(rvw_arrays[j], None, layer.bias))
            j += 1
        else:
            rvw_layers.append(ReLU())
    rvw_acc = nn.evaluate(Network(rvw_layers), test)

    trace = adapt(hybrid, train, test, rsa_cfg, streams, timing)
    return CompareResult(ideal_accuracy=ideal_acc, faulted_accuracy=faulted_acc,
                         rsa_accuracy=trace.best_accuracy, rvw_accuracy=rvw_acc,
                         rsa_time=trace.device_seconds, rvw_time=rvw_time,
                         rsa_trace=trace, rvw_reports=reports)
