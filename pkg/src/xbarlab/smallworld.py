"""Small-world structure for layer connectivity.

Borrowing the friendship-network reading of small-world graphs, each class
output defines a network: a unit (neuron of an FC layer, output channel of a
conv layer) is a "friend" of a class when some directed path of surviving
nonzero weights connects it to that class output. Two structural metrics
follow:

  * characteristic path length L (per unit level): how many units connect to
    a class, averaged over classes;
  * clustering coefficient C: how many classes a unit contributes to,
    averaged over the level's units.

A dense network has L = level width and C = class count. Sparse training
starts from a locally-banded mask plus random shortcuts (probability ``p``),
and pruning removes the smallest-magnitude fraction ``theta`` of surviving
weights per layer, again retaining each pruned candidate as a shortcut with
probability ``p``. High theta with small p drives L down while C stays
comparatively high, the small-world signature.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import nn
from .nn import Conv2d, Dense, Network, SgdConfig
from .rng import RngStreams


class MaskError(Exception):
    pass


@dataclass
class SmallWorldConfig:
    theta: float = 0.0            # default pruning quantile, overridable per round
    p: float = 0.0001             # random shortcut probability
    window: int | None = None     # band half-width; None derives it from target_density
    target_density: float | None = None
    mask_final_layer: bool = False  # classifier layer starts dense unless set

    def __post_init__(self):
        if not 0 <= self.theta < 1:
            raise ValueError("theta must be in [0, 1)")
        if not 0 <= self.p <= 1:
            raise ValueError("p must be in [0, 1]")
        if self.window is not None and self.window < 0:
            raise ValueError("window must be >= 0")
        if self.target_density is not None and not 0 < self.target_density <= 1:
            raise ValueError("target_density must be in (0, 1]")


# ---------------------------------------------------------------------------
# Sparse initialization
# ---------------------------------------------------------------------------


def band_mask(shape: tuple[int, int], half_width: int) -> np.ndarray:
    """Each output unit connected to a contiguous input window (clamped)."""
    n_in, n_out = shape
    centers = np.round(np.arange(n_out) * (n_in - 1) / max(1, n_out - 1)).astype(int)
    rows = np.arange(n_in)[:, None]
    return (np.abs(rows - centers[None, :]) <= half_width).astype(np.float64)


def build_initial_mask(shape: tuple[int, int], cfg: SmallWorldConfig,
                       rng: np.random.Generator) -> np.ndarray:
    """Local band sized by window/target_density, plus p-random shortcuts.

    With an explicit ``window`` the band half-width is used as given and
    ``target_density`` only validates feasibility; otherwise the half-width
    is derived so the band meets ``target_density``.
    """
    n_in, n_out = shape
    if cfg.window is not None:
        h = cfg.window
        if cfg.target_density is not None and (2 * h + 1) / n_in < cfg.target_density:
            raise MaskError(
                f"window {h} cannot reach target density {cfg.target_density} "
                f"for {n_in} inputs")
    elif cfg.target_density is not None:
        h = max(0, math.ceil((cfg.target_density * n_in - 1) / 2))
    else:
        raise MaskError("need window or target_density")
    mask = band_mask(shape, h)
    if cfg.p > 0:
        shortcuts = (rng.random(shape) < cfg.p) & (mask == 0)
        mask[shortcuts] = 1.0
    return mask


def apply_mask(layer, mask: np.ndarray) -> None:
    if mask.shape != layer.w.shape:
        raise MaskError(f"mask {mask.shape} != weights {layer.w.shape} on {layer.name}")
    layer.sparsity = mask.astype(np.float64)
    layer.w *= layer.sparsity


# ---------------------------------------------------------------------------
# Contribution graph and metrics
# ---------------------------------------------------------------------------


@dataclass
class ContributionGraph:
    """Unit levels, per-layer channel adjacency, and class reachability.

    ``reach[l][u, c]`` is True when unit u of level l has a directed path of
    surviving weights to class output c. Level 0 is the network input;
    the last level is the class outputs themselves.
    """

    level_sizes: list[int]
    adjacency: list[np.ndarray]  # bool, (n_l, n_{l+1})
    reach: list[np.ndarray] = field(init=False)

    def __post_init__(self):
        k = self.level_sizes[-1]
        reach = [None] * len(self.level_sizes)
        reach[-1] = np.eye(k, dtype=bool)
        for l in range(len(self.adjacency) - 1, -1, -1):
            reach[l] = self.adjacency[l].astype(np.int64) @ reach[l + 1] > 0
        self.reach = reach

    def units_reaching_class(self, level: int, cls: int) -> np.ndarray:
        return np.flatnonzero(self.reach[level][:, cls])


def layer_adjacency(net: Network) -> tuple[list[int], list[np.ndarray]]:
    """Channel-level edge pattern per weight layer (nonzero surviving weights)."""
    sizes: list[int] = []
    adjacency: list[np.ndarray] = []
    prev_channels: int | None = None
    for _, layer in net.weight_layers():
        pattern = (layer.w != 0) & (layer.sparsity != 0)
        if isinstance(layer, Conv2d):
            blocks = pattern.reshape(layer.k * layer.k, layer.in_ch, layer.out_ch)
            adj = blocks.any(axis=0)
            in_units = layer.in_ch
            prev_channels = layer.out_ch
        elif isinstance(layer, Dense):
            if prev_channels is not None and layer.in_dim != prev_channels:
                # flattened conv output: rows cycle through channels last
                if layer.in_dim % prev_channels:
                    raise MaskError(f"{layer.name}: cannot group {layer.in_dim} inputs "
                                    f"into {prev_channels} channels")
                adj = np.zeros((prev_channels, layer.out_dim), dtype=bool)
                for c in range(prev_channels):
                    adj[c] = pattern[c::prev_channels].any(axis=0)
                in_units = prev_channels
            else:
                adj = pattern
                in_units = layer.in_dim
            prev_channels = None
        else:
            raise MaskError(f"unsupported weight layer {layer.name}")
        if not sizes:
            sizes.append(in_units)
        sizes.append(adj.shape[1])
        adjacency.append(adj)
    return sizes, adjacency


def contribution_reachability(net: Network) -> ContributionGraph:
    """Backward reachability of every unit to every class output."""
    sizes, adjacency = layer_adjacency(net)
    return ContributionGraph(sizes, adjacency)


def metric_L(graph: ContributionGraph, level: int) -> float:
    """Units of ``level`` connected to a class, averaged over classes."""
    return float(graph.reach[level].sum(axis=0).mean())


def metric_C(graph: ContributionGraph, level: int) -> float:
    """Classes each unit of ``level`` contributes to, averaged over units."""
    return float(graph.reach[level].sum(axis=1).mean())


def level_metrics(graph: ContributionGraph) -> list[tuple[float, float]]:
    return [(metric_L(graph, l), metric_C(graph, l))
            for l in range(len(graph.level_sizes))]


# ---------------------------------------------------------------------------
# Threshold pruning
# ---------------------------------------------------------------------------


@dataclass
class PruneLayerReport:
    layer_index: int
    name: str
    theta: float
    total_weights: int
    survivors_before: int
    survivors_after: int

    @property
    def density_after(self) -> float:
        return self.survivors_after / max(1, self.total_weights)


@dataclass
class PruneReport:
    layers: list[PruneLayerReport]
    metrics_before: list[tuple[float, float]]
    metrics_after: list[tuple[float, float]]


def _thetas_for(net: Network, theta) -> list[float]:
    wl = net.weight_layers()
    if np.isscalar(theta):
        thetas = [float(theta)] * len(wl)
    else:
        thetas = [float(t) for t in theta]
        if len(thetas) != len(wl):
            raise ValueError(f"{len(thetas)} thetas for {len(wl)} weight layers")
    for t in thetas:
        if not 0 <= t < 1:
            raise ValueError("theta must be in [0, 1)")
    return thetas


def prune_threshold(net: Network, theta, p: float, rng: np.random.Generator) -> PruneReport:
    """Mask out the lowest-magnitude ``theta`` fraction of surviving weights.

    Each below-threshold candidate is retained as a random shortcut with
    probability ``p`` (drawn from the given stream). ``theta`` may be a
    scalar or one value per weight layer. Masked weights are zeroed.
    """
    thetas = _thetas_for(net, theta)
    before = level_metrics(contribution_reachability(net))
    reports = []
    for (i, layer), th in zip(net.weight_layers(), thetas):
        surviving = np.flatnonzero(layer.sparsity.ravel())
        n = surviving.size
        k = int(math.floor(th * n))
        rep = PruneLayerReport(i, layer.name, th, layer.w.size, n, n)
        if k > 0:
            mags = np.abs(layer.w.ravel()[surviving])
            order = np.argsort(mags, kind="stable")
            candidates = surviving[order[:k]]
            if p > 0:
                keep = rng.random(k) < p
                candidates = candidates[~keep]
            layer.sparsity.ravel()[candidates] = 0.0
            layer.w.ravel()[candidates] = 0.0
            rep.survivors_after = n - candidates.size
        reports.append(rep)
    after = level_metrics(contribution_reachability(net))
    return PruneReport(reports, before, after)


# ---------------------------------------------------------------------------
# Pipeline
# ---------------------------------------------------------------------------


@dataclass
class PruneRound:
    theta: float | Sequence[float]
    fine_tune_epochs: int = 1


@dataclass
class SmallWorldSchedule:
    warmup_epochs: int
    rounds: list[PruneRound]
    final_epochs: int = 0


@dataclass
class PipelineResult:
    net: Network
    trace: list[dict]
    final_accuracy: float
    weight_params: int
    dense_weight_params: int

    @property
    def parameter_reduction(self) -> float:
        return 1.0 - self.weight_params / self.dense_weight_params


def masked_param_count(net: Network) -> int:
    return sum(l.param_count() for _, l in net.weight_layers())


def dense_param_count(net: Network) -> int:
    return sum(l.w.size for _, l in net.weight_layers())


def _trace_rows(net: Network, round_idx: int, thetas: list[float], accuracy: float) -> list[dict]:
    graph = contribution_reachability(net)
    rows = []
    for k, (i, layer) in enumerate(net.weight_layers()):
        rows.append({
            "round": round_idx,
            "layer": k,
            "theta": thetas[k],
            "density": layer.param_count() / layer.w.size,
            "L": metric_L(graph, k),
            "C": metric_C(graph, k),
            "accuracy": accuracy,
        })
    return rows


def smallworld_pipeline(arch: list[int], train, test, cfg: SmallWorldConfig,
                        schedule: SmallWorldSchedule, streams: RngStreams,
                        sgd: SgdConfig) -> PipelineResult:
    """Sparse-init -> train -> iterate (prune, fine-tune) -> final model.

    The trace holds one row per weight layer per round with the layer's
    density and its input level's (L, C), ready for CSV export.
    """
    net = nn.mlp(arch, streams.stream("init"), rng_label="smallworld")
    weight_layers = net.weight_layers()
    for k, (_, layer) in enumerate(weight_layers):
        if k == len(weight_layers) - 1 and not cfg.mask_final_layer:
            continue  # classifier keeps full fan-in; rounds may still prune it
        apply_mask(layer, build_initial_mask(layer.w.shape, cfg, streams.stream(f"sw-mask/{k}")))

    shuffle = streams.stream("shuffle")
    n_layers = len(net.weight_layers())

    def train_epochs(epochs):
        if epochs > 0:
            nn.train_sgd(net, train, SgdConfig(learning_rate=sgd.learning_rate,
                                               momentum=sgd.momentum,
                                               batch_size=sgd.batch_size,
                                               epochs=epochs), shuffle)

    trace: list[dict] = []
    train_epochs(schedule.warmup_epochs)
    trace += _trace_rows(net, 0, [0.0] * n_layers, nn.evaluate(net, test))
    for r, rnd in enumerate(schedule.rounds, start=1):
        thetas = _thetas_for(net, rnd.theta)
        prune_threshold(net, thetas, cfg.p, streams.stream(f"sw-shortcut/{r}"))
        train_epochs(rnd.fine_tune_epochs)
        trace += _trace_rows(net, r, thetas, nn.evaluate(net, test))
    train_epochs(schedule.final_epochs)
    final_acc = nn.evaluate(net, test)
    return PipelineResult(net=net, trace=trace, final_accuracy=final_acc,
                          weight_params=masked_param_count(net),
                          dense_weight_params=dense_param_count(net))
