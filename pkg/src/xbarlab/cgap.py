"""Continuous Growth and Pruning.

Instead of training an over-parameterized network and pruning it afterwards,
training starts from a small seed (a few percent of the baseline widths) and
repeatedly widens each hidden layer by splitting its highest-saliency units,
until validation accuracy stops improving (the peak network). A unit-wise
magnitude pruning pass with fine-tuning then shrinks the peak model into the
compact final network, so each layer ends up at a learned width.

Saliency is the first-order Taylor estimate of a unit's effect on the loss,
|mean over the batch of (dLoss/d activation * activation)|, ranked within
each layer. Splitting copies the parent's incoming weights into the child
(plus optional noise) and halves the parent's outgoing weights, so growth
with zero noise leaves the network function unchanged.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .nn import Conv2d, Dense, Network, ReLU, SgdConfig
from .rng import RngStreams


class GrowthError(Exception):
    pass


@dataclass
class CgapConfig:
    seed_fraction: float = 0.05      # hidden width fraction of the baseline
    growth_period: int = 1           # training epochs between growth events
    growth_rate: float = 0.3         # fraction of units split per event
    noise_delta: float = 0.01        # std of child incoming-weight noise
    peak_patience: int = 3           # growth events without val improvement
    peak_eps: float = 0.001          # required improvement (accuracy fraction)
    prune_rate: float = 0.1          # fraction of units removed per prune step
    accuracy_budget: float = 0.005   # max validation drop from peak while pruning
    max_width_factor: float = 4.0    # width cap relative to the baseline
    max_growth_events: int = 40
    final_fine_tune_epochs: int = 1
    saliency_batch: int = 512

    def __post_init__(self):
        if not 0 < self.seed_fraction <= 1:
            raise ValueError("seed_fraction must be in (0, 1]")
        if self.growth_rate < 0 or self.prune_rate < 0:
            raise ValueError("rates must be >= 0")
        if self.noise_delta < 0 or self.accuracy_budget < 0:
            raise ValueError("noise_delta and accuracy_budget must be >= 0")
        if self.peak_patience < 1 or self.growth_period < 1:
            raise ValueError("peak_patience and growth_period must be >= 1")


@dataclass
class GrowthEvent:
    epoch: int
    layer: int  # hidden layer index (0-based over hidden Dense layers)
    parent_unit: int
    child_unit: int
    params_before: int
    params_after: int


def weight_param_count(net: Network) -> int:
    """Weight parameters only; biases excluded from capacity accounting."""
    return sum(layer.param_count() for _, layer in net.weight_layers())


# ---------------------------------------------------------------------------
# Seed construction
# ---------------------------------------------------------------------------


def seed_arch(baseline_arch: list[int], seed_fraction: float) -> list[int]:
    if not 0 < seed_fraction <= 1:
        raise GrowthError(f"seed fraction {seed_fraction} out of (0, 1]")
    hidden = [max(1, math.ceil(seed_fraction * w)) for w in baseline_arch[1:-1]]
    if any(h < 1 for h in hidden):
        raise GrowthError("degenerate zero-unit layer in seed")
    return [baseline_arch[0]] + hidden + [baseline_arch[-1]]


def build_seed(baseline_arch: list[int], seed_fraction: float,
               rng: np.random.Generator) -> Network:
    """MLP seed: hidden widths scaled down, output layer unchanged."""
    return nn.mlp(seed_arch(baseline_arch, seed_fraction), rng, rng_label="cgap-seed")


# ---------------------------------------------------------------------------
# Saliency
# ---------------------------------------------------------------------------


def _hidden_dense_indices(net: Network) -> list[int]:
    idx = [i for i, l in net.weight_layers()]
    return idx[:-1]  # the last weight layer feeds the class outputs


def unit_saliency(net: Network, x: np.ndarray, y: np.ndarray) -> dict[int, np.ndarray]:
    """First-order Taylor scores per hidden unit, one forward/backward pass.

    For a unit with post-activation a and upstream gradient g the score is
    |mean_b(g * a)|; conv channels use the channel's spatial mean. Ranking is
    meaningful within a layer only.
    """
    acts = nn.forward(net, x)
    _, act_grads = nn.backward(net, acts, y, return_activation_grads=True)
    scores: dict[int, np.ndarray] = {}
    for i in _hidden_dense_indices(net):
        j = i + 1 if i + 1 < len(net.layers) and isinstance(net.layers[i + 1], ReLU) else i
        a = acts[j + 1]
        g = act_grads[j]
        layer = net.layers[i]
        if isinstance(layer, Conv2d):
            m = a.mean(axis=(1, 2))          # (B, C) spatial mean activation
            gm = g.sum(axis=(1, 2))          # dLoss/dm
            scores[i] = np.abs((gm * m).mean(axis=0))
        else:
            scores[i] = np.abs((g * a).mean(axis=0))
    return scores


# ---------------------------------------------------------------------------
# Growth
# ---------------------------------------------------------------------------


def _next_weight_layer(net: Network, i: int) -> Dense:
    for j in range(i + 1, len(net.layers)):
        if net.layers[j].has_params():
            return net.layers[j]
    raise GrowthError(f"no weight layer after {i}")


def _append_unit(layer: Dense, parent: int, noise: np.ndarray, bias_noise: float) -> None:
    child_col = layer.w[:, parent] + noise
    layer.w = np.column_stack([layer.w, child_col])
    layer.b = np.append(layer.b, layer.b[parent] + bias_noise)
    layer.trainable = np.column_stack([layer.trainable, layer.trainable[:, parent]])
    layer.sparsity = np.column_stack([layer.sparsity, layer.sparsity[:, parent]])
    if layer.vel_w is not None:
        layer.vel_w = np.column_stack([layer.vel_w, np.zeros(layer.vel_w.shape[0])])
        layer.vel_b = np.append(layer.vel_b, 0.0)
    layer.out_dim += 1


def _split_outgoing(nxt: Dense, parent: int) -> None:
    nxt.w[parent] *= 0.5
    nxt.w = np.vstack([nxt.w, nxt.w[parent]])
    nxt.trainable = np.vstack([nxt.trainable, nxt.trainable[parent]])
    nxt.sparsity = np.vstack([nxt.sparsity, nxt.sparsity[parent]])
    if nxt.vel_w is not None:
        nxt.vel_w = np.vstack([nxt.vel_w, np.zeros(nxt.vel_w.shape[1])])
    nxt.in_dim += 1


def grow(net: Network, scores: dict[int, np.ndarray], cfg: CgapConfig,
         rng: np.random.Generator, epoch: int = 0,
         width_caps: dict[int, int] | None = None) -> list[GrowthEvent]:
    """Split the top-saliency units of each hidden layer (in place).

    The child inherits the parent's incoming weights plus N(0, noise_delta)
    and half of the parent's outgoing weights, so delta=0 growth preserves
    the network function. Momentum state for new units starts at zero.
    Layers at their width cap are left alone.
    """
    events: list[GrowthEvent] = []
    for i in _hidden_dense_indices(net):
        layer = net.layers[i]
        if not isinstance(layer, Dense):
            raise NotImplementedError("growth is defined for dense layers only")
        width = layer.out_dim
        if cfg.growth_rate * width < 1:
            continue
        n_grow = math.ceil(cfg.growth_rate * width)
        cap = None if width_caps is None else width_caps.get(i)
        if cap is not None:
            n_grow = min(n_grow, cap - width)
            if n_grow <= 0:
                continue
        s = scores[i]
        if s.shape[0] != width:
            raise GrowthError(f"stale saliency for layer {i}")
        parents = np.argsort(-s, kind="stable")[:n_grow]
        nxt = _next_weight_layer(net, i)
        for parent in parents:
            before = weight_param_count(net)
            noise = (rng.normal(0.0, cfg.noise_delta, size=layer.w.shape[0])
                     if cfg.noise_delta > 0 else np.zeros(layer.w.shape[0]))
            bias_noise = float(rng.normal(0.0, cfg.noise_delta)) if cfg.noise_delta > 0 else 0.0
            _append_unit(layer, int(parent), noise, bias_noise)
            _split_outgoing(nxt, int(parent))
            events.append(GrowthEvent(epoch=epoch, layer=i, parent_unit=int(parent),
                                      child_unit=layer.out_dim - 1,
                                      params_before=before,
                                      params_after=weight_param_count(net)))
    return events


# ---------------------------------------------------------------------------
# Peak detection
# ---------------------------------------------------------------------------


def detect_peak(validation_trace: list[float], cfg: CgapConfig) -> bool:
    """True once the best accuracy stalls for peak_patience growth events."""
    if not validation_trace:
        raise ValueError("empty validation trace")
    best = validation_trace[0]
    stall = 0
    for v in validation_trace[1:]:
        if v > best + cfg.peak_eps:
            best = v
            stall = 0
        else:
            stall += 1
    return stall >= cfg.peak_patience


# ---------------------------------------------------------------------------
# Unit-wise pruning
# ---------------------------------------------------------------------------


@dataclass
class PruneStep:
    removed: dict[int, int]  # hidden layer -> units removed
    params_after: int
    val_accuracy: float


@dataclass
class PruneTrace:
    steps: list[PruneStep] = field(default_factory=list)
    reverted: bool = False


def _remove_units(net: Network, layer_idx: int, units: np.ndarray) -> None:
    layer = net.layers[layer_idx]
    keep = np.setdiff1d(np.arange(layer.out_dim), units)
    layer.w = layer.w[:, keep]
    layer.b = layer.b[keep]
    layer.trainable = layer.trainable[:, keep]
    layer.sparsity = layer.sparsity[:, keep]
    if layer.vel_w is not None:
        layer.vel_w = layer.vel_w[:, keep]
        layer.vel_b = layer.vel_b[keep]
    layer.out_dim = keep.size
    nxt = _next_weight_layer(net, layer_idx)
    nxt.w = nxt.w[keep]
    nxt.trainable = nxt.trainable[keep]
    nxt.sparsity = nxt.sparsity[keep]
    if nxt.vel_w is not None:
        nxt.vel_w = nxt.vel_w[keep]
    nxt.in_dim = keep.size


def incoming_l2(layer: Dense) -> np.ndarray:
    return np.linalg.norm(layer.w, axis=0)


def prune_units(net: Network, cfg: CgapConfig, train, val, sgd: SgdConfig,
                shuffle_rng: np.random.Generator, peak_accuracy: float) -> PruneTrace:
    """Iteratively remove the lowest-|incoming| units, fine-tuning each step.

    A step whose post-fine-tune validation drop from the peak exceeds
    accuracy_budget is rolled back and pruning stops. Removal physically
    shrinks the tensors.
    """
    trace = PruneTrace()
    while True:
        plan = {}
        for i in _hidden_dense_indices(net):
            layer = net.layers[i]
            n_remove = int(math.floor(cfg.prune_rate * layer.out_dim))
            n_remove = min(n_remove, layer.out_dim - 1)
            if n_remove > 0:
                plan[i] = n_remove
        if not plan:
            break
        snapshot = copy.deepcopy(net.layers)
        for i, n_remove in plan.items():
            norms = incoming_l2(net.layers[i])
            victims = np.argsort(norms, kind="stable")[:n_remove]
            _remove_units(net, i, np.sort(victims))
        if cfg.final_fine_tune_epochs > 0:
            nn.train_sgd(net, train, SgdConfig(learning_rate=sgd.learning_rate,
                                               momentum=sgd.momentum,
                                               batch_size=sgd.batch_size,
                                               epochs=cfg.final_fine_tune_epochs),
                         shuffle_rng)
        acc = nn.evaluate(net, val)
        if peak_accuracy - acc > cfg.accuracy_budget:
            net.layers = snapshot
            trace.reverted = True
            break
        trace.steps.append(PruneStep(removed=plan, params_after=weight_param_count(net),
                                     val_accuracy=acc))
    return trace


# ---------------------------------------------------------------------------
# End-to-end pipeline
# ---------------------------------------------------------------------------


@dataclass
class CgapResult:
    net: Network
    seed_widths: list[int]
    peak_widths: list[int]
    final_widths: list[int]
    seed_params: int
    peak_params: int
    final_params: int
    baseline_params: int
    growth_events: list[GrowthEvent]
    prune_trace: PruneTrace
    val_trace: list[dict]
    final_val_accuracy: float

    def to_json_dict(self) -> dict:
        return {"seed_widths": self.seed_widths, "peak_widths": self.peak_widths,
                "final_widths": self.final_widths, "seed_params": self.seed_params,
                "peak_params": self.peak_params, "final_params": self.final_params,
                "baseline_params": self.baseline_params,
                "growth_events": len(self.growth_events),
                "final_val_accuracy": self.final_val_accuracy}


def hidden_widths(net: Network) -> list[int]:
    return [net.layers[i].out_dim for i in _hidden_dense_indices(net)]


def run_cgap(baseline_arch: list[int], train, val, cfg: CgapConfig,
             sgd: SgdConfig, streams: RngStreams) -> CgapResult:
    """Seed -> grow to the peak network -> prune to the compact model."""
    net = build_seed(baseline_arch, cfg.seed_fraction, streams.stream("init"))
    seed_params = weight_param_count(net)
    seed_w = hidden_widths(net)
    baseline_params = sum(a * b for a, b in zip(baseline_arch[:-1], baseline_arch[1:]))
    caps = {i: int(math.ceil(cfg.max_width_factor * w))
            for i, w in zip(_hidden_dense_indices(net), baseline_arch[1:-1])}

    shuffle = streams.stream("shuffle")
    noise_rng = streams.stream("cgap-noise")
    sal_rng = streams.stream("cgap-saliency")
    period_cfg = SgdConfig(learning_rate=sgd.learning_rate, momentum=sgd.momentum,
                           batch_size=sgd.batch_size, epochs=cfg.growth_period)

    val_accs: list[float] = []
    val_trace: list[dict] = []
    events: list[GrowthEvent] = []
    epoch = 0
    for _ in range(cfg.max_growth_events):
        nn.train_sgd(net, train, period_cfg, shuffle)
        epoch += cfg.growth_period
        acc = nn.evaluate(net, val)
        val_accs.append(acc)
        val_trace.append({"phase": "grow", "epoch": epoch, "widths": hidden_widths(net),
                          "params": weight_param_count(net), "val_accuracy": acc})
        if detect_peak(val_accs, cfg):
            break
        if cfg.growth_rate > 0:
            idx = sal_rng.choice(len(train.labels),
                                 size=min(cfg.saliency_batch, len(train.labels)),
                                 replace=False)
            scores = unit_saliency(net, train.images[idx], train.labels[idx])
            events += grow(net, scores, cfg, noise_rng, epoch=epoch, width_caps=caps)

    peak_params = weight_param_count(net)
    peak_w = hidden_widths(net)
    peak_acc = max(val_accs)

    prune_trace = prune_units(net, cfg, train, val, sgd, shuffle, peak_acc)
    if cfg.final_fine_tune_epochs > 0 and prune_trace.steps:
        nn.train_sgd(net, train, SgdConfig(learning_rate=sgd.learning_rate,
                                           momentum=sgd.momentum, batch_size=sgd.batch_size,
                                           epochs=cfg.final_fine_tune_epochs), shuffle)
    final_acc = nn.evaluate(net, val)
    val_trace.append({"phase": "final", "epoch": epoch, "widths": hidden_widths(net),
                      "params": weight_param_count(net), "val_accuracy": final_acc})
    return CgapResult(net=net, seed_widths=seed_w, peak_widths=peak_w,
                      final_widths=hidden_widths(net), seed_params=seed_params,
                      peak_params=peak_params, final_params=weight_param_count(net),
                      baseline_params=baseline_params, growth_events=events,
                      prune_trace=prune_trace, val_trace=val_trace,
                      final_val_accuracy=final_acc)
