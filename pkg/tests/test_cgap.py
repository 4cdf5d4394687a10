"""Growth-and-pruning: seed sizing, saliency, splits, peak rule, unit pruning."""

import numpy as np
import pytest

from xbarlab import cgap, nn
from xbarlab.cgap import CgapConfig
from xbarlab.data import Dataset
from xbarlab.rng import RngStreams, derive_generator


def toy_dataset(seed, n=500, dim=12, classes=4):
    rng = derive_generator(seed, "data")
    x = rng.random((n, dim)).astype(np.float32)
    centers = rng.random((classes, dim))
    y = np.argmin(((x[:, None] - centers[None]) ** 2).sum(-1), axis=1)
    return Dataset(x[: n - 120], y[: n - 120]), Dataset(x[n - 120 :], y[n - 120 :])


# ---------------------------------------------------------------------------
# build_seed
# ---------------------------------------------------------------------------


def test_seed_arch_examples():
    assert cgap.seed_arch([784, 300, 100, 10], 0.1) == [784, 30, 10, 10]
    assert cgap.seed_arch([784, 300, 100, 10], 1.0) == [784, 300, 100, 10]
    assert cgap.seed_arch([784, 300, 100, 10], 0.001) == [784, 1, 1, 10]


def test_seed_fraction_validation():
    with pytest.raises(cgap.GrowthError):
        cgap.seed_arch([784, 300, 10], 0.0)


def test_build_seed_network_shapes():
    net = cgap.build_seed([784, 300, 100, 10], 0.05, derive_generator(0, "init"))
    assert cgap.hidden_widths(net) == [15, 5]
    out = nn.forward(net, np.zeros((2, 784)))[-1]
    assert out.shape == (2, 10)


# ---------------------------------------------------------------------------
# unit_saliency
# ---------------------------------------------------------------------------


def test_saliency_dead_unit_scores_zero():
    rng = derive_generator(1, "init")
    net = nn.mlp([6, 4, 3], rng)
    net.layers[0].w[:, 1] = 0.0
    net.layers[0].b[1] = 0.0
    x = rng.random((8, 6))
    y = rng.integers(0, 3, 8)
    scores = cgap.unit_saliency(net, x, y)
    assert scores[0][1] == 0.0


def test_saliency_duplicated_units_score_identically():
    rng = derive_generator(2, "init")
    net = nn.mlp([6, 4, 3], rng)
    l0, l2 = net.layers[0], net.layers[2]
    l0.w[:, 2] = l0.w[:, 0]
    l0.b[2] = l0.b[0]
    l2.w[2] = l2.w[0]
    x = rng.random((10, 6))
    y = rng.integers(0, 3, 10)
    scores = cgap.unit_saliency(net, x, y)
    assert scores[0][0] == pytest.approx(scores[0][2], rel=1e-12)


def test_saliency_matches_zeroing_oracle_ranking():
    # at small weight scale, |grad * activation| ranks units like the exact
    # loss change from zeroing each unit's activation
    rng = derive_generator(3, "init")
    net = nn.mlp([5, 2, 3], rng)
    for _, layer in net.weight_layers():
        layer.w *= 0.05
    x = rng.random((64, 5))
    y = rng.integers(0, 3, 64)
    scores = cgap.unit_saliency(net, x, y)[0]

    base = nn.loss_on_batch(net, x, y)
    deltas = []
    for u in range(2):
        saved_w = net.layers[2].w[u].copy()  # cut the unit's outgoing weights
        net.layers[2].w[u] = 0.0
        deltas.append(abs(nn.loss_on_batch(net, x, y) - base))
        net.layers[2].w[u] = saved_w
    assert np.argsort(scores).tolist() == np.argsort(deltas).tolist()


def test_saliency_conv_channels():
    rng = derive_generator(4, "init")
    net = nn.Network([
        nn.Conv2d(1, 3, 3, rng=rng), nn.ReLU(), nn.MaxPool(2),
        nn.Dense(3 * 3 * 3, 4, rng=rng),
    ])
    x = rng.random((6, 8, 8))
    y = rng.integers(0, 4, 6)
    scores = cgap.unit_saliency(net, x, y)
    assert scores[0].shape == (3,)
    assert (scores[0] >= 0).all()


# ---------------------------------------------------------------------------
# grow
# ---------------------------------------------------------------------------


def test_grow_zero_noise_preserves_function():
    rng = derive_generator(5, "init")
    net = nn.mlp([10, 6, 5, 3], rng)
    x = rng.random((40, 10))
    before = nn.forward(net, x)[-1]
    scores = cgap.unit_saliency(net, x, rng.integers(0, 3, 40))
    cfg = CgapConfig(growth_rate=0.5, noise_delta=0.0)
    events = cgap.grow(net, scores, cfg, derive_generator(5, "noise"))
    assert len(events) == 3 + 3  # ceil(0.5*6) + ceil(0.5*5)
    after = nn.forward(net, x)[-1]
    assert np.abs(after - before).max() <= 1e-9


def test_grow_param_counts_per_event():
    rng = derive_generator(6, "init")
    net = nn.mlp([7, 3, 4], rng)  # one hidden layer, width 3
    x = rng.random((16, 7))
    scores = cgap.unit_saliency(net, x, rng.integers(0, 4, 16))
    cfg = CgapConfig(growth_rate=0.34, noise_delta=0.01)
    events = cgap.grow(net, scores, cfg, derive_generator(6, "noise"))
    assert len(events) == 2  # ceil(0.34 * 3)
    for ev in events:
        assert ev.params_after - ev.params_before == 7 + 4  # in + out per new unit
    assert cgap.hidden_widths(net) == [5]


def test_grow_rate_below_one_unit_is_noop():
    rng = derive_generator(7, "init")
    net = nn.mlp([6, 3, 2], rng)
    w_before = net.layers[0].w.copy()
    scores = {0: np.array([0.3, 0.2, 0.1])}
    events = cgap.grow(net, scores, CgapConfig(growth_rate=0.2), derive_generator(7, "n"))
    assert events == []
    assert np.array_equal(net.layers[0].w, w_before)


def test_grow_respects_width_cap():
    rng = derive_generator(8, "init")
    net = nn.mlp([6, 4, 2], rng)
    scores = {0: np.arange(4.0)}
    events = cgap.grow(net, scores, CgapConfig(growth_rate=1.0),
                       derive_generator(8, "n"), width_caps={0: 4})
    assert events == []
    assert cgap.hidden_widths(net) == [4]


def test_grow_splits_top_saliency_parent():
    rng = derive_generator(9, "init")
    net = nn.mlp([5, 3, 2], rng)
    scores = {0: np.array([0.1, 5.0, 0.2])}
    events = cgap.grow(net, scores, CgapConfig(growth_rate=0.34, noise_delta=0.0),
                       derive_generator(9, "n"))
    assert events[0].parent_unit == 1
    assert np.array_equal(net.layers[0].w[:, 3], net.layers[0].w[:, 1])


# ---------------------------------------------------------------------------
# detect_peak
# ---------------------------------------------------------------------------


def test_detect_peak_improving_trace():
    cfg = CgapConfig(peak_eps=0.001, peak_patience=2)
    assert not cgap.detect_peak([0.5, 0.6, 0.7, 0.8], cfg)


def test_detect_peak_flat_trace():
    cfg = CgapConfig(peak_eps=0.001, peak_patience=3)
    assert cgap.detect_peak([0.9, 0.9, 0.9, 0.9], cfg)


def test_detect_peak_hand_example():
    cfg = CgapConfig(peak_eps=0.1 / 100, peak_patience=2)
    trace = [0.90, 0.91, 0.9105, 0.9108]  # accuracy fractions, eps = 0.1%
    assert cgap.detect_peak(trace, cfg)


# ---------------------------------------------------------------------------
# prune_units
# ---------------------------------------------------------------------------


def test_prune_removes_zero_unit_without_function_change():
    rng = derive_generator(10, "init")
    net = nn.mlp([8, 5, 3], rng)
    net.layers[0].w[:, 4] = 0.0
    net.layers[0].b[4] = 0.0
    x = rng.random((20, 8))
    before = nn.forward(net, x)[-1]
    train, val = toy_dataset(10, dim=8, classes=3)
    cfg = CgapConfig(prune_rate=0.2, accuracy_budget=1.0, final_fine_tune_epochs=0)
    # one step: removes exactly the zero-norm unit
    trace = cgap.prune_units(net, cfg, train, val, nn.SgdConfig(epochs=0),
                             derive_generator(10, "s"), peak_accuracy=0.0)
    assert trace.steps[0].removed == {0: 1}
    assert cgap.hidden_widths(net)[0] < 5
    after = nn.forward(net, x)[-1]
    assert np.abs(after[:, :] - before[:, :]).max() <= 1e-12


def test_prune_zero_budget_reverts_on_any_drop():
    rng = derive_generator(11, "init")
    train, val = toy_dataset(11)
    net = nn.mlp([12, 8, 4], rng)
    nn.train_sgd(net, train, nn.SgdConfig(epochs=8, batch_size=32),
                 derive_generator(11, "sh"))
    peak = nn.evaluate(net, val)
    widths_before = cgap.hidden_widths(net)
    cfg = CgapConfig(prune_rate=0.5, accuracy_budget=0.0, final_fine_tune_epochs=0)
    trace = cgap.prune_units(net, cfg, train, val, nn.SgdConfig(epochs=0),
                             derive_generator(11, "s"), peak_accuracy=peak)
    if trace.reverted and not trace.steps:
        assert cgap.hidden_widths(net) == widths_before


def test_prune_monotone_capacity():
    rng = derive_generator(12, "init")
    train, val = toy_dataset(12)
    net = nn.mlp([12, 10, 4], rng)
    cfg = CgapConfig(prune_rate=0.25, accuracy_budget=1.0, final_fine_tune_epochs=0)
    trace = cgap.prune_units(net, cfg, train, val, nn.SgdConfig(epochs=0),
                             derive_generator(12, "s"), peak_accuracy=0.0)
    params = [s.params_after for s in trace.steps]
    assert params == sorted(params, reverse=True)
    assert len(params) >= 2


# ---------------------------------------------------------------------------
# run_cgap
# ---------------------------------------------------------------------------


def test_run_cgap_growth_disabled_is_plain_training():
    train, val = toy_dataset(13)
    cfg = CgapConfig(seed_fraction=0.5, growth_rate=0.0, prune_rate=0.0,
                     growth_period=1, peak_patience=2, peak_eps=0.002,
                     max_growth_events=10, final_fine_tune_epochs=0)
    streams = RngStreams(91)
    result = cgap.run_cgap([12, 8, 4], train, val, cfg,
                           nn.SgdConfig(batch_size=32, epochs=0), streams)
    assert result.seed_widths == result.peak_widths == result.final_widths == [4]
    assert result.growth_events == []
    assert result.final_params == result.seed_params


def test_run_cgap_grows_then_prunes():
    train, val = toy_dataset(14, n=700, dim=16, classes=4)
    cfg = CgapConfig(seed_fraction=0.15, growth_rate=0.4, growth_period=1,
                     peak_patience=2, peak_eps=0.002, prune_rate=0.15,
                     accuracy_budget=0.03, max_growth_events=12,
                     noise_delta=0.005, final_fine_tune_epochs=1)
    streams = RngStreams(92)
    result = cgap.run_cgap([16, 20, 4], train, val, cfg,
                           nn.SgdConfig(learning_rate=0.15, batch_size=32, epochs=0), streams)
    assert result.peak_params > result.seed_params  # growth happened
    assert result.final_params <= result.peak_params
    # events log capacity strictly increasing through the growth phase
    for ev in result.growth_events:
        assert ev.params_after > ev.params_before
    assert result.val_trace[-1]["phase"] == "final"


def test_run_cgap_learned_widths_track_task_difficulty(corpus, capsys):
    # same config and seed on an easy corpus and a label-noised (harder) copy;
    # the learned widths are compared, qualitative trend reported either way
    train, _ = corpus
    easy = train.take(8000)
    noisy_labels = easy.labels.copy()
    flip_rng = derive_generator(93, "flip")
    flips = flip_rng.random(len(noisy_labels)) < 0.25
    noisy_labels[flips] = flip_rng.integers(0, 10, int(flips.sum()))
    hard = Dataset(easy.images, noisy_labels, "synth-noisy")

    cfg = CgapConfig(seed_fraction=0.05, growth_rate=0.4, growth_period=1,
                     peak_patience=2, peak_eps=0.001, prune_rate=0.15,
                     accuracy_budget=0.01, max_growth_events=8,
                     max_width_factor=1.0, final_fine_tune_epochs=1)
    sgd = nn.SgdConfig(learning_rate=0.1, momentum=0.9, batch_size=128, epochs=0)
    results = {}
    for name, ds in (("easy", easy), ("hard", hard)):
        fit, val = ds.split(7000)
        results[name] = cgap.run_cgap([784, 100, 40, 10], fit, val, cfg, sgd, RngStreams(93))
    easy_w = results["easy"].final_widths
    hard_w = results["hard"].final_widths
    dominated = all(h >= e for e, h in zip(easy_w, hard_w))
    with capsys.disabled():
        print(f"\n[cgap difficulty check] easy widths {easy_w}, "
              f"noisy-label widths {hard_w}, "
              f"harder >= easy on every layer: {dominated}")
    assert all(w >= 1 for w in easy_w + hard_w)
