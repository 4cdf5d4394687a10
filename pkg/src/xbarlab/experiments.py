"""Experiment configuration, execution and persistence.

One ``ExperimentConfig`` fully determines a run: dataset, architecture,
module configs and a 64-bit master seed from which every labeled random
stream is derived. Re-running the same config on one platform reproduces
the metric CSVs byte for byte.

Artifacts are written atomically (temp file + rename), so a killed run never
leaves a partial record under its final name. ``record.json`` carries the
config snapshot, summary, wall-clock and a sha256 checksum of every other
artifact; wall-clock never leaks into CSVs.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import os
import tempfile
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import cgap as cgap_mod
from . import nn, rsa, smallworld
from .cgap import CgapConfig
from .crossbar import RvwConfig, TimingModel
from .data import Dataset, load_cifar10, load_mnist, synthesize_digits
from .device import DeviceConfig
from .nn import SgdConfig
from .rng import RngStreams, derive_generator
from .rsa import RsaConfig
from .smallworld import PruneRound, SmallWorldConfig, SmallWorldSchedule

SCHEMA_VERSION = 1

EXPERIMENT_KINDS = ("baseline", "rsa", "rvw-compare", "smallworld", "cgap")


class ConfigError(Exception):
    pass


@dataclass
class DatasetSpec:
    kind: str = "synthetic"  # synthetic | mnist | cifar10
    dir: str | None = None
    seed: int = 2024         # corpus seed for the synthetic stand-in
    n_train: int = 60000
    n_test: int = 10000
    train_limit: int | None = None
    test_limit: int | None = None

    def load(self) -> tuple[Dataset, Dataset]:
        if self.kind == "synthetic":
            xi, yi = synthesize_digits(self.n_train, derive_generator(self.seed, "synth-train"))
            xt, yt = synthesize_digits(self.n_test, derive_generator(self.seed, "synth-test"))
            train = Dataset(xi, yi, "synth-train")
            test = Dataset(xt, yt, "synth-test")
        elif self.kind == "mnist":
            if not self.dir:
                raise ConfigError("mnist dataset needs a directory")
            train, test = load_mnist(self.dir)
        elif self.kind == "cifar10":
            if not self.dir:
                raise ConfigError("cifar10 dataset needs a directory")
            train, test = load_cifar10(self.dir, subset=self.train_limit)
        else:
            raise ConfigError(f"unknown dataset kind {self.kind!r}")
        if self.train_limit and self.kind != "cifar10":
            train = train.take(self.train_limit)
        if self.test_limit:
            test = test.take(self.test_limit)
        return train, test


@dataclass
class ExperimentConfig:
    kind: str = "baseline"
    arch: list[int] = field(default_factory=lambda: [784, 300, 100, 10])
    master_seed: int = 1
    out_dir: str | None = None
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    sgd: SgdConfig = field(default_factory=SgdConfig)
    device: DeviceConfig = field(default_factory=DeviceConfig)
    rsa: RsaConfig = field(default_factory=RsaConfig)
    rvw: RvwConfig = field(default_factory=RvwConfig)
    timing: TimingModel = field(default_factory=TimingModel)
    smallworld: SmallWorldConfig = field(default_factory=lambda: SmallWorldConfig(target_density=0.5))
    sw_schedule: SmallWorldSchedule | None = None  # None: derived from arch at run time
    cgap: CgapConfig = field(default_factory=CgapConfig)
    val_fraction: float = 0.1  # carved off the training set where needed

    def __post_init__(self):
        if self.kind not in EXPERIMENT_KINDS:
            raise ConfigError(f"unknown experiment kind {self.kind!r}; "
                              f"expected one of {EXPERIMENT_KINDS}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["schema_version"] = SCHEMA_VERSION
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        version = d.pop("schema_version", None)
        if version != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config schema_version {version!r}")
        for key, typ in (("dataset", DatasetSpec), ("sgd", SgdConfig),
                         ("device", DeviceConfig), ("rvw", RvwConfig),
                         ("timing", TimingModel), ("cgap", CgapConfig)):
            if key in d and isinstance(d[key], dict):
                d[key] = typ(**d[key])
        if isinstance(d.get("rsa"), dict):
            r = dict(d["rsa"])
            if isinstance(r.get("optimizer"), dict):
                r["optimizer"] = SgdConfig(**r["optimizer"])
            d["rsa"] = RsaConfig(**r)
        if isinstance(d.get("smallworld"), dict):
            d["smallworld"] = SmallWorldConfig(**d["smallworld"])
        if isinstance(d.get("sw_schedule"), dict):
            s = dict(d["sw_schedule"])
            s["rounds"] = [PruneRound(**r) if isinstance(r, dict) else r
                           for r in s.get("rounds", [])]
            d["sw_schedule"] = SmallWorldSchedule(**s)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# Atomic persistence
# ---------------------------------------------------------------------------


def atomic_write_text(path: Path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "w") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def rows_to_csv_text(rows: list[dict]) -> str:
    if not rows:
        return ""
    buf = io.StringIO()
    writer = csv.DictWriter(buf, fieldnames=list(rows[0].keys()), lineterminator="\n")
    writer.writeheader()
    for row in rows:
        writer.writerow(row)
    return buf.getvalue()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode("utf-8")).hexdigest()


# ---------------------------------------------------------------------------
# RunRecord
# ---------------------------------------------------------------------------


@dataclass
class RunRecord:
    config: dict
    metrics: list[dict]
    series: dict[str, list[dict]]
    summary: dict
    wall_clock_seconds: float
    artifact_checksums: dict[str, str] = field(default_factory=dict)

    def to_json_dict(self) -> dict:
        return {"schema_version": SCHEMA_VERSION, "config": self.config,
                "summary": self.summary, "series": self.series,
                "wall_clock_seconds": self.wall_clock_seconds,
                "artifact_checksums": self.artifact_checksums}

    @classmethod
    def load(cls, path) -> "RunRecord":
        d = json.loads(Path(path).read_text())
        if d.get("schema_version") != SCHEMA_VERSION:
            raise ConfigError(f"unsupported record schema_version {d.get('schema_version')!r}")
        return cls(config=d["config"], metrics=[], series=d["series"], summary=d["summary"],
                   wall_clock_seconds=d["wall_clock_seconds"],
                   artifact_checksums=d.get("artifact_checksums", {}))


def distortion_series(ideal_net: nn.Network, hybrid: nn.Network, bins: int = 64) -> list[dict]:
    """Pooled pre/post weight histograms of a programmed model (fig2 analog)."""
    pre = np.concatenate([l.w.ravel() for _, l in ideal_net.weight_layers()])
    post = np.concatenate([l.xbar.effective_weights().ravel()
                           for l in hybrid.layers if isinstance(l, rsa.HybridDense)])
    lo = min(pre.min(), post.min())
    hi = max(pre.max(), post.max())
    edges = np.linspace(lo, hi, bins + 1)
    pre_c, _ = np.histogram(pre, bins=edges)
    post_c, _ = np.histogram(post, bins=edges)
    centers = 0.5 * (edges[:-1] + edges[1:])
    return [{"bin_center": float(c), "count_pre": int(a), "count_post": int(b)}
            for c, a, b in zip(centers, pre_c, post_c)]


# ---------------------------------------------------------------------------
# Experiment dispatch
# ---------------------------------------------------------------------------


def _run_baseline(cfg: ExperimentConfig, train, test, streams):
    net = nn.mlp(cfg.arch, streams.stream("init"), rng_label="baseline")
    metrics = nn.train_sgd(net, train, cfg.sgd, streams.stream("shuffle"), val=test)
    summary = {"final_accuracy": nn.evaluate(net, test),
               "weight_params": smallworld.dense_param_count(net),
               "epochs": cfg.sgd.epochs}
    return net, metrics, {}, summary


def _run_rsa(cfg: ExperimentConfig, train, test, streams):
    net = nn.mlp(cfg.arch, streams.stream("init"), rng_label="rsa")
    nn.train_sgd(net, train, cfg.sgd, streams.stream("shuffle"))
    hybrid, _ = rsa.hybridize(net, cfg.device, cfg.rsa, streams)
    faulted = nn.evaluate(rsa.frozen_view(hybrid), test)
    trace = rsa.adapt(hybrid, train, test, cfg.rsa, streams, cfg.timing)
    metrics = [{"epoch": r["epoch"], "accuracy": r["accuracy"],
                "modeled_time": r["device_seconds"]} for r in trace.rows]
    series = {"fig2": distortion_series(net, hybrid)}
    summary = {"ideal_accuracy": nn.evaluate(net, test), "faulted_accuracy": faulted,
               "rsa_accuracy": trace.best_accuracy,
               "adaptation_reads": trace.adaptation_reads,
               "adaptation_device_seconds": trace.device_seconds}
    return hybrid, metrics, series, summary


def _run_rvw_compare(cfg: ExperimentConfig, train, test, streams):
    net = nn.mlp(cfg.arch, streams.stream("init"), rng_label="compare")
    nn.train_sgd(net, train, cfg.sgd, streams.stream("shuffle"))
    result = rsa.compare_rsa_vs_rvw(net, train, test, cfg.device, cfg.rsa, cfg.rvw,
                                    streams, cfg.timing)
    metrics = [{"arm": "rsa", "modeled_time": r["device_seconds"], "accuracy": r["accuracy"]}
               for r in result.rsa_trace.rows]
    metrics.append({"arm": "rvw", "modeled_time": result.rvw_time,
                    "accuracy": result.rvw_accuracy})
    series = {"fig4": metrics}
    summary = result.to_json_dict()
    return net, metrics, series, summary


def default_sw_schedule(n_weight_layers: int) -> SmallWorldSchedule:
    """Four rounds at theta 0.5; the classifier layer is pruned gently."""
    theta = [0.5] * (n_weight_layers - 1) + [0.12] if n_weight_layers > 1 else 0.5
    return SmallWorldSchedule(warmup_epochs=4,
                              rounds=[PruneRound(theta=theta, fine_tune_epochs=1)] * 4,
                              final_epochs=2)


def _run_smallworld(cfg: ExperimentConfig, train, test, streams):
    schedule = cfg.sw_schedule or default_sw_schedule(len(cfg.arch) - 1)
    result = smallworld.smallworld_pipeline(cfg.arch, train, test, cfg.smallworld,
                                            schedule, streams, cfg.sgd)
    series = {"fig7": [{"theta": r["theta"], "layer": r["layer"], "L": r["L"], "C": r["C"]}
                       for r in result.trace]}
    summary = {"final_accuracy": result.final_accuracy,
               "weight_params": result.weight_params,
               "dense_weight_params": result.dense_weight_params,
               "parameter_reduction": result.parameter_reduction}
    return result.net, result.trace, series, summary


def _run_cgap(cfg: ExperimentConfig, train, test, streams):
    n_val = max(1, int(round(cfg.val_fraction * len(train.labels))))
    fit, val = train.split(len(train.labels) - n_val)
    result = cgap_mod.run_cgap(cfg.arch, fit, val, cfg.cgap, cfg.sgd, streams)
    metrics = [{"phase": r["phase"], "epoch": r["epoch"],
                "widths": "x".join(str(w) for w in r["widths"]),
                "params": r["params"], "val_accuracy": r["val_accuracy"]}
               for r in result.val_trace]
    series = {"fig9": [{"layer": i, "seed_width": s, "peak_width": p, "final_width": f}
                       for i, (s, p, f) in enumerate(zip(result.seed_widths,
                                                         result.peak_widths,
                                                         result.final_widths))]}
    summary = result.to_json_dict()
    summary["test_accuracy"] = nn.evaluate(result.net, test)
    return result.net, metrics, series, summary


def run_experiment(cfg: ExperimentConfig, return_net: bool = False):
    """Dispatch one experiment; optionally persist record, CSVs, checkpoint."""
    start = time.monotonic()
    streams = RngStreams(cfg.master_seed)
    train, test = cfg.dataset.load()
    runner = {"baseline": _run_baseline, "rsa": _run_rsa, "rvw-compare": _run_rvw_compare,
              "smallworld": _run_smallworld, "cgap": _run_cgap}[cfg.kind]
    net, metrics, series, summary = runner(cfg, train, test, streams)
    record = RunRecord(config=cfg.to_dict(), metrics=metrics, series=series,
                       summary=summary, wall_clock_seconds=time.monotonic() - start)
    if cfg.out_dir:
        _persist(record, net, Path(cfg.out_dir))
    return (record, net) if return_net else record


def _persist(record: RunRecord, net, out_dir: Path) -> None:
    from . import checkpoint as ckpt

    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts: dict[str, str] = {}
    csv_text = rows_to_csv_text(record.metrics)
    atomic_write_text(out_dir / "metrics.csv", csv_text)
    artifacts["metrics.csv"] = sha256_text(csv_text)
    for name, rows in record.series.items():
        text = rows_to_csv_text(rows)
        atomic_write_text(out_dir / f"{name}.csv", text)
        artifacts[f"{name}.csv"] = sha256_text(text)
    is_hybrid = any(isinstance(l, rsa.HybridDense) for l in net.layers)
    ckpt_name = "model-hybrid.json" if is_hybrid else "model.json"
    text = json.dumps(ckpt.hybrid_to_dict(net) if is_hybrid else ckpt.network_to_dict(net))
    atomic_write_text(out_dir / ckpt_name, text)
    artifacts[ckpt_name] = sha256_text(text)
    record.artifact_checksums = artifacts
    atomic_write_text(out_dir / "record.json", json.dumps(record.to_json_dict(), indent=2))
