"""Command-line interface.

Subcommands map onto the experiment kinds plus a few direct device-level
utilities. Every command accepts ``--config`` (experiment JSON), ``--seed``,
``--out`` and ``--dataset-dir`` overrides. On success the exit code is 0 and
a summary JSON is printed to stdout; on failure the exit code is nonzero and
a machine-readable error JSON goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import nn
from .checkpoint import load_network, save_network
from .device import inject_faults
from .experiments import ExperimentConfig, RunRecord, run_experiment
from .rng import RngStreams


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # machine-readable usage errors
        print(json.dumps({"error": "usage", "message": message}), file=sys.stderr)
        raise SystemExit(2)


def _common_flags(p: argparse.ArgumentParser):
    p.add_argument("--config", type=Path, help="experiment config JSON")
    p.add_argument("--seed", type=int, help="override master_seed")
    p.add_argument("--out", type=Path, help="output directory")
    p.add_argument("--dataset-dir", type=Path, help="dataset directory (IDX or CIFAR bins)")


def _load_config(args, kind: str) -> ExperimentConfig:
    if args.config:
        cfg = ExperimentConfig.from_json(args.config)
        if cfg.kind != kind:
            cfg.kind = kind
    else:
        cfg = ExperimentConfig(kind=kind)
    if args.seed is not None:
        cfg.master_seed = args.seed
    if args.out is not None:
        cfg.out_dir = str(args.out)
    if getattr(args, "dataset_dir", None):
        cfg.dataset.dir = str(args.dataset_dir)
        if cfg.dataset.kind == "synthetic":
            cfg.dataset.kind = "mnist"
    return cfg


def _emit(obj) -> None:
    print(json.dumps(obj, indent=2, default=float))


def _run_kind(args, kind: str) -> None:
    cfg = _load_config(args, kind)
    record = run_experiment(cfg)
    _emit({"kind": kind, "summary": record.summary,
           "out_dir": cfg.out_dir, "wall_clock_seconds": record.wall_clock_seconds})


# -- device-level utilities --------------------------------------------------


def _cmd_program(args) -> None:
    from .rsa import hybridize

    cfg = _load_config(args, "rsa")
    if not args.model:
        raise CliError("program needs --model (a network checkpoint)")
    net = load_network(args.model)
    streams = RngStreams(cfg.master_seed)
    hybrid, arrays = hybridize(net, cfg.device, cfg.rsa, streams,
                               with_overlay=not args.no_overlay)
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    from .checkpoint import save_hybrid
    from .experiments import distortion_series, rows_to_csv_text, atomic_write_text

    save_hybrid(out / "model-hybrid.json", hybrid)
    atomic_write_text(out / "fig2.csv", rows_to_csv_text(distortion_series(net, hybrid)))
    _emit({"programmed_arrays": len(arrays),
           "write_pulses": sum(a.write_pulse_count for a in arrays),
           "out_dir": str(out)})


def _cmd_inject_faults(args) -> None:
    cfg = _load_config(args, "rsa")
    streams = RngStreams(cfg.master_seed)
    fm = inject_faults(args.rows, args.cols, cfg.device, streams.stream("faults"))
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    path = out / "faults.csv"
    fm.to_csv(path)
    _emit({"rows": args.rows, "cols": args.cols, **fm.counts(), "csv": str(path)})


def _cmd_rvw(args) -> None:
    from .crossbar import CrossbarArray
    from .device import WeightScale, inject_faults as inject

    cfg = _load_config(args, "rsa")
    if not args.model:
        raise CliError("rvw needs --model (a network checkpoint)")
    net = load_network(args.model)
    streams = RngStreams(cfg.master_seed)
    reports = []
    total_pulses = 0
    for i, (_, layer) in enumerate(net.weight_layers()):
        faults = inject(layer.w.shape[0], layer.w.shape[1], cfg.device,
                        streams.stream(f"faults/{i}"))
        xbar = CrossbarArray(layer.w.shape[0], layer.w.shape[1], cfg.device,
                             WeightScale.for_weights(layer.w), faults)
        report = xbar.program_rvw(layer.w, cfg.rvw, streams.stream(f"write/rvw/{i}"))
        reports.append(report.to_json_dict())
        total_pulses += report.pulses_total
    rvw_time = total_pulses * (cfg.timing.t_write + cfg.timing.t_read)
    _emit({"layers": reports, "pulses_total": total_pulses,
           "modeled_seconds": rvw_time})


def _cmd_eval(args) -> None:
    cfg = _load_config(args, "baseline")
    if not args.model:
        raise CliError("eval needs --model (a network checkpoint)")
    net = load_network(args.model)
    _, test = cfg.dataset.load()
    _emit({"accuracy": nn.evaluate(net, test), "test_size": len(test)})


def _cmd_train(args) -> None:
    cfg = _load_config(args, "baseline")
    record, net = run_experiment(cfg, return_net=True)
    if args.model_out:
        save_network(args.model_out, net)
    _emit({"kind": "baseline", "summary": record.summary, "out_dir": cfg.out_dir,
           "model_out": str(args.model_out) if args.model_out else None})


def _cmd_export_plot(args) -> None:
    from .report import export_figure

    record = RunRecord.load(args.record)
    paths = export_figure(record, args.figure, args.out or Path("."))
    _emit({"figure": args.figure, **paths})


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="xbarlab",
                     description="RRAM crossbar co-design experiments: sparse "
                                 "adaptation, small-world pruning, growth-and-pruning")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the dense baseline model")
    _common_flags(p)
    p.add_argument("--model-out", type=Path, help="also save the trained checkpoint here")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("program", help="program a checkpoint onto faulty crossbars")
    _common_flags(p)
    p.add_argument("--model", type=Path, help="network checkpoint to program")
    p.add_argument("--no-overlay", action="store_true", help="skip RSA cell selection")
    p.set_defaults(func=_cmd_program)

    p = sub.add_parser("inject-faults", help="sample a stuck-at fault map to CSV")
    _common_flags(p)
    p.add_argument("--rows", type=int, required=True)
    p.add_argument("--cols", type=int, required=True)
    p.set_defaults(func=_cmd_inject_faults)

    p = sub.add_parser("rvw", help="Read-Verify-Write programming report for a checkpoint")
    _common_flags(p)
    p.add_argument("--model", type=Path, help="network checkpoint to program")
    p.set_defaults(func=_cmd_rvw)

    p = sub.add_parser("adapt-rsa", help="run the RSA adaptation experiment")
    _common_flags(p)
    p.set_defaults(func=lambda a: _run_kind(a, "rsa"))

    p = sub.add_parser("compare", help="race RSA adaptation against R-V-W")
    _common_flags(p)
    p.set_defaults(func=lambda a: _run_kind(a, "rvw-compare"))

    p = sub.add_parser("smallworld", help="small-world pruning pipeline")
    _common_flags(p)
    p.set_defaults(func=lambda a: _run_kind(a, "smallworld"))

    p = sub.add_parser("cgap", help="continuous growth-and-pruning run")
    _common_flags(p)
    p.set_defaults(func=lambda a: _run_kind(a, "cgap"))

    p = sub.add_parser("eval", help="evaluate a checkpoint on the test set")
    _common_flags(p)
    p.add_argument("--model", type=Path)
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("export-plot", help="export figure CSV + PNG from a run record")
    p.add_argument("--record", type=Path, required=True, help="record.json of a run")
    p.add_argument("--figure", required=True, choices=["fig2", "fig4", "fig7", "fig9"])
    p.add_argument("--out", type=Path)
    p.set_defaults(func=_cmd_export_plot)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        args.func(args)
        return 0
    except SystemExit:
        raise
    except Exception as e:  # noqa: BLE001 - single reporting point for the CLI
        print(json.dumps({"error": type(e).__name__, "message": str(e)}), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
