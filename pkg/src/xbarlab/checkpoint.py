"""Versioned JSON checkpoints for networks and programmed crossbar models.

Arrays are stored as base64-encoded little-endian bytes (float64 weights,
uint8 masks and fault codes). Loaders reject containers whose
``format_version`` they do not understand.
"""

from __future__ import annotations

import base64
import json
from pathlib import Path

import numpy as np

from .crossbar import CrossbarArray
from .device import DeviceConfig, FaultMap, WeightScale
from .nn import Conv2d, Dense, MaxPool, Network, ReLU
from .rsa import HybridDense, RsaSelection

FORMAT_VERSION = 1


class CheckpointError(Exception):
    pass


def _enc(arr: np.ndarray, dtype: str) -> str:
    return base64.b64encode(np.ascontiguousarray(arr, dtype=dtype).tobytes()).decode("ascii")


def _dec(s: str, dtype: str, shape) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"))
    arr = np.frombuffer(raw, dtype=np.dtype(dtype).newbyteorder("<")).astype(dtype)
    expect = int(np.prod(shape))
    if arr.size != expect:
        raise CheckpointError(f"array payload holds {arr.size} items, expected {expect}")
    return arr.reshape(shape)


def _mask_dict(layer) -> dict:
    return {"trainable": _enc(layer.trainable, "uint8"),
            "sparsity": _enc(layer.sparsity, "uint8")}


def _load_masks(layer, d: dict, shape) -> None:
    layer.trainable = _dec(d["trainable"], "uint8", shape).astype(np.float64)
    layer.sparsity = _dec(d["sparsity"], "uint8", shape).astype(np.float64)


# ---------------------------------------------------------------------------
# Network checkpoints
# ---------------------------------------------------------------------------


def network_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, Dense):
            layers.append({"kind": "dense", "in": layer.in_dim, "out": layer.out_dim,
                           "w": _enc(layer.w, "<f8"), "b": _enc(layer.b, "<f8"),
                           **_mask_dict(layer)})
        elif isinstance(layer, Conv2d):
            layers.append({"kind": "conv2d", "in_ch": layer.in_ch, "out_ch": layer.out_ch,
                           "k": layer.k, "stride": layer.stride,
                           "w": _enc(layer.w, "<f8"), "b": _enc(layer.b, "<f8"),
                           **_mask_dict(layer)})
        elif isinstance(layer, MaxPool):
            layers.append({"kind": "maxpool", "k": layer.k})
        elif isinstance(layer, ReLU):
            layers.append({"kind": "relu"})
        else:
            raise CheckpointError(f"cannot checkpoint layer kind {layer.kind!r}")
    return {"format_version": FORMAT_VERSION, "rng_label": net.rng_label, "layers": layers}


def network_from_dict(d: dict) -> Network:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    layers = []
    for spec in d["layers"]:
        kind = spec["kind"]
        if kind == "dense":
            shape = (spec["in"], spec["out"])
            layer = Dense(*shape, weights=_dec(spec["w"], "<f8", shape),
                          bias=_dec(spec["b"], "<f8", (spec["out"],)))
            _load_masks(layer, spec, shape)
            layers.append(layer)
        elif kind == "conv2d":
            shape = (spec["k"] * spec["k"] * spec["in_ch"], spec["out_ch"])
            layer = Conv2d(spec["in_ch"], spec["out_ch"], spec["k"], spec["stride"],
                           weights=_dec(spec["w"], "<f8", shape))
            layer.b = _dec(spec["b"], "<f8", (spec["out_ch"],))
            _load_masks(layer, spec, shape)
            layers.append(layer)
        elif kind == "maxpool":
            layers.append(MaxPool(spec["k"]))
        elif kind == "relu":
            layers.append(ReLU())
        else:
            raise CheckpointError(f"unknown layer kind {kind!r}")
    return Network(layers, rng_label=d.get("rng_label", "net"))


def save_network(path, net: Network) -> None:
    Path(path).write_text(json.dumps(network_to_dict(net)))


def load_network(path) -> Network:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not valid JSON ({e})") from e
    return network_from_dict(d)


# ---------------------------------------------------------------------------
# Programmed crossbar models (hybrid networks)
# ---------------------------------------------------------------------------


def _xbar_to_dict(x: CrossbarArray) -> dict:
    return {"rows": x.rows, "cols": x.cols,
            "device": vars(x.device).copy(),
            "scale": {"w_min": x.scale.w_min, "w_max": x.scale.w_max},
            "faults": _enc(x.faults.codes, "uint8"),
            "conductances": _enc(x.conductances, "<f8"),
            "write_pulse_count": x.write_pulse_count,
            "read_count": x.read_count,
            "programmed": x.programmed}


def _xbar_from_dict(d: dict) -> CrossbarArray:
    shape = (d["rows"], d["cols"])
    x = CrossbarArray(*shape, DeviceConfig(**d["device"]),
                      WeightScale(**d["scale"]),
                      FaultMap(_dec(d["faults"], "uint8", shape)))
    x.conductances = _dec(d["conductances"], "<f8", shape)
    x.write_pulse_count = int(d["write_pulse_count"])
    x.read_count = int(d["read_count"])
    x.programmed = bool(d["programmed"])
    return x


def hybrid_to_dict(net: Network) -> dict:
    layers = []
    for layer in net.layers:
        if isinstance(layer, HybridDense):
            spec = {"kind": "hybrid-dense", "xbar": _xbar_to_dict(layer.xbar),
                    "bias": _enc(layer.bias, "<f8")}
            if layer.selection is not None:
                spec["selection"] = {"per_row": layer.selection.per_row,
                                     "columns": _enc(layer.selection.columns, "<i8")}
                spec["values"] = _enc(layer.values, "<f8")
            layers.append(spec)
        elif isinstance(layer, ReLU):
            layers.append({"kind": "relu"})
        else:
            raise CheckpointError(f"cannot checkpoint hybrid layer kind {layer.kind!r}")
    return {"format_version": FORMAT_VERSION, "rng_label": net.rng_label, "layers": layers}


def hybrid_from_dict(d: dict) -> Network:
    version = d.get("format_version")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"unsupported checkpoint format_version {version!r}")
    layers = []
    for spec in d["layers"]:
        if spec["kind"] == "hybrid-dense":
            xbar = _xbar_from_dict(spec["xbar"])
            selection = None
            if "selection" in spec:
                per_row = spec["selection"]["per_row"]
                cols = _dec(spec["selection"]["columns"], "<i8", (xbar.rows, per_row))
                selection = RsaSelection(xbar.rows, xbar.cols, per_row, cols)
            layer = HybridDense(xbar, selection, _dec(spec["bias"], "<f8", (xbar.cols,)))
            if selection is not None:
                layer.values[:] = _dec(spec["values"], "<f8", (selection.count,))
            layers.append(layer)
        elif spec["kind"] == "relu":
            layers.append(ReLU())
        else:
            raise CheckpointError(f"unknown layer kind {spec['kind']!r}")
    return Network(layers, rng_label=d.get("rng_label", "net"))


def save_hybrid(path, net: Network) -> None:
    Path(path).write_text(json.dumps(hybrid_to_dict(net)))


def load_hybrid(path) -> Network:
    try:
        d = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise CheckpointError(f"{path}: not valid JSON ({e})") from e
    return hybrid_from_dict(d)
