"""Checkpoint directories: ``manifest.json`` plus one IBRT blob per tensor.

The manifest is plain JSON::

    {"format_version": 1, "mode": "training" | "lowered", "encoding": ...,
     "input_shape": [...], "layers": [{"type": ..., "spec": {...},
     "blobs": {"weight": "0.weight.ibrt", ...}}, ...], "blobs": [...]}

Loading checks that every listed blob exists, that no unlisted blob is
present, and that each blob's shape matches what the layer spec implies.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import container
from . import tensor as T
from .errors import FormatError, IntegrityError
from .lowering import LoweredGraph, LoweredNode
from .network import LAYER_TYPES, BatchNorm, Conv, Layer, LayerGraph, Neuron
from .neuron import NeuronConfig

FORMAT_VERSION = 1
MANIFEST = "manifest.json"


def _blob_name(i: int, key: str) -> str:
    return f"{i}.{key}.ibrt"


def _expected_shapes(layer_type: str, spec: dict) -> dict[str, tuple]:
    if layer_type == "Conv":
        k = spec["kernel_size"]
        shapes = {"weight": (spec["out_channels"], spec["in_channels"], k, k)}
        if spec["bias"]:
            shapes["bias"] = (spec["out_channels"],)
        return shapes
    if layer_type in ("Linear", "Head"):
        shapes = {"weight": (spec["out_features"], spec["in_features"])}
        if spec["bias"]:
            shapes["bias"] = (spec["out_features"],)
        return shapes
    if layer_type == "BatchNorm":
        c = (spec["channels"],)
        return {"gamma": c, "beta": c, "running_mean": c, "running_var": c}
    return {}


def _tensors_of(layer: Layer) -> dict[str, np.ndarray]:
    out = {k: p.data for k, p in layer.params().items()}
    out.update(layer.buffers())
    return out


def _build_layer(layer_type: str, spec: dict, blobs: dict[str, np.ndarray]) -> Layer:
    cls = LAYER_TYPES.get(layer_type)
    if cls is None:
        raise FormatError(f"unknown layer type {layer_type!r}")
    if layer_type == "Neuron":
        return Neuron(NeuronConfig.from_dict(spec["config"]))
    if layer_type == "Conv":
        layer = Conv(spec["in_channels"], spec["out_channels"], spec["kernel_size"], spec["stride"],
                     spec["padding"], spec["bias"])
    elif layer_type in ("Linear", "Head"):
        layer = cls(spec["in_features"], spec["out_features"], spec["bias"])
    elif layer_type == "BatchNorm":
        layer = BatchNorm(spec["channels"], spec["eps"], spec["momentum"])
    else:
        return cls(**spec)
    for key, arr in blobs.items():
        if key in ("running_mean", "running_var"):
            setattr(layer, key, np.array(arr))
        else:
            setattr(layer, key, T.parameter(np.array(arr), dtype=T.dtype_name(arr.dtype)))
    return layer


def save_checkpoint(graph: LayerGraph | LoweredGraph, path) -> Path:
    """Write ``graph`` into directory ``path`` (created if needed)."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    layers, blob_names = [], []
    if isinstance(graph, LoweredGraph):
        items = [(n.kind, n.spec(), {"weight": n.weight, "bias": n.bias}) for n in graph.nodes]
    else:
        items = [(l.kind, l.spec(), _tensors_of(l)) for l in graph.layers]
    for i, (kind, spec, tensors) in enumerate(items):
        entry = {"type": kind, "spec": spec, "blobs": {}}
        for key, arr in tensors.items():
            if arr is None:
                continue
            name = _blob_name(i, key)
            container.save(d / name, np.asarray(arr))
            entry["blobs"][key] = name
            blob_names.append(name)
        layers.append(entry)
    manifest = {
        "format_version": FORMAT_VERSION,
        "mode": graph.mode,
        "encoding": graph.encoding,
        "input_shape": list(graph.input_shape),
        "timesteps": graph.timesteps,
        "layers": layers,
        "blobs": blob_names,
    }
    if isinstance(graph, LoweredGraph):
        manifest["precision"] = graph.precision
        manifest["architecture"] = graph.architecture
    (d / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return d


def read_manifest(path) -> dict:
    d = Path(path)
    try:
        manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise FormatError(f"{d}: no {MANIFEST}") from exc
    except json.JSONDecodeError as exc:
        raise FormatError(f"{d / MANIFEST}: invalid JSON ({exc})") from exc
    version = manifest.get("format_version")
    if version != FORMAT_VERSION:
        raise FormatError(f"checkpoint format version {version!r}; this build reads {FORMAT_VERSION}")
    for key in ("mode", "layers", "blobs", "input_shape"):
        if key not in manifest:
            raise FormatError(f"manifest lacks {key!r}")
    return manifest


def _load_blobs(d: Path, manifest: dict) -> list[dict[str, np.ndarray]]:
    listed = set(manifest["blobs"])
    per_layer = [set(e.get("blobs", {}).values()) for e in manifest["layers"]]
    referenced = set().union(*per_layer) if per_layer else set()
    if referenced != listed:
        raise IntegrityError(f"manifest blob list disagrees with layer entries: "
                             f"{sorted(listed ^ referenced)}")
    on_disk = {p.name for p in d.glob("*.ibrt")}
    missing, extra = listed - on_disk, on_disk - listed
    if missing:
        raise IntegrityError(f"missing blobs: {sorted(missing)}")
    if extra:
        raise IntegrityError(f"blobs not described by the manifest: {sorted(extra)}")
    out = []
    for i, entry in enumerate(manifest["layers"]):
        arrays = {}
        for key, name in entry.get("blobs", {}).items():
            arrays[key] = container.load(d / name).data
        if manifest["mode"] == "training":
            expected = _expected_shapes(entry["type"], entry["spec"])
            if set(expected) != set(arrays):
                raise IntegrityError(f"layer {i} ({entry['type']}): expected blobs {sorted(expected)}, "
                                     f"found {sorted(arrays)}")
            for key, shape in expected.items():
                if tuple(arrays[key].shape) != tuple(shape):
                    raise IntegrityError(f"layer {i} ({entry['type']}) {key}: manifest implies shape "
                                         f"{tuple(shape)}, blob holds {tuple(arrays[key].shape)}")
        out.append(arrays)
    return out


def _lowered_node(kind: str, spec: dict, arrays: dict) -> LoweredNode:
    node = LoweredNode(kind=kind, origin=tuple(spec["origin"]), ops=tuple(spec.get("ops", ())))
    if "weight" in arrays:
        node.weight = np.array(arrays["weight"])
        node.bias = np.array(arrays["bias"])
        for key in ("stride", "padding", "head", "schedule", "planes", "in_scale", "in_dn"):
            setattr(node, key, spec[key])
        if node.bias.shape != (node.weight.shape[0],):
            raise IntegrityError(f"node {kind}{node.origin}: bias shape {node.bias.shape} does not match "
                                 f"weight shape {node.weight.shape}")
    if kind == "pool":
        node.k = spec["k"]
    if kind == "neuron":
        node.cfg = NeuronConfig.from_dict(spec["config"])
    return node


def load_checkpoint(path) -> LayerGraph | LoweredGraph:
    """Inverse of :func:`save_checkpoint`; tensors come back bit-for-bit."""
    d = Path(path)
    manifest = read_manifest(d)
    arrays = _load_blobs(d, manifest)
    entries = manifest["layers"]
    encoding = manifest.get("encoding", "direct")
    if manifest["mode"] == "training":
        layers = [_build_layer(e["type"], e["spec"], a) for e, a in zip(entries, arrays)]
        return LayerGraph(layers, manifest["input_shape"], encoding)
    if manifest["mode"] == "lowered":
        nodes = [_lowered_node(e["type"], e["spec"], a) for e, a in zip(entries, arrays)]
        return LoweredGraph(nodes, manifest["input_shape"], manifest["timesteps"], encoding,
                            manifest["architecture"], manifest["precision"])
    raise FormatError(f"unknown checkpoint mode {manifest['mode']!r}")


def graphs_equal(a, b) -> bool:
    """Structural and bit-for-bit tensor equality of two graphs of the same mode."""
    if type(a) is not type(b) or a.input_shape != b.input_shape or a.encoding != b.encoding:
        return False
    if isinstance(a, LoweredGraph):
        pairs = [(x.kind, x.spec(), {"weight": x.weight, "bias": x.bias}, y.kind, y.spec(),
                  {"weight": y.weight, "bias": y.bias}) for x, y in zip(a.nodes, b.nodes)]
        if len(a.nodes) != len(b.nodes) or a.precision != b.precision:
            return False
    else:
        pairs = [(x.kind, x.spec(), _tensors_of(x), y.kind, y.spec(), _tensors_of(y))
                 for x, y in zip(a.layers, b.layers)]
        if len(a.layers) != len(b.layers):
            return False
    for ka, sa, ta, kb, sb, tb in pairs:
        if ka != kb or sa != sb or set(ta) != set(tb):
            return False
        for key in ta:
            x, y = ta[key], tb[key]
            if (x is None) != (y is None):
                return False
            if x is not None and (x.dtype != y.dtype or x.shape != y.shape or x.tobytes() != y.tobytes()):
                return False
    return True


__all__ = ["FORMAT_VERSION", "graphs_equal", "load_checkpoint", "read_manifest", "save_checkpoint"]
