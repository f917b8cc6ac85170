"""Model and calibration-set files.

A model is two files: a JSON manifest (structure, attributes, quantizer
grids, integer biases) and a raw binary blob holding every float tensor as
little-endian float32, referenced from the manifest by offset and byte size.
The split keeps the manifest human-diffable. Grid scales are stored as JSON
numbers, which round-trip float64 exactly; frozen integer biases are stored
as JSON integers, which must be exact.

Serialization is deterministic: saving, loading and saving again produces
byte-identical files.
"""

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import ModelFormatError
from .graph import Graph, Layer, LayerKind, QuantSlot
from .quantizer import QuantizerSpec, Scheme

FORMAT_VERSION = 1


def _blob_path(path: str) -> str:
    root, _ = os.path.splitext(path)
    return root + ".bin"


class _BlobWriter:
    def __init__(self):
        self.chunks = []
        self.index = {}
        self.offset = 0

    def put(self, key: str, arr: np.ndarray):
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        self.index[key] = {"shape": list(arr.shape), "offset": self.offset, "size": len(data)}
        self.chunks.append(data)
        self.offset += len(data)


class _BlobReader:
    def __init__(self, data: bytes, index: dict):
        self.data = data
        self.index = index

    def get(self, key: str) -> np.ndarray:
        if key not in self.index:
            raise ModelFormatError("manifest references missing tensor %r" % key)
        entry = self.index[key]
        off, size = int(entry["offset"]), int(entry["size"])
        if off < 0 or off + size > len(self.data):
            raise ModelFormatError("tensor %r extends past the end of the blob" % key)
        flat = np.frombuffer(self.data, dtype="<f4", count=size // 4, offset=off)
        shape = tuple(int(d) for d in entry["shape"])
        if flat.size != int(np.prod(shape, dtype=np.int64)):
            raise ModelFormatError("tensor %r size does not match its shape" % key)
        return flat.reshape(shape).astype(np.float64)


def _slot_to_json(slot: QuantSlot) -> dict:
    spec = slot.spec
    return {
        "scheme": slot.scheme.value,
        "bitwidth": slot.bitwidth,
        "per_channel": slot.per_channel,
        "axis": slot.axis,
        "enabled": slot.enabled,
        "scale": [float(v) for v in spec.scale] if spec is not None else None,
        "zero_point": [int(v) for v in spec.zero_point] if spec is not None else None,
    }


def _slot_from_json(d: dict) -> QuantSlot:
    spec = None
    if d.get("scale") is not None:
        spec = QuantizerSpec(
            Scheme(d["scheme"]),
            int(d["bitwidth"]),
            np.array(d["scale"], dtype=np.float64),
            np.array(d["zero_point"], dtype=np.float64),
            d["axis"],
        )
    return QuantSlot(
        Scheme(d["scheme"]),
        int(d["bitwidth"]),
        bool(d["per_channel"]),
        d["axis"],
        spec,
        bool(d["enabled"]),
    )


def save_model(graph: Graph, path: str) -> str:
    """Write manifest JSON to `path` and tensors to the sibling .bin file."""
    blob = _BlobWriter()
    layers = []
    for layer in graph.layers:
        entry = {
            "name": layer.name,
            "kind": layer.kind.value,
            "inputs": list(layer.inputs),
            "output": layer.output,
            "attrs": layer.attrs,
            "params": {},
        }
        for pname in sorted(layer.params):
            key = "%s.%s" % (layer.name, pname)
            blob.put(key, layer.params[pname])
            entry["params"][pname] = key
        layers.append(entry)
    bn_meta = {}
    for lname in sorted(graph.bn_meta):
        bn_meta[lname] = {}
        for pname in sorted(graph.bn_meta[lname]):
            key = "bn_meta.%s.%s" % (lname, pname)
            blob.put(key, graph.bn_meta[lname][pname])
            bn_meta[lname][pname] = key
    manifest = {
        "format_version": FORMAT_VERSION,
        "blob": os.path.basename(_blob_path(path)),
        "input": {"name": graph.input_name, "shape": list(graph.input_shape) if graph.input_shape else None},
        "output": graph.output,
        "layers": layers,
        "tensors": blob.index,
        "bn_meta": bn_meta,
        "metadata": graph.metadata,
        "quantization": {
            "frozen": graph.frozen,
            "weight_slots": {n: _slot_to_json(s) for n, s in graph.weight_slots.items()},
            "act_slots": {n: _slot_to_json(s) for n, s in graph.act_slots.items()},
            "edge_slots": graph.edge_slot,
            "bias_int": {n: [int(v) for v in b] for n, b in graph.bias_int.items()},
        },
    }
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(_blob_path(path), "wb") as f:
        f.write(b"".join(blob.chunks))
    return path


def load_model(path: str) -> Graph:
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFormatError("cannot read model manifest %r: %s" % (path, e))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError("unsupported format_version %r" % manifest.get("format_version"))
    blob_file = os.path.join(os.path.dirname(path) or ".", manifest["blob"])
    try:
        with open(blob_file, "rb") as f:
            blob = _BlobReader(f.read(), manifest["tensors"])
    except OSError as e:
        raise ModelFormatError("cannot read tensor blob %r: %s" % (blob_file, e))

    inp = manifest["input"]
    graph = Graph(inp["shape"], inp["name"])
    for entry in manifest["layers"]:
        try:
            kind = LayerKind(entry["kind"])
        except ValueError:
            raise ModelFormatError("unknown layer kind %r in layer %r" % (entry["kind"], entry["name"]))
        params = {p: blob.get(key) for p, key in entry["params"].items()}
        attrs = entry["attrs"]
        # JSON round-trips ints as ints; nothing to coerce except be defensive
        layer = Layer(entry["name"], kind, list(entry["inputs"]), entry["output"], params, attrs)
        try:
            graph.add_layer(layer)
        except Exception as e:
            raise ModelFormatError("invalid layer %r: %s" % (entry["name"], e))
    graph.output = manifest["output"]
    graph.metadata = manifest.get("metadata", {})
    for lname, pmap in manifest.get("bn_meta", {}).items():
        graph.bn_meta[lname] = {p: blob.get(key) for p, key in pmap.items()}
    q = manifest.get("quantization", {})
    graph.weight_slots = {n: _slot_from_json(d) for n, d in q.get("weight_slots", {}).items()}
    graph.act_slots = {n: _slot_from_json(d) for n, d in q.get("act_slots", {}).items()}
    graph.edge_slot = dict(q.get("edge_slots", {}))
    graph.bias_int = {n: np.array(v, dtype=np.int64) for n, v in q.get("bias_int", {}).items()}
    graph.frozen = bool(q.get("frozen", False))
    return graph


# ---------------------------------------------------------------------------
# calibration / evaluation data container
# ---------------------------------------------------------------------------


@dataclass
class CalibrationSet:
    inputs: np.ndarray
    labels: np.ndarray | None = None

    def __len__(self):
        return self.inputs.shape[0]


def save_calibration(path: str, inputs: np.ndarray, labels=None) -> str:
    """Store a batch of samples (optionally labeled) in the two-file format."""
    inputs = np.asarray(inputs)
    blob = _BlobWriter()
    for i in range(inputs.shape[0]):
        blob.put("input_%d" % i, inputs[i])
    if labels is not None:
        labels = np.asarray(labels)
        if labels.shape[0] != inputs.shape[0]:
            raise ModelFormatError("labels and inputs disagree on sample count")
        for i in range(labels.shape[0]):
            blob.put("label_%d" % i, np.atleast_1d(labels[i]).astype(np.float64))
    manifest = {
        "format_version": FORMAT_VERSION,
        "kind": "calibration",
        "blob": os.path.basename(_blob_path(path)),
        "count": int(inputs.shape[0]),
        "labeled": labels is not None,
        "tensors": blob.index,
    }
    with open(path, "w") as f:
        json.dump(manifest, f, sort_keys=True, indent=2)
        f.write("\n")
    with open(_blob_path(path), "wb") as f:
        f.write(b"".join(blob.chunks))
    return path


def load_calibration(path: str) -> CalibrationSet:
    try:
        with open(path) as f:
            manifest = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise ModelFormatError("cannot read calibration manifest %r: %s" % (path, e))
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ModelFormatError("unsupported format_version %r" % manifest.get("format_version"))
    if manifest.get("kind") != "calibration":
        raise ModelFormatError("%r is not a calibration container" % path)
    blob_file = os.path.join(os.path.dirname(path) or ".", manifest["blob"])
    try:
        with open(blob_file, "rb") as f:
            blob = _BlobReader(f.read(), manifest["tensors"])
    except OSError as e:
        raise ModelFormatError("cannot read tensor blob %r: %s" % (blob_file, e))
    n = int(manifest["count"])
    if n <= 0:
        raise ModelFormatError("calibration container is empty")
    inputs = np.stack([blob.get("input_%d" % i) for i in range(n)])
    labels = None
    if manifest.get("labeled"):
        labels = np.array([blob.get("label_%d" % i).reshape(-1)[0] for i in range(n)]).astype(np.int64)
    return CalibrationSet(inputs, labels)
