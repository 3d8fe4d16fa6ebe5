"""Parameter checkpoints in the ``.vvol`` container.

The header carries ``kind: "checkpoint"``, the network spec and a layer
manifest; the payload is every array as little-endian f64, C order, in
manifest order.
"""
from __future__ import annotations

import numpy as np

from ..errors import FormatError
from ..volume import MAGIC, VERSION, read_container, write_container
from .model import NetworkParams, NetworkSpec, layer_manifest


def save_checkpoint(params: NetworkParams, path, extra: dict | None = None) -> None:
    manifest = [{"name": k, "shape": list(v.shape)} for k, v in params.arrays.items()]
    header = {
        "format": MAGIC,
        "version": VERSION,
        "kind": "checkpoint",
        "dtype": "f64",
        "spec": params.spec.to_json(),
        "layers": manifest,
    }
    if extra:
        header["meta"] = extra
    payload = b"".join(np.ascontiguousarray(v, dtype="<f8").tobytes() for v in params.arrays.values())
    write_container(path, header, payload)


def load_checkpoint(path, with_meta: bool = False):
    header, payload = read_container(path)
    if header.get("kind") != "checkpoint":
        raise FormatError(f"{path}: not a checkpoint container")
    try:
        spec = NetworkSpec.from_json(header["spec"])
        layers = [(d["name"], tuple(int(s) for s in d["shape"])) for d in header["layers"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed checkpoint header ({exc})") from None
    expected = layer_manifest(spec)
    if sorted(layers) != sorted(expected):
        raise FormatError(f"{path}: layer manifest does not match the stored network spec")
    total = sum(int(np.prod(s)) for _, s in layers)
    if len(payload) != 8 * total:
        raise FormatError(f"{path}: payload has {len(payload)} bytes, expected {8 * total}")
    flat = np.frombuffer(payload, dtype="<f8")
    arrays, pos = {}, 0
    for name, shape in layers:
        n = int(np.prod(shape))
        arrays[name] = flat[pos:pos + n].astype(np.float64).reshape(shape)
        pos += n
    params = NetworkParams(spec, arrays)
    if with_meta:
        return params, header.get("meta", {})
    return params
