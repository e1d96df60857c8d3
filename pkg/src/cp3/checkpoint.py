"""The "CP3-CKPT-1" container: header line, one JSON line, then raw little-endian float64 tensors.

The JSON line carries the network kind, its structural config and a
(name, shape, offset) table. No timestamps are written, so identical
parameters always give identical bytes.
"""

from __future__ import annotations

import dataclasses
import json
from pathlib import Path
from typing import Dict, Tuple, Union

import numpy as np

from cp3.errors import ParseError, ValidationError
from cp3.generation import GenParams, init_generator
from cp3.params import as_dict, load_dict
from cp3.scr import ScrConfig, ScrNet, init_scr

HEADER = b"CP3-CKPT-1\n"
DTYPE = "<f8"


def generator_structure(gen: GenParams) -> Dict[str, object]:
    dims = gen.encoder.dims
    dec = gen.decoder.dims
    return {"num_coarse": gen.num_coarse, "encoder_dims": dims[1:], "decoder_hidden": dec[1:-1]}


def _describe(net) -> Tuple[str, Dict[str, object]]:
    if isinstance(net, GenParams):
        return "generator", generator_structure(net)
    if isinstance(net, ScrNet):
        return "scr", dataclasses.asdict(net.config)
    raise ValidationError(f"cannot checkpoint a {type(net).__name__}")


def _template(kind: str, structure: Dict[str, object]):
    if kind == "generator":
        return init_generator(0, structure["num_coarse"], structure["encoder_dims"], structure["decoder_hidden"])
    if kind == "scr":
        return init_scr(ScrConfig(**structure), 0)
    raise ParseError(f"unknown network kind {kind!r}", 2)


def to_bytes(net, meta: Dict[str, object] | None = None) -> bytes:
    kind, structure = _describe(net)
    tensors, blobs, offset = [], [], 0
    for name, arr in as_dict(net).items():
        raw = np.ascontiguousarray(arr, dtype=DTYPE).tobytes()
        tensors.append({"name": name, "shape": list(np.shape(arr)), "offset": offset})
        blobs.append(raw)
        offset += len(raw)
    head = {"kind": kind, "config": structure, "meta": meta or {}, "dtype": DTYPE, "tensors": tensors}
    line = json.dumps(head, sort_keys=True, separators=(",", ":")).encode("utf-8") + b"\n"
    return HEADER + line + b"".join(blobs)


def from_bytes(data: bytes) -> Tuple[Union[GenParams, ScrNet], Dict[str, object]]:
    """Rebuild the network; returns ``(net, meta)``."""
    if not data.startswith(HEADER):
        raise ParseError("not a CP3-CKPT-1 checkpoint", 1)
    end = data.find(b"\n", len(HEADER))
    if end < 0:
        raise ParseError("truncated checkpoint header", 2)
    try:
        head = json.loads(data[len(HEADER) : end].decode("utf-8"))
        kind, structure, tensors = head["kind"], head["config"], head["tensors"]
    except (ValueError, KeyError) as exc:
        raise ParseError(f"malformed checkpoint descriptor: {exc}", 2) from None
    blob = memoryview(data)[end + 1 :]
    values = {}
    for t in tensors:
        n = int(np.prod(t["shape"], dtype=np.int64)) * 8
        if t["offset"] + n > len(blob):
            raise ParseError(f"tensor {t['name']!r} runs past the end of the file", 2)
        arr = np.frombuffer(blob[t["offset"] : t["offset"] + n], dtype=head.get("dtype", DTYPE))
        values[t["name"]] = arr.reshape(t["shape"]).astype(np.float64)
    try:
        net = load_dict(_template(kind, structure), values)
    except (KeyError, ValueError, TypeError) as exc:
        raise ParseError(f"checkpoint does not match its config: {exc}", 2) from None
    return net, head.get("meta", {})


def save_checkpoint(net, path, meta: Dict[str, object] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(to_bytes(net, meta))
    return path


def load_checkpoint(path, expect: str | None = None):
    """Load ``(net, meta)``; ``expect`` ("generator" or "scr") guards against swapped files."""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as exc:
        raise ValidationError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    net, meta = from_bytes(data)
    if expect == "generator" and not isinstance(net, GenParams) or expect == "scr" and not isinstance(net, ScrNet):
        raise ValidationError(f"{path} holds a {type(net).__name__}, expected a {expect} checkpoint")
    return net, meta
