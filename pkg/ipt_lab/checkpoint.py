"""Checkpoint files: JSON header plus base64 float64 blobs.

Layout (format_version 1)::

    {
      "format_version": 1,
      "kind": "backbone" | "classifier",
      "config": {...},            # model config dataclass as a dict
      "step": <int>,              # optimizer steps taken
      "extra": {...},             # vocabulary tokens, accuracy, ...
      "sha256": "<hex>",          # over the parameter section, see content_hash
      "params": {"<name>": {"shape": [...], "dtype": "<f8", "data": "<base64>"}}
    }

Blobs are little-endian float64 in row-major order, so a load restores the
exact bits that were saved.
"""

import base64
import hashlib
import json
import logging
import os
import tempfile
from dataclasses import dataclass, field
from typing import Any, Dict

import numpy as np

log = logging.getLogger("ipt-lab")

FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    kind: str
    config: Dict[str, Any]
    params: Dict[str, np.ndarray]
    step: int = 0
    extra: Dict[str, Any] = field(default_factory=dict)
    sha256: str = ""


def content_hash(params: Dict[str, np.ndarray]) -> str:
    """sha256 over ``name | shape | raw bytes`` of every parameter, sorted by name."""
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(json.dumps(list(arr.shape)).encode("ascii"))
        h.update(arr.tobytes())
    return h.hexdigest()


def atomic_write_text(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8") as f:
            f.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.remove(tmp)
        raise


def save_checkpoint(path: str, ckpt: Checkpoint) -> str:
    digest = content_hash(ckpt.params)
    blobs = {}
    for name in sorted(ckpt.params):
        arr = np.ascontiguousarray(ckpt.params[name], dtype="<f8")
        blobs[name] = {"shape": list(arr.shape), "dtype": "<f8",
                       "data": base64.b64encode(arr.tobytes()).decode("ascii")}
    doc = {"format_version": FORMAT_VERSION, "kind": ckpt.kind, "config": ckpt.config, "step": ckpt.step,
           "extra": ckpt.extra, "sha256": digest, "params": blobs}
    atomic_write_text(path, json.dumps(doc))
    log.info(f"Saved {ckpt.kind} checkpoint {path} ({len(blobs)} tensors, sha256={digest[:12]})")
    ckpt.sha256 = digest
    return digest


def load_checkpoint(path: str, kind: str = "") -> Checkpoint:
    with open(path, encoding="utf-8") as f:
        doc = json.load(f)
    version = doc.get("format_version")
    if version != FORMAT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint format_version {version!r}")
    if kind and doc.get("kind") != kind:
        raise ValueError(f"{path}: expected a {kind} checkpoint, found {doc.get('kind')!r}")
    params = {}
    for name, blob in doc["params"].items():
        raw = base64.b64decode(blob["data"])
        params[name] = np.frombuffer(raw, dtype="<f8").reshape(blob["shape"]).astype(np.float64)
    digest = content_hash(params)
    if digest != doc.get("sha256"):
        raise ValueError(f"{path}: checkpoint hash mismatch (file says {doc.get('sha256')}, content is {digest})")
    return Checkpoint(kind=doc["kind"], config=doc["config"], params=params, step=int(doc.get("step", 0)),
                      extra=doc.get("extra", {}), sha256=digest)
