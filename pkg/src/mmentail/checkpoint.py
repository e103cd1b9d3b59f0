"""Self-describing parameter container with a bit-exact round trip.

Layout (see docs/FORMATS.md):
    line 1: "mmckpt1 <kind>\\n"
    line 2: JSON manifest {"meta": {...}, "params": [[name, [shape...]], ...]} + "\\n"
    then:   raw little-endian float64 payloads, concatenated in manifest order
"""

from __future__ import annotations

import json

import numpy as np

MAGIC = "mmckpt1"


class CheckpointError(ValueError):
    """Raised on a malformed checkpoint or a model-kind mismatch."""


def save_params(path: str, kind: str, params: dict[str, np.ndarray], meta: dict) -> None:
    manifest = {
        "meta": meta,
        "params": [[name, list(arr.shape)] for name, arr in params.items()],
    }
    with open(path, "wb") as fh:
        fh.write(f"{MAGIC} {kind}\n".encode("ascii"))
        fh.write(json.dumps(manifest, sort_keys=True, separators=(",", ":")).encode("utf-8"))
        fh.write(b"\n")
        for arr in params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_params(path: str, expect_kind: str | None = None):
    """Returns (kind, meta, params). ``expect_kind`` enforces the model type."""
    with open(path, "rb") as fh:
        header = fh.readline().decode("ascii", errors="replace").rstrip("\n")
        parts = header.split(" ", 1)
        if len(parts) != 2 or parts[0] != MAGIC:
            raise CheckpointError(f"{path}: not a parameter checkpoint (header {header!r})")
        kind = parts[1]
        if expect_kind is not None and kind != expect_kind:
            raise CheckpointError(f"{path}: checkpoint kind {kind!r}, expected {expect_kind!r}")
        try:
            manifest = json.loads(fh.readline().decode("utf-8"))
        except json.JSONDecodeError as exc:
            raise CheckpointError(f"{path}: bad manifest ({exc.msg})") from None
        params: dict[str, np.ndarray] = {}
        for name, shape in manifest["params"]:
            count = int(np.prod(shape)) if shape else 1
            buf = fh.read(count * 8)
            if len(buf) != count * 8:
                raise CheckpointError(f"{path}: truncated payload for {name!r}")
            params[name] = np.frombuffer(buf, dtype="<f8").reshape(shape).copy()
        if fh.read(1):
            raise CheckpointError(f"{path}: trailing bytes after declared payload")
    return kind, manifest["meta"], params
