"""Binary checkpoints for named parameter tensors + JSON config manifest."""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .backbone import BackboneConfig, NetParams

_MAGIC = b"DCNP"
_VERSION = 1


def save_checkpoint(path, params: NetParams, config: BackboneConfig) -> None:
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(params.tensors)))
        for name, t in params.tensors.items():
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            shape = t.data.shape
            fh.write(struct.pack("<I", len(shape)))
            for dim in shape:
                fh.write(struct.pack("<I", dim))
            fh.write(np.ascontiguousarray(t.data, dtype="<f4").tobytes())
    manifest = {"schema": 1, "config": config.to_dict(),
                "frozen": sorted(params.frozen)}
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(manifest, indent=2))


def load_checkpoint(path):
    """Returns (params, config). Expects the sidecar manifest next to `path`."""
    path = Path(path)
    manifest = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    config = BackboneConfig.from_dict(manifest["config"])
    frozen = set(manifest.get("frozen", []))
    params = NetParams()
    with open(path, "rb") as fh:
        if fh.read(4) != _MAGIC:
            raise ValueError(f"{path}: not a checkpoint file")
        version, n_records = struct.unpack("<II", fh.read(8))
        if version != _VERSION:
            raise ValueError(f"{path}: unsupported checkpoint version {version}")
        for _ in range(n_records):
            (name_len,) = struct.unpack("<I", fh.read(4))
            name = fh.read(name_len).decode("utf-8")
            (rank,) = struct.unpack("<I", fh.read(4))
            dims = struct.unpack(f"<{rank}I", fh.read(4 * rank))
            count = int(np.prod(dims)) if rank else 1
            data = np.frombuffer(fh.read(4 * count), dtype="<f4").reshape(dims).copy()
            params.add(name, data, frozen=name in frozen)
    return params, config
