"""Versioned binary checkpoints.

Layout: the magic string ``SMEMO``, a little-endian uint32 format version, a
little-endian uint64 header length, the ASCII JSON header, then the raw
tensor payload.  Tensors are row-major little-endian 4-byte reals in the
order listed by the header, so a load/save round trip is byte-identical.
A version mismatch is a hard error.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SMEMO"
VERSION = 1


class CheckpointError(RuntimeError):
    pass


def _header_bytes(doc: dict) -> bytes:
    return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("ascii")


def _model_meta(model, ablation: str | None) -> dict:
    kind = model.kind
    if kind == "smemo":
        return {"kind": kind, "model_config": model.config.to_dict(),
                "ablation": ablation if ablation is not None else model.ablation,
                "noise_seed": model.noise_seed}
    if kind in ("linear", "mlp"):
        meta = {"kind": kind, "n_past": model.n_past, "n_future": model.n_future}
        if kind == "mlp":
            meta["hidden"] = model.params["l0.w"].value.shape[1]
        return meta
    if kind == "gru_encdec":
        return {"kind": kind, "embed_dim": model.embed_dim,
                "enc_state": model.enc_state, "dec_state": model.dec_state}
    raise CheckpointError(f"cannot serialize model kind {kind!r}")


def save_checkpoint(path, model, train_config=None, optimizer=None,
                    rng_state=None) -> None:
    """Write the model (and optionally optimizer moments) to ``path``."""
    tensors: list[tuple[str, np.ndarray]] = []
    for name in sorted(model.params):
        arr = model.params[name].value
        if arr.dtype != np.float32:
            raise CheckpointError(f"checkpoint tensors are 4-byte reals; parameter "
                                  f"{name!r} has dtype {arr.dtype}")
        tensors.append((name, arr))
    moments = {}
    if optimizer is not None:
        moments = {"t": optimizer.t}
        for name, arr in optimizer.state_arrays().items():
            tensors.append(("moment." + name, arr.astype(np.float32, copy=False)))

    index = []
    offset = 0
    for name, arr in tensors:
        index.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 4

    doc = {
        "model": _model_meta(model, None),
        "train_config": train_config.to_dict() if train_config is not None else None,
        "moments": moments or None,
        "rng_state": _encode_rng(rng_state),
        "tensors": index,
    }
    header = _header_bytes(doc)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for _, arr in tensors:
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def _encode_rng(state) -> dict | None:
    if state is None:
        return None
    # PCG64 state dicts contain only ints and strings; keep as-is
    return json.loads(json.dumps(state, default=int))


def load_checkpoint(path):
    """Read a checkpoint; returns (model, info dict).

    ``info`` carries the train-config snapshot, optimizer moments (if any),
    and the stored RNG state.
    """
    from . import baselines
    from .model import ModelConfig, SmemoModel

    path = Path(path)
    blob = path.read_bytes()
    if blob[:5] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version = struct.unpack("<I", blob[5:9])[0]
    if version != VERSION:
        raise CheckpointError(f"{path}: format version {version} is not "
                              f"supported (expected {VERSION})")
    hlen = struct.unpack("<Q", blob[9:17])[0]
    doc = json.loads(blob[17:17 + hlen].decode("ascii"))
    payload = blob[17 + hlen:]

    arrays: dict[str, np.ndarray] = {}
    for entry in doc["tensors"]:
        shape = tuple(entry["shape"])
        size = int(np.prod(shape)) if shape else 1
        start = entry["offset"]
        arr = np.frombuffer(payload, dtype="<f4", count=size, offset=start)
        arrays[entry["name"]] = arr.reshape(shape).copy()

    meta = doc["model"]
    kind = meta["kind"]
    param_arrays = {n: a for n, a in arrays.items() if not n.startswith("moment.")}

    if kind == "smemo":
        config = ModelConfig(**meta["model_config"])
        model = SmemoModel.build(config, seed=0, dtype=np.float32,
                                 ablation=meta["ablation"])
        model.noise_seed = meta.get("noise_seed", 0)
    elif kind == "linear":
        model = baselines.LinearBaseline.build(meta["n_past"], meta["n_future"])
    elif kind == "mlp":
        model = baselines.MlpBaseline.build(meta["n_past"], meta["n_future"],
                                            hidden=meta["hidden"])
    elif kind == "gru_encdec":
        model = baselines.GruEncDecBaseline.build(meta["embed_dim"], meta["enc_state"],
                                                  meta["dec_state"])
    else:
        raise CheckpointError(f"unknown model kind {kind!r}")

    if set(param_arrays) != set(model.params):
        missing = set(model.params) ^ set(param_arrays)
        raise CheckpointError(f"parameter set mismatch: {sorted(missing)}")
    for name, arr in param_arrays.items():
        if model.params[name].value.shape != arr.shape:
            raise CheckpointError(f"shape mismatch for {name!r}: checkpoint "
                                  f"{arr.shape}, model {model.params[name].value.shape}")
        model.params[name].value[...] = arr

    info = {
        "train_config": doc.get("train_config"),
        "moments": {n[len("moment."):]: a for n, a in arrays.items()
                    if n.startswith("moment.")},
        "moments_meta": doc.get("moments"),
        "rng_state": doc.get("rng_state"),
    }
    return model, info