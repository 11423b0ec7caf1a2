"""Checkpoint archive format.

A checkpoint is a single binary file::

    bytes 0..7    magic "SKSIMP01"
    bytes 8..15   little-endian uint64 header length N
    bytes 16..16+N  JSON header (UTF-8, sorted keys)
    afterwards    raw tensor data, row-major little-endian float32

The header carries the network specs, the dataset input mean, a config
fingerprint, the iteration counter, fold/pencil flags and a tensor index of
``{"net", "name", "shape", "offset", "nbytes"}`` entries. ``net`` is "S"
(simplifier), "D" (discriminator), or "optS"/"optD" for optimizer
accumulators; ``name`` is the tensor's name within the module (for
parameters/buffers) or ``<param>/sq_grad`` / ``<param>/sq_update`` for
optimizer state. Loaders reject shape mismatches against the spec.

Writes are atomic (temp file + rename) and byte-deterministic for equal
inputs.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch

from .netcore import NetworkSpec, SpecNet, SpecError, fold_batchnorm
from .optim import AdadeltaState

MAGIC = b"SKSIMP01"


class CheckpointError(ValueError):
    """Corrupt or inconsistent checkpoint archive."""


@dataclass
class Checkpoint:
    """In-memory checkpoint: networks plus training metadata."""

    simplifier: SpecNet
    discriminator: SpecNet | None = None
    input_mean: float = 0.0
    config_fingerprint: str = ""
    iteration: int = 0
    folded: bool = False
    pencil_mode: bool = False
    opt_simplifier: AdadeltaState | None = None
    opt_discriminator: AdadeltaState | None = None

    def folded_copy(self) -> "Checkpoint":
        """Inference-only copy with batch norm folded (no-op if folded)."""
        if self.folded:
            return self
        return Checkpoint(
            simplifier=fold_batchnorm(self.simplifier),
            discriminator=(fold_batchnorm(self.discriminator)
                           if self.discriminator is not None else None),
            input_mean=self.input_mean,
            config_fingerprint=self.config_fingerprint,
            iteration=self.iteration, folded=True,
            pencil_mode=self.pencil_mode)


def _net_tensors(net: SpecNet) -> dict[str, torch.Tensor]:
    tensors = dict(net.named_parameters())
    for name, buf in net.named_buffers():
        if "num_batches_tracked" in name:
            continue
        tensors[name] = buf
    return tensors


def _opt_tensors(state: AdadeltaState) -> dict[str, torch.Tensor]:
    out = {}
    for pname, t in sorted(state.sq_grad.items()):
        out[f"{pname}/sq_grad"] = t
    for pname, t in sorted(state.sq_update.items()):
        out[f"{pname}/sq_update"] = t
    return out


def save_checkpoint(ckpt: Checkpoint, path: str | Path) -> None:
    path = Path(path)
    sections: dict[str, dict[str, torch.Tensor]] = {
        "S": _net_tensors(ckpt.simplifier)}
    specs = {"S": ckpt.simplifier.spec.to_dict()}
    if ckpt.discriminator is not None:
        sections["D"] = _net_tensors(ckpt.discriminator)
        specs["D"] = ckpt.discriminator.spec.to_dict()
    if ckpt.opt_simplifier is not None:
        sections["optS"] = _opt_tensors(ckpt.opt_simplifier)
    if ckpt.opt_discriminator is not None:
        sections["optD"] = _opt_tensors(ckpt.opt_discriminator)

    index = []
    blobs = []
    offset = 0
    for net_key in sorted(sections):
        for name in sorted(sections[net_key]):
            arr = sections[net_key][name].detach().cpu().to(
                torch.float32).numpy()
            blob = np.ascontiguousarray(arr).tobytes()
            index.append({"net": net_key, "name": name,
                          "shape": list(arr.shape),
                          "offset": offset, "nbytes": len(blob)})
            blobs.append(blob)
            offset += len(blob)

    opt_meta = {}
    for key, state in (("optS", ckpt.opt_simplifier),
                       ("optD", ckpt.opt_discriminator)):
        if state is not None:
            opt_meta[key] = {"rho": state.rho, "eps": state.eps}
    header = {
        "format_version": 1,
        "specs": specs,
        "input_mean": float(ckpt.input_mean),
        "config_fingerprint": ckpt.config_fingerprint,
        "iteration": int(ckpt.iteration),
        "folded": bool(ckpt.folded),
        "pencil_mode": bool(ckpt.pencil_mode),
        "optimizers": opt_meta,
        "tensors": index,
    }
    payload = json.dumps(header, sort_keys=True,
                         separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<Q", len(payload)))
        f.write(payload)
        for blob in blobs:
            f.write(blob)
    os.replace(tmp, path)


def _load_section(header: dict, data: bytes, net_key: str
                  ) -> dict[str, torch.Tensor]:
    tensors = {}
    for entry in header["tensors"]:
        if entry["net"] != net_key:
            continue
        start, n = entry["offset"], entry["nbytes"]
        if start + n > len(data):
            raise CheckpointError(
                f"tensor {net_key}/{entry['name']} extends past end of file")
        arr = np.frombuffer(data[start:start + n], dtype="<f4").reshape(
            entry["shape"]).copy()
        tensors[entry["name"]] = torch.from_numpy(arr)
    return tensors


def _restore_net(spec_dict: dict, tensors: dict[str, torch.Tensor]) -> SpecNet:
    spec = NetworkSpec.from_dict(spec_dict)
    net = SpecNet(spec)
    state = _net_tensors(net)
    if set(state) != set(tensors):
        missing = set(state) ^ set(tensors)
        raise CheckpointError(f"tensor set mismatch: {sorted(missing)}")
    with torch.no_grad():
        for name, t in tensors.items():
            if tuple(state[name].shape) != tuple(t.shape):
                raise CheckpointError(
                    f"tensor {name} shape {tuple(t.shape)} does not match "
                    f"spec shape {tuple(state[name].shape)}")
            state[name].copy_(t)
    net.eval()
    return net


def _restore_opt(header: dict, data: bytes, net_key: str
                 ) -> AdadeltaState | None:
    meta = header.get("optimizers", {}).get(net_key)
    if meta is None:
        return None
    tensors = _load_section(header, data, net_key)
    state = AdadeltaState(rho=meta["rho"], eps=meta["eps"])
    for name, t in tensors.items():
        pname, _, kind = name.rpartition("/")
        target = state.sq_grad if kind == "sq_grad" else state.sq_update
        target[pname] = t
    return state


def load_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:8] != MAGIC:
        raise CheckpointError(f"{path}: bad magic, not a checkpoint archive")
    (header_len,) = struct.unpack("<Q", raw[8:16])
    try:
        header = json.loads(raw[16:16 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt JSON header: {exc}") from exc
    data = raw[16 + header_len:]
    try:
        simplifier = _restore_net(header["specs"]["S"],
                                  _load_section(header, data, "S"))
    except (KeyError, SpecError) as exc:
        raise CheckpointError(
            f"{path}: cannot restore simplifier: {exc}") from exc
    discriminator = None
    if "D" in header["specs"]:
        try:
            discriminator = _restore_net(header["specs"]["D"],
                                         _load_section(header, data, "D"))
        except (KeyError, SpecError) as exc:
            raise CheckpointError(
                f"{path}: cannot restore discriminator: {exc}") from exc
    return Checkpoint(
        simplifier=simplifier,
        discriminator=discriminator,
        input_mean=float(header["input_mean"]),
        config_fingerprint=header["config_fingerprint"],
        iteration=int(header["iteration"]),
        folded=bool(header["folded"]),
        pencil_mode=bool(header.get("pencil_mode", False)),
        opt_simplifier=_restore_opt(header, data, "optS"),
        opt_discriminator=_restore_opt(header, data, "optD"))
