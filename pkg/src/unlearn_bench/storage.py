"""On-disk formats: UNLB parameter checkpoints, trajectory directories and atomic writes.

A checkpoint file is

    b"UNLB" | u32 version | 32-byte spec digest | u64 step | u64 param count
    | param count little-endian f64 values | u32 CRC32 of the payload bytes

with every integer little-endian.
"""

from __future__ import annotations

import io
import json
import os
import struct
import tempfile
import zlib
from pathlib import Path

import numpy as np

from .model import ModelSpec
from .trainer import Trajectory

MAGIC = b"UNLB"
VERSION = 1
_HEADER = struct.Struct("<4sI32sQQ")
_TRAILER = struct.Struct("<I")


class ChecksumError(ValueError):
    """Checkpoint payload does not match its CRC32 trailer."""


class CheckpointFormatError(ValueError):
    pass


def atomic_write_bytes(path, data: bytes) -> None:
    """Write to a temporary file in the target directory, then rename over ``path``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix="." + path.name + ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_json(path, obj) -> None:
    atomic_write_bytes(path, (json.dumps(obj, indent=2, sort_keys=True) + "\n").encode())


def encode_checkpoint(spec: ModelSpec, params, step: int) -> bytes:
    params = np.asarray(params, dtype=np.float64).reshape(-1)
    if params.size != spec.dim:
        raise ValueError(f"parameter count {params.size} does not match spec dimension {spec.dim}")
    payload = params.astype("<f8").tobytes()
    header = _HEADER.pack(MAGIC, VERSION, spec.digest(), int(step), params.size)
    return header + payload + _TRAILER.pack(zlib.crc32(payload))


def decode_checkpoint(blob: bytes, spec: ModelSpec | None = None, source: str = "<bytes>"):
    """Returns (params, step, spec digest). Verifies length, checksum and, if given, the spec."""
    if len(blob) < _HEADER.size + _TRAILER.size:
        raise CheckpointFormatError(f"{source}: truncated checkpoint")
    magic, version, digest, step, count = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise CheckpointFormatError(f"{source}: bad magic {magic!r}")
    if version != VERSION:
        raise CheckpointFormatError(f"{source}: unsupported checkpoint version {version}")
    end = _HEADER.size + 8 * count
    if len(blob) != end + _TRAILER.size:
        raise CheckpointFormatError(f"{source}: expected {count} parameters, file size disagrees")
    payload = blob[_HEADER.size:end]
    (crc,) = _TRAILER.unpack_from(blob, end)
    if zlib.crc32(payload) != crc:
        raise ChecksumError(f"{source}: checksum mismatch")
    if spec is not None:
        if digest != spec.digest():
            raise CheckpointFormatError(f"{source}: checkpoint was written for a different model spec")
        if count != spec.dim:
            raise CheckpointFormatError(f"{source}: parameter count {count} != spec dimension {spec.dim}")
    params = np.frombuffer(payload, dtype="<f8").astype(np.float64)
    return params, int(step), digest


def write_checkpoint(path, spec: ModelSpec, params, step: int = 0) -> None:
    atomic_write_bytes(path, encode_checkpoint(spec, params, step))


def read_checkpoint(path, spec: ModelSpec | None = None):
    with open(path, "rb") as f:
        blob = f.read()
    return decode_checkpoint(blob, spec, str(path))


def read_params(path, spec: ModelSpec) -> np.ndarray:
    return read_checkpoint(path, spec)[0]


def _save_npy(path: Path, arr) -> None:
    buf = io.BytesIO()
    np.save(buf, np.asarray(arr), allow_pickle=False)
    atomic_write_bytes(path, buf.getvalue())


def save_trajectory(directory, spec: ModelSpec, traj: Trajectory, meta: dict | None = None) -> list[Path]:
    """Checkpoints as UNLB files, per-example logs as .npy, and an index JSON. Returns written paths."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    written = []
    names = []
    for s, w in zip(traj.checkpoint_steps, traj.checkpoints):
        name = f"ckpt_{int(s):08d}.unlb"
        write_checkpoint(d / name, spec, w, int(s))
        names.append(name)
        written.append(d / name)
    write_checkpoint(d / "final.unlb", spec, traj.final_params, traj.total_steps)
    written.append(d / "final.unlb")
    if traj.initial_params is not None:
        write_checkpoint(d / "init.unlb", spec, traj.initial_params, 0)
        written.append(d / "init.unlb")
    logs = {"grad_norms.npy": traj.grad_norm_log, "confidences.npy": traj.confidence_log, "ids.npy": traj.ids}
    if traj.loss_log is not None:
        logs["losses.npy"] = traj.loss_log
    for name, arr in logs.items():
        _save_npy(d / name, arr)
        written.append(d / name)
    index = {
        "checkpoint_steps": [int(s) for s in traj.checkpoint_steps],
        "checkpoints": names,
        "total_steps": int(traj.total_steps),
        "batch_size": int(traj.batch_size),
        "has_init": traj.initial_params is not None,
        "has_losses": traj.loss_log is not None,
        "spec": spec.to_dict(),
        **(meta or {}),
    }
    atomic_write_json(d / "trajectory.json", index)
    written.append(d / "trajectory.json")
    return written


def load_trajectory(directory, spec: ModelSpec) -> Trajectory:
    """Inverse of ``save_trajectory``; every checkpoint is checksum-verified."""
    d = Path(directory)
    with open(d / "trajectory.json") as f:
        index = json.load(f)
    steps = np.asarray(index["checkpoint_steps"], dtype=np.int64)
    ckpts = []
    for name, s in zip(index["checkpoints"], steps):
        w, step, _ = read_checkpoint(d / name, spec)
        if step != s:
            raise CheckpointFormatError(f"{d / name}: header step {step} != indexed step {s}")
        ckpts.append(w)
    final, _, _ = read_checkpoint(d / "final.unlb", spec)
    init = read_checkpoint(d / "init.unlb", spec)[0] if index.get("has_init") else None
    losses = np.load(d / "losses.npy") if index.get("has_losses") else None
    return Trajectory(
        checkpoint_steps=steps,
        checkpoints=ckpts,
        grad_norm_log=np.load(d / "grad_norms.npy"),
        confidence_log=np.load(d / "confidences.npy"),
        final_params=final,
        total_steps=int(index["total_steps"]),
        ids=np.load(d / "ids.npy"),
        initial_params=init,
        loss_log=losses,
        batch_size=int(index["batch_size"]),
    )
