"""Binary checkpoint format.

Layout (little endian)::

    b"DUSTCKPT"  u16 version  u32 record_count
    record_count x { u32 name_len, name (utf-8), u8 dtype, u8 rank, rank x u64 dim, payload }

The only dtype code is 1 = float32. A file whose length differs from the
length implied by its records is rejected.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .autodiff import Tensor
from .unet import ModelParams, _layer_specs

MAGIC = b"DUSTCKPT"
VERSION = 1
DTYPE_F32 = 1


class CheckpointError(ValueError):
    pass


def encode(state: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<HI", VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<BB", DTYPE_F32, arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def decode(blob: bytes) -> dict[str, np.ndarray]:
    if blob[:8] != MAGIC:
        raise CheckpointError("bad magic: not a DUSTCKPT file")
    if len(blob) < 14:
        raise CheckpointError("truncated header")
    version, count = struct.unpack_from("<HI", blob, 8)
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    pos = 14
    state: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<I", blob, pos)
            pos += 4
            name = blob[pos:pos + nlen].decode("utf-8")
            pos += nlen
            dtype, rank = struct.unpack_from("<BB", blob, pos)
            pos += 2
            if dtype != DTYPE_F32:
                raise CheckpointError(f"record {name!r}: unknown dtype code {dtype}")
            dims = struct.unpack_from(f"<{rank}Q", blob, pos)
            pos += 8 * rank
            nbytes = 4 * int(np.prod(dims, dtype=np.int64))
            if pos + nbytes > len(blob):
                raise CheckpointError(f"record {name!r}: payload truncated")
            state[name] = np.frombuffer(blob, dtype="<f4", count=nbytes // 4, offset=pos).reshape(dims).astype(np.float32)
            pos += nbytes
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(blob):
        raise CheckpointError(f"length mismatch: records end at byte {pos}, file has {len(blob)}")
    return state


def save(params: ModelParams, path: str | Path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(encode(params.state()))


def params_from_state(state: dict[str, np.ndarray]) -> ModelParams:
    """Rebuild ModelParams, inferring the architecture from record names and shapes."""
    try:
        depth = 0
        while f"enc.{depth}.conv1.weight" in state:
            depth += 1
        c0 = state["enc.0.conv1.weight"].shape[0]
        n = state["head.main.weight"].shape[0]
    except KeyError as exc:
        raise CheckpointError(f"missing record {exc}") from None
    norm = "enc.0.norm1.gamma" in state
    main_up = "transposed" if "main.0.up.weight" in state else "bilinear"
    aux_up = "transposed" if "aux.0.up.weight" in state else "bilinear"
    p = ModelParams(depth, c0, n, norm, main_up, aux_up)
    expected = {name: shape for name, shape, _ in _layer_specs(depth, c0, n, norm, main_up, aux_up)}
    if set(expected) != set(state):
        raise CheckpointError(f"record set mismatch: {sorted(set(expected) ^ set(state))[:5]}")
    for name, shape in expected.items():
        if tuple(state[name].shape) != shape:
            raise CheckpointError(f"{name}: shape {state[name].shape} != expected {shape}")
        p.tensors[name] = Tensor(state[name].copy(), requires_grad=True)
    return p


def load(path: str | Path) -> ModelParams:
    return params_from_state(decode(Path(path).read_bytes()))
