"""Single-file checkpoint container.

Layout (little-endian throughout):

    magic   8 bytes  b"SRFCKPT1"
    version u32
    metalen u32
    meta    metalen bytes of UTF-8 JSON
    count   u32                       number of tensors
    table   per tensor: u16 name length, name bytes, u8 dtype code,
            u8 ndim, u32 dims..., u64 byte offset into the payload
    payload raw tensor bytes

Tensors are stored sorted by name so a save -> load -> save round trip is
byte-identical.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import torch

from .errors import CheckpointError

MAGIC = b"SRFCKPT1"
FORMAT_VERSION = 1
_DTYPES = {0: torch.float32, 1: torch.int64}
_DTYPE_CODES = {v: k for k, v in _DTYPES.items()}


def save_checkpoint(tensors: dict[str, torch.Tensor], meta: dict, path: str | Path) -> Path:
    """Atomically write tensors + metadata; returns the final path."""
    path = Path(path)
    meta = dict(meta)
    meta["format_version"] = FORMAT_VERSION
    meta_blob = json.dumps(meta, sort_keys=True).encode()

    table = bytearray()
    payload = bytearray()
    for name in sorted(tensors):
        t = tensors[name].detach().contiguous().cpu()
        if t.dtype == torch.float64:
            t = t.float()
        if t.dtype not in _DTYPE_CODES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for tensor {name!r}")
        nb = name.encode()
        table += struct.pack("<H", len(nb)) + nb
        table += struct.pack("<BB", _DTYPE_CODES[t.dtype], t.dim())
        table += struct.pack(f"<{t.dim()}I", *t.shape) if t.dim() else b""
        table += struct.pack("<Q", len(payload))
        payload += t.numpy().tobytes()

    blob = (
        MAGIC
        + struct.pack("<II", FORMAT_VERSION, len(meta_blob))
        + meta_blob
        + struct.pack("<I", len(tensors))
        + bytes(table)
        + bytes(payload)
    )
    tmp = path.with_suffix(path.suffix + ".tmp")
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[dict[str, torch.Tensor], dict]:
    """Read a checkpoint; raises CheckpointError on any format problem."""
    try:
        raw = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    try:
        if raw[:8] != MAGIC:
            raise CheckpointError(f"bad magic in {path}: {raw[:8]!r}")
        version, metalen = struct.unpack_from("<II", raw, 8)
        if version != FORMAT_VERSION:
            raise CheckpointError(
                f"unsupported checkpoint version {version} (expected {FORMAT_VERSION})"
            )
        pos = 16
        meta = json.loads(raw[pos:pos + metalen].decode())
        pos += metalen
        (count,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        entries = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", raw, pos)
            pos += 2
            name = raw[pos:pos + nlen].decode()
            pos += nlen
            code, ndim = struct.unpack_from("<BB", raw, pos)
            pos += 2
            shape = struct.unpack_from(f"<{ndim}I", raw, pos) if ndim else ()
            pos += 4 * ndim
            (offset,) = struct.unpack_from("<Q", raw, pos)
            pos += 8
            if code not in _DTYPES:
                raise CheckpointError(f"unknown dtype code {code} for tensor {name!r}")
            entries.append((name, _DTYPES[code], shape, offset))
        payload = raw[pos:]
        tensors = {}
        for name, dtype, shape, offset in entries:
            numel = 1
            for d in shape:
                numel *= d
            itemsize = torch.empty((), dtype=dtype).element_size()
            chunk = payload[offset:offset + numel * itemsize]
            if len(chunk) != numel * itemsize:
                raise CheckpointError(f"truncated payload for tensor {name!r}")
            t = torch.frombuffer(bytearray(chunk), dtype=dtype).reshape(shape).clone()
            tensors[name] = t
        return tensors, meta
    except CheckpointError:
        raise
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError, IndexError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc


def pack_modules(modules: dict[str, torch.nn.Module]) -> dict[str, torch.Tensor]:
    """Flatten named modules' state dicts into one prefixed tensor dict."""
    out = {}
    for prefix, module in modules.items():
        for key, tensor in module.state_dict().items():
            out[f"{prefix}.{key}"] = tensor
    return out


def unpack_into(tensors: dict[str, torch.Tensor], prefix: str,
                module: torch.nn.Module) -> None:
    """Load tensors under a prefix into a module; shape mismatches are named."""
    state = {}
    want = module.state_dict()
    for key, ref in want.items():
        full = f"{prefix}.{key}"
        if full not in tensors:
            raise CheckpointError(f"checkpoint missing tensor {full!r}")
        t = tensors[full]
        if tuple(t.shape) != tuple(ref.shape):
            raise CheckpointError(
                f"shape mismatch for {full!r}: checkpoint {tuple(t.shape)} "
                f"vs module {tuple(ref.shape)}"
            )
        state[key] = t.to(ref.dtype)
    module.load_state_dict(state)
