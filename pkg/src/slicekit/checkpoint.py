"""Binary checkpoints: magic "SLICEKIT", version, step, config echo, then
length-prefixed named buffers, everything little-endian. Buffer names are
written sorted so save -> load -> save is byte-identical.
"""

from __future__ import annotations

import struct

import numpy as np

MAGIC = b"SLICEKIT"
VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_CODES = {np.dtype("<f8"): 0, np.dtype("<i8"): 1}


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(path: str, step: int, config_text: str,
                    buffers: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<Q", step))
        cfg = config_text.encode("utf-8")
        fh.write(struct.pack("<I", len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(buffers)))
        for name in sorted(buffers):
            arr = np.ascontiguousarray(buffers[name])
            if arr.dtype == np.float64:
                arr = arr.astype("<f8", copy=False)
            elif arr.dtype == np.int64:
                arr = arr.astype("<i8", copy=False)
            else:
                raise CheckpointError(f"{name}: unsupported dtype {arr.dtype}")
            nm = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nm)))
            fh.write(nm)
            fh.write(struct.pack("<B", _CODES[arr.dtype]))
            fh.write(struct.pack("<I", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<Q", dim))
            payload = arr.tobytes()
            fh.write(struct.pack("<Q", len(payload)))
            fh.write(payload)


def load_checkpoint(path: str):
    with open(path, "rb") as fh:
        data = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(data):
            raise CheckpointError("truncated checkpoint")
        out = data[off:off + n]
        off += n
        return out

    if take(8) != MAGIC:
        raise CheckpointError("bad magic: not a slicekit checkpoint")
    version = struct.unpack("<I", take(4))[0]
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    step = struct.unpack("<Q", take(8))[0]
    cfg_len = struct.unpack("<I", take(4))[0]
    config_text = take(cfg_len).decode("utf-8")
    count = struct.unpack("<I", take(4))[0]
    buffers: dict[str, np.ndarray] = {}
    for _ in range(count):
        name_len = struct.unpack("<I", take(4))[0]
        name = take(name_len).decode("utf-8")
        code = struct.unpack("<B", take(1))[0]
        if code not in _DTYPES:
            raise CheckpointError(f"{name}: unknown dtype code {code}")
        ndim = struct.unpack("<I", take(4))[0]
        shape = tuple(struct.unpack("<Q", take(8))[0] for _ in range(ndim))
        nbytes = struct.unpack("<Q", take(8))[0]
        arr = np.frombuffer(take(nbytes), dtype=_DTYPES[code]).reshape(shape)
        buffers[name] = arr.copy()
    if off != len(data):
        raise CheckpointError("trailing bytes after last buffer")
    return step, config_text, buffers
