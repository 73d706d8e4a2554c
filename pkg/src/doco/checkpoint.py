"""Binary checkpoint format.

Layout (little-endian)::

    b"DOCO" | u32 format_version | u32 block_count
    block*: u32 name_len | name (utf-8) | u8 dtype_tag | u32 rank | u64 dim * rank | raw payload
    u64 checksum   (first 8 bytes of BLAKE2b over every block byte)

Blocks named ``param/<name>``, ``adam_m/<name>`` and ``adam_v/<name>`` hold
tensors; ``meta/*`` blocks hold the step counter and JSON (uint8) blobs for
the trainable flags, rng state and config snapshot.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import CorruptCheckpointError, IncompatibleCheckpointError
from .numerics import ParameterStore

MAGIC = b"DOCO"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<f4"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_TAGS = {np.dtype(v).str: k for k, v in _DTYPES.items()}


def _checksum(payload: bytes) -> int:
    return int.from_bytes(hashlib.blake2b(payload, digest_size=8).digest(), "little")


def _encode_block(name: str, array: np.ndarray) -> bytes:
    array = np.asarray(array)
    dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
    tag = _TAGS.get(np.dtype(dtype).str)
    if tag is None:
        raise TypeError(f"unsupported dtype {array.dtype} for {name!r}")
    raw = name.encode("utf-8")
    head = struct.pack("<I", len(raw)) + raw + struct.pack("<BI", tag, array.ndim)
    head += struct.pack(f"<{array.ndim}Q", *array.shape)
    return head + np.ascontiguousarray(array, dtype=_DTYPES[tag]).tobytes()


def _json_blob(obj) -> np.ndarray:
    return np.frombuffer(json.dumps(obj, sort_keys=True).encode("utf-8"), dtype=np.uint8)


def save_checkpoint(store: ParameterStore, path, format_version: int = FORMAT_VERSION) -> Path:
    blocks = []
    for name, t in store.params.items():
        blocks.append(_encode_block(f"param/{name}", t.data))
    for name in store.m:
        blocks.append(_encode_block(f"adam_m/{name}", store.m[name]))
        blocks.append(_encode_block(f"adam_v/{name}", store.v[name]))
    blocks.append(_encode_block("meta/step_count", np.array(store.step_count, dtype=np.int64)))
    blocks.append(_encode_block("meta/trainable", _json_blob(store.names(trainable=True))))
    blocks.append(_encode_block("meta/rng", _json_blob(store.rng.bit_generator.state)))
    blocks.append(_encode_block("meta/config", _json_blob(store.config)))
    payload = b"".join(blocks)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("wb") as fh:
        fh.write(MAGIC + struct.pack("<II", format_version, len(blocks)))
        fh.write(payload)
        fh.write(struct.pack("<Q", _checksum(payload)))
    return path


def _read_blocks(buf: bytes, count: int) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    try:
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + name_len].decode("utf-8")
            pos += name_len
            tag, rank = struct.unpack_from("<BI", buf, pos)
            pos += 5
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dtype = _DTYPES[tag]
            nbytes = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
            out[name] = np.frombuffer(buf[pos:pos + nbytes], dtype=dtype).reshape(dims).copy()
            pos += nbytes
    except (struct.error, KeyError, ValueError, UnicodeDecodeError) as exc:
        raise CorruptCheckpointError(f"unreadable block structure: {exc}") from exc
    if pos != len(buf):
        raise CorruptCheckpointError("trailing bytes after the last block")
    return out


def load_checkpoint(path) -> ParameterStore:
    data = Path(path).read_bytes()
    if len(data) < 20 or data[:4] != MAGIC:
        raise CorruptCheckpointError(f"{path} is not a DOCO checkpoint")
    version, count = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"checkpoint format_version {version}, this build reads {FORMAT_VERSION}"
        )
    payload = data[12:-8]
    (stored,) = struct.unpack("<Q", data[-8:])
    if _checksum(payload) != stored:
        raise CorruptCheckpointError(f"checksum mismatch in {path}")
    blocks = _read_blocks(payload, count)

    trainable = set(json.loads(blocks["meta/trainable"].tobytes()))
    store = ParameterStore()
    for key, arr in blocks.items():
        if key.startswith("param/"):
            name = key[len("param/"):]
            store.add(name, arr, trainable=name in trainable)
        elif key.startswith("adam_m/"):
            store.m[key[len("adam_m/"):]] = arr
        elif key.startswith("adam_v/"):
            store.v[key[len("adam_v/"):]] = arr
    store.step_count = int(blocks["meta/step_count"])
    store.rng.bit_generator.state = json.loads(blocks["meta/rng"].tobytes())
    store.config = json.loads(blocks["meta/config"].tobytes())
    return store
