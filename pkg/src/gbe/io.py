"""Binary tensor files ("GBET") and named-tensor checkpoints.

Layout of one record::

    b"GBET" | u8 version (=1) | u8 rank | rank x u32 LE dims | f32 LE payload

A checkpoint is a concatenation of records in one ``.gbet`` file plus a JSON
index mapping each tensor name to its byte offset.
"""

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from gbe.errors import CorruptFileError

MAGIC = b"GBET"
VERSION = 1


def encode_tensor(array):
    arr = np.asarray(array, dtype="<f4")
    if arr.ndim > 255:
        raise ValueError("rank above 255 cannot be encoded")
    header = MAGIC + struct.pack("<BB", VERSION, arr.ndim)
    header += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return header + arr.tobytes()


def decode_tensor(buf, offset=0, source="<buffer>"):
    """Decode one record starting at ``offset``; returns ``(array, next_offset)``."""
    if len(buf) < offset + 6:
        raise CorruptFileError(source, "truncated header")
    if buf[offset:offset + 4] != MAGIC:
        raise CorruptFileError(source, f"bad magic at byte {offset}")
    version, rank = struct.unpack_from("<BB", buf, offset + 4)
    if version != VERSION:
        raise CorruptFileError(source, f"unsupported version {version}")
    pos = offset + 6
    if len(buf) < pos + 4 * rank:
        raise CorruptFileError(source, "truncated shape")
    shape = struct.unpack_from(f"<{rank}I", buf, pos)
    pos += 4 * rank
    count = int(np.prod(shape, dtype=np.int64))
    end = pos + 4 * count
    if len(buf) < end:
        raise CorruptFileError(source, f"truncated payload: need {end - pos} bytes, have {len(buf) - pos}")
    arr = np.frombuffer(buf, dtype="<f4", count=count, offset=pos).reshape(shape)
    return arr.astype(np.float32), end


def save_tensor(path, array):
    Path(path).write_bytes(encode_tensor(array))


def load_tensor(path):
    path = Path(path)
    buf = path.read_bytes()
    arr, end = decode_tensor(buf, 0, source=path)
    if end != len(buf):
        raise CorruptFileError(path, f"{len(buf) - end} trailing bytes")
    return arr


def file_checksum(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_checkpoint(path, named):
    """Write ``{name: array}`` to ``path`` (.gbet) and its index to ``path.json``."""
    path = Path(path)
    index, chunks, offset = {}, [], 0
    for name, arr in named.items():
        blob = encode_tensor(arr)
        index[name] = offset
        chunks.append(blob)
        offset += len(blob)
    path.write_bytes(b"".join(chunks))
    index_path = path.with_suffix(path.suffix + ".json")
    index_path.write_text(json.dumps(index, indent=1))
    return index_path


def load_checkpoint(path):
    path = Path(path)
    index_path = path.with_suffix(path.suffix + ".json")
    try:
        index = json.loads(index_path.read_text())
    except (OSError, ValueError) as exc:
        raise CorruptFileError(index_path, f"unreadable index ({exc})") from exc
    try:
        buf = path.read_bytes()
    except OSError as exc:
        raise CorruptFileError(path, f"unreadable checkpoint ({exc})") from exc
    out = {}
    for name, offset in index.items():
        out[name], _ = decode_tensor(buf, int(offset), source=path)
    return out
