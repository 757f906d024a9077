"""Checkpoint container: canonical key-value header followed by named tensors.

Layout::

    b"LIVEPAD-CKPT 1\\n"
    u32 header length, header bytes (``key = value`` lines, sorted, UTF-8)
    u32 tensor count
    per tensor: u32 name length, name bytes, tensor record (see tensor.py)

All integers are little-endian.
"""

import struct

from .tensor import tensor_from_bytes, tensor_to_bytes

MAGIC = b"LIVEPAD-CKPT 1\n"


def format_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(float(v))
    return str(v)


def parse_value(text):
    if text in ("true", "false"):
        return text == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def dump_kv(mapping):
    return "".join(f"{k} = {format_value(mapping[k])}\n" for k in sorted(mapping))


def load_kv(text):
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, _, value = line.partition("=")
        out[key.strip()] = parse_value(value.strip())
    return out


def encode(header, tensors):
    head = dump_kv(header).encode("utf-8")
    parts = [MAGIC, struct.pack("<I", len(head)), head, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        parts += [struct.pack("<I", len(raw)), raw, tensor_to_bytes(arr)]
    return b"".join(parts)


def decode(buf):
    if not buf.startswith(MAGIC):
        raise ValueError("not a livepad checkpoint")
    off = len(MAGIC)
    (n,) = struct.unpack_from("<I", buf, off)
    off += 4
    header = load_kv(buf[off : off + n].decode("utf-8"))
    off += n
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        name = buf[off : off + n].decode("utf-8")
        off += n
        tensors[name], off = tensor_from_bytes(buf, off)
    return header, tensors


def write(path, header, tensors):
    with open(path, "wb") as fh:
        fh.write(encode(header, tensors))


def read(path):
    with open(path, "rb") as fh:
        return decode(fh.read())
