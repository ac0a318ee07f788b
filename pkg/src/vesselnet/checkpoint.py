"""Binary checkpoint format (little-endian throughout)::

    b"SAU2" | u32 version | u32 len + config text | u8 has_optimizer_state
    | u32 tensor count | per tensor: u16 len + name, u8 rank, rank x u32 dims,
      float32 payload

Optimizer tensors, when present, follow the parameters under the names
``adam.m/<param>``, ``adam.v/<param>`` and ``adam.step``.
"""

import struct

import numpy as np

from .autodiff import parameter
from .errors import FormatError
from .model import ModelConfig, ParamStore, expected_shapes
from .optim import AdamState

MAGIC = b"SAU2"
VERSION = 1


def _tensor_record(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}I", *arr.shape)
    return head + arr.tobytes()


def dumps(params, opt_state=None):
    records = [(name, t.data) for name, t in params.items()]
    if opt_state is not None:
        for name in params:
            if name in opt_state.m:
                records.append((f"adam.m/{name}", opt_state.m[name]))
                records.append((f"adam.v/{name}", opt_state.v[name]))
        records.append(("adam.step", np.array([opt_state.t], dtype=np.float32)))
    cfg = params.config.to_text().encode("utf-8")
    out = [MAGIC, struct.pack("<I", VERSION), struct.pack("<I", len(cfg)), cfg,
           struct.pack("<B", 1 if opt_state is not None else 0),
           struct.pack("<I", len(records))]
    out += [_tensor_record(n, a) for n, a in records]
    return b"".join(out)


def save_checkpoint(path, params, opt_state=None):
    blob = dumps(params, opt_state)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, n, what):
        if self.pos + n > len(self.buf):
            raise FormatError(f"truncated file while reading {what}", self.pos)
        chunk = self.buf[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def loads(buf, lr=1e-3):
    r = _Reader(memoryview(bytes(buf)))
    if bytes(r.take(4, "magic")) != MAGIC:
        raise FormatError("bad magic, not a vesselnet checkpoint", 0)
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (cfg_len,) = r.unpack("<I", "config length")
    cfg_at = r.pos
    try:
        config = ModelConfig.from_text(bytes(r.take(cfg_len, "config")).decode("utf-8"))
    except (UnicodeDecodeError, ValueError) as exc:
        if isinstance(exc, FormatError):
            raise
        raise FormatError(f"invalid config blob: {exc}", cfg_at) from None
    (has_opt,) = r.unpack("<B", "optimizer flag")
    if has_opt not in (0, 1):
        raise FormatError(f"optimizer flag must be 0 or 1, got {has_opt}", r.pos - 1)
    (count,) = r.unpack("<I", "tensor count")
    tensors = {}
    for _ in range(count):
        (name_len,) = r.unpack("<H", "name length")
        name = bytes(r.take(name_len, "tensor name")).decode("utf-8", errors="replace")
        (rank,) = r.unpack("<B", "rank")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        n = int(np.prod(dims)) if rank else 1
        payload = r.take(4 * n, f"payload of {name}")
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(dims)
    if r.pos != len(r.buf):
        raise FormatError("trailing bytes after last tensor", r.pos)
    state = None
    if has_opt:
        state = AdamState(lr=lr)
        step = tensors.pop("adam.step", None)
        state.t = int(step.reshape(-1)[0]) if step is not None else 0
        for key in [k for k in tensors if k.startswith("adam.")]:
            kind, _, pname = key.partition("/")
            arr = tensors.pop(key)
            (state.m if kind == "adam.m" else state.v)[pname] = arr.copy()
    expected = expected_shapes(config)
    got = {k: a.shape for k, a in tensors.items()}
    if got != expected:
        missing = sorted(set(expected) - set(got))
        extra = sorted(set(got) - set(expected))
        raise FormatError(f"tensors do not match the stored config (missing {missing[:3]}, "
                          f"unexpected {extra[:3]})", cfg_at)
    params = ParamStore(config, {k: parameter(a, name=k) for k, a in tensors.items()})
    return params, state


def load_checkpoint(path, lr=1e-3):
    with open(path, "rb") as fh:
        return loads(fh.read(), lr=lr)
