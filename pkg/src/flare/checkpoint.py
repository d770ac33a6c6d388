"""FLCK checkpoint files.

Layout (little-endian)::

    "FLCK" | u32 version | u64 len + UTF-8 JSON header | u64 n_tensors | tensors...
    | u8 has_optimizer | [u64 n_tensors | tensors...]

    tensor := u16 name_len | name | u8 rank | u64 dims[rank] | f32 data

The JSON header carries the model config plus run metadata (train config,
normalization stats, epoch, schedule step, metric log). Optimizer moments are
stored as ``m.<param>`` / ``v.<param>``.
"""

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import MagicError, TensorCountError, TruncationError, VersionError
from .model import ModelConfig, param_shapes
from .train import OptimizerState

MAGIC = b"FLCK"
VERSION = 1


@dataclass
class Checkpoint:
    model_config: ModelConfig
    params: dict                     # name -> float32 ndarray
    optimizer: OptimizerState = None
    step: int = 0
    meta: dict = field(default_factory=dict)


def _pack_tensor(name, arr):
    raw = name.encode("utf-8")
    arr = np.ascontiguousarray(arr, dtype="<f4")
    head = struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + arr.tobytes()


def checkpoint_save(path, ckpt):
    header = dict(ckpt.meta)
    header["model"] = ckpt.model_config.to_dict()
    header["step"] = int(ckpt.step)
    if ckpt.optimizer is not None:
        header["opt_step"] = int(ckpt.optimizer.step)
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(blob)), blob,
             struct.pack("<Q", len(ckpt.params))]
    parts += [_pack_tensor(k, v) for k, v in ckpt.params.items()]
    if ckpt.optimizer is None:
        parts.append(struct.pack("<B", 0))
    else:
        opt = [(f"m.{k}", v) for k, v in ckpt.optimizer.m.items()]
        opt += [(f"v.{k}", v) for k, v in ckpt.optimizer.v.items()]
        parts.append(struct.pack("<BQ", 1, len(opt)))
        parts += [_pack_tensor(k, v) for k, v in opt]
    Path(path).write_bytes(b"".join(parts))


class _Reader:
    def __init__(self, buf, path):
        self.buf, self.off, self.path = buf, 0, path

    def take(self, n, what):
        if self.off + n > len(self.buf):
            raise TruncationError(f"{self.path}: truncated while reading {what}")
        out = self.buf[self.off:self.off + n]
        self.off += n
        return out

    def unpack(self, fmt, what):
        s = struct.Struct(fmt)
        return s.unpack(self.take(s.size, what))

    def tensors(self, count, section):
        out = {}
        for i in range(count):
            (nlen,) = self.unpack("<H", f"{section} tensor #{i} name length")
            name = self.take(nlen, f"{section} tensor #{i} name").decode("utf-8")
            (rank,) = self.unpack("<B", f"tensor '{name}' rank")
            dims = self.unpack(f"<{rank}Q", f"tensor '{name}' dims")
            size = int(np.prod(dims, dtype=np.int64))
            data = self.take(4 * size, f"tensor '{name}' data")
            out[name] = np.frombuffer(data, dtype="<f4").reshape(dims).astype(np.float32)
        return out


def checkpoint_load(path):
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise MagicError(f"{path}: not a FLCK checkpoint (bad magic {buf[:4]!r})")
    r = _Reader(buf, path)
    r.take(4, "magic")
    (version,) = r.unpack("<I", "version")
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    (hlen,) = r.unpack("<Q", "header length")
    header = json.loads(r.take(hlen, "config JSON").decode("utf-8"))
    cfg = ModelConfig.from_dict(header.pop("model"))
    step = header.pop("step", 0)
    opt_step = header.pop("opt_step", None)
    (count,) = r.unpack("<Q", "tensor count")
    expected = param_shapes(cfg)
    if count != len(expected):
        raise TensorCountError(f"{path}: {count} tensors stored, config implies {len(expected)}")
    params = r.tensors(count, "parameter")
    for name, shape in expected.items():
        if name not in params or params[name].shape != tuple(shape):
            raise TensorCountError(f"{path}: parameter '{name}' missing or misshapen")
    (has_opt,) = r.unpack("<B", "optimizer flag")
    opt = None
    if has_opt:
        (ocount,) = r.unpack("<Q", "optimizer tensor count")
        if ocount not in (0, 2 * len(expected)):
            raise TensorCountError(f"{path}: {ocount} optimizer tensors, expected {2 * len(expected)}")
        moments = r.tensors(ocount, "optimizer")
        opt = OptimizerState(step=int(opt_step or 0),
                             m={k[2:]: v for k, v in moments.items() if k.startswith("m.")},
                             v={k[2:]: v for k, v in moments.items() if k.startswith("v.")})
    return Checkpoint(model_config=cfg, params=params, optimizer=opt, step=step, meta=header)
