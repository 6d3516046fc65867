"""TMAC checkpoint files.

Layout (all integers u32 little-endian, all floats f64 little-endian)::

    "TMAC" | version=1 | param count
    per entry: name length | UTF-8 name | rank | dims[rank] | data

The first entry is always ``__config``, a rank-1 vector holding the model
configuration in this order:

    0  memory_length       5  aggregation (0 concat, 1 sum)
    1  key_channels        6  attention_scaling (0 none, 1 inv_sqrt_ck)
    2  value_channels      7  encoder (0 "1x1+3x3", 1 "3x3", 2 "1x1")
    3  num_classes         8  aux_loss_weight
    4  in_channels         9  number of backbone stages S
    10 .. 10+S-1           backbone widths
    10+S .. 10+2S-1        backbone strides

Other entries whose names start with ``__`` carry training state
(``__optim`` = [iteration], ``__velocity.<param>``).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from .errors import FormatError
from .model import AGGREGATIONS, ENCODERS, SCALINGS, ModelConfig, TMANet

MAGIC = b"TMAC"
VERSION = 1
CONFIG_KEY = "__config"


def config_to_vector(cfg: ModelConfig) -> np.ndarray:
    head = [
        cfg.memory_length,
        cfg.key_channels,
        cfg.value_channels,
        cfg.num_classes,
        cfg.in_channels,
        AGGREGATIONS.index(cfg.aggregation),
        SCALINGS.index(cfg.attention_scaling),
        ENCODERS.index(cfg.encoder),
        cfg.aux_loss_weight,
        len(cfg.backbone_widths),
    ]
    return np.array(head + list(cfg.backbone_widths) + list(cfg.backbone_strides), dtype=np.float64)


def config_from_vector(v: np.ndarray) -> ModelConfig:
    v = np.asarray(v, dtype=np.float64)
    try:
        S = int(v[9])
        if v.size != 10 + 2 * S:
            raise FormatError(f"config vector has {v.size} entries, expected {10 + 2 * S}")
        return ModelConfig(
            memory_length=int(v[0]),
            key_channels=int(v[1]),
            value_channels=int(v[2]),
            num_classes=int(v[3]),
            in_channels=int(v[4]),
            aggregation=AGGREGATIONS[int(v[5])],
            attention_scaling=SCALINGS[int(v[6])],
            encoder=ENCODERS[int(v[7])],
            aux_loss_weight=float(v[8]),
            backbone_widths=tuple(int(x) for x in v[10 : 10 + S]),
            backbone_strides=tuple(int(x) for x in v[10 + S : 10 + 2 * S]),
        )
    except FormatError:
        raise
    except (IndexError, ValueError) as exc:
        raise FormatError(f"malformed config vector: {exc}") from exc


def write_tensors(path: str | Path, entries: list[tuple[str, np.ndarray]]) -> None:
    chunks = [MAGIC, struct.pack("<II", VERSION, len(entries))]
    for name, arr in entries:
        arr = np.asarray(arr, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_tensors(path: str | Path) -> list[tuple[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise FormatError(f"{path}: not a TMAC checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported TMAC version {version}")
        pos = 12
        entries = []
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos : pos + n].decode("utf-8")
            if len(name.encode()) != n:
                raise FormatError(f"{path}: truncated entry name")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            dims = struct.unpack_from(f"<{rank}I", buf, pos + 4)
            pos += 4 + 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            data = np.frombuffer(buf, dtype="<f8", count=size, offset=pos).reshape(dims).astype(np.float64)
            pos += 8 * size
            entries.append((name, data))
    except FormatError:
        raise
    except (struct.error, ValueError, UnicodeDecodeError) as exc:
        raise FormatError(f"{path}: truncated or corrupt TMAC file ({exc})") from exc
    if pos != len(buf):
        raise FormatError(f"{path}: {len(buf) - pos} trailing bytes")
    return entries


def save_checkpoint(path: str | Path, model: TMANet, extra: dict[str, np.ndarray] | None = None) -> None:
    entries = [(CONFIG_KEY, config_to_vector(model.config))]
    entries += [(name, p.data) for name, p in model.params.items()]
    entries += list((extra or {}).items())
    write_tensors(path, entries)


def load_checkpoint(path: str | Path) -> tuple[TMANet, dict[str, np.ndarray]]:
    """Rebuild the model stored in ``path``; returns it with any extra entries."""
    entries = read_tensors(path)
    if not entries or entries[0][0] != CONFIG_KEY:
        raise FormatError(f"{path}: first entry must be {CONFIG_KEY}")
    model = TMANet(config_from_vector(entries[0][1]))
    state = {n: a for n, a in entries[1:] if not n.startswith("__")}
    extra = {n: a for n, a in entries[1:] if n.startswith("__")}
    try:
        model.load_state_dict(state)
    except ValueError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return model, extra
