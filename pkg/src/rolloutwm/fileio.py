"""On-disk formats: HDDS datasets, HDWM checkpoints and drift-report CSVs.

All binary fields are little-endian; floating payloads are 32-bit IEEE-754.
"""

from __future__ import annotations

import csv
import struct
import zlib
from pathlib import Path

import numpy as np

from .denoiser import Denoiser, DenoiserConfig
from .errors import ContractViolation, FormatError
from .metrics import DriftReport
from .tensor import Tensor
from .worldsim import Clip

DATASET_MAGIC = b"HDDS"
CHECKPOINT_MAGIC = b"HDWM"
VERSION = 1
REPORT_HEADER = "chunk,lfd_cumulative,are_deg,dtw"

_F32 = np.dtype("<f4")
_U32 = np.dtype("<u4")


class _Reader:
    def __init__(self, data: bytes, path):
        self.data = data
        self.pos = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise FormatError(f"{self.path}: truncated at byte {self.pos} (wanted {n} more)")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def array(self, dtype, shape) -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * dtype.itemsize)
        return np.frombuffer(raw, dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))


def _write_bytes(path, payload: bytes) -> None:
    try:
        Path(path).write_bytes(payload)
    except OSError as e:
        raise OSError(f"cannot write {path}: {e.strerror}") from e


def _read_bytes(path) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as e:
        raise OSError(f"cannot read {path}: {e.strerror}") from e


# ---------------------------------------------------------------------------
# datasets


def encode_dataset(clips) -> bytes:
    parts = [DATASET_MAGIC, struct.pack("<II", VERSION, len(clips))]
    for c in clips:
        f, dz = c.latents.shape
        parts.append(struct.pack("<IIIIQ", f, dz, c.layout.shape[1], len(c.anchor_ids), c.seed))
        if c.actions.shape != (f - 1, 3) or c.poses.shape != (f, 4) or len(c.layout) != f:
            raise ContractViolation("clip arrays disagree on frame count")
        for arr in (c.latents, c.actions, c.layout, c.poses):
            parts.append(np.ascontiguousarray(arr, dtype=_F32).tobytes())
        parts.append(np.ascontiguousarray(c.anchor_ids, dtype=_U32).tobytes())
    return b"".join(parts)


def decode_dataset(data: bytes, path="<bytes>") -> list[Clip]:
    r = _Reader(data, path)
    if r.take(4) != DATASET_MAGIC:
        raise FormatError(f"{path}: not an HDDS dataset")
    version, count = r.unpack("<II")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported dataset version {version}")
    clips = []
    for _ in range(count):
        f, dz, dl, k, seed = r.unpack("<IIIIQ")
        clips.append(Clip(
            latents=r.array(_F32, (f, dz)),
            actions=r.array(_F32, (f - 1, 3)),
            layout=r.array(_F32, (f, dl)),
            poses=r.array(_F32, (f, 4)),
            anchor_ids=r.array(_U32, (k,)),
            seed=int(seed),
        ))
    if r.pos != len(data):
        raise FormatError(f"{path}: {len(data) - r.pos} trailing bytes after {count} clips")
    return clips


def write_dataset(clips, path) -> None:
    _write_bytes(path, encode_dataset(clips))


def read_dataset(path) -> list[Clip]:
    return decode_dataset(_read_bytes(path), path)


# ---------------------------------------------------------------------------
# checkpoints


def encode_checkpoint(model: Denoiser) -> bytes:
    parts = [CHECKPOINT_MAGIC, struct.pack("<I", VERSION), model.config.digest(),
             struct.pack("<I", len(model.params))]
    for name in sorted(model.params):
        data = model.params[name].data
        raw = name.encode()
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        parts.append(np.ascontiguousarray(data, dtype=_F32).tobytes())
    body = b"".join(parts)
    return body + struct.pack("<I", zlib.crc32(body))


def decode_checkpoint(data: bytes, config: DenoiserConfig, path="<bytes>",
                      allow_config_mismatch: bool = False) -> Denoiser:
    if len(data) < 4 + 4 + 32 + 4 + 4 or data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: not an HDWM checkpoint")
    body, (crc,) = data[:-4], struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != crc:
        raise FormatError(f"{path}: checksum mismatch")
    r = _Reader(body, path)
    r.take(4)
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    digest = r.take(32)
    if digest != config.digest() and not allow_config_mismatch:
        raise FormatError(f"{path}: checkpoint was written for a different model config")
    (count,) = r.unpack("<I")
    params = {}
    for _ in range(count):
        (n,) = r.unpack("<H")
        name = r.take(n).decode()
        (ndim,) = r.unpack("<I")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        params[name] = Tensor(r.array(_F32, shape), requires_grad=True)
    if r.pos != len(body):
        raise FormatError(f"{path}: trailing bytes in checkpoint")
    return Denoiser(config, params)


def save_checkpoint(model: Denoiser, path) -> None:
    _write_bytes(path, encode_checkpoint(model))


def load_checkpoint(path, config: DenoiserConfig, allow_config_mismatch: bool = False) -> Denoiser:
    return decode_checkpoint(_read_bytes(path), config, path, allow_config_mismatch)


# ---------------------------------------------------------------------------
# reports


def format_value(v: float) -> str:
    """Six significant digits, always positional notation."""
    if not np.isfinite(v):
        return "nan"
    return np.format_float_positional(float(v), precision=6, unique=False, fractional=False, trim="-")


def write_report(report: DriftReport, path) -> None:
    if len(report) == 0:
        raise ContractViolation("refusing to write an empty report")
    lines = [REPORT_HEADER]
    for chunk, lfd, are_deg, dtw in report.rows():
        lines.append(",".join([str(chunk), format_value(lfd), format_value(are_deg), format_value(dtw)]))
    _write_bytes(path, ("\n".join(lines) + "\n").encode())


def read_report(path) -> DriftReport:
    text = _read_bytes(path).decode()
    rows = list(csv.reader(text.splitlines()))
    if not rows or ",".join(rows[0]) != REPORT_HEADER:
        raise FormatError(f"{path}: unexpected report header")
    body = np.array([[float(x) for x in row] for row in rows[1:]], dtype=np.float64).reshape(-1, 4)
    return DriftReport(body[:, 0].astype(int), body[:, 1], body[:, 2], body[:, 3])
