"""SRX1 signal files: a 32-byte little-endian header followed by raw samples.

Header layout (offsets in bytes)::

    0  magic            b"SRX1"
    4  version          u16 (1)
    6  format code      u16 (1 real u12 in u16, 2 real f32, 3 complex f32 interleaved)
    8  sample rate      u64, Hz
    16 sps numerator    u32
    20 sps denominator  u32
    24 sample count     u64
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

from .errors import ConfigError

MAGIC = b"SRX1"
VERSION = 1
HEADER = struct.Struct("<4sHHQIIQ")


class SrxFormat(enum.IntEnum):
    REAL_U12 = 1
    REAL_F32 = 2
    COMPLEX_F32 = 3

    @property
    def dtype(self) -> np.dtype:
        return {1: np.dtype("<u2"), 2: np.dtype("<f4"), 3: np.dtype("<c8")}[int(self)]


class Srx1Error(ConfigError):
    pass


@dataclass
class Srx1File:
    fmt: SrxFormat
    sample_rate: int
    sps: Fraction
    samples: np.ndarray

    def header(self) -> bytes:
        return HEADER.pack(MAGIC, VERSION, int(self.fmt), int(self.sample_rate),
                           self.sps.numerator, self.sps.denominator, len(self.samples))


def _format_of(samples: np.ndarray) -> SrxFormat:
    if samples.dtype == np.uint16:
        return SrxFormat.REAL_U12
    if np.iscomplexobj(samples):
        return SrxFormat.COMPLEX_F32
    return SrxFormat.REAL_F32


def write_srx1(path, samples, sample_rate: float, sps, fmt: SrxFormat | None = None) -> Srx1File:
    samples = np.asarray(samples)
    fmt = _format_of(samples) if fmt is None else SrxFormat(fmt)
    if float(sample_rate) != int(sample_rate):
        raise Srx1Error("sample rate must be a whole number of Hz")
    data = samples.astype(fmt.dtype, copy=False)
    if fmt is SrxFormat.REAL_U12 and np.any(data > 0x0FFF):
        raise Srx1Error("12-bit codes must leave the upper 4 bits clear")
    f = Srx1File(fmt, int(sample_rate), Fraction(sps).limit_denominator(1 << 31), data)
    with open(path, "wb") as fh:
        fh.write(f.header())
        fh.write(data.tobytes())
    return f


def read_srx1(path) -> Srx1File:
    raw = Path(path).read_bytes()
    if len(raw) < HEADER.size:
        raise Srx1Error("file shorter than the SRX1 header")
    magic, version, code, rate, num, den, n = HEADER.unpack_from(raw)
    if magic != MAGIC:
        raise Srx1Error("not an SRX1 file")
    if version != VERSION:
        raise Srx1Error(f"unsupported SRX1 version {version}")
    try:
        fmt = SrxFormat(code)
    except ValueError:
        raise Srx1Error(f"unknown SRX1 format code {code}") from None
    payload = raw[HEADER.size:]
    if len(payload) != n * fmt.dtype.itemsize:
        raise Srx1Error(f"payload holds {len(payload)} bytes, header promises {n} samples")
    if den == 0:
        raise Srx1Error("samples-per-symbol denominator is zero")
    data = np.frombuffer(payload, dtype=fmt.dtype).copy()
    if fmt is SrxFormat.REAL_U12 and np.any(data > 0x0FFF):
        raise Srx1Error("12-bit codes with upper bits set")
    return Srx1File(fmt, rate, Fraction(num, den), data)


def sidecar_path(path) -> Path:
    return Path(str(path) + ".json")


def write_sidecar(path, meta: dict) -> None:
    sidecar_path(path).write_text(json.dumps(meta, indent=2, sort_keys=True, default=float) + "\n")


def read_sidecar(path) -> dict:
    p = sidecar_path(path)
    return json.loads(p.read_text()) if p.exists() else {}
