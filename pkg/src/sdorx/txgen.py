"""PAM-N / QAM-N transmitter: Gray mapping, RRC shaping, carrier-tone insertion.

The optical field is produced at ``dac_rate`` (12 GSa/s by default).  PAM is
ideal chirp-free intensity modulation, ``E = sqrt(1 + m*x)``; QAM is a
single-sideband field whose carrier sits at 0 Hz with the data band entirely
at positive frequencies, the shape a Kramers-Kronig receiver needs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from .core import (
    Domain,
    PrbsState,
    RrcSpec,
    SampleBuffer,
    StreamingFir,
    exact_phase,
    exact_phasor,
    prbs_bits,
    rrc_filter_taps,
)
from .errors import ConfigError, NyquistError, SignalSizeError

PAM_ORDERS = (2, 4, 8, 16)
QAM_ORDERS = (4, 16, 64)


def _gray(i):
    return i ^ (i >> 1)


@dataclass(frozen=True)
class ModulationFormat:
    family: str  # "PAM" or "QAM"
    order: int

    def __post_init__(self):
        fam = self.family.upper()
        object.__setattr__(self, "family", fam)
        allowed = {"PAM": PAM_ORDERS, "QAM": QAM_ORDERS}.get(fam)
        if allowed is None or self.order not in allowed:
            raise ConfigError(f"unsupported format {self.family}-{self.order}")

    @classmethod
    def parse(cls, text: str) -> "ModulationFormat":
        fam, _, order = text.replace("_", "-").partition("-")
        try:
            return cls(fam, int(order))
        except ValueError as exc:
            raise ConfigError(f"cannot parse modulation format {text!r}") from exc

    def __str__(self):
        return f"{self.family}-{self.order}"

    @property
    def is_qam(self) -> bool:
        return self.family == "QAM"

    @property
    def bits_per_symbol(self) -> int:
        return int(math.log2(self.order))

    @property
    def axis_levels(self) -> int:
        """Amplitude levels per real axis."""
        return self.order if not self.is_qam else int(math.isqrt(self.order))

    @property
    def axis_scale(self) -> float:
        """Spacing scale: axis level ``i`` sits at ``scale * (2i - (M-1))``."""
        m = self.axis_levels
        if self.is_qam:
            return math.sqrt(3.0 / (2.0 * (m * m - 1)))
        return 1.0 / (m - 1)

    def levels(self) -> np.ndarray:
        """Ascending real amplitude levels of one axis."""
        m = self.axis_levels
        return self.axis_scale * (2 * np.arange(m) - (m - 1))

    @property
    def gray_map(self) -> np.ndarray:
        """``gray_map[value] -> symbol`` for every ``bits_per_symbol``-bit value."""
        return _symbol_table(self)

    def constellation(self) -> np.ndarray:
        """Constellation points ordered by bit value (MSB first)."""
        return self.gray_map

    @property
    def mean_abs_level(self) -> float:
        """Mean ``|level|`` of equiprobable PAM levels (used by normalization)."""
        return float(np.mean(np.abs(self.levels())))


def _axis_table(m: int) -> np.ndarray:
    """value -> level position on one axis (Gray)."""
    pos = np.empty(m, dtype=np.int64)
    for i in range(m):
        pos[_gray(i)] = i
    return pos


def _symbol_table(fmt: ModulationFormat) -> np.ndarray:
    m = fmt.axis_levels
    levels = fmt.levels()
    pos = _axis_table(m)
    if not fmt.is_qam:
        return levels[pos]
    # QAM axes use the reflected Gray map so that bit 0 maps to the positive half.
    axis = levels[::-1][pos]
    b = fmt.bits_per_symbol // 2
    values = np.arange(fmt.order)
    return axis[values >> b] + 1j * axis[values & (m - 1)]


def bits_to_values(bits: np.ndarray, k: int) -> np.ndarray:
    bits = np.asarray(bits, dtype=np.int64)
    if len(bits) % k:
        raise SignalSizeError(f"{len(bits)} bits is not a multiple of {k} bits per symbol")
    weights = 1 << np.arange(k - 1, -1, -1, dtype=np.int64)
    return bits.reshape(-1, k) @ weights


def values_to_bits(values: np.ndarray, k: int) -> np.ndarray:
    values = np.asarray(values, dtype=np.int64)
    shifts = np.arange(k - 1, -1, -1, dtype=np.int64)
    return ((values[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def map_symbols(bits, fmt: ModulationFormat) -> np.ndarray:
    """Gray-map bits (MSB first) to PAM levels (unit peak) or QAM points (unit power)."""
    return fmt.gray_map[bits_to_values(bits, fmt.bits_per_symbol)]


def symbol_values(symbols: np.ndarray, fmt: ModulationFormat) -> np.ndarray:
    """Nearest-point hard decision, returned as the Gray bit value of each symbol."""
    m = fmt.axis_levels
    s = fmt.axis_scale
    gray = np.array([_gray(i) for i in range(m)], dtype=np.int64)
    if not fmt.is_qam:
        idx = np.clip(np.floor((np.real(symbols) / s + m) / 2), 0, m - 1).astype(np.int64)
        return gray[idx]
    b = fmt.bits_per_symbol // 2
    # reflected axis: position counts down from the top level
    ii = np.clip(np.floor((-np.real(symbols) / s + m) / 2), 0, m - 1).astype(np.int64)
    iq = np.clip(np.floor((-np.imag(symbols) / s + m) / 2), 0, m - 1).astype(np.int64)
    return (gray[ii] << b) | gray[iq]


def demap_symbols(symbols, fmt: ModulationFormat) -> np.ndarray:
    return values_to_bits(symbol_values(symbols, fmt), fmt.bits_per_symbol)


def default_cspr_db(fmt: ModulationFormat) -> float:
    return 6.0 if fmt.order == 4 else 11.0


@dataclass
class TxConfig:
    format: ModulationFormat = field(default_factory=lambda: ModulationFormat("PAM", 4))
    baud: float | None = None
    rolloff: float | None = None
    dac_rate: float = 12e9
    carrier_offset: float = 0.547e9
    cspr_db: float | None = None
    span_symbols: int | None = None
    pam_mod_index: float = 0.6
    prbs_order: int = 15
    prbs_seed: int = 1

    def __post_init__(self):
        if isinstance(self.format, str):
            self.format = ModulationFormat.parse(self.format)
        q = self.format.is_qam
        if self.baud is None:
            self.baud = 1e9 if q else 2e9
        if self.rolloff is None:
            self.rolloff = 0.01 if q else 0.5
        if self.span_symbols is None:
            self.span_symbols = 512 if q else 64
        if q and self.cspr_db is None:
            self.cspr_db = default_cspr_db(self.format)
        if not 0 < self.pam_mod_index <= 1:
            raise ConfigError("pam_mod_index must lie in (0, 1]")
        if q and self.carrier_offset <= (1 + self.rolloff) * self.baud / 2:
            raise ConfigError("carrier tone would fall inside the signal band")

    @property
    def sps(self) -> int:
        ratio = Fraction(self.dac_rate) / Fraction(self.baud)
        if ratio.denominator != 1:
            raise ConfigError("dac_rate must be an integer multiple of the baud rate")
        return int(ratio)

    def rrc(self) -> RrcSpec:
        return RrcSpec(self.rolloff, self.baud, self.span_symbols)


def shaping_taps(cfg: TxConfig) -> np.ndarray:
    """Pulse used by the transmitter: unit-energy RRC scaled by ``sqrt(sps)``.

    With this scaling the waveform power equals the mean symbol power.
    """
    if cfg.dac_rate < (1 + cfg.rolloff) * cfg.baud:
        raise NyquistError("dac_rate below (1+rolloff)*baud")
    taps = rrc_filter_taps(cfg.rrc(), cfg.dac_rate)
    return taps * np.sqrt(cfg.sps)


class Shaper:
    """Streaming pulse shaper: symbols in, ``sps`` samples per symbol out."""

    def __init__(self, cfg: TxConfig):
        self.cfg = cfg
        self.taps = shaping_taps(cfg)
        self.delay = (len(self.taps) - 1) // 2
        self._fir = StreamingFir(self.taps.astype(np.float32))

    def __call__(self, symbols: np.ndarray) -> np.ndarray:
        sps = self.cfg.sps
        up = np.zeros(len(symbols) * sps, dtype=np.complex64 if np.iscomplexobj(symbols) else np.float32)
        up[::sps] = symbols
        return self._fir(up)


def shape_waveform(symbols, cfg: TxConfig) -> SampleBuffer:
    """RRC-shape a finite symbol block; symbol ``m`` peaks at sample ``m*sps``."""
    symbols = np.asarray(symbols)
    shaper = Shaper(cfg)
    sps = cfg.sps
    pad = -(-shaper.delay // sps)
    y = shaper(np.concatenate([symbols, np.zeros(pad, dtype=symbols.dtype)]))
    y = y[shaper.delay : shaper.delay + len(symbols) * sps]
    return SampleBuffer(y, cfg.dac_rate, Fraction(sps), Domain.COMPLEX if np.iscomplexobj(y) else Domain.REAL)


def tone_amplitude(cspr_db: float, signal_power: float) -> float:
    return math.sqrt(signal_power * 10 ** (cspr_db / 10))


def add_carrier_tone(
    waveform: SampleBuffer,
    cfg: TxConfig,
    signal_power: float | None = None,
    start_index: int = 0,
) -> SampleBuffer:
    """Add the carrier tone at ``-carrier_offset`` relative to the baseband data.

    The tone amplitude realizes ``cfg.cspr_db`` against ``signal_power``, which
    defaults to the measured mean power of ``waveform``.  After the
    ``+carrier_offset`` upshift done by :func:`tx_field` the tone lands at 0 Hz
    and the data sits on the positive side of it.
    """
    if not cfg.format.is_qam:
        raise ConfigError("carrier tone only applies to QAM")
    if cfg.cspr_db is None:
        raise ConfigError("cspr_db not set")
    if cfg.carrier_offset <= (1 + cfg.rolloff) * cfg.baud / 2:
        raise ConfigError("carrier tone would fall inside the signal band")
    x = np.asarray(waveform.samples)
    p = float(np.mean(np.abs(x) ** 2)) if signal_power is None else signal_power
    amp = tone_amplitude(cfg.cspr_db, p)
    ph = exact_phase(start_index, len(x), -cfg.carrier_offset, waveform.sample_rate)
    out = x + amp * np.exp(1j * ph)
    return SampleBuffer(out, waveform.sample_rate, waveform.samples_per_symbol, Domain.COMPLEX,
                        waveform.sequence_index)


class Transmitter:
    """Endless optical-field source driven by a PRBS.

    ``next(n_symbols)`` returns the field for the next symbols (complex64 at
    ``dac_rate``).  The stream lags the symbol grid by ``delay`` samples.
    """

    def __init__(self, cfg: TxConfig):
        self.cfg = cfg
        self.fmt = cfg.format
        self.prbs = PrbsState.of_order(cfg.prbs_order, cfg.prbs_seed)
        self.shaper = Shaper(cfg)
        self.delay = self.shaper.delay
        self.sample_index = 0
        self.clipped = 0
        self.bits_sent = 0
        if self.fmt.is_qam:
            r = 10 ** (cfg.cspr_db / 10) if np.isfinite(cfg.cspr_db) else np.inf
            self._sig_gain = 1 / math.sqrt(1 + r) if np.isfinite(r) else 0.0
            self._tone = math.sqrt(r / (1 + r)) if np.isfinite(r) else 1.0

    def bits(self, n_bits: int) -> np.ndarray:
        b, self.prbs = prbs_bits(self.prbs, n_bits)
        self.bits_sent += n_bits
        return b

    def next(self, n_symbols: int) -> np.ndarray:
        syms = map_symbols(self.bits(n_symbols * self.fmt.bits_per_symbol), self.fmt)
        wave = self.shaper(syms)
        start = self.sample_index
        self.sample_index += len(wave)
        if not self.fmt.is_qam:
            intensity = 1.0 + self.cfg.pam_mod_index * wave
            neg = intensity < 0
            self.clipped += int(np.count_nonzero(neg))
            intensity[neg] = 0.0
            return np.sqrt(intensity).astype(np.complex64)
        up = exact_phasor(start, len(wave), self.cfg.carrier_offset, self.cfg.dac_rate)
        field_ = np.float32(self._sig_gain) * wave * up
        field_ += np.float32(self._tone)
        return field_


def reference_symbols(cfg: TxConfig) -> np.ndarray:
    """One period of the transmitted symbol sequence (PRBS order ``k`` gives ``2**k - 1``)."""
    fmt = cfg.format
    state = PrbsState.of_order(cfg.prbs_order, cfg.prbs_seed)
    period = (1 << cfg.prbs_order) - 1
    bits, _ = prbs_bits(state, period * fmt.bits_per_symbol)
    return map_symbols(bits, fmt)


def reference_bits(cfg: TxConfig) -> np.ndarray:
    state = PrbsState.of_order(cfg.prbs_order, cfg.prbs_seed)
    bits, _ = prbs_bits(state, (1 << cfg.prbs_order) - 1)
    return bits


def tx_field(cfg: TxConfig, bits) -> SampleBuffer:
    """Unit-average-power optical field for a finite bit block.

    PAM: ``sqrt(1 + m*x)``, negative intensities clipped to zero.  QAM:
    baseband data plus carrier tone, upshifted by ``carrier_offset`` so the
    carrier is at 0 Hz and the data occupies positive frequencies only.
    """
    fmt = cfg.format
    wave = shape_waveform(map_symbols(bits, fmt), cfg)
    if not fmt.is_qam:
        intensity = np.maximum(1.0 + cfg.pam_mod_index * wave.samples, 0.0)
        return replace(wave, samples=np.sqrt(intensity).astype(np.complex128), domain=Domain.COMPLEX)
    r = 10 ** (cfg.cspr_db / 10) if np.isfinite(cfg.cspr_db) else np.inf
    sig_gain = 1 / math.sqrt(1 + r) if np.isfinite(r) else 0.0
    base = replace(wave, samples=wave.samples * sig_gain)
    if np.isfinite(r):
        with_tone = add_carrier_tone(base, cfg, signal_power=sig_gain**2)
    else:
        ph = exact_phase(0, len(base.samples), -cfg.carrier_offset, cfg.dac_rate)
        with_tone = replace(base, samples=base.samples + np.exp(1j * ph), domain=Domain.COMPLEX)
    up = np.exp(1j * exact_phase(0, len(with_tone.samples), cfg.carrier_offset, cfg.dac_rate))
    return replace(with_tone, samples=with_tone.samples * up)
