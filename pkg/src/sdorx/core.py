"""Signal containers, block FFT framing, RRC filters and PRBS generation.

Conventions used everywhere in the package:

* Transforms are unitary (``1/sqrt(N)`` in both directions).  Filter
  *transfer functions* are the plain (unscaled) DFT of their taps, so a
  filtered spectrum is simply ``H * X``.
* Buffers hold ``2**22`` samples and are cut into 8192 blocks of 1024 samples
  that advance by 512 (100% overlap-save).  Filters are applied *centred*: the
  taps are placed circularly around index 0, and the valid output of a block is
  its middle half, indices ``[256, 768)``.  A filtered stream therefore lags
  the input by exactly 256 samples, independent of filter length.
"""

from __future__ import annotations

import enum
import functools
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
import scipy.fft as sfft
import scipy.signal as ssig

from .errors import ConfigError, NyquistError, SignalSizeError

BUFFER_LEN = 1 << 22
FFT_LEN = 1024
HOP = 512
BLOCKS_PER_BUFFER = BUFFER_LEN // HOP
VALID_START = 256
VALID_STOP = 768
# Longest FIR that fits the 256-sample guard on either side of the valid window.
MAX_CENTRED_TAPS = 2 * VALID_START + 1


class Domain(str, enum.Enum):
    REAL = "real-electrical"
    COMPLEX = "complex-field"


@dataclass
class SampleBuffer:
    """One acquisition unit of samples plus the metadata needed downstream."""

    samples: np.ndarray
    sample_rate: float
    samples_per_symbol: Fraction = Fraction(1)
    domain: Domain = Domain.REAL
    sequence_index: int = 0

    def __post_init__(self):
        self.samples_per_symbol = Fraction(self.samples_per_symbol)
        if not self.sample_rate > 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")
        if self.samples_per_symbol < 1:
            raise ConfigError("samples_per_symbol must be >= 1")
        if np.iscomplexobj(self.samples) and self.domain is Domain.REAL:
            self.domain = Domain.COMPLEX

    def __len__(self):
        return len(self.samples)

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def require_pipeline_length(self, length: int = BUFFER_LEN) -> None:
        if len(self.samples) != length:
            raise SignalSizeError(f"buffer holds {len(self.samples)} samples, expected {length}")


def sequence_gaps(indices) -> list[int]:
    """Return the sequence indices missing from an ascending run of buffers."""
    indices = list(indices)
    missing = []
    for a, b in zip(indices, indices[1:]):
        missing.extend(range(a + 1, b))
    return missing


@dataclass
class BlockSpectrum:
    """Frequency-domain view of one block, or of a stack of consecutive blocks.

    ``bins`` has shape ``(1024,)`` or ``(n_blocks, 1024)``; ``block_index`` is
    the position of the first block within its buffer.
    """

    bins: np.ndarray
    block_index: int = 0
    valid_range: tuple[int, int] = (VALID_START, VALID_STOP)

    @property
    def n_blocks(self) -> int:
        return 1 if self.bins.ndim == 1 else self.bins.shape[0]


def fft_forward(block, block_index: int = 0) -> BlockSpectrum:
    """Unitary 1024-point DFT along the last axis."""
    x = np.asarray(block)
    if x.shape[-1] != FFT_LEN:
        raise SignalSizeError(f"FFT input must have {FFT_LEN} samples, got {x.shape[-1]}")
    return BlockSpectrum(sfft.fft(x, axis=-1, norm="ortho"), block_index)


def fft_inverse(spec, out_size: int = FFT_LEN) -> np.ndarray:
    """Inverse of :func:`fft_forward`.

    ``out_size=512`` keeps bins -256..255 of the 1024-bin spectrum and returns
    the signal at half the sample rate (sample values preserved, so a DC level
    stays the same level).  Out-of-band content is discarded, not aliased.
    """
    bins = spec.bins if isinstance(spec, BlockSpectrum) else np.asarray(spec)
    if bins.shape[-1] != FFT_LEN:
        raise SignalSizeError(f"spectrum must have {FFT_LEN} bins")
    if out_size == FFT_LEN:
        return sfft.ifft(bins, axis=-1, norm="ortho")
    if out_size == FFT_LEN // 2:
        return sfft.ifft(_central_band(bins), axis=-1, norm="ortho") * np.sqrt(0.5)
    raise SignalSizeError(f"unsupported inverse size {out_size}; use 1024 or 512")


def _central_band(bins: np.ndarray) -> np.ndarray:
    q = FFT_LEN // 4
    return np.concatenate([bins[..., :q], bins[..., FFT_LEN - q:]], axis=-1)


def frame_blocks(stream: np.ndarray, n_blocks: int) -> np.ndarray:
    """Read-only ``(n_blocks, 1024)`` view of blocks advancing by 512 samples."""
    need = (n_blocks - 1) * HOP + FFT_LEN
    if len(stream) < need:
        raise SignalSizeError(f"need {need} samples for {n_blocks} blocks, got {len(stream)}")
    return np.lib.stride_tricks.sliding_window_view(stream[:need], FFT_LEN)[::HOP]


def overlap_save_frame(prev_tail, buffer) -> tuple[np.ndarray, np.ndarray]:
    """Cut a buffer into 8192 overlapping 1024-sample blocks.

    Block ``b`` covers buffer samples ``[512*b - 512, 512*b + 512)``, the
    negative part coming from ``prev_tail`` (the last 512 samples of the
    previous buffer, zeros at stream start).
    """
    samples = buffer.samples if isinstance(buffer, SampleBuffer) else np.asarray(buffer)
    if len(samples) != BUFFER_LEN:
        raise SignalSizeError(f"buffer holds {len(samples)} samples, expected {BUFFER_LEN}")
    prev_tail = np.asarray(prev_tail)
    if len(prev_tail) != HOP:
        raise SignalSizeError(f"overlap tail must hold {HOP} samples")
    cat = np.concatenate([prev_tail.astype(samples.dtype, copy=False), samples])
    return frame_blocks(cat, BLOCKS_PER_BUFFER), samples[-HOP:].copy()


def centred_transfer(taps, center: int | None = None, n_fft: int = FFT_LEN) -> np.ndarray:
    """Transfer function of ``taps`` on an ``n_fft`` grid with tap ``center`` at time 0."""
    taps = np.asarray(taps)
    if center is None:
        center = (len(taps) - 1) // 2
    if len(taps) > n_fft:
        raise SignalSizeError("filter longer than transform")
    buf = np.zeros(n_fft, dtype=np.result_type(taps.dtype, np.float64))
    buf[: len(taps)] = taps
    return sfft.fft(np.roll(buf, -center))


def centred_taps(transfer: np.ndarray, n_taps: int) -> np.ndarray:
    """Inverse of :func:`centred_transfer`: taps ``-(n-1)/2 .. (n-1)/2``."""
    h = sfft.ifft(transfer)
    half = (n_taps - 1) // 2
    return np.concatenate([h[-half:], h[: half + 1]]) if half else h[:1].copy()


def filter_stream(x: np.ndarray, transfer: np.ndarray) -> np.ndarray:
    """Overlap-save filter a whole stream (zero history), 256-sample lag.

    Output sample ``n`` equals the centred filter applied around input sample
    ``n - 256``.  Used by tests and offline tools; the receivers run the same
    arithmetic block-wise inside their buffer jobs.
    """
    x = np.asarray(x)
    n_blocks = -(-len(x) // HOP)
    padded = np.zeros(HOP + n_blocks * HOP + HOP, dtype=np.result_type(x.dtype, np.complex64))
    padded[HOP : HOP + len(x)] = x
    blocks = frame_blocks(padded, n_blocks)
    spec = sfft.fft(blocks, axis=-1, norm="ortho") * transfer
    out = sfft.ifft(spec, axis=-1, norm="ortho")[:, VALID_START:VALID_STOP].reshape(-1)
    # out[k] corresponds to padded index k + 256 => input index k - 256
    return out[: len(x)]


@dataclass(frozen=True)
class RrcSpec:
    rolloff: float
    baud: float
    span: int = 32  # symbols

    def __post_init__(self):
        if not 0.0 <= self.rolloff <= 1.0:
            raise ConfigError(f"RRC roll-off must lie in [0, 1], got {self.rolloff}")
        if self.baud <= 0:
            raise ConfigError("baud must be positive")


def rrc_impulse(t: np.ndarray, beta: float) -> np.ndarray:
    """Root-raised-cosine impulse response at ``t`` in symbol periods (peak-normalized)."""
    t = np.asarray(t, dtype=np.float64)
    if beta == 0:
        return np.sinc(t)
    out = np.empty_like(t)
    at_zero = np.isclose(t, 0.0, atol=1e-12)
    at_sing = np.isclose(np.abs(t), 1.0 / (4.0 * beta), atol=1e-12)
    rest = ~(at_zero | at_sing)
    tr = t[rest]
    num = np.sin(np.pi * tr * (1 - beta)) + 4 * beta * tr * np.cos(np.pi * tr * (1 + beta))
    den = np.pi * tr * (1 - (4 * beta * tr) ** 2)
    out[rest] = num / den
    out[at_zero] = 1 - beta + 4 * beta / np.pi
    out[at_sing] = (beta / np.sqrt(2)) * (
        (1 + 2 / np.pi) * np.sin(np.pi / (4 * beta)) + (1 - 2 / np.pi) * np.cos(np.pi / (4 * beta))
    )
    return out


def rrc_filter_taps(spec: RrcSpec, sample_rate: float, n_taps: int | None = None) -> np.ndarray:
    """Symmetric, unit-energy RRC taps sampled at ``sample_rate``.

    With unit energy, ``rrc_gain(taps, f, sps)`` (the DTFT divided by
    ``sqrt(sps)``) equals 1 at DC and vanishes beyond ``(1+rolloff)*baud/2``.
    """
    if sample_rate < (1 + spec.rolloff) * spec.baud * (1 - 1e-12):
        raise NyquistError(
            f"{sample_rate:g} Sa/s cannot carry a {spec.baud:g} Bd signal with roll-off {spec.rolloff}"
        )
    sps = sample_rate / spec.baud
    if n_taps is None:
        n_taps = int(round(spec.span * sps)) + 1
        n_taps += 1 - n_taps % 2
    if n_taps % 2 == 0:
        raise ConfigError("RRC tap count must be odd")
    t = (np.arange(n_taps) - (n_taps - 1) / 2) / sps
    h = rrc_impulse(t, spec.rolloff)
    return h / np.sqrt(np.sum(h * h))


def rrc_gain(taps: np.ndarray, freq: np.ndarray, sps: float) -> np.ndarray:
    """Zero-phase frequency response of centred taps, divided by ``sqrt(sps)``.

    ``freq`` is in cycles per symbol.
    """
    taps = np.asarray(taps)
    n = np.arange(len(taps)) - (len(taps) - 1) / 2
    w = 2 * np.pi * np.atleast_1d(freq)[:, None] / sps
    return (np.exp(-1j * w * n) @ taps) / np.sqrt(sps)


_PRBS_POLYS = {
    7: (7, 6),
    9: (9, 5),
    11: (11, 9),
    15: (15, 14),
    20: (20, 17),
    23: (23, 18),
}


@dataclass
class PrbsState:
    """Fibonacci LFSR state.  ``taps`` are feedback exponents, largest = order."""

    taps: tuple[int, ...] = _PRBS_POLYS[15]
    state: int = 1

    def __post_init__(self):
        self.taps = tuple(sorted(self.taps, reverse=True))
        if self.state == 0:
            raise ConfigError("PRBS state must be nonzero")
        if not 0 < self.state < (1 << self.order):
            raise ConfigError(f"PRBS state {self.state} does not fit {self.order} bits")

    @classmethod
    def of_order(cls, order: int = 15, state: int = 1) -> "PrbsState":
        if order not in _PRBS_POLYS:
            raise ConfigError(f"no maximal polynomial tabulated for order {order}")
        return cls(_PRBS_POLYS[order], state)

    @property
    def order(self) -> int:
        return self.taps[0]


@functools.lru_cache(maxsize=8)
def _prbs_cycle(taps: tuple[int, ...]) -> tuple[np.ndarray, np.ndarray, dict[int, int]]:
    order = taps[0]
    mask = (1 << order) - 1
    state = 1
    bits = []
    states = []
    pos = {}
    while state not in pos:
        pos[state] = len(bits)
        states.append(state)
        fb = 0
        for tap in taps:
            fb ^= (state >> (order - tap)) & 1
        bits.append(state & 1)
        state = ((state >> 1) | (fb << (order - 1))) & mask
    return np.array(bits, dtype=np.uint8), np.array(states, dtype=np.int64), pos


def prbs_bits(state: PrbsState, n: int) -> tuple[np.ndarray, PrbsState]:
    """Next ``n`` bits of the LFSR sequence and the advanced state."""
    if state.state == 0:
        raise ConfigError("PRBS state must be nonzero")
    cycle, states, pos = _prbs_cycle(state.taps)
    if state.state not in pos:
        raise ConfigError(f"state {state.state} is not on the maximal cycle of {state.taps}")
    start = pos[state.state]
    period = len(cycle)
    idx = (start + np.arange(n, dtype=np.int64)) % period
    return cycle[idx], PrbsState(state.taps, int(states[(start + n) % period]))


def prbs_period(state: PrbsState) -> np.ndarray:
    """One full period of the sequence, starting at ``state``."""
    bits, _ = prbs_bits(state, len(_prbs_cycle(state.taps)[0]))
    return bits


def exact_phase(start: int, n: int, freq: float, sample_rate: float) -> np.ndarray:
    """Phase ``2*pi*freq*k/sample_rate`` for ``k = start .. start+n-1``, wrapped.

    Uses exact rational arithmetic when the frequency ratio is a modest
    fraction, so long streams keep a drift-free phase across chunks.
    """
    ratio = Fraction(freq) / Fraction(sample_rate)
    if ratio.denominator < (1 << 31):
        num, den = ratio.numerator, ratio.denominator
        k = (np.int64(start % den) + np.arange(n, dtype=np.int64)) % den
        return 2 * np.pi * ((k * (num % den)) % den) / den
    r = freq / sample_rate
    k = np.arange(n, dtype=np.float64) + float(start)
    return 2 * np.pi * np.mod(k * r, 1.0)


@functools.lru_cache(maxsize=16)
def _phasor_table(num: int, den: int) -> np.ndarray:
    return np.exp(2j * np.pi * (np.arange(den) * num % den) / den).astype(np.complex64)


def exact_phasor(start: int, n: int, freq: float, sample_rate: float) -> np.ndarray:
    """``exp(1j * exact_phase(...))`` as complex64, from a lookup table when possible."""
    ratio = Fraction(freq) / Fraction(sample_rate)
    den = ratio.denominator
    if den <= (1 << 20):
        table = _phasor_table(ratio.numerator % den, den)
        k = (start % den + np.arange(n, dtype=np.int64)) % den
        return table[k]
    return np.exp(1j * exact_phase(start, n, freq, sample_rate)).astype(np.complex64)


class StreamingFir:
    """Causal FIR applied to consecutive chunks with FFT convolution.

    Output has the same length as each input chunk; overall delay is that of
    the taps (``(len(taps)-1)/2`` for a linear-phase filter).
    """

    def __init__(self, taps: np.ndarray):
        self.taps = np.asarray(taps)
        self._hist = np.zeros(len(self.taps) - 1, dtype=self.taps.dtype)

    def __call__(self, chunk: np.ndarray) -> np.ndarray:
        chunk = np.asarray(chunk)
        if self._hist.dtype != np.result_type(self._hist.dtype, chunk.dtype):
            self._hist = self._hist.astype(np.result_type(self._hist.dtype, chunk.dtype))
        x = np.concatenate([self._hist, chunk])
        y = ssig.oaconvolve(x, self.taps, mode="valid")
        if len(self._hist):
            self._hist = x[-len(self._hist):].copy()
        return y


@dataclass
class StreamCursor:
    """Running sample counter used to keep carriers and noise continuous."""

    position: int = 0
    extra: dict = field(default_factory=dict)

    def advance(self, n: int) -> int:
        start = self.position
        self.position += n
        return start
