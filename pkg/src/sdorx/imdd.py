"""IMDD PAM-N receiver.

Per buffer: 12-bit codes to float, overlap with the previous buffer, block
FFT, static FD equalization (matched RRC plus bandwidth compensation),
block-wise clock-phase estimation, 105-block vector averaging and unwrapping,
FD fractional-delay correction with symbol extraction, DC/amplitude
normalization and PAM decisions.

Timing: block ``g`` of the stream covers samples ``[512g - 512, 512g + 512)``.
Averaging needs 52 blocks of look-ahead, so the job for buffer ``n`` emits
blocks ``[n*B - 52, (n+1)*B - 52)`` where ``B = buffer_len / 512``.  The first
buffer skips the (empty) negative blocks.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np
import scipy.fft as sfft
import scipy.linalg as sla

from .channel import codes_to_float
from .core import (
    BUFFER_LEN,
    FFT_LEN,
    HOP,
    BlockSpectrum,
    RrcSpec,
    SampleBuffer,
    centred_taps,
    centred_transfer,
    frame_blocks,
    rrc_filter_taps,
)
from .errors import (
    CalibrationError,
    ConfigError,
    SequenceError,
    SignalSizeError,
    SyncError,
)
from .txgen import ModulationFormat, _gray, values_to_bits

IMDD_MAX_TAPS = 503
AVG_WINDOW = 105
HALF_WINDOW = AVG_WINDOW // 2
RFFT_BINS = FFT_LEN // 2 + 1
MIN_BUFFER_LEN = 1 << 16


@dataclass
class StaticEqualizer:
    """Centred real or complex FIR and its 1024-bin transfer function."""

    taps_td: np.ndarray
    taps_fd: np.ndarray = None

    def __post_init__(self):
        self.taps_td = np.asarray(self.taps_td)
        if len(self.taps_td) % 2 == 0:
            raise ConfigError("static equalizer needs an odd tap count")
        if self.taps_fd is None:
            self.taps_fd = centred_transfer(self.taps_td)
        if self.taps_fd.shape != (FFT_LEN,):
            raise SignalSizeError("equalizer spectrum must have 1024 bins")

    @property
    def n_taps(self) -> int:
        return len(self.taps_td)

    @classmethod
    def identity(cls) -> "StaticEqualizer":
        return cls(np.ones(1))


def static_fd_equalize(spec, eq: StaticEqualizer) -> BlockSpectrum:
    """Bin-wise product of block spectra with the equalizer transfer function."""
    bins = spec.bins if isinstance(spec, BlockSpectrum) else np.asarray(spec)
    if bins.shape[-1] == FFT_LEN:
        h = eq.taps_fd
    elif bins.shape[-1] == RFFT_BINS:
        h = eq.taps_fd[:RFFT_BINS]
    else:
        raise SignalSizeError(f"spectrum has {bins.shape[-1]} bins; equalizer grid is {FFT_LEN}")
    out = bins * h.astype(np.result_type(bins.dtype, np.complex64), copy=False)
    index = spec.block_index if isinstance(spec, BlockSpectrum) else 0
    return BlockSpectrum(out, index)


def design_static_equalizer(channel_response, n_taps: int, lam: float = 1e-3,
                            target=None, max_taps: int = IMDD_MAX_TAPS,
                            weights=None) -> StaticEqualizer:
    """Least-squares FIR on the 1024-bin grid.

    Minimizes ``sum W*|H_ch*H_eq - T|**2 + lam * sum |H_eq|**2`` over centred
    ``n_taps``-tap filters by solving the Toeplitz normal equations exactly,
    so no truncation or re-windowing is needed.  ``target`` defaults to
    ``ones`` (pure inversion); receivers pass the matched RRC transfer.
    ``weights`` (default 1) lets a caller insist on selected bins, and ``lam``
    may be a per-bin array to push the filter itself down where the channel
    term cannot.
    """
    h_ch = np.asarray(channel_response, dtype=np.complex128)
    if h_ch.shape != (FFT_LEN,):
        raise SignalSizeError("channel response must be sampled on the 1024-bin grid")
    if n_taps % 2 == 0 or not 1 <= n_taps <= max_taps:
        raise ConfigError(f"equalizer tap count must be odd and at most {max_taps}")
    t = np.ones(FFT_LEN) if target is None else np.asarray(target, dtype=np.complex128)
    w = np.ones(FFT_LEN) if weights is None else np.asarray(weights, dtype=np.float64)
    lam = np.broadcast_to(np.asarray(lam, dtype=np.float64), (FFT_LEN,))
    power = w * np.abs(h_ch) ** 2 + lam
    if np.min(lam) <= 0 and np.min(np.abs(h_ch)) < 1e-9:
        raise CalibrationError("channel response has nulls; use lam > 0")
    half = (n_taps - 1) // 2
    r = sfft.ifft(power)
    b = sfft.ifft(w * np.conj(h_ch) * t)
    lags = np.arange(-half, half + 1)
    col = r[np.arange(n_taps)]
    row = np.conj(col)
    taps = sla.solve_toeplitz((col, row), b[lags])
    if _hermitian(h_ch) and _hermitian(t) and _hermitian(w.astype(complex)):
        taps = taps.real
    return StaticEqualizer(taps)


def _hermitian(h: np.ndarray) -> bool:
    return np.allclose(h[1:], np.conj(h[1:][::-1]), atol=1e-12 * np.max(np.abs(h)) + 1e-300)


def matched_rrc_transfer(rolloff: float, baud: float, sample_rate: float, n_taps: int) -> np.ndarray:
    taps = rrc_filter_taps(RrcSpec(rolloff, baud), sample_rate, n_taps)
    return centred_transfer(taps)


def estimate_clock_phase(spec) -> np.ndarray:
    """Godard-style timing accumulator ``C = sum_k X[k] conj(X[k+512])``.

    Works on full 1024-bin or one-sided (513-bin) spectra of 2 sample/symbol
    blocks.  A signal delay of ``d`` samples rotates ``C`` by ``-pi*d``, so
    ``-angle(C)/(2*pi)`` is the delay in symbols.
    """
    bins = spec.bins if isinstance(spec, BlockSpectrum) else np.asarray(spec)
    half = FFT_LEN // 2
    if bins.shape[-1] == FFT_LEN:
        return np.sum(bins[..., :half] * np.conj(bins[..., half:]), axis=-1)
    if bins.shape[-1] == RFFT_BINS:
        # conj(X[k+512]) == X[512-k] for real input
        return np.sum(bins[..., :half] * bins[..., half:0:-1], axis=-1)
    raise SignalSizeError("clock estimate needs a 1024-bin or 513-bin spectrum")


def timing_phase(c) -> np.ndarray:
    """Delay in symbols from a timing accumulator."""
    return -np.angle(c) / (2 * np.pi)


@dataclass
class ClockPhaseTrack:
    """Carried state of the averaging/unwrapping step.

    ``history`` holds the last 104 raw accumulators seen (oldest first);
    ``last_phase`` is the most recent unwrapped averaged angle (radians), or
    ``None`` before the first output.
    """

    history: np.ndarray = field(default_factory=lambda: np.zeros(AVG_WINDOW - 1, np.complex128))
    last_phase: float | None = None
    window: int = AVG_WINDOW

    def __post_init__(self):
        if self.window != AVG_WINDOW:
            raise ConfigError(f"averaging window is fixed at {AVG_WINDOW} blocks")


def _ffill_invalid(values: np.ndarray, valid: np.ndarray, fill: float) -> np.ndarray:
    idx = np.where(valid, np.arange(len(values)), -1)
    np.maximum.accumulate(idx, out=idx)
    out = np.where(idx >= 0, values[np.maximum(idx, 0)], fill)
    return out


def average_unwrap(track: ClockPhaseTrack, new_estimates: np.ndarray) -> np.ndarray:
    """Centred 105-block vector average, then unwrap.

    Returns one unwrapped angle (radians) per *delayed* block: output ``i``
    belongs to the block 52 positions before ``new_estimates[i]``.  The track
    is updated in place.  Blocks whose averaged vector is zero inherit the
    previous angle.
    """
    c = np.concatenate([track.history, np.asarray(new_estimates, dtype=np.complex128)])
    # explicit window sums keep every output independent of where buffers split
    avg = np.lib.stride_tricks.sliding_window_view(c, AVG_WINDOW).sum(axis=1)
    valid = np.abs(avg) > 0
    ang = np.angle(avg)
    prev = track.last_phase
    ang = _ffill_invalid(ang, valid, np.nan if prev is None else np.angle(np.exp(1j * prev)))
    if prev is None:
        first = np.flatnonzero(~np.isnan(ang))
        if len(first) == 0:
            out = np.zeros(len(ang))
        else:
            ang[: first[0]] = ang[first[0]]
            out = np.unwrap(ang)
    else:
        out = np.unwrap(np.concatenate([[prev], ang]))[1:]
    track.history = c[len(c) - (AVG_WINDOW - 1):].copy()
    if len(out):
        track.last_phase = float(out[-1])
    return out


@numba.njit(cache=True)
def _integer_offsets(tau, n_prev, threshold):
    n = np.empty(tau.shape[0], np.int64)
    cur = n_prev
    for i in range(tau.shape[0]):
        f = tau[i] - cur
        if f >= threshold:
            cur += 1
        elif f <= -threshold:
            cur -= 1
        f = tau[i] - cur
        if f >= threshold + 1.0 or f <= -threshold - 1.0:
            n[i] = -(1 << 62)
            return n
        n[i] = cur
    return n


def symbol_offsets(tau: np.ndarray, n_prev: int, hysteresis: float = 0.1):
    """Integer symbol offset per block with hysteresis.

    The offset steps by one when the residual ``tau - n`` reaches
    ``+-(0.5 + hysteresis)``.  Returns ``(n, delta)`` where ``delta`` is the
    change versus the preceding block.
    """
    n = _integer_offsets(np.asarray(tau, dtype=np.float64), int(n_prev), 0.5 + hysteresis)
    if len(n) and n[-1] == -(1 << 62) or np.any(n == -(1 << 62)):
        raise SyncError("clock phase jumped by more than one symbol between blocks")
    delta = np.diff(np.concatenate([[n_prev], n]))
    return n, delta


def clock_correct_extract(spec, frac_delay: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """Fractional-delay correct 2-sps block spectra and pull out symbol samples.

    ``frac_delay`` is the residual delay in symbols per block; the spectrum is
    advanced by ``2*frac_delay`` samples.  Block outputs start at sample 256
    (256 symbols), 258 after an offset increment (255) or 254 after a
    decrement (257).
    """
    bins = spec.bins if isinstance(spec, BlockSpectrum) else np.asarray(spec)
    bins = np.atleast_2d(bins)
    frac_delay = np.atleast_1d(np.asarray(frac_delay, dtype=np.float64))
    delta = np.atleast_1d(np.asarray(delta))
    if np.any(np.abs(delta) > 1):
        raise SyncError("symbol offset changed by more than one within a block")
    if bins.shape[-1] == RFFT_BINS:
        k = np.arange(RFFT_BINS)
        ramp = np.exp(2j * np.pi * k[None, :] * (2 * frac_delay[:, None]) / FFT_LEN)
        ramp[:, -1] = np.cos(np.pi * 2 * frac_delay)
        y = sfft.irfft(bins * ramp.astype(np.complex64), n=FFT_LEN, axis=-1, norm="ortho")
    else:
        k = sfft.fftfreq(FFT_LEN, 1 / FFT_LEN)
        ramp = np.exp(2j * np.pi * k[None, :] * (2 * frac_delay[:, None]) / FFT_LEN)
        y = sfft.ifft(bins * ramp, axis=-1, norm="ortho")
    picks = y[:, 254:768:2]
    keep = np.ones(picks.shape, dtype=bool)
    keep[delta >= 0, 0] = False
    keep[delta > 0, 1] = False
    return picks[keep]


def normalize_buffer(symbols, fmt: ModulationFormat) -> tuple[float, float]:
    """DC offset and amplitude such that ``(s - dc)/amplitude`` has unit peak."""
    s = np.asarray(symbols, dtype=np.float64)
    if len(s) == 0:
        raise CalibrationError("no symbols to normalize")
    dc = float(np.mean(s))
    amp = float(np.mean(np.abs(s - dc))) / fmt.mean_abs_level
    if not amp > 0:
        raise CalibrationError("zero signal amplitude")
    return dc, amp


@dataclass
class PamDecisionTable:
    fmt: ModulationFormat
    thresholds: np.ndarray = None
    dc_offset: float = 0.0
    amplitude: float = 1.0

    def __post_init__(self):
        if self.thresholds is None:
            lv = self.fmt.levels()
            self.thresholds = (lv[1:] + lv[:-1]) / 2
        self.thresholds = np.asarray(self.thresholds, dtype=np.float64)
        if len(self.thresholds) != self.fmt.order - 1:
            raise ConfigError(f"{self.fmt} needs {self.fmt.order - 1} thresholds")
        if np.any(np.diff(self.thresholds) <= 0):
            raise ConfigError("decision thresholds must be strictly ascending")

    @property
    def demap(self) -> np.ndarray:
        return np.array([_gray(i) for i in range(self.fmt.order)], dtype=np.int64)


@dataclass
class Decisions:
    bits: np.ndarray
    levels: np.ndarray
    histogram: np.ndarray


def pam_decide(symbols, table: PamDecisionTable) -> Decisions:
    """Threshold decisions on normalized symbols; a tie goes to the upper region."""
    s = np.asarray(symbols, dtype=np.float64)
    idx = np.searchsorted(table.thresholds, s, side="right")
    bits = values_to_bits(table.demap[idx], table.fmt.bits_per_symbol)
    hist = np.bincount(idx, minlength=table.fmt.order)
    return Decisions(bits, idx, hist)


def calibrate_thresholds(symbols, fmt: ModulationFormat) -> np.ndarray:
    """Offline threshold choice from a calibration run of normalized symbols.

    Levels are equiprobable, so sorting the symbols and cutting them into
    ``N`` equal-count groups separates the levels; thresholds are the
    midpoints between adjacent group means.
    """
    s = np.sort(np.asarray(symbols, dtype=np.float64))
    m = fmt.order
    if len(s) < 4 * m:
        raise CalibrationError("too few calibration symbols")
    groups = np.array_split(s, m)
    means = np.array([g.mean() for g in groups])
    th = (means[1:] + means[:-1]) / 2
    if np.any(np.diff(th) <= 0):
        raise CalibrationError("calibration produced non-ascending thresholds")
    return th


@dataclass
class ImddConfig:
    format: ModulationFormat = field(default_factory=lambda: ModulationFormat("PAM", 4))
    baud: float = 2e9
    rolloff: float = 0.5
    adc_rate: float = 4e9
    eq_taps: int = 503
    eq_lambda: float = 1e-3
    hysteresis: float = 0.1
    thresholds: tuple | None = None
    buffer_len: int = BUFFER_LEN

    def __post_init__(self):
        if isinstance(self.format, str):
            self.format = ModulationFormat.parse(self.format)
        if self.format.is_qam:
            raise ConfigError("IMDD chain decodes PAM formats only")
        if self.adc_rate != 2 * self.baud:
            raise ConfigError("IMDD chain expects 2 samples per symbol at the ADC")
        if self.eq_taps > IMDD_MAX_TAPS or self.eq_taps % 2 == 0:
            raise ConfigError(f"eq_taps must be odd and at most {IMDD_MAX_TAPS}")
        if self.buffer_len % HOP or self.buffer_len < MIN_BUFFER_LEN:
            raise ConfigError(f"buffer_len must be a multiple of {HOP} and at least {MIN_BUFFER_LEN}")

    @property
    def blocks_per_buffer(self) -> int:
        return self.buffer_len // HOP


def imdd_equalizer(cfg: ImddConfig, channel_response=None) -> StaticEqualizer:
    """Matched RRC, optionally combined with inversion of ``channel_response``."""
    target = matched_rrc_transfer(cfg.rolloff, cfg.baud, cfg.adc_rate, cfg.eq_taps)
    if channel_response is None:
        return StaticEqualizer(centred_taps(target, cfg.eq_taps).real)
    return design_static_equalizer(channel_response, cfg.eq_taps, cfg.eq_lambda, target)


def as_float_samples(buffer) -> np.ndarray:
    """ADC buffer (codes or floats, bare or wrapped) as float32 full-scale units."""
    x = buffer.samples if isinstance(buffer, SampleBuffer) else np.asarray(buffer)
    return codes_to_float(x) if x.dtype == np.uint16 else np.asarray(x, np.float32)


@dataclass
class SymbolFrame:
    """Decoded output of one buffer."""

    sequence_index: int
    symbols: np.ndarray
    bits: np.ndarray
    warmup: bool = False
    diagnostics: dict = field(default_factory=dict)


@dataclass
class OffsetState:
    """Integer symbol offset carried with the phase track."""

    n: int = 0
    added: int = 0
    dropped: int = 0
    started: bool = False


class ImddReceiver:
    """Nine-stage PAM receiver.  ``process`` runs one buffer with internal carries.

    The stage functions are also exposed through :meth:`stages` for the
    stream-parallel scheduler, which hands the carried state between buffers.
    """

    chain = "imdd"
    STAGES = ("convert", "overlap", "fft", "static_eq", "clock_estimate", "average_unwrap",
              "clock_correct", "normalize", "decide")
    CARRIED = ("overlap", "average_unwrap")

    def __init__(self, cfg: ImddConfig, eq: StaticEqualizer | None = None,
                 keep_waveform: bool = False):
        self.cfg = cfg
        self.eq = eq if eq is not None else imdd_equalizer(cfg)
        if self.eq.n_taps > IMDD_MAX_TAPS:
            raise ConfigError(f"IMDD equalizer is limited to {IMDD_MAX_TAPS} taps")
        self._h = self.eq.taps_fd[:RFFT_BINS].astype(np.complex64)
        self.table = PamDecisionTable(cfg.format, None if cfg.thresholds is None else np.asarray(cfg.thresholds))
        self.keep_waveform = keep_waveform
        self._carries = self.initial_carries()
        self._next_index = 0

    # carried state --------------------------------------------------------
    def initial_carries(self) -> dict:
        tail = np.zeros((HALF_WINDOW + 1) * HOP, np.float32)
        return {"overlap": tail, "average_unwrap": (ClockPhaseTrack(), OffsetState())}

    # stages ---------------------------------------------------------------
    def st_convert(self, job):
        x = as_float_samples(job.buffer)
        if len(x) != self.cfg.buffer_len:
            raise SignalSizeError(f"buffer holds {len(x)} samples, expected {self.cfg.buffer_len}")
        job.ctx["x"] = x

    def st_overlap(self, job, tail):
        cat = np.concatenate([tail, job.ctx.pop("x")])
        job.ctx["cat"] = cat
        return cat[len(cat) - len(tail):].copy()

    def st_fft(self, job):
        cat = job.ctx.pop("cat")
        n_blocks = self.cfg.blocks_per_buffer + HALF_WINDOW
        job.ctx["X"] = sfft.rfft(frame_blocks(cat, n_blocks), axis=-1, norm="ortho")

    def st_static_eq(self, job):
        x = job.ctx.pop("X")
        x *= self._h
        job.ctx["Y"] = x

    def st_clock_estimate(self, job):
        job.ctx["C"] = estimate_clock_phase(job.ctx["Y"])

    def st_average_unwrap(self, job, carry):
        track, off = carry
        track = ClockPhaseTrack(track.history.copy(), track.last_phase)
        off = OffsetState(off.n, off.added, off.dropped, off.started)
        # the first 52 accumulators repeat blocks the previous job already fed
        phase = average_unwrap(track, job.ctx.pop("C")[HALF_WINDOW:])
        skip = 0 if off.started else HALF_WINDOW  # stream start: no negative blocks
        phase = phase[skip:]
        job.ctx["skip"] = skip
        tau = -phase / (2 * np.pi)
        if not off.started and len(tau):
            off.n = int(np.round(tau[0]))
            off.started = True
        n, delta = symbol_offsets(tau, off.n, self.cfg.hysteresis)
        if len(n):
            off.n = int(n[-1])
        off.added += int(np.count_nonzero(delta < 0))
        off.dropped += int(np.count_nonzero(delta > 0))
        job.ctx["tau"] = tau
        job.ctx["frac"] = tau - n
        job.ctx["delta"] = delta
        return track, off

    def st_clock_correct(self, job):
        y = job.ctx.pop("Y")
        skip = job.ctx["skip"]
        emit = y[skip : skip + len(job.ctx["frac"])]
        job.ctx["symbols"] = clock_correct_extract(emit, job.ctx["frac"], job.ctx["delta"])
        if self.keep_waveform:
            job.ctx["waveform"] = clock_correct_waveform(emit, job.ctx["frac"])

    def st_normalize(self, job):
        dc, amp = normalize_buffer(job.ctx["symbols"], self.cfg.format)
        job.ctx["dc"], job.ctx["amp"] = dc, amp
        job.ctx["norm"] = (job.ctx.pop("symbols") - dc) / amp

    def st_decide(self, job):
        d = pam_decide(job.ctx["norm"], self.table)
        job.ctx["bits"] = d.bits
        job.ctx["hist"] = d.histogram

    def stages(self):
        return [(name, getattr(self, "st_" + name), name in self.CARRIED) for name in self.STAGES]

    def finish(self, job) -> SymbolFrame:
        ctx = job.ctx
        diag = {"tau": ctx["tau"], "dc": ctx["dc"], "amplitude": ctx["amp"],
                "added": int(np.count_nonzero(ctx["delta"] < 0)),
                "dropped": int(np.count_nonzero(ctx["delta"] > 0)),
                "level_histogram": ctx["hist"]}
        if "waveform" in ctx:
            diag["waveform"] = ctx["waveform"]
        return SymbolFrame(job.index, ctx["norm"], ctx["bits"], warmup=job.index == 0, diagnostics=diag)

    # sequential driver ------------------------------------------------------
    def process(self, buffer, index: int | None = None) -> SymbolFrame:
        index = self._next_index if index is None else index
        if index != self._next_index:
            raise SequenceError(f"expected buffer {self._next_index}, got {index}")
        job = Job(index, buffer)
        for name, fn, carried in self.stages():
            if carried:
                self._carries[name] = fn(job, self._carries[name])
            else:
                fn(job)
        self._next_index += 1
        return self.finish(job)

    @property
    def offset_state(self) -> OffsetState:
        return self._carries["average_unwrap"][1]


def clock_correct_waveform(spec_rows: np.ndarray, frac_delay: np.ndarray) -> np.ndarray:
    """Clock-corrected 2-sps samples of the valid block halves (for eye diagrams)."""
    k = np.arange(RFFT_BINS)
    ramp = np.exp(2j * np.pi * k[None, :] * (2 * frac_delay[:, None]) / FFT_LEN)
    ramp[:, -1] = np.cos(np.pi * 2 * frac_delay)
    y = sfft.irfft(spec_rows * ramp, n=FFT_LEN, axis=-1, norm="ortho")
    return y[:, 256:768].reshape(-1)


@dataclass
class Job:
    """Per-buffer work item: the input buffer plus stage-to-stage context."""

    index: int
    buffer: object
    ctx: dict = field(default_factory=dict)
