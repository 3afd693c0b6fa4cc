"""Kramers-Kronig QAM-N receiver.

Chain per buffer (4 samples/symbol in, 2 samples/symbol into the equalizer):
DC-offset restoration, square root and half logarithm, FD Hilbert transform
(overlap-save on a real FFT), field reconstruction and digital downshift,
static FD equalization with a decimating 512-point inverse, then a 4-tap
widely-linear DDLMS equalizer with decisions and Gray demapping.

Timing: with a 1024-sample raw tail, the Hilbert step covers stream samples
``[n*N - 768, (n+1)*N - 256)`` of buffer ``n`` and the equalizer emits the
field for ``[n*N - 512, (n+1)*N - 512)``, a fixed lag of 512 samples.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numba
import numpy as np
import scipy.fft as sfft

from .core import BUFFER_LEN, FFT_LEN, HOP, exact_phasor, frame_blocks
from .errors import (
    CalibrationError,
    ConfigError,
    EqualizerDivergence,
    SequenceError,
    SignalSizeError,
    SyncError,
)
from .imdd import (
    MIN_BUFFER_LEN,
    Job,
    StaticEqualizer,
    SymbolFrame,
    as_float_samples,
    design_static_equalizer,
    matched_rrc_transfer,
)
from .txgen import ModulationFormat, demap_symbols

KK_MAX_TAPS = 203
DDLMS_TAPS = 4
CENTER_TAP = 1
DIVERGENCE_NORM = 1e3
TAIL = 2 * HOP


def kk_frontend(samples, dc_offset: float) -> tuple[np.ndarray, np.ndarray]:
    """``sqrt(I + dc)`` and ``0.5*ln(I + dc)``; non-positive intensity is an error."""
    v = np.asarray(samples, dtype=np.float64) + dc_offset
    bad = np.flatnonzero(v <= 0)
    if len(bad):
        raise CalibrationError(f"intensity plus DC offset is not positive at sample {bad[0]}")
    return np.sqrt(v), 0.5 * np.log(v)


def hilbert_multiplier(n: int = FFT_LEN) -> np.ndarray:
    """One-sided ``-j*sign(f)`` for a real FFT of length ``n`` (DC and Nyquist zeroed)."""
    h = np.full(n // 2 + 1, -1j, dtype=np.complex64)
    h[0] = 0
    if n % 2 == 0:
        h[-1] = 0
    return h


def hilbert_blocks(blocks: np.ndarray) -> np.ndarray:
    """Hilbert transform of each 1024-sample block (circular, whole block)."""
    spec = sfft.rfft(blocks, axis=-1, norm="ortho") * hilbert_multiplier(blocks.shape[-1])
    return sfft.irfft(spec, n=blocks.shape[-1], axis=-1, norm="ortho")


def hilbert_phase(half_log: np.ndarray) -> np.ndarray:
    """Overlap-save Hilbert transform of a whole record (zero history).

    Output sample ``i`` is aligned with input sample ``i``; the first and last
    256 samples see zero padding.
    """
    x = np.asarray(half_log, dtype=np.float64)
    n_blocks = -(-len(x) // HOP) + 1
    pad = np.zeros(HOP // 2 + n_blocks * HOP + HOP // 2 + HOP)
    pad[HOP // 2 + HOP // 2 : HOP + len(x)] = x
    # block j covers pad[512j, 512j+1024); valid [256, 768) -> pad[512j+256, ...)
    blocks = frame_blocks(pad, n_blocks)
    y = hilbert_blocks(blocks)[:, 256:768].reshape(-1)
    return y[HOP // 2 : HOP // 2 + len(x)]


def kk_reconstruct(amplitude, phase, carrier_offset: float, sample_rate: float,
                   start_index: int = 0) -> np.ndarray:
    """``amplitude * exp(j*phase)`` shifted down by ``carrier_offset``.

    The downshift phase is a function of the absolute sample index, so it is
    continuous across buffers.
    """
    amplitude = np.asarray(amplitude)
    e = amplitude * np.exp(1j * np.asarray(phase))
    down = np.conj(exact_phasor(start_index, len(e), carrier_offset, sample_rate))
    return (e * down).astype(np.complex64)


def kk_field(intensity, dc_offset: float, carrier_offset: float, sample_rate: float) -> np.ndarray:
    """Whole-record reconstruction: front-end, Hilbert phase, downshift."""
    amp, half_log = kk_frontend(intensity, dc_offset)
    return kk_reconstruct(amp, hilbert_phase(half_log), carrier_offset, sample_rate)


def reconstruction_evm_db(field_, carrier_offset: float, sample_rate: float, dc_offset: float = 0.0,
                          guard: int = FFT_LEN) -> float:
    """EVM of KK reconstruction from ``|field|**2`` against the field itself.

    Both sides are downshifted by ``carrier_offset``; the error is relative to
    the data power (the field minus its mean, i.e. without the carrier).
    ``guard`` samples at each end, which see the zero-padded Hilbert edges,
    are left out.
    """
    e = np.asarray(field_, dtype=np.complex128)
    rec = kk_field(np.abs(e) ** 2, dc_offset, carrier_offset, sample_rate)
    ref = e * np.conj(exact_phasor(0, len(e), carrier_offset, sample_rate))
    sl = slice(guard, len(e) - guard)
    data = e[sl] - np.mean(e[sl])
    err = rec[sl] - ref[sl]
    return float(10 * np.log10(np.mean(np.abs(err) ** 2) / np.mean(np.abs(data) ** 2)))


def decimate_blocks(spec: np.ndarray) -> np.ndarray:
    """Decimating 512-point inverse of complex 1024-bin block spectra, valid half."""
    q = FFT_LEN // 4
    band = np.concatenate([spec[..., :q], spec[..., FFT_LEN - q :]], axis=-1)
    y = sfft.ifft(band, axis=-1, norm="ortho") * np.float32(math.sqrt(0.5))
    return y[..., q // 2 : q // 2 + q]


@dataclass
class WidelyLinearEq:
    """``y = w^H u + v^H conj(u)`` over T/2-spaced 4-sample regressors.

    ``u_m = [x[2m+1], x[2m], x[2m-1], x[2m-2]]``; the centre spike sits on
    ``x[2m]``.  Updates: ``w += mu*conj(e)*u`` and ``v += mu*conj(e)*conj(u)``
    with ``e = d - y``.
    """

    fmt: ModulationFormat
    mu: float = 5e-4
    w: np.ndarray = None
    v: np.ndarray = None
    widely_linear: bool = True

    def __post_init__(self):
        if self.w is None:
            self.w = np.zeros(DDLMS_TAPS, np.complex128)
            self.w[CENTER_TAP] = 1.0
        if self.v is None:
            self.v = np.zeros(DDLMS_TAPS, np.complex128)
        self.w = np.asarray(self.w, np.complex128).copy()
        self.v = np.asarray(self.v, np.complex128).copy()
        if len(self.w) != DDLMS_TAPS or len(self.v) != DDLMS_TAPS:
            raise ConfigError(f"widely-linear equalizer has exactly {DDLMS_TAPS} taps per branch")

    def copy(self) -> "WidelyLinearEq":
        return WidelyLinearEq(self.fmt, self.mu, self.w, self.v, self.widely_linear)


@numba.njit(cache=True)
def _ddlms_kernel(x, first, n_sym, w, v, mu, train, n_train, levels, scale, widely, limit):
    y_out = np.empty(n_sym, np.complex128)
    d_out = np.empty(n_sym, np.complex128)
    m_levels = levels.shape[0]
    for m in range(n_sym):
        c = first + 2 * m
        u0 = x[c + 1]
        u1 = x[c]
        u2 = x[c - 1]
        u3 = x[c - 2]
        y = (np.conj(w[0]) * u0 + np.conj(w[1]) * u1 + np.conj(w[2]) * u2 + np.conj(w[3]) * u3)
        if widely:
            y += (np.conj(v[0]) * np.conj(u0) + np.conj(v[1]) * np.conj(u1)
                  + np.conj(v[2]) * np.conj(u2) + np.conj(v[3]) * np.conj(u3))
        # nearest point per axis
        ii = int(np.floor((y.real / scale + m_levels) / 2))
        qq = int(np.floor((y.imag / scale + m_levels) / 2))
        ii = min(max(ii, 0), m_levels - 1)
        qq = min(max(qq, 0), m_levels - 1)
        dec = levels[ii] + 1j * levels[qq]
        d_out[m] = dec
        y_out[m] = y
        ref = train[m] if m < n_train else dec
        e = ref - y
        ce = np.conj(e)
        w[0] += mu * ce * u0
        w[1] += mu * ce * u1
        w[2] += mu * ce * u2
        w[3] += mu * ce * u3
        if widely:
            v[0] += mu * ce * np.conj(u0)
            v[1] += mu * ce * np.conj(u1)
            v[2] += mu * ce * np.conj(u2)
            v[3] += mu * ce * np.conj(u3)
        nrm = 0.0
        for k in range(4):
            nrm += w[k].real ** 2 + w[k].imag ** 2
        if nrm > limit * limit:
            return y_out[: m + 1], d_out[: m + 1], m + 1
    return y_out, d_out, -1


@dataclass
class DdlmsResult:
    equalized: np.ndarray
    decisions: np.ndarray
    eq: WidelyLinearEq


def ddlms_equalize(samples, eq: WidelyLinearEq, training=None, first: int = 2) -> DdlmsResult:
    """Run the equalizer over a 2-sps stream.

    Symbol ``m`` is centred on ``samples[first + 2m]``; as many symbols as
    have a full regressor are processed.  ``training`` (known symbols) is used
    as the reference for the first ``len(training)`` symbols, decisions after.
    """
    x = np.asarray(samples, dtype=np.complex128)
    if first < 2:
        raise SignalSizeError("regressor needs two samples of history")
    n_sym = max(0, (len(x) - 2 - first) // 2 + 1)
    train = np.zeros(0, np.complex128) if training is None else np.asarray(training, np.complex128)
    n_train = min(len(train), n_sym)
    levels = eq.fmt.levels()[::1].astype(np.float64)
    out = eq.copy()
    y, d, bad = _ddlms_kernel(x, first, n_sym, out.w, out.v, out.mu, train, n_train, levels,
                              eq.fmt.axis_scale, out.widely_linear, DIVERGENCE_NORM)
    if bad >= 0:
        raise EqualizerDivergence(f"tap norm exceeded {DIVERGENCE_NORM:g} at symbol {bad - 1}")
    return DdlmsResult(y, d, out)


def evm_db(equalized, reference) -> float:
    e = np.asarray(equalized) - np.asarray(reference)
    return float(10 * np.log10(np.mean(np.abs(e) ** 2) / np.mean(np.abs(reference) ** 2)))


def acquire(samples_2sps: np.ndarray, ref_symbols: np.ndarray, start: int = 2):
    """Find symbol parity, reference offset and complex gain by circular correlation.

    Returns ``(first, offset, gain)``: symbol ``m`` sits at
    ``samples[first + 2m]`` and corresponds to ``ref_symbols[(offset + m) % P]``,
    with ``samples ~ gain * ref`` there.
    """
    p = len(ref_symbols)
    ref_f = sfft.fft(ref_symbols)
    best = None
    for parity in (0, 1):
        first = start + ((parity - start) % 2)
        s = samples_2sps[first::2][:p]
        if len(s) < min(p, 4096):
            raise SyncError("not enough samples to acquire the symbol sequence")
        s = s - np.mean(s)
        pad = np.zeros(p, np.complex128)
        pad[: len(s)] = s
        # corr[o] = sum_i s[i] * conj(ref[(i + o) % p])
        corr = np.conj(sfft.ifft(np.conj(sfft.fft(pad)) * ref_f))
        k = int(np.argmax(np.abs(corr)))
        score = np.abs(corr[k]) / (np.sqrt(np.sum(np.abs(s) ** 2)) * np.sqrt(len(s) * np.mean(np.abs(ref_symbols) ** 2)))
        if best is None or score > best[0]:
            gain = corr[k] / (len(s) * np.mean(np.abs(ref_symbols) ** 2))
            best = (score, first, k, gain)
    score, first, offset, gain = best
    if score < 0.3:
        raise SyncError(f"reference symbols not found (normalized correlation {score:.2f})")
    return first, offset, complex(gain)


@dataclass
class KkConfig:
    format: ModulationFormat = field(default_factory=lambda: ModulationFormat("QAM", 16))
    baud: float = 1e9
    rolloff: float = 0.01
    adc_rate: float = 4e9
    carrier_offset: float = 0.547e9
    dc_offset: float = 0.5
    eq_taps: int = 203
    eq_lambda: float = 1e-3
    carrier_notch_weight: float = 1e4
    stopband_lambda: float = 1e2
    mu: float = 5e-4
    train_symbols: int = 20000
    intensity_floor: float = 1e-6
    buffer_len: int = BUFFER_LEN
    widely_linear: bool = True

    def __post_init__(self):
        if isinstance(self.format, str):
            self.format = ModulationFormat.parse(self.format)
        if not self.format.is_qam:
            raise ConfigError("KK chain decodes QAM formats only")
        if self.adc_rate != 4 * self.baud:
            raise ConfigError("KK chain expects 4 samples per symbol at the ADC")
        if self.eq_taps > KK_MAX_TAPS or self.eq_taps % 2 == 0:
            raise ConfigError(f"eq_taps must be odd and at most {KK_MAX_TAPS}")
        if self.buffer_len % HOP or self.buffer_len < MIN_BUFFER_LEN:
            raise ConfigError(f"buffer_len must be a multiple of {HOP} and at least {MIN_BUFFER_LEN}")

    @property
    def blocks_per_buffer(self) -> int:
        return self.buffer_len // HOP

    @property
    def sps_in(self) -> int:
        return 4

    @property
    def sps_mid(self) -> int:
        return 2


def kk_equalizer(cfg: KkConfig, intensity_response=None) -> StaticEqualizer:
    """Matched RRC plus inversion of the intensity-path response seen by the field.

    The electrical filter acts on the intensity; after reconstruction and
    downshift, data at baseband frequency ``f`` has passed ``H(f + carrier)``.
    ``intensity_response`` is a callable returning ``H`` at given frequencies.
    """
    target = matched_rrc_transfer(cfg.rolloff, cfg.baud, cfg.adc_rate, cfg.eq_taps)
    f = sfft.fftfreq(FFT_LEN, 1 / cfg.adc_rate)
    h = np.ones(FFT_LEN) if intensity_response is None else intensity_response(f + cfg.carrier_offset)
    # The downshifted carrier sits just outside the data band and, being restored
    # by the DC offset, never passed the electrical filters: hold it in a notch.
    notch = np.abs(f + cfg.carrier_offset) <= 2.5 * cfg.adc_rate / FFT_LEN
    h = np.where(notch, 1.0, h)
    target = np.where(notch, 0.0, target)
    weights = np.where(notch, cfg.carrier_notch_weight, 1.0)
    # Bins beyond the decimated band are discarded, so the filter is held near
    # zero there; then the block path equals convolution followed by ::2.
    k = sfft.fftfreq(FFT_LEN, 1 / FFT_LEN)
    lam = cfg.eq_lambda + np.where(np.abs(k) >= FFT_LEN // 4, cfg.stopband_lambda, 0.0)
    return design_static_equalizer(h, cfg.eq_taps, lam, target, max_taps=KK_MAX_TAPS,
                                   weights=weights)


@dataclass
class DdlmsState:
    eq: WidelyLinearEq
    pending: np.ndarray  # 2-sps samples not yet consumed (includes 2 history samples)
    first: int = 2  # position of the next symbol centre within ``pending``
    ref_offset: int | None = None  # reference index of the next symbol
    symbols_done: int = 0


class KkReceiver:
    """Nine-stage KK receiver with a sequential :meth:`process` driver."""

    chain = "kk"
    STAGES = ("convert", "overlap", "frontend", "hilbert", "reconstruct", "fft",
              "static_eq_decimate", "ddlms", "demap")
    CARRIED = ("overlap", "reconstruct", "ddlms")

    def __init__(self, cfg: KkConfig, eq: StaticEqualizer | None = None,
                 ref_symbols: np.ndarray | None = None, acquire_skip: int = 2048):
        self.cfg = cfg
        self.eq = eq if eq is not None else kk_equalizer(cfg)
        if self.eq.n_taps > KK_MAX_TAPS:
            raise ConfigError(f"KK equalizer is limited to {KK_MAX_TAPS} taps")
        self._h = self.eq.taps_fd.astype(np.complex64)
        self.ref_symbols = ref_symbols
        self.acquire_skip = acquire_skip
        self._carries = self.initial_carries()
        self._next_index = 0
        self.clamped = 0

    def initial_carries(self) -> dict:
        return {
            "overlap": np.zeros(TAIL, np.float32),
            "reconstruct": 0,  # absolute sample index where the reconstructed field starts
            "ddlms": DdlmsState(WidelyLinearEq(self.cfg.format, self.cfg.mu,
                                               widely_linear=self.cfg.widely_linear),
                                np.zeros(0, np.complex64)),
        }

    def st_convert(self, job):
        x = as_float_samples(job.buffer)
        if len(x) != self.cfg.buffer_len:
            raise SignalSizeError(f"buffer holds {len(x)} samples, expected {self.cfg.buffer_len}")
        job.ctx["x"] = x

    def st_overlap(self, job, tail):
        cat = np.concatenate([tail, job.ctx.pop("x")])
        job.ctx["cat"] = cat
        return cat[-TAIL:].copy()

    def st_frontend(self, job):
        v = job.ctx.pop("cat") + np.float32(self.cfg.dc_offset)
        low = v <= self.cfg.intensity_floor
        n_low = int(np.count_nonzero(low))
        if n_low:
            v[low] = self.cfg.intensity_floor
        job.ctx["clamped"] = n_low
        job.ctx["amp"] = np.sqrt(v)
        job.ctx["half_log"] = np.float32(0.5) * np.log(v)

    def st_hilbert(self, job):
        hl = job.ctx.pop("half_log")
        n_blocks = self.cfg.blocks_per_buffer + 1
        ph = hilbert_blocks(frame_blocks(hl, n_blocks))[:, 256:768].reshape(-1)
        job.ctx["phase"] = ph  # cat samples [256, N + 768)

    def st_reconstruct(self, job, start):
        n = self.cfg.buffer_len
        amp = job.ctx.pop("amp")[256 : n + 768]
        ph = job.ctx.pop("phase")
        g0 = job.index * n - 768
        if job.index and start != g0:
            raise SequenceError(f"downshift phase carry at {start}, expected {g0}")
        e = amp * np.exp(1j * ph).astype(np.complex64)
        e *= np.conj(exact_phasor(g0, len(e), self.cfg.carrier_offset, self.cfg.adc_rate))
        job.ctx["field"] = e
        return g0 + n

    def st_fft(self, job):
        e = job.ctx.pop("field")
        job.ctx["E"] = sfft.fft(frame_blocks(e, self.cfg.blocks_per_buffer), axis=-1, norm="ortho")

    def st_static_eq_decimate(self, job):
        spec = job.ctx.pop("E")
        spec *= self._h
        job.ctx["x2"] = decimate_blocks(spec).reshape(-1)

    def st_ddlms(self, job, state: DdlmsState):
        x2 = job.ctx.pop("x2")
        if job.index == 0:
            x2 = x2[256:]  # 2-sps samples before stream start
        eqz = state.eq
        pending = np.concatenate([state.pending, x2])
        first = state.first
        ref_offset = state.ref_offset
        if ref_offset is None:
            if self.ref_symbols is None:
                raise SyncError("no reference symbols for acquisition")
            first, ref_offset, gain = acquire(pending, self.ref_symbols, start=2 + self.acquire_skip)
            w = np.zeros(DDLMS_TAPS, np.complex128)
            w[CENTER_TAP] = np.conj(1 / gain)
            eqz = WidelyLinearEq(eqz.fmt, eqz.mu, w, None, eqz.widely_linear)
        p = len(self.ref_symbols) if self.ref_symbols is not None else 1
        n_sym = max(0, (len(pending) - 2 - first) // 2 + 1)
        train_left = max(0, self.cfg.train_symbols - state.symbols_done)
        train = None
        if train_left and self.ref_symbols is not None:
            idx = (ref_offset + np.arange(min(train_left, n_sym))) % p
            train = self.ref_symbols[idx]
        res = ddlms_equalize(pending, eqz, train, first)
        n_done = len(res.equalized)
        job.ctx["equalized"] = res.equalized
        job.ctx["decisions"] = res.decisions
        job.ctx["n_training"] = min(train_left, n_done)
        nxt = first + 2 * n_done
        keep_from = nxt - 2
        return DdlmsState(res.eq, pending[keep_from:].copy(), 2, (ref_offset + n_done) % p,
                          state.symbols_done + n_done)

    def st_demap(self, job):
        job.ctx["bits"] = demap_symbols(job.ctx["decisions"], self.cfg.format)

    def stages(self):
        return [(name, getattr(self, "st_" + name), name in self.CARRIED) for name in self.STAGES]

    def finish(self, job) -> SymbolFrame:
        ctx = job.ctx
        self.clamped += ctx["clamped"]
        n_tr = ctx["n_training"]
        y, d = ctx["equalized"], ctx["decisions"]
        diag = {"clamped": ctx["clamped"], "n_training": n_tr, "decisions": d,
                "evm_db": evm_db(y[n_tr:], d[n_tr:]) if len(y) > n_tr else float("nan")}
        return SymbolFrame(job.index, y, ctx["bits"], warmup=job.index == 0 or n_tr > 0, diagnostics=diag)

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
    def taps(self) -> WidelyLinearEq:
        return self._carries["ddlms"].eq


@dataclass
class DcSearch:
    """Result of :func:`optimize_dc_offset`: the argmin and the whole EVM curve."""

    dc_offset: float
    grid: np.ndarray
    evm_db: np.ndarray


def optimize_dc_offset(buffers, cfg: KkConfig, ref_symbols: np.ndarray, grid,
                       eq: StaticEqualizer | None = None) -> DcSearch:
    """Grid search for the DC offset that minimizes post-training EVM.

    ``buffers`` is a short calibration run (ADC codes or floats).  Grid points
    that leave any sample at or below zero intensity are skipped and get an
    infinite EVM.  Training symbols are excluded from the score, so the run
    must be longer than ``cfg.train_symbols``.
    """
    grid = np.asarray(grid, dtype=np.float64)
    xs = [as_float_samples(b) for b in buffers]
    lowest = min(float(x.min()) for x in xs)
    eq = eq if eq is not None else kk_equalizer(cfg)
    curve = np.full(len(grid), np.inf)
    for i, dc in enumerate(grid):
        if lowest + dc <= 0:
            continue
        rx = KkReceiver(replace(cfg, dc_offset=float(dc)), eq, ref_symbols)
        ys, ds = [], []
        try:
            for x in xs:
                fr = rx.process(x)
                n_tr = fr.diagnostics["n_training"]
                ys.append(fr.symbols[n_tr:])
                ds.append(fr.diagnostics["decisions"][n_tr:])
        except (EqualizerDivergence, SyncError):
            continue
        y, d = np.concatenate(ys), np.concatenate(ds)
        if len(y):
            curve[i] = evm_db(y, d)
    if not np.isfinite(curve).any():
        raise CalibrationError("no DC offset on the grid gives a positive, decodable intensity")
    return DcSearch(float(grid[int(np.argmin(curve))]), grid, curve)
