"""BER/Q/EVM accounting, sequence sync, OSNR/CSPR measurement, eye and constellation data."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.signal as ssig
from scipy.special import erfc, erfcinv

from .channel import OSNR_REF_BW
from .errors import ConfigError, SyncError
from .txgen import ModulationFormat

HDFEC_Q_DB = 8.4  # 6.7 % overhead hard-decision FEC
HDFEC20_Q_DB = 5.7  # 20 % overhead
WINDOW_SECONDS = 21e-3
SYNC_MIN_AGREEMENT = 0.7
RESYNC_ERROR_RATE = 0.25
OSNR_CEILING_DB = 80.0  # measured values above this are reported as noiseless


def q_from_ber(ber: float) -> float:
    """Gaussian-equivalent Q in dB; ``+inf`` for a clean count, ``-inf`` at or above 0.5."""
    if ber <= 0:
        return math.inf
    if ber >= 0.5:
        return -math.inf
    return 20 * math.log10(math.sqrt(2) * float(erfcinv(2 * ber)))


def ber_from_q(q_db: float) -> float:
    if q_db == math.inf:
        return 0.0
    if q_db == -math.inf:
        return 0.5
    q = 10 ** (q_db / 20)
    return 0.5 * float(erfc(q / math.sqrt(2)))


def bits_per_window(baud: float, bits_per_symbol: int, seconds: float = WINDOW_SECONDS) -> int:
    return int(round(seconds * baud)) * bits_per_symbol


# sequence synchronization -------------------------------------------------


@dataclass(frozen=True)
class SyncResult:
    offset: int
    inverted: bool
    agreement: float


def synchronize(rx_bits, ref_bits, window: int | None = None) -> SyncResult:
    """Circular offset of ``rx_bits`` inside the periodic reference.

    ``rx_bits[i]`` matches ``ref_bits[(offset + i) % P]`` (after inversion when
    ``inverted``).  Only the first ``window`` bits take part; the reference
    must be at least four windows long.
    """
    ref = np.asarray(ref_bits, dtype=np.float64)
    p = len(ref)
    window = min(len(rx_bits), p // 4) if window is None else window
    if window <= 0 or p < 4 * window:
        raise ConfigError("reference must be at least four correlation windows long")
    if len(rx_bits) < window:
        raise SyncError(f"need {window} bits to synchronize, got {len(rx_bits)}")
    r = np.zeros(p)
    r[:window] = 2.0 * np.asarray(rx_bits[:window], dtype=np.float64) - 1
    corr = np.fft.irfft(np.conj(np.fft.rfft(r)) * np.fft.rfft(2 * ref - 1), n=p)
    k = int(np.argmax(np.abs(corr)))
    agreement = 0.5 + abs(corr[k]) / (2 * window)
    if agreement < SYNC_MIN_AGREEMENT:
        raise SyncError(f"best bit agreement {agreement:.3f} below {SYNC_MIN_AGREEMENT}")
    return SyncResult(k, bool(corr[k] < 0), float(agreement))


# reports ------------------------------------------------------------------


@dataclass
class MetricsReport:
    """Mergeable counts.  ``windows`` holds ``(errors, bits)`` per Q window."""

    bit_errors: int = 0
    bits_counted: int = 0
    err_power: float = 0.0
    ref_power: float = 0.0
    osnr_db_measured: float | None = None
    cspr_db_measured: float | None = None
    windows: list = field(default_factory=list)

    @property
    def ber(self) -> float:
        return self.bit_errors / self.bits_counted if self.bits_counted else math.nan

    @property
    def q_db(self) -> float:
        return q_from_ber(self.ber) if self.bits_counted else math.nan

    @property
    def evm_db(self) -> float:
        if self.ref_power <= 0:
            return math.nan
        if self.err_power <= 0:
            return -math.inf
        return 10 * math.log10(self.err_power / self.ref_power)

    @property
    def window_q_db(self) -> np.ndarray:
        return np.array([q_from_ber(e / b) for e, b in self.windows])

    def add_evm(self, equalized, reference) -> None:
        reference = np.asarray(reference)
        self.err_power += float(np.sum(np.abs(np.asarray(equalized) - reference) ** 2))
        self.ref_power += float(np.sum(np.abs(reference) ** 2))

    def merge(self, other: "MetricsReport") -> "MetricsReport":
        """Associative combine; measured OSNR/CSPR keep the left operand's value."""
        return MetricsReport(
            self.bit_errors + other.bit_errors,
            self.bits_counted + other.bits_counted,
            self.err_power + other.err_power,
            self.ref_power + other.ref_power,
            self.osnr_db_measured if self.osnr_db_measured is not None else other.osnr_db_measured,
            self.cspr_db_measured if self.cspr_db_measured is not None else other.cspr_db_measured,
            self.windows + other.windows,
        )

    def as_row(self) -> dict:
        return {"bits": self.bits_counted, "errors": self.bit_errors, "ber": self.ber,
                "q_db": self.q_db, "evm_db": self.evm_db,
                "osnr_db_measured": self.osnr_db_measured, "cspr_db_measured": self.cspr_db_measured}


class BerCounter:
    """Streaming bit-error counter against a periodic reference.

    Syncs on the first bits it sees and follows the reference from there.  A
    Q window whose error rate exceeds 25 % triggers a resync on that window's
    bits (counted as they were compared).  Leftover bits shorter than a
    window are counted in the totals but not in ``windows``.
    """

    def __init__(self, ref_bits, window_bits: int, sync_window: int | None = None):
        self.ref = np.asarray(ref_bits, dtype=np.uint8)
        self.window_bits = int(window_bits)
        self.sync_window = sync_window if sync_window is not None else len(self.ref) // 4
        self.report = MetricsReport()
        self.pos: int | None = None
        self.inverted = False
        self.resyncs = 0
        self._pending = np.zeros(0, np.uint8)
        self._open = [0, 0]

    def _sync(self, bits) -> None:
        s = synchronize(bits, self.ref, min(self.sync_window, len(bits)))
        self.pos, self.inverted = s.offset, s.inverted

    def update(self, bits) -> None:
        bits = np.asarray(bits, dtype=np.uint8)
        if self.pos is None:
            self._pending = np.concatenate([self._pending, bits])
            if len(self._pending) < self.sync_window:
                return
            bits, self._pending = self._pending, np.zeros(0, np.uint8)
            self._sync(bits)
        p = len(self.ref)
        i = 0
        while i < len(bits):
            take = min(len(bits) - i, self.window_bits - self._open[1])
            chunk = bits[i : i + take]
            ref = self.ref[(self.pos + np.arange(take)) % p]
            err = int(np.count_nonzero((chunk ^ ref) != self.inverted))
            self.pos = (self.pos + take) % p
            self._open[0] += err
            self._open[1] += take
            self.report.bit_errors += err
            self.report.bits_counted += take
            i += take
            if self._open[1] == self.window_bits:
                e, n = self._open
                self.report.windows.append((e, n))
                self._open = [0, 0]
                if e > RESYNC_ERROR_RATE * n and len(chunk) >= min(self.sync_window, n):
                    self._resync(chunk)

    def _resync(self, recent) -> None:
        w = min(self.sync_window, len(recent))
        s = synchronize(recent[-w:], self.ref, w)
        self.pos = (s.offset + w) % len(self.ref)
        self.inverted = s.inverted
        self.resyncs += 1


def count_errors(rx_bits, ref_bits) -> MetricsReport:
    """One-shot BER of a finite record (sync on its first bits)."""
    c = BerCounter(ref_bits, max(1, len(rx_bits)), sync_window=min(len(ref_bits) // 4, len(rx_bits)))
    c.update(rx_bits)
    rep = c.report
    rep.windows = []
    return rep


# optical measurements -----------------------------------------------------


def measure_osnr(field_, sample_rate: float, noise_band: tuple[float, float] | None = None,
                 nperseg: int = 4096) -> float:
    """OSNR from band-split power integration.

    The noise PSD is averaged over ``noise_band`` (absolute frequency range,
    default the outer 40 % of the spectrum), assumed flat over the whole
    spectrum, and removed from the total power to leave the signal power.
    """
    x = np.asarray(field_)
    lo, hi = noise_band if noise_band is not None else (0.3 * sample_rate, 0.5 * sample_rate)
    f, psd = ssig.welch(x, fs=sample_rate, nperseg=nperseg, return_onesided=False, detrend=False,
                        window="blackmanharris")
    sel = (np.abs(f) >= lo) & (np.abs(f) <= hi)
    if not sel.any():
        raise ConfigError("noise band holds no spectral bins")
    n0 = float(np.mean(psd[sel]))
    total = float(np.mean(np.abs(x) ** 2))
    p_sig = total - n0 * sample_rate
    if n0 <= 0 or p_sig <= 0:
        return math.inf if n0 <= 0 else -math.inf
    osnr = 10 * math.log10(p_sig / (n0 * OSNR_REF_BW))
    return math.inf if osnr > OSNR_CEILING_DB else osnr


def measure_cspr(field_) -> float:
    """Carrier (0 Hz component) over the remaining power, in dB."""
    x = np.asarray(field_)
    carrier = abs(np.mean(x)) ** 2
    rest = float(np.mean(np.abs(x) ** 2)) - carrier
    if rest <= 0:
        return math.inf
    return 10 * math.log10(carrier / rest)


# eye / constellation ------------------------------------------------------


@dataclass
class EyeDiagram:
    """Amplitude histogram over two symbol periods: ``counts[time, amplitude]``."""

    counts: np.ndarray
    time_edges: np.ndarray  # in symbol periods
    amp_edges: np.ndarray

    @property
    def mass(self) -> int:
        return int(self.counts.sum())


def eye_diagram(samples, sps: int = 2, n_time: int = 128, n_amp: int = 64,
                amp_range: tuple[float, float] | None = None) -> EyeDiagram:
    """Fold a clock-recovered stream over two symbols and histogram it.

    The stream is band-limited-interpolated to ``n_time // 2`` points per
    symbol, so column ``j * n_time // 2`` holds sampling instant ``j``.
    """
    if n_time % 2:
        raise ConfigError("n_time must be even")
    up = n_time // 2 // sps
    if up * sps * 2 != n_time:
        raise ConfigError("n_time must be a multiple of 2 * sps")
    x = np.asarray(samples, dtype=np.float64)
    y = ssig.resample_poly(x, up, 1) if up > 1 else x
    n_fold = len(y) // n_time
    y = y[: n_fold * n_time].reshape(n_fold, n_time)
    lo, hi = amp_range if amp_range is not None else (float(y.min()), float(y.max()))
    pad = 1e-9 + 0.02 * (hi - lo)
    amp_edges = np.linspace(lo - pad, hi + pad, n_amp + 1)
    t = np.broadcast_to(np.arange(n_time), y.shape)
    counts, _, _ = np.histogram2d(t.ravel(), y.ravel(), bins=[np.arange(n_time + 1) - 0.5, amp_edges])
    return EyeDiagram(counts.astype(np.int64), np.arange(n_time + 1) * 2 / n_time, amp_edges)


@dataclass
class ConstellationDump:
    points: np.ndarray
    ideal: np.ndarray  # constellation point each sample was decided to
    clusters: list  # (ideal point, count, mean, variance)

    @property
    def evm_db(self) -> float:
        e = self.points - self.ideal
        return float(10 * np.log10(np.mean(np.abs(e) ** 2) / np.mean(np.abs(self.ideal) ** 2)))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["i", "q", "ideal_i", "ideal_q"])
            for p, d in zip(self.points, self.ideal):
                w.writerow([f"{p.real:.7g}", f"{p.imag:.7g}", f"{d.real:.7g}", f"{d.imag:.7g}"])

    def write_cluster_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["ideal_i", "ideal_q", "count", "mean_i", "mean_q", "variance"])
            for d, n, m, v in self.clusters:
                w.writerow([d.real, d.imag, n, m.real, m.imag, v])


def constellation_dump(symbols, fmt: ModulationFormat, decisions=None) -> ConstellationDump:
    """Equalized points with their decisions and per-cluster statistics."""
    pts = np.asarray(symbols, dtype=np.complex128)
    const = fmt.constellation()
    if decisions is None:
        decisions = const[np.argmin(np.abs(pts[:, None] - const[None, :]), axis=1)]
    ideal = np.asarray(decisions, dtype=np.complex128)
    clusters = []
    for c in const:
        sel = np.isclose(ideal, c)
        n = int(np.count_nonzero(sel))
        if n:
            clusters.append((c, n, pts[sel].mean(), float(np.var(pts[sel]))))
    return ConstellationDump(pts, ideal, clusters)


# IQ imbalance -------------------------------------------------------------


def image_rejection_db(output, reference) -> float:
    """Fit ``output ~ a*ref + b*conj(ref)`` and return ``|a|^2/|b|^2`` in dB."""
    x = np.asarray(reference, dtype=np.complex128)
    a_mat = np.stack([x, np.conj(x)], axis=1)
    (a, b), *_ = np.linalg.lstsq(a_mat, np.asarray(output, dtype=np.complex128), rcond=None)
    if abs(b) == 0:
        return math.inf
    return float(20 * np.log10(abs(a) / abs(b)))


@dataclass(frozen=True)
class WienerSolution:
    direct: complex  # gain on the wanted symbol
    image: complex  # gain on its conjugate
    mse: float  # normalized to unit symbol power

    @property
    def irr_db(self) -> float:
        return math.inf if self.image == 0 else 20 * math.log10(abs(self.direct) / abs(self.image))

    @property
    def mse_db(self) -> float:
        return -math.inf if self.mse <= 0 else 10 * math.log10(self.mse)


def iq_imbalance_wiener(eps: complex, noise_var: float, widely_linear: bool = True) -> WienerSolution:
    """MMSE estimate of a circular unit-power symbol ``x`` from ``y = x + eps*conj(x) + n``.

    Widely linear: ``z = h1* y + h2* conj(y)``; linear: ``z = h1* y``.
    """
    a = np.array([[1, eps], [np.conj(eps), 1]], dtype=np.complex128)
    if widely_linear:
        r = a @ a.conj().T + noise_var * np.eye(2)
        p = a[:, 0]
        h = np.linalg.solve(r, p)
        g = h.conj() @ a
        noise = noise_var * float(np.real(h.conj() @ h))
    else:
        r = 1 + abs(eps) ** 2 + noise_var
        h1 = 1 / r
        g = np.array([h1, h1 * eps])
        noise = noise_var * h1**2
    mse = abs(g[0] - 1) ** 2 + abs(g[1]) ** 2 + noise
    return WienerSolution(complex(g[0]), complex(g[1]), float(mse))
