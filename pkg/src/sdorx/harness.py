"""Link runs on top of the pipeline: receiver set-up, calibration, sweeps and traces."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator

import numpy as np

from .channel import NoiseState, electrical_response, load_noise
from .config import RunConfig, dump_config
from .core import Domain, SampleBuffer
from .errors import CalibrationError, ConfigError, EqualizerDivergence, SequenceError, SyncError
from .imdd import ImddConfig, ImddReceiver, imdd_equalizer
from .kk import KkConfig, KkReceiver, kk_equalizer, optimize_dc_offset
from .link import AdcSource, LinkConfig, adc_channel_response
from .metrics import BerCounter, MetricsReport, bits_per_window, measure_cspr, measure_osnr
from .pipeline import BudgetReport, Pipeline
from .txgen import Transmitter, reference_bits, reference_symbols

AXES = {"osnr": ("channel", "osnr_db"), "cspr": ("tx", "cspr_db"), "clock_ppm": ("channel", "clock_offset_ppm")}
POINT_FAILURES = (SyncError, CalibrationError, EqualizerDivergence, SequenceError)


def link_config(cfg: RunConfig) -> LinkConfig:
    return LinkConfig(cfg.tx, cfg.channel, cfg.run.buffer_len)


def imdd_config(cfg: RunConfig) -> ImddConfig:
    th = cfg.imdd.thresholds.strip()
    return ImddConfig(format=cfg.tx.format, baud=cfg.tx.baud, rolloff=cfg.tx.rolloff,
                      adc_rate=cfg.channel.adc_rate, eq_taps=cfg.imdd.eq_taps, eq_lambda=cfg.imdd.eq_lambda,
                      hysteresis=cfg.imdd.hysteresis,
                      thresholds=tuple(float(v) for v in th.split(",")) if th else None,
                      buffer_len=cfg.run.buffer_len)


def kk_config(cfg: RunConfig, dc_offset: float = 0.0) -> KkConfig:
    k = cfg.kk
    return KkConfig(format=cfg.tx.format, baud=cfg.tx.baud, rolloff=cfg.tx.rolloff,
                    adc_rate=cfg.channel.adc_rate, carrier_offset=cfg.tx.carrier_offset,
                    dc_offset=dc_offset, eq_taps=k.eq_taps, eq_lambda=k.eq_lambda,
                    carrier_notch_weight=k.carrier_notch_weight, stopband_lambda=k.stopband_lambda, mu=k.mu, train_symbols=k.train_symbols,
                    intensity_floor=k.intensity_floor, buffer_len=cfg.run.buffer_len,
                    widely_linear=k.widely_linear)


def static_equalizer(cfg: RunConfig):
    """Static FIR for the configured chain, designed against the known electrical response."""
    if cfg.chain == "imdd":
        return imdd_equalizer(imdd_config(cfg), adc_channel_response(link_config(cfg)))
    return kk_equalizer(kk_config(cfg),
                        lambda f: electrical_response(link_config(cfg).channel, cfg.tx.dac_rate, f))


def dc_search_grid(samples: np.ndarray, n_points: int) -> np.ndarray:
    """Offsets from just above the positivity limit up to two signal RMS beyond it."""
    x = np.asarray(samples, np.float64)
    lo = max(0.0, -float(x.min()))
    span = 2 * float(np.std(x))
    return lo + span * np.arange(n_points) / (n_points - 1)


def calibrate_dc_offset(cfg: RunConfig, buffers, eq=None):
    """Coarse-then-fine grid search on calibration buffers; returns the search result."""
    from .imdd import as_float_samples

    xs = [as_float_samples(b) for b in buffers]
    kc = kk_config(cfg)
    refs = reference_symbols(cfg.tx)
    eq = eq if eq is not None else static_equalizer(cfg)
    grid = dc_search_grid(np.concatenate(xs), cfg.kk.dc_grid_points)
    coarse = optimize_dc_offset(xs, kc, refs, grid, eq)
    step = grid[1] - grid[0]
    fine_grid = coarse.dc_offset + step * np.linspace(-1, 1, cfg.kk.dc_grid_points)
    fine_grid = fine_grid[fine_grid > grid[0] - 1e-12]
    fine = optimize_dc_offset(xs, kc, refs, fine_grid, eq)
    return fine if fine.evm_db.min() <= coarse.evm_db.min() else coarse


def calibration_buffer_count(cfg: RunConfig) -> int:
    """Configured calibration buffers, raised until the run outlasts DDLMS training.

    The DC search scores post-training EVM, so the calibration record must
    hold the training symbols plus a scoring margin.
    """
    if cfg.chain != "kk":
        return 0
    per_buffer = cfg.run.buffer_len * cfg.tx.baud / cfg.channel.adc_rate
    need = math.ceil((cfg.kk.train_symbols + 2 * 4096) / per_buffer)
    return max(cfg.run.calibration_buffers, need)


@dataclass
class PreparedChain:
    receiver: object
    dc_offset: float | None = None


def build_receiver(cfg: RunConfig, calibration=None) -> PreparedChain:
    eq = static_equalizer(cfg)
    if cfg.chain == "imdd":
        return PreparedChain(ImddReceiver(imdd_config(cfg), eq))
    if cfg.kk.dc_offset.strip().lower() == "auto":
        if not calibration:
            raise CalibrationError("automatic DC offset needs calibration buffers")
        dc = calibrate_dc_offset(cfg, calibration, eq).dc_offset
    else:
        dc = float(cfg.kk.dc_offset)
    return PreparedChain(KkReceiver(kk_config(cfg, dc), eq, reference_symbols(cfg.tx)), dc)


def measured_osnr(cfg: RunConfig, n_samples: int = 1 << 20) -> float:
    """Re-measure the configured noise loading on an independent field realization."""
    tx = Transmitter(cfg.tx)
    fld = tx.next(-(-n_samples // cfg.tx.sps))
    buf = SampleBuffer(fld, cfg.tx.dac_rate, cfg.tx.sps, Domain.COMPLEX)
    noisy = load_noise(buf, cfg.channel, NoiseState(cfg.channel.seed + 7919))
    return measure_osnr(noisy.samples, cfg.tx.dac_rate)


def measured_cspr(cfg: RunConfig, n_samples: int = 1 << 20) -> float | None:
    if not cfg.tx.format.is_qam:
        return None
    tx = Transmitter(cfg.tx)
    return measure_cspr(tx.next(-(-n_samples // cfg.tx.sps)))


@dataclass
class LinkRun:
    report: MetricsReport
    budget: BudgetReport
    frames: list = field(default_factory=list)
    dc_offset: float | None = None
    buffers: int = 0
    adc_clipped: int = 0


def frame_is_counted(frame) -> bool:
    return not frame.warmup


def run_link(cfg: RunConfig, n_buffers: int | None = None, min_errors: int | None = None,
             max_bits: int | None = None, keep_frames: bool = False, window_s: float | None = None,
             source: Iterator | None = None) -> LinkRun:
    """Generate, transmit and receive until the stopping rule is met.

    With ``min_errors``/``max_bits`` the run stops after the first frame
    that brings the count to ``min_errors`` errors or ``max_bits`` bits;
    otherwise ``n_buffers`` buffers (default ``cfg.run.n_buffers``) are used.
    Warm-up frames are decoded but not counted.
    """
    n_buffers = cfg.run.n_buffers if n_buffers is None else n_buffers
    adc = AdcSource(link_config(cfg)) if source is None else None
    it = iter(source) if source is not None else iter(adc)
    calib = [next(it) for _ in range(calibration_buffer_count(cfg))]
    prepared = build_receiver(cfg, calib)

    def feed():
        k = 0
        for b in calib:
            if k >= n_buffers:
                return
            k += 1
            yield b
        while k < n_buffers:
            try:
                b = next(it)
            except StopIteration:
                return
            k += 1
            yield b

    fmt = cfg.tx.format
    window = bits_per_window(cfg.tx.baud, fmt.bits_per_symbol,
                             cfg.sweep.window_s if window_s is None else window_s)
    counter = BerCounter(reference_bits(cfg.tx), window)
    pipe = Pipeline(prepared.receiver, cfg.plan)
    frames = []
    used = 0
    for fr in pipe.run(feed()):
        used += 1
        if keep_frames:
            frames.append(fr)
        if not frame_is_counted(fr):
            continue
        counter.update(fr.bits)
        if fmt.is_qam:
            n_tr = fr.diagnostics["n_training"]
            counter.report.add_evm(fr.symbols[n_tr:], fr.diagnostics["decisions"][n_tr:])
        rep = counter.report
        if min_errors is not None and rep.bit_errors >= min_errors:
            break
        if max_bits is not None and rep.bits_counted >= max_bits:
            break
    report = counter.report
    if not fmt.is_qam:
        report.err_power = report.ref_power = 0.0
    return LinkRun(report, pipe.report, frames, prepared.dc_offset, used,
                   adc.channel.clipped if adc is not None else 0)


# sweeps -----------------------------------------------------------------

SWEEP_COLUMNS = ["axis", "value", "measured", "bits", "errors", "ber", "q_db", "evm_db",
                 "buffers", "dc_offset", "status"]


def point_config(cfg: RunConfig, axis: str, value: float, index: int) -> RunConfig:
    if axis not in AXES:
        raise ValueError(f"unknown sweep axis {axis!r}")
    section, key = AXES[axis]
    sub = dataclasses.replace(getattr(cfg, section), **{key: value})
    out = dataclasses.replace(cfg, **{section: sub})
    seed = cfg.channel.seed + 1009 * index
    return dataclasses.replace(out, channel=dataclasses.replace(out.channel, seed=seed))


def _point_key(cfg: RunConfig) -> str:
    return hashlib.sha256(dump_config(cfg).encode()).hexdigest()[:16]


def sweep_point(cfg: RunConfig, axis: str, value: float) -> dict:
    row = {"axis": axis, "value": value}
    try:
        if axis == "osnr":
            row["measured"] = measured_osnr(cfg) if math.isfinite(value) else math.inf
        elif axis == "cspr":
            row["measured"] = measured_cspr(cfg)
        else:
            row["measured"] = value
        run = run_link(cfg, n_buffers=cfg.sweep.max_buffers, min_errors=cfg.sweep.min_errors,
                       max_bits=cfg.sweep.max_bits)
        rep = run.report
        row.update(bits=rep.bits_counted, errors=rep.bit_errors, ber=rep.ber, q_db=rep.q_db,
                   evm_db=rep.evm_db if cfg.chain == "kk" else None, buffers=run.buffers,
                   dc_offset=run.dc_offset, status="ok")
    except POINT_FAILURES as exc:
        row.update(status=f"failed: {type(exc).__name__}: {exc}")
    return row


def run_sweep(cfg: RunConfig, axis: str | None = None, grid=None, cache_dir=None,
              out_csv=None) -> list[dict]:
    """One row per grid point; finished points are cached by configuration hash."""
    axis = cfg.sweep.axis if axis is None else axis
    grid = cfg.sweep.values() if grid is None else list(grid)
    if not grid:
        raise ValueError("sweep grid is empty")
    cache = Path(cache_dir) if cache_dir is not None else None
    if cache is not None:
        cache.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, v in enumerate(grid):
        try:
            pc = point_config(cfg, axis, float(v), i)
        except ConfigError as exc:
            rows.append({"axis": axis, "value": float(v), "status": f"failed: ConfigError: {exc}"})
            continue
        path = cache / f"{axis}_{_point_key(pc)}.json" if cache is not None else None
        if path is not None and path.exists():
            rows.append(json.loads(path.read_text()))
            continue
        row = sweep_point(pc, axis, float(v))
        if path is not None and row.get("status") == "ok":
            path.write_text(json.dumps(row, default=_json_default))
        rows.append(row)
        if out_csv is not None:
            write_rows(out_csv, rows, SWEEP_COLUMNS)
    if out_csv is not None:
        write_rows(out_csv, rows, SWEEP_COLUMNS)
    return rows


def _json_default(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    raise TypeError(type(v))


def write_rows(path, rows: list[dict], columns: list[str]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({c: _fmt(r.get(c)) for c in columns})


def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v) if math.isfinite(v) else ("inf" if v > 0 else "-inf" if v < 0 else "nan")
    return v


# continuous trace ---------------------------------------------------------

TRACE_COLUMNS = ["window", "t_start_s", "bits", "errors", "ber", "q_db"]


@dataclass
class Trace:
    rows: list
    report: MetricsReport
    window_s: float

    @property
    def q_values(self) -> np.ndarray:
        return np.array([r["q_db"] for r in self.rows], dtype=float)

    def summary(self) -> dict:
        q = self.q_values
        finite = q[np.isfinite(q)]
        return {"windows": len(q), "q_mean_db": float(np.mean(finite)) if len(finite) else math.nan,
                "q_std_db": float(np.std(finite)) if len(finite) else math.nan,
                "ber": self.report.ber, "q_db": self.report.q_db, "bits": self.report.bits_counted}


def run_trace(cfg: RunConfig, duration_symbols: int, window_s: float | None = None) -> Trace:
    """Windowed Q over a run long enough to carry ``duration_symbols`` symbols."""
    window_s = cfg.sweep.window_s if window_s is None else window_s
    sym_per_buffer = cfg.run.buffer_len * cfg.tx.baud / cfg.channel.adc_rate
    n_buffers = int(math.ceil(duration_symbols / sym_per_buffer))
    run = run_link(cfg, n_buffers=n_buffers, window_s=window_s)
    rows = []
    for i, (e, n) in enumerate(run.report.windows):
        ber = e / n
        rows.append({"window": i, "t_start_s": i * window_s, "bits": n, "errors": e, "ber": ber,
                     "q_db": MetricsReport(e, n).q_db})
    return Trace(rows, run.report, window_s)
