"""``sdorx`` command line: tx, channel, rx, sweep, trace, probe, design-eq, calibrate.

Exit codes: 0 ok, 2 configuration error, 3 synchronization or calibration failure.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import math
import sys
from fractions import Fraction

import numpy as np

from .channel import Channel, NoiseState, load_noise
from .config import SECTIONS, RunConfig, load_config
from .core import Domain, SampleBuffer
from .errors import CalibrationError, ConfigError, EqualizerDivergence, SyncError
from .harness import (SWEEP_COLUMNS, TRACE_COLUMNS, build_receiver, calibrate_dc_offset, calibration_buffer_count,
                      imdd_config,
                      link_config, run_link, run_sweep, run_trace, static_equalizer, write_rows)
from .imdd import calibrate_thresholds, normalize_buffer
from .link import AdcSource
from .metrics import constellation_dump, eye_diagram, measure_cspr, measure_osnr
from .pipeline import throughput_probe
from .srx1 import SrxFormat, read_srx1, write_sidecar, write_srx1
from .txgen import Transmitter

EXIT_OK, EXIT_CONFIG, EXIT_SYNC = 0, 2, 3


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--config", help="INI run configuration")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one configuration key (repeatable)")
    g = p.add_argument_group("configuration keys")
    for section, (_, cls) in SECTIONS.items():
        for f in dataclasses.fields(cls):
            if f.init:
                g.add_argument(f"--{section}.{f.name}", dest=f"cfg:{section}.{f.name}", metavar="V",
                               default=None, help=argparse.SUPPRESS)
    return p


def _resolve_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    values = {}
    for item in args.set:
        key, sep, val = item.partition("=")
        if not sep:
            raise ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        values[key.strip()] = val
    for k, v in vars(args).items():
        if k.startswith("cfg:") and v is not None:
            values[k[4:]] = v
    return cfg.with_values(values) if values else cfg


def _print_json(obj) -> None:
    print(json.dumps(obj, indent=2, default=_jsonable))


def _jsonable(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, Fraction):
        return str(v)
    return str(v)


def _finite(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else "-inf" if v < 0 else "nan"
    return v


# subcommands --------------------------------------------------------------


def cmd_tx(args, cfg: RunConfig) -> int:
    tx = Transmitter(cfg.tx)
    n_sym = args.symbols
    field_ = tx.next(n_sym)
    write_srx1(args.out, field_, cfg.tx.dac_rate, Fraction(cfg.tx.sps), SrxFormat.COMPLEX_F32)
    meta = {"format": str(cfg.tx.format), "symbols": n_sym, "sample_rate": cfg.tx.dac_rate,
            "prbs_order": cfg.tx.prbs_order, "prbs_seed": cfg.tx.prbs_seed, "pam_clipped": tx.clipped}
    if cfg.tx.format.is_qam:
        meta["cspr_db_measured"] = _finite(measure_cspr(field_))
    write_sidecar(args.out, meta)
    return EXIT_OK


def cmd_channel(args, cfg: RunConfig) -> int:
    src = read_srx1(args.input)
    if src.fmt is not SrxFormat.COMPLEX_F32:
        raise ConfigError("channel input must be a complex field file")
    if src.sample_rate != int(cfg.tx.dac_rate):
        raise ConfigError(f"field rate {src.sample_rate} differs from tx.dac_rate {cfg.tx.dac_rate:g}")
    ch = Channel(cfg.channel.resolved(cfg.tx.format), src.sample_rate)
    codes = ch(src.samples)
    sps = Fraction(int(cfg.channel.adc_rate)) / Fraction(int(cfg.tx.baud))
    write_srx1(args.out, codes, cfg.channel.adc_rate, sps, SrxFormat.REAL_U12)
    # the same noise the channel drew (single chunk), re-measured from the field
    if math.isfinite(cfg.channel.osnr_db):
        ase = NoiseState(cfg.channel.seed).spawn(2)[0]
        noisy = load_noise(SampleBuffer(src.samples, src.sample_rate, src.sps, Domain.COMPLEX), cfg.channel, ase)
        osnr = measure_osnr(noisy.samples, src.sample_rate)
    else:
        osnr = math.inf
    write_sidecar(args.out, {"osnr_db_requested": _finite(cfg.channel.osnr_db), "osnr_db_measured": _finite(osnr),
                             "clipped": ch.clipped, "clip_fraction": ch.clipped / max(1, len(codes)),
                             "adc_gain": ch.gain, "samples": len(codes)})
    return EXIT_OK


def _file_buffers(path, cfg: RunConfig):
    f = read_srx1(path)
    if f.fmt is not SrxFormat.REAL_U12:
        raise ConfigError("receiver input must hold 12-bit ADC codes")
    if f.sample_rate != int(cfg.channel.adc_rate):
        raise ConfigError(f"file rate {f.sample_rate} differs from channel.adc_rate {cfg.channel.adc_rate:g}")
    n = cfg.run.buffer_len
    count = len(f.samples) // n
    if count == 0:
        raise ConfigError(f"file holds fewer than one buffer ({n} samples)")
    return [SampleBuffer(f.samples[i * n:(i + 1) * n], f.sample_rate, f.sps, Domain.REAL, i) for i in range(count)]


def cmd_rx(args, cfg: RunConfig) -> int:
    bufs = _file_buffers(args.input, cfg)
    run = run_link(cfg, n_buffers=len(bufs), keep_frames=True, source=iter(bufs))
    rep = run.report
    bits = np.concatenate([fr.bits for fr in run.frames]) if run.frames else np.zeros(0, np.uint8)
    if args.bits_out:
        np.packbits(bits).tofile(args.bits_out)
    out = {k: _finite(v) for k, v in rep.as_row().items()}
    out.update(realtime_ratio=run.budget.realtime_ratio, buffers=run.buffers, dc_offset=run.dc_offset,
               chain=cfg.chain)
    if args.eye and cfg.chain == "imdd":
        wave = _imdd_waveform(cfg, bufs)
        eye = eye_diagram(wave)
        np.savetxt(args.eye, eye.counts, fmt="%d", delimiter=",")
    if args.constellation and cfg.chain == "kk":
        counted = [fr for fr in run.frames if not fr.warmup]
        pts = np.concatenate([fr.symbols for fr in counted])
        dec = np.concatenate([fr.diagnostics["decisions"] for fr in counted])
        dump = constellation_dump(pts, cfg.tx.format, dec)
        dump.write_csv(args.constellation)
        dump.write_cluster_csv(args.constellation + ".clusters.csv")
    if args.report:
        with open(args.report, "w") as fh:
            json.dump(out, fh, indent=2, default=_jsonable)
    _print_json(out)
    return EXIT_OK


def _imdd_waveform(cfg: RunConfig, bufs) -> np.ndarray:
    from .imdd import ImddReceiver

    rx = ImddReceiver(imdd_config(cfg), static_equalizer(cfg), keep_waveform=True)
    waves = [rx.process(b).diagnostics["waveform"] for b in bufs]
    w = np.concatenate(waves[1:] if len(waves) > 1 else waves)
    return w - np.mean(w)


def cmd_sweep(args, cfg: RunConfig) -> int:
    grid = [float(v) for v in args.grid.split(",")] if args.grid else None
    rows = run_sweep(cfg, args.axis, grid, cache_dir=args.cache, out_csv=args.out)
    if not args.out:
        w = csv.DictWriter(sys.stdout, fieldnames=SWEEP_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for r in rows:
            w.writerow({k: _finite(v) for k, v in r.items()})
    return EXIT_OK


def cmd_trace(args, cfg: RunConfig) -> int:
    tr = run_trace(cfg, args.symbols, args.window_s)
    if args.out:
        write_rows(args.out, tr.rows, TRACE_COLUMNS)
    _print_json({k: _finite(v) for k, v in tr.summary().items()})
    return EXIT_OK


def cmd_probe(args, cfg: RunConfig) -> int:
    src = AdcSource(link_config(cfg))
    distinct = src.take(max(args.distinct, calibration_buffer_count(cfg)))
    calib = distinct[: calibration_buffer_count(cfg)] if cfg.chain == "kk" else None
    rx = build_receiver(cfg, calib).receiver

    def replay():
        i = 0
        while True:
            b = distinct[i % len(distinct)]
            yield dataclasses.replace(b, sequence_index=i)
            i += 1

    rep = throughput_probe(rx, replay(), args.buffers, cfg.plan)
    if args.out:
        rep.write_csv(args.out)
    print(rep.table())
    return EXIT_OK


def cmd_design_eq(args, cfg: RunConfig) -> int:
    eq = static_equalizer(cfg)
    f = np.fft.fftfreq(len(eq.taps_fd), 1 / cfg.channel.adc_rate)
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["lag", "tap_re", "tap_im"])
        half = (eq.n_taps - 1) // 2
        for k, t in enumerate(np.asarray(eq.taps_td, dtype=complex)):
            w.writerow([k - half, t.real, t.imag])
    if args.response:
        np.savetxt(args.response, np.column_stack([f, np.abs(eq.taps_fd), np.angle(eq.taps_fd)]),
                   delimiter=",", header="freq_hz,magnitude,phase_rad", comments="")
    print(f"{cfg.chain} static equalizer: {eq.n_taps} taps -> {args.out}")
    return EXIT_OK


def cmd_calibrate(args, cfg: RunConfig) -> int:
    src = AdcSource(link_config(cfg))
    bufs = src.take(args.buffers)
    if args.what == "dc-offset":
        if cfg.chain != "kk":
            raise ConfigError("dc-offset calibration applies to QAM (KK) formats")
        bufs += src.take(max(0, calibration_buffer_count(cfg) - len(bufs)))
        res = calibrate_dc_offset(cfg, bufs)
        for dc, e in zip(res.grid, res.evm_db):
            print(f"{dc:.6f},{_finite(float(e))}")
        print(f"dc_offset = {res.dc_offset:.6f}")
        return EXIT_OK
    if cfg.chain != "imdd":
        raise ConfigError("threshold calibration applies to PAM (IMDD) formats")
    from .imdd import ImddReceiver

    rx = ImddReceiver(imdd_config(cfg), static_equalizer(cfg))
    syms = np.concatenate([rx.process(b).symbols for b in bufs][1:] or [rx.process(bufs[0]).symbols])
    dc, amp = normalize_buffer(syms, cfg.tx.format)
    th = calibrate_thresholds((syms - dc) / amp if amp else syms, cfg.tx.format)
    print("thresholds = " + ",".join(f"{t:.6f}" for t in th))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parent = _config_parent()
    p = argparse.ArgumentParser(prog="sdorx", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("tx", parents=[parent], help="write a transmitted field file")
    s.add_argument("--out", required=True)
    s.add_argument("--symbols", type=int, default=1 << 16)
    s.set_defaults(func=cmd_tx)

    s = sub.add_parser("channel", parents=[parent], help="field file -> 12-bit ADC file")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_channel)

    s = sub.add_parser("rx", parents=[parent], help="decode an ADC file and report BER/Q")
    s.add_argument("--in", dest="input", required=True)
    s.add_argument("--bits-out")
    s.add_argument("--report")
    s.add_argument("--eye", help="eye-diagram histogram CSV (PAM)")
    s.add_argument("--constellation", help="constellation CSV (QAM)")
    s.set_defaults(func=cmd_rx)

    s = sub.add_parser("sweep", parents=[parent], help="Q versus OSNR, CSPR or clock offset")
    s.add_argument("--axis", choices=["osnr", "cspr", "clock_ppm"])
    s.add_argument("--grid", help="comma-separated values (default: sweep.grid)")
    s.add_argument("--out")
    s.add_argument("--cache", help="directory for per-point results (resumable)")
    s.set_defaults(func=cmd_sweep)

    s = sub.add_parser("trace", parents=[parent], help="windowed Q over a long run")
    s.add_argument("--symbols", type=int, required=True)
    s.add_argument("--window-s", type=float)
    s.add_argument("--out")
    s.set_defaults(func=cmd_trace)

    s = sub.add_parser("probe", parents=[parent], help="throughput and real-time budget")
    s.add_argument("--buffers", type=int, default=100)
    s.add_argument("--distinct", type=int, default=2, help="generated buffers replayed cyclically")
    s.add_argument("--out")
    s.set_defaults(func=cmd_probe)

    s = sub.add_parser("design-eq", parents=[parent], help="static FIR design")
    s.add_argument("--out", required=True)
    s.add_argument("--response")
    s.set_defaults(func=cmd_design_eq)

    s = sub.add_parser("calibrate", parents=[parent], help="PAM thresholds or KK DC offset")
    s.add_argument("what", choices=["thresholds", "dc-offset"])
    s.add_argument("--buffers", type=int, default=2)
    s.set_defaults(func=cmd_calibrate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolve_config(args)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SyncError, CalibrationError, EqualizerDivergence) as exc:
        print(f"{type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_SYNC


if __name__ == "__main__":
    sys.exit(main())
