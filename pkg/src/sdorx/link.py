"""Transmitter -> channel -> ADC buffer source used by the CLI, sweeps and tests."""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Iterator

import numpy as np

from .channel import Channel, ChannelConfig, electrical_response
from .core import BUFFER_LEN, FFT_LEN, Domain, SampleBuffer
from .txgen import Transmitter, TxConfig


@dataclass
class LinkConfig:
    tx: TxConfig = field(default_factory=TxConfig)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    buffer_len: int = BUFFER_LEN

    def __post_init__(self):
        self.channel = self.channel.resolved(self.tx.format)


class AdcSource:
    """Endless stream of ADC buffers (uint16 codes) for a configured link."""

    def __init__(self, cfg: LinkConfig):
        self.cfg = cfg
        self.tx = Transmitter(cfg.tx)
        self.channel = Channel(cfg.channel, cfg.tx.dac_rate)
        self._pending = np.zeros(0, np.uint16)
        self.index = 0
        ratio = Fraction(cfg.tx.dac_rate) / Fraction(cfg.channel.adc_rate)
        self._field_per_buffer = int(np.ceil(cfg.buffer_len * float(ratio)))

    @property
    def adc_sps(self) -> Fraction:
        return Fraction(self.cfg.channel.adc_rate) / Fraction(self.cfg.tx.baud)

    def next_buffer(self) -> SampleBuffer:
        n = self.cfg.buffer_len
        sps = self.cfg.tx.sps
        while len(self._pending) < n:
            need = n - len(self._pending)
            n_sym = -(-int(need * self._field_per_buffer / n * 1.001 + 64) // sps)
            codes = self.channel(self.tx.next(n_sym))
            self._pending = np.concatenate([self._pending, codes])
        out, self._pending = self._pending[:n], self._pending[n:]
        buf = SampleBuffer(out, self.cfg.channel.adc_rate, self.adc_sps, Domain.REAL, self.index)
        self.index += 1
        return buf

    def __iter__(self) -> Iterator[SampleBuffer]:
        while True:
            yield self.next_buffer()

    def take(self, n: int) -> list[SampleBuffer]:
        return [self.next_buffer() for _ in range(n)]


def adc_channel_response(cfg: LinkConfig, n_fft: int = FFT_LEN) -> np.ndarray:
    """Electrical response seen by the receiver on its 1024-bin FFT grid."""
    f = np.fft.fftfreq(n_fft, 1 / cfg.channel.adc_rate)
    pos = electrical_response(cfg.channel, cfg.tx.dac_rate, np.abs(f))
    return np.where(f >= 0, pos, np.conj(pos))
