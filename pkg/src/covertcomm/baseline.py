"""Uncoded BPSK / QPSK references with hard-decision detection.

Bit mapping: BPSK ``0 -> +1, 1 -> -1``; QPSK Gray ``(b0, b1) -> ((1 - 2 b0) +
1j (1 - 2 b1)) / sqrt(2)``. Points exactly on a decision boundary decide 0.

SNR bookkeeping: ``snr_per_bit`` is Eb/N0; with unit-energy symbols the
per-symbol SNR is ``Es/N0 = bits_per_symbol * Eb/N0`` and the complex noise
variance is ``1 / (Es/N0)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.special import erfc

from . import channel as ch
from .nn import UsageError
from .results import BASELINE_COLUMNS, SweepResult


class UnsupportedError(ValueError):
    pass


@dataclass(frozen=True)
class ModScheme:
    kind: str

    def __post_init__(self):
        if self.kind not in ("bpsk", "qpsk"):
            raise UnsupportedError(f"unknown scheme {self.kind!r}")

    @property
    def bits_per_symbol(self):
        return 1 if self.kind == "bpsk" else 2

    @property
    def constellation(self):
        if self.kind == "bpsk":
            return np.array([1.0 + 0j, -1.0 + 0j])
        return np.array([1 + 1j, 1 - 1j, -1 + 1j, -1 - 1j]) / np.sqrt(2.0)


BPSK = ModScheme("bpsk")
QPSK = ModScheme("qpsk")


def _scheme(s):
    return s if isinstance(s, ModScheme) else ModScheme(str(s).lower())


def modulate(bits, scheme):
    """Bits ``(..., n_bits)`` to unit-power symbols in ``(..., 2, n_sym)`` layout."""
    scheme = _scheme(scheme)
    bits = np.asarray(bits, dtype=np.int64)
    bps = scheme.bits_per_symbol
    if bits.shape[-1] % bps:
        raise UsageError(f"{bits.shape[-1]} bits do not fill {scheme.kind} symbols")
    if scheme.kind == "bpsk":
        sym = (1.0 - 2.0 * bits).astype(np.complex128)
    else:
        b = bits.reshape(bits.shape[:-1] + (-1, 2))
        sym = ((1.0 - 2.0 * b[..., 0]) + 1j * (1.0 - 2.0 * b[..., 1])) / np.sqrt(2.0)
    return ch.to_real(sym)


def hard_demodulate(y, scheme, h=None):
    """Minimum-distance decisions; ``h`` (per block) equalizes coherently first."""
    scheme = _scheme(scheme)
    yc = ch.to_complex(np.asarray(y, dtype=np.float64))
    if h is not None:
        yc = yc / np.asarray(h)[..., None]
    if scheme.kind == "bpsk":
        return (yc.real < 0).astype(np.int64)
    bits = np.stack([(yc.real < 0), (yc.imag < 0)], axis=-1).astype(np.int64)
    return bits.reshape(bits.shape[:-2] + (-1,))


def q_function(x):
    return 0.5 * erfc(np.asarray(x, dtype=np.float64) / np.sqrt(2.0))


def analytic_error_rate(scheme, channel_kind, snr_per_bit):
    """Closed-form BER at linear Eb/N0 ``snr_per_bit``."""
    scheme = _scheme(scheme)
    g = np.asarray(snr_per_bit, dtype=np.float64)
    if channel_kind == ch.AWGN:
        return q_function(np.sqrt(2.0 * g))
    if channel_kind == ch.RAYLEIGH and scheme.kind == "bpsk":
        return 0.5 * (1.0 - np.sqrt(g / (1.0 + g)))
    raise UnsupportedError(f"no closed form for {scheme.kind} over {channel_kind}")


def _point(scheme, model, snr_db, snr_kind, k, trials, rng, chunk):
    bps = scheme.bits_per_symbol
    if snr_kind == "per_bit":
        per_bit_db = snr_db
        per_sym_db = snr_db + 10 * np.log10(bps)
    else:
        per_sym_db = snr_db
        per_bit_db = snr_db - 10 * np.log10(bps)
    sigma2 = float(ch.noise_variance(per_sym_db))
    bit_err = blk_err = done = 0
    while done < trials:
        b = min(chunk, trials - done)
        bits = rng.integers(0, 2, size=(b, k))
        x = modulate(bits, scheme)
        h = ch.sample_fading(model, rng, (b,))
        y = ch.single_user_output(x, h, sigma2, rng)
        wrong = hard_demodulate(y, scheme, None if not model.fading else h) != bits
        bit_err += int(wrong.sum())
        blk_err += int(wrong.any(axis=1).sum())
        done += b
    return per_sym_db, per_bit_db, bit_err / (trials * k), blk_err / trials


def simulate_baseline_bler(scheme, model, snr_list, k, trials, streams, snr_kind="per_bit",
                           chunk=200_000):
    """Monte-Carlo BER and k-bit block error rate over block-fading channels.

    ``snr_list`` is Eb/N0 in dB by default (``snr_kind="per_symbol"`` for
    Es/N0). Fading is constant over each k-bit block and the receiver knows
    it exactly.
    """
    scheme = _scheme(scheme)
    if isinstance(model, str):
        model = ch.ChannelModel(model)
    if trials < 10_000:
        raise ValueError("baseline simulations need at least 10^4 blocks per point")
    if k % scheme.bits_per_symbol:
        raise ValueError("block size must be a whole number of symbols")
    if snr_kind not in ("per_bit", "per_symbol"):
        raise ValueError("snr_kind must be 'per_bit' or 'per_symbol'")
    res = SweepResult(BASELINE_COLUMNS)
    for i, snr in enumerate(snr_list):
        rng = streams.get("baseline", f"{scheme.kind}-{model.kind}-{k}", i)
        per_sym, per_bit, ber, bler = _point(scheme, model, float(snr), snr_kind, k, trials,
                                             rng, chunk)
        res.add(snr_db=float(per_sym), snr_per_bit_db=float(per_bit), scheme=scheme.kind,
                channel=model.kind, ber=ber, bler=bler, trials=trials)
    return res
