"""Complex-baseband channel models.

Signal blocks are real arrays of shape ``(..., 2, n)``: row 0 holds the
in-phase parts, row 1 the quadrature parts of ``n`` channel uses. Noise
power ``sigma2`` is the total variance per complex sample, i.e.
``sigma2 / 2`` per real component.

All randomness comes from an explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

AWGN = "awgn"
RAYLEIGH = "rayleigh"
RICIAN = "rician"
KINDS = (AWGN, RAYLEIGH, RICIAN)


class DegenerateInputError(ValueError):
    pass


@dataclass(frozen=True)
class ChannelModel:
    kind: str = AWGN
    rician_k: float = 4.0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown channel kind {self.kind!r}")
        if not np.isfinite(self.rician_k) or self.rician_k < 0:
            raise ValueError("rician_k must be finite and non-negative")

    @property
    def fading(self):
        return self.kind != AWGN


def to_complex(block):
    block = np.asarray(block)
    return block[..., 0, :] + 1j * block[..., 1, :]


def to_real(z):
    z = np.asarray(z)
    return np.stack([z.real, z.imag], axis=-2)


def noise_variance(snr_db):
    return 10.0 ** (-np.asarray(snr_db, dtype=np.float64) / 10.0)


def normalize_power(x):
    """Scale each block to unit mean power per channel use."""
    x = np.asarray(x, dtype=np.float64)
    n = x.shape[-1]
    energy = np.sum(x * x, axis=(-2, -1), keepdims=True)
    if np.any(energy <= 0):
        raise DegenerateInputError("cannot normalize an all-zero block")
    return x * np.sqrt(n / energy)


def normalize_power_backward(x, grad):
    """Vector-Jacobian product of :func:`normalize_power` at ``x``."""
    n = x.shape[-1]
    energy = np.sum(x * x, axis=(-2, -1), keepdims=True)
    scale = np.sqrt(n / energy)
    xn = x * scale
    proj = np.sum(xn * grad, axis=(-2, -1), keepdims=True)
    return scale * (grad - xn * proj / n)


def complex_normal(rng, size, var=1.0):
    s = np.sqrt(var / 2.0)
    return s * rng.standard_normal(size) + 1j * s * rng.standard_normal(size)


def sample_fading(model, rng, size=None):
    """Fading coefficient(s): 1 for AWGN, CN(0,1) Rayleigh, LOS + CN for Rician."""
    shape = () if size is None else size
    if model.kind == AWGN:
        h = np.ones(shape, dtype=np.complex128)
    elif model.kind == RAYLEIGH:
        h = complex_normal(rng, shape)
    else:
        k = model.rician_k
        h = np.sqrt(k / (k + 1.0)) + np.sqrt(1.0 / (k + 1.0)) * complex_normal(rng, shape)
    return complex(h) if size is None else h


def add_noise(x, sigma2, rng):
    x = np.asarray(x, dtype=np.float64)
    if sigma2 < 0:
        raise ValueError("sigma2 must be non-negative")
    if sigma2 == 0:
        return x.copy()
    return x + np.sqrt(sigma2 / 2.0) * rng.standard_normal(x.shape)


def single_user_output(x, h, sigma2, rng):
    """``y = h x + n`` with ``h`` per block (scalar or shape ``x.shape[:-2]``)."""
    h = np.asarray(h)[..., None]
    y = to_real(h * to_complex(x))
    return add_noise(y, sigma2, rng)


@dataclass
class ChannelRealization:
    """Coefficients for a batch of codeword slots.

    ``h_single``: user->receiver (batch,); ``H``: (batch, n_tx, n_rx) user->
    antenna gains; ``phases``: (batch, n_tx); ``h_users_to_bob``: (batch, n_tx);
    ``h_alice``: (batch,) Alice->Bob (single-user: Alice->receiver);
    ``h_alice_rx``: (batch, n_rx) Alice->BaseRX antennas.
    """

    h_single: np.ndarray
    H: np.ndarray
    phases: np.ndarray
    h_users_to_bob: np.ndarray
    h_alice: np.ndarray
    h_alice_rx: np.ndarray

    @property
    def H_eff(self):
        """Gains with the per-transmitter phase offsets folded in."""
        return self.H * np.exp(1j * self.phases)[..., None]

    def __len__(self):
        return self.h_single.shape[0]


def draw_realization(model, n_tx, n_rx, rng, scenario="single", batch=1):
    if n_tx < 1 or n_rx < 1 or batch < 1:
        raise ValueError("dimensions must be positive")
    ones = lambda *s: np.ones(s, dtype=np.complex128)  # noqa: E731
    if scenario == "single":
        h_single = sample_fading(model, rng, (batch,))
        h_alice = sample_fading(model, rng, (batch,))
        return ChannelRealization(
            h_single, ones(batch, n_tx, n_rx), np.zeros((batch, n_tx)),
            ones(batch, n_tx), h_alice, ones(batch, n_rx),
        )
    if scenario != "multi":
        raise ValueError(f"unknown scenario {scenario!r}")
    H = sample_fading(model, rng, (batch, n_tx, n_rx))
    if model.fading:
        phases = rng.uniform(0.0, 2 * np.pi, size=(batch, n_tx))
    else:
        phases = np.zeros((batch, n_tx))
    h_ub = sample_fading(model, rng, (batch, n_tx))
    h_alice = sample_fading(model, rng, (batch,))
    h_alice_rx = sample_fading(model, rng, (batch, n_rx))
    return ChannelRealization(ones(batch), H, phases, h_ub, h_alice, h_alice_rx)


def antenna_signals(xs, H_eff):
    """Noiseless superposition at each receive antenna.

    ``xs``: (batch, n_tx, 2, n) blocks, ``H_eff``: (batch, n_tx, n_rx).
    Returns (batch, n_rx, 2, n).
    """
    xc = to_complex(xs)
    return to_real(np.einsum("bij,bin->bjn", H_eff, xc))


def multi_user_output(xs, realization, sigma2, rng):
    """Per-antenna received blocks ``sum_i H_eff[i, j] x_i + n_j``."""
    xs = np.asarray(xs, dtype=np.float64)
    H_eff = realization.H_eff
    if xs.ndim != 4 or xs.shape[:2] != H_eff.shape[:2]:
        raise ValueError(
            f"expected blocks (batch, {H_eff.shape[1]}, 2, n), got {xs.shape}"
        )
    return add_noise(antenna_signals(xs, H_eff), sigma2, rng)
