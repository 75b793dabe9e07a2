"""Normal autoencoder links: single-user (blind estimator + divide-by-h
equalizer) and multi-user (independent encoders, zero-forcing BaseRX).

Received blocks use the ``(batch, 2, n)`` layout from :mod:`channel`.
Complex gradients are carried as ``dL/dRe + 1j * dL/dIm``; for ``w = a*z``
that makes ``grad_z = conj(a) * grad_w``.
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from .nn import (
    AdamState, ConfigError, Network, NumericalError, UsageError, adam_step, conv1d,
    cross_entropy, dense,
)
from .results import AE_CURVE_COLUMNS, BLER_COLUMNS, SweepResult

log = logging.getLogger(__name__)

H_MIN = 1e-9
COND_MAX = 1e8

# training SNR (dB) per (mode, channel kind)
DEFAULT_TRAIN_SNR = {
    ("single", ch.AWGN): 4.0,
    ("single", ch.RAYLEIGH): 16.0,
    ("single", ch.RICIAN): 16.0,
    ("multi", ch.AWGN): 8.0,
    ("multi", ch.RAYLEIGH): 16.0,
    ("multi", ch.RICIAN): 14.0,
}


class SingularChannelError(ValueError):
    pass


@dataclass
class AeConfig:
    n: int = 8
    k: int = 4
    mode: str = "single"
    channel: ch.ChannelModel = field(default_factory=ch.ChannelModel)
    n_tx: int = 1
    n_rx: int | None = None
    train_snr_db: float | None = None
    epochs: int = 100
    batch: int = 1024
    lr: float = 1e-3
    train_size: int = 8192
    test_size: int = 51200
    estimator_weight: float = 1.0

    def __post_init__(self):
        if self.mode not in ("single", "multi"):
            raise ConfigError(f"mode must be single or multi, got {self.mode!r}")
        if self.mode == "single":
            self.n_tx = 1
        if self.n_rx is None:
            self.n_rx = self.n_tx
        if self.train_snr_db is None:
            self.train_snr_db = DEFAULT_TRAIN_SNR[(self.mode, self.channel.kind)]
        if self.n < 1 or self.k < 1 or self.n_tx < 1 or self.n_rx < 1:
            raise ConfigError("n, k, n_tx, n_rx must be positive")
        if self.mode == "multi" and self.channel.fading and self.n_rx < self.n_tx:
            raise ConfigError("zero-forcing needs n_rx >= n_tx")

    @property
    def M(self):
        return 2**self.k


# -- architectures -------------------------------------------------------------

CONV_FILTERS = (1, 8, 8, 8)
CONV_KERNELS = (2, 4, 2, 2)
CONV_STRIDES = (1, 2, 1, 1)


def _conv_stack(activation):
    return [
        conv1d(f, k, s, activation)
        for f, k, s in zip(CONV_FILTERS, CONV_KERNELS, CONV_STRIDES)
    ]


def _width(n):
    # shortest input the valid-padding conv stack accepts is 9 samples
    return max(2 * n, 9)


def build_encoder(n, M, rng, name="encoder"):
    w = _width(n)
    layers = [dense(w, "elu"), dense(w, "elu"), *_conv_stack("tanh"), dense(2 * n)]
    return Network(M, layers, rng, name=name)


def build_estimator(n, rng):
    layers = [dense(4 * n, "elu"), dense(8 * n, "tanh"), dense(2 * n, "tanh"), dense(2)]
    return Network(2 * n, layers, rng, name="estimator")


def build_decoder(n, M, rng):
    w = _width(n)
    layers = [dense(w, "tanh"), dense(w, "tanh"), *_conv_stack("tanh"), dense(M, "softmax")]
    return Network(2 * n, layers, rng, name="decoder")


def build_pre_decoder(n, n_blocks, n_tx, rng):
    layers = [
        dense(n_tx * 2 * n, "tanh"),
        dense(n_tx * 4 * n, "tanh"),
        *_conv_stack("tanh"),
        dense(n_tx * 4 * n, "tanh"),
    ]
    return Network(n_blocks * 2 * n, layers, rng, name="pre_decoder")


def build_head(n, M, rng, i):
    return Network(4 * n, [dense(2 * n, "tanh"), dense(M, "softmax")], rng, name=f"head{i}")


def one_hot(idx, size):
    idx = np.asarray(idx)
    if np.any(idx < 0) or np.any(idx >= size):
        raise UsageError(f"message index out of range [0, {size})")
    out = np.zeros(idx.shape + (size,))
    np.put_along_axis(out, idx[..., None], 1.0, axis=-1)
    return out


# -- equalizers ----------------------------------------------------------------


def equalize_single(y, h_hat):
    """Divide each block by its estimated coefficient.

    Returns ``(equalized, flagged)``; blocks with ``|h_hat| <= 1e-9`` pass
    through unequalized and are flagged.
    """
    y = np.asarray(y, dtype=np.float64)
    h_hat = np.asarray(h_hat, dtype=np.complex128)
    flagged = np.abs(h_hat) <= H_MIN
    h_use = np.where(flagged, 1.0, h_hat)
    return ch.to_real(ch.to_complex(y) / h_use[..., None]), flagged


def zf_matrix(H_eff):
    """Zero-forcing filters ``(A^H A)^-1 A^H`` with ``A[j, i] = H_eff[i, j]``.

    Returns ``(W, flagged)`` where ``W`` has shape (batch, n_tx, n_rx) and
    ``flagged`` marks rank-deficient or badly conditioned blocks.
    """
    A = np.swapaxes(np.asarray(H_eff, dtype=np.complex128), -1, -2)
    u, s, vh = np.linalg.svd(A, full_matrices=False)
    smax = s[..., 0]
    smin = s[..., -1]
    flagged = (smin <= smax * 1e-15) | (smax > COND_MAX * smin)
    inv_s = np.where(s > smax[..., None] * 1e-15, 1.0 / np.where(s > 0, s, 1.0), 0.0)
    W = np.einsum("...ki,...k,...jk->...ij", vh.conj(), inv_s, u.conj())
    return W, flagged


def zf_equalize(ys, H_eff, strict=False):
    """Per-user blocks recovered from per-antenna blocks.

    ``ys``: (batch, n_rx, 2, n); ``H_eff``: (batch, n_tx, n_rx).
    """
    ys = np.asarray(ys, dtype=np.float64)
    H_eff = np.asarray(H_eff)
    if H_eff.ndim == 2:
        H_eff = np.broadcast_to(H_eff, (ys.shape[0],) + H_eff.shape)
    if H_eff.shape[-1] != ys.shape[-3]:
        raise ConfigError("antenna count mismatch between blocks and channel matrix")
    W, flagged = zf_matrix(H_eff)
    if strict and np.any(flagged):
        raise SingularChannelError(f"{int(flagged.sum())} block(s) have a singular channel")
    x = np.einsum("bij,bjn->bin", W, ch.to_complex(ys))
    return ch.to_real(x), flagged


# -- systems -------------------------------------------------------------------


class _System:
    cfg: AeConfig

    def networks(self):
        raise NotImplementedError

    def freeze(self):
        for net in self.networks().values():
            net.freeze()
        return self

    @property
    def frozen(self):
        return all(net.frozen for net in self.networks().values())

    def param_bytes(self):
        return b"".join(net.params.tobytes() for net in self.networks().values())


class SingleUserSystem(_System):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.encoder = build_encoder(cfg.n, cfg.M, rng)
        self.estimator = build_estimator(cfg.n, rng) if cfg.channel.fading else None
        self.decoder = build_decoder(cfg.n, cfg.M, rng)

    def networks(self):
        nets = {"encoder": self.encoder, "decoder": self.decoder}
        if self.estimator is not None:
            nets["estimator"] = self.estimator
        return nets

    # transmitter

    def encode(self, s):
        return self._encode(s)[0]

    def _encode(self, s):
        s = np.atleast_1d(s)
        raw, tape = self.encoder.forward(one_hot(s, self.cfg.M))
        raw = raw.reshape(-1, 2, self.cfg.n)
        return ch.normalize_power(raw), (raw, tape)

    def _encode_backward(self, cache, grad_x):
        raw, tape = cache
        g = ch.normalize_power_backward(raw, grad_x)
        return self.encoder.backward(tape, g.reshape(raw.shape[0], -1))[0]

    # receiver

    def estimate_channel(self, y):
        if self.estimator is None:
            raise UsageError("AWGN systems do not estimate the channel")
        out = self.estimator(np.asarray(y).reshape(len(y), -1))
        return out[:, 0] + 1j * out[:, 1]

    def decode(self, x_eq):
        probs = self.decoder(np.asarray(x_eq).reshape(len(x_eq), -1))
        return probs, probs.argmax(axis=1)

    def receive(self, y):
        """Full receiver on raw blocks: returns ``(probs, s_hat)``."""
        probs, _ = self.receiver_forward(y)
        return probs, probs.argmax(axis=1)

    def receiver_forward(self, y):
        y = np.asarray(y, dtype=np.float64)
        b = y.shape[0]
        cache = {"y": y}
        if self.estimator is not None:
            est, t_est = self.estimator.forward(y.reshape(b, -1))
            h_hat = est[:, 0] + 1j * est[:, 1]
            x_eq, flagged = equalize_single(y, h_hat)
            cache.update(t_est=t_est, h_hat=h_hat, flagged=flagged)
        else:
            x_eq = y
        probs, t_dec = self.decoder.forward(x_eq.reshape(b, -1))
        cache["t_dec"] = t_dec
        return probs, cache

    def receiver_backward(self, cache, logit_grad, h_hat_grad=None):
        """Returns ``({net_name: grads}, grad_y)``; ``h_hat_grad`` adds a
        direct complex gradient on the estimate (supervised estimator loss)."""
        y = cache["y"]
        b = y.shape[0]
        grads = {}
        grads["decoder"], g = self.decoder.backward(
            cache["t_dec"], logit_grad, terminal_preactivation=True
        )
        g = g.reshape(b, 2, -1)
        if self.estimator is None:
            return grads, g
        h_hat, flagged = cache["h_hat"], cache["flagged"]
        h_use = np.where(flagged, 1.0, h_hat)
        gc = ch.to_complex(g)
        yc = ch.to_complex(y)
        g_y = np.conj(1.0 / h_use)[:, None] * gc
        g_h = np.sum(np.conj(-yc / (h_use**2)[:, None]) * gc, axis=1)
        g_h = np.where(flagged, 0.0, g_h)
        if h_hat_grad is not None:
            g_h = g_h + h_hat_grad
        est_grad = np.stack([g_h.real, g_h.imag], axis=1)
        grads["estimator"], g_est = self.estimator.backward(cache["t_est"], est_grad)
        return grads, ch.to_real(g_y) + g_est.reshape(b, 2, -1)

    # channel

    def draw(self, batch, rng):
        return ch.draw_realization(self.cfg.channel, 1, 1, rng, "single", batch)

    def transmit(self, x, real, noise):
        """``h x + noise`` for pre-drawn noise of shape ``x.shape``."""
        return ch.to_real(real.h_single[:, None] * ch.to_complex(x)) + noise

    def messages(self, batch, rng):
        return rng.integers(0, self.cfg.M, size=batch)

    def errors(self, s, s_hat):
        return {0: s != s_hat}


class MultiUserSystem(_System):
    def __init__(self, cfg, rng):
        self.cfg = cfg
        self.encoders = [
            build_encoder(cfg.n, cfg.M, rng, name=f"encoder{i}") for i in range(cfg.n_tx)
        ]
        self.n_blocks = cfg.n_tx if cfg.channel.fading else cfg.n_rx
        self.pre_decoder = build_pre_decoder(cfg.n, self.n_blocks, cfg.n_tx, rng)
        self.heads = [build_head(cfg.n, cfg.M, rng, i) for i in range(cfg.n_tx)]

    def networks(self):
        nets = {f"encoder{i}": e for i, e in enumerate(self.encoders)}
        nets["pre_decoder"] = self.pre_decoder
        nets.update({f"head{i}": h for i, h in enumerate(self.heads)})
        return nets

    def encode(self, s):
        return self._encode(s)[0]

    def _encode(self, s):
        s = np.atleast_2d(s)
        if s.shape[1] != self.cfg.n_tx:
            raise UsageError(f"expected {self.cfg.n_tx} messages per block")
        xs, caches = [], []
        for i, enc in enumerate(self.encoders):
            raw, tape = enc.forward(one_hot(s[:, i], self.cfg.M))
            raw = raw.reshape(-1, 2, self.cfg.n)
            xs.append(ch.normalize_power(raw))
            caches.append((raw, tape))
        return np.stack(xs, axis=1), caches

    def _encode_backward(self, caches, grad_xs):
        out = {}
        for i, (raw, tape) in enumerate(caches):
            g = ch.normalize_power_backward(raw, grad_xs[:, i])
            out[f"encoder{i}"] = self.encoders[i].backward(tape, g.reshape(raw.shape[0], -1))[0]
        return out

    def equalize(self, ys, H_eff):
        if not self.cfg.channel.fading:
            return np.asarray(ys), None, np.zeros(len(ys), dtype=bool)
        W, flagged = zf_matrix(H_eff)
        x = np.einsum("bij,bjn->bin", W, ch.to_complex(ys))
        return ch.to_real(x), W, flagged

    def decode(self, x_eq):
        """Pre-decoder then every head; returns per-user ``(probs, s_hat)`` lists."""
        b = len(x_eq)
        pre = self.pre_decoder(np.asarray(x_eq).reshape(b, -1))
        probs = [h(pre[:, i * 4 * self.cfg.n : (i + 1) * 4 * self.cfg.n])
                 for i, h in enumerate(self.heads)]
        return probs, [p.argmax(axis=1) for p in probs]

    def receiver_forward(self, ys, H_eff):
        ys = np.asarray(ys, dtype=np.float64)
        b = ys.shape[0]
        x_eq, W, flagged = self.equalize(ys, H_eff)
        pre, t_pre = self.pre_decoder.forward(x_eq.reshape(b, -1))
        w = 4 * self.cfg.n
        probs, t_heads = [], []
        for i, head in enumerate(self.heads):
            p, t = head.forward(pre[:, i * w : (i + 1) * w])
            probs.append(p)
            t_heads.append(t)
        return probs, {"W": W, "t_pre": t_pre, "t_heads": t_heads, "flagged": flagged,
                       "shape": x_eq.shape}

    def receive(self, ys, H_eff):
        probs, _ = self.receiver_forward(ys, H_eff)
        return probs, [p.argmax(axis=1) for p in probs]

    def receiver_backward(self, cache, logit_grads):
        grads = {}
        w = 4 * self.cfg.n
        g_pre = []
        for i, (head, lg) in enumerate(zip(self.heads, logit_grads)):
            grads[f"head{i}"], g = head.backward(cache["t_heads"][i], lg, terminal_preactivation=True)
            g_pre.append(g)
        grads["pre_decoder"], g = self.pre_decoder.backward(cache["t_pre"], np.hstack(g_pre))
        g = g.reshape(cache["shape"])
        if cache["W"] is None:
            return grads, g
        g_y = np.einsum("bij,bin->bjn", cache["W"].conj(), ch.to_complex(g))
        return grads, ch.to_real(g_y)

    def draw(self, batch, rng):
        return ch.draw_realization(self.cfg.channel, self.cfg.n_tx, self.cfg.n_rx, rng, "multi", batch)

    def transmit(self, xs, real, noise):
        return ch.antenna_signals(xs, real.H_eff) + noise

    def transmit_backward(self, real, grad_ys):
        return ch.to_real(np.einsum("bij,bjn->bin", real.H_eff.conj(), ch.to_complex(grad_ys)))

    def messages(self, batch, rng):
        return rng.integers(0, self.cfg.M, size=(batch, self.cfg.n_tx))

    def errors(self, s, s_hat):
        return {i: s[:, i] != s_hat[i] for i in range(self.cfg.n_tx)}


def build_system(cfg, rng):
    return SingleUserSystem(cfg, rng) if cfg.mode == "single" else MultiUserSystem(cfg, rng)


def noise_block(shape, sigma2, rng):
    return np.sqrt(sigma2 / 2.0) * rng.standard_normal(shape)


# -- training ------------------------------------------------------------------


def _train_step(system, s, rng, sigma2):
    cfg = system.cfg
    b = len(s)
    real = system.draw(b, rng)
    if isinstance(system, SingleUserSystem):
        x, enc_cache = system._encode(s)
        y = system.transmit(x, real, noise_block(x.shape, sigma2, rng))
        probs, cache = system.receiver_forward(y)
        loss, lg = cross_entropy(probs, s)
        correct = probs.argmax(axis=1) == s
        h_grad = None
        if system.estimator is not None and cfg.estimator_weight > 0:
            diff = cache["h_hat"] - real.h_single
            loss += cfg.estimator_weight * float(np.mean(np.abs(diff) ** 2))
            h_grad = cfg.estimator_weight * 2.0 * diff / b
        grads, g_y = system.receiver_backward(cache, lg, h_grad)
        g_x = ch.to_real(np.conj(real.h_single)[:, None] * ch.to_complex(g_y))
        grads["encoder"] = system._encode_backward(enc_cache, g_x)
        acc = float(np.mean(correct))
    else:
        xs, enc_cache = system._encode(s)
        ys_shape = (b, cfg.n_rx, 2, cfg.n)
        ys = system.transmit(xs, real, noise_block(ys_shape, sigma2, rng))
        probs, cache = system.receiver_forward(ys, real.H_eff)
        loss, lgs, accs = 0.0, [], []
        for i, p in enumerate(probs):
            li, lg = cross_entropy(p, s[:, i])
            loss += li
            lgs.append(lg)
            accs.append(np.mean(p.argmax(axis=1) == s[:, i]))
        grads, g_ys = system.receiver_backward(cache, lgs)
        grads.update(system._encode_backward(enc_cache, system.transmit_backward(real, g_ys)))
        acc = float(np.mean(accs))
    return loss, acc, grads


def train_autoencoder(cfg, rng, log_every=0):
    """Train at the fixed SNR ``cfg.train_snr_db``.

    Returns ``(system, curve)`` where ``curve`` has columns
    ``epoch,loss,accuracy`` (means over the epoch's batches).
    """
    system = build_system(cfg, rng)
    nets = system.networks()
    opt = {name: AdamState.for_network(net) for name, net in nets.items()}
    sigma2 = float(ch.noise_variance(cfg.train_snr_db))
    train_set = system.messages(cfg.train_size, rng)
    curve = SweepResult(AE_CURVE_COLUMNS)
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(cfg.train_size)
        losses, accs, sizes = [], [], []
        for start in range(0, cfg.train_size, cfg.batch):
            s = train_set[order[start : start + cfg.batch]]
            loss, acc, grads = _train_step(system, s, rng, sigma2)
            if not np.isfinite(loss):
                raise NumericalError(
                    f"autoencoder loss became {loss} at epoch {epoch}, batch offset {start} "
                    f"(snr {cfg.train_snr_db} dB, lr {cfg.lr})"
                )
            for name, g in grads.items():
                adam_step(nets[name], g, opt[name], cfg.lr)
            losses.append(loss)
            accs.append(acc)
            sizes.append(len(s))
        loss = float(np.average(losses, weights=sizes))
        acc = float(np.average(accs, weights=sizes))
        curve.add(epoch=epoch, loss=loss, accuracy=acc)
        if log_every and epoch % log_every == 0:
            log.info("ae epoch %d loss %.4f acc %.4f", epoch, loss, acc)
    return system, curve


# -- evaluation ----------------------------------------------------------------


def run_blocks(system, s, sigma2, rng):
    """Send message batch ``s`` through a fresh channel draw; return decoded messages."""
    real = system.draw(len(s), rng)
    if isinstance(system, SingleUserSystem):
        x = system.encode(s)
        y = system.transmit(x, real, noise_block(x.shape, sigma2, rng))
        return system.receive(y)[1]
    cfg = system.cfg
    xs = system.encode(s)
    ys = system.transmit(xs, real, noise_block((len(s), cfg.n_rx, 2, cfg.n), sigma2, rng))
    return system.receive(ys, real.H_eff)[1]


def _bler_point(system, snr_db, trials, rng, chunk):
    sigma2 = float(ch.noise_variance(snr_db))
    users = 1 if isinstance(system, SingleUserSystem) else system.cfg.n_tx
    errors = np.zeros(users, dtype=np.int64)
    joint = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        s = system.messages(b, rng)
        s_hat = run_blocks(system, s, sigma2, rng)
        errs = system.errors(s, s_hat)
        any_err = np.zeros(b, dtype=bool)
        for i, e in errs.items():
            errors[i] += int(e.sum())
            any_err |= e
        joint += int(any_err.sum())
        done += b
    return errors, joint


def evaluate_bler(system, snr_list, trials, streams, workers=1, chunk=10000, purpose="ae-bler"):
    """BLER per SNR point; point ``i`` draws from stream ``(purpose, "snr", i)``.

    Multi-user systems get one row per user plus a ``joint`` row counting
    blocks where any user is wrong.
    """
    snr_list = [float(v) for v in snr_list]

    def point(i):
        return _bler_point(system, snr_list[i], trials, streams.get(purpose, "snr", i), chunk)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(point, range(len(snr_list))))
    else:
        outs = [point(i) for i in range(len(snr_list))]
    res = SweepResult(BLER_COLUMNS)
    multi = isinstance(system, MultiUserSystem)
    for snr, (errors, joint) in zip(snr_list, outs):
        for i, e in enumerate(errors):
            res.add(snr_db=snr, user_id=str(i), blocks=trials, errors=int(e), bler=e / trials)
        if multi:
            res.add(snr_db=snr, user_id="joint", blocks=trials, errors=joint, bler=joint / trials)
    return res
