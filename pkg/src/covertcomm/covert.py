"""Adversarial covert link on top of a frozen autoencoder system.

Alice (generator) adds a covert block ``z`` to the normal transmission,
Bob decodes the covert message from his own single-antenna stream, and
Willie (a detector at the normal receiver) classifies received blocks as
normal (label 1) or covert (label 0). Alice minimizes
``lam_b * L_B + lam_u * L_U - lam_w * L_W`` with gradients that flow through
the channel (coefficients and noise held fixed) and through the frozen
Bob / Willie / user-receiver networks.

Observation model per block, with one realization and one noise draw shared
by everyone:

* single user: ``y_hat = h_u x + h_a z + n`` seen by the receiver, Bob and Willie;
* multi user: antenna ``j`` gets ``sum_i H_eff[i, j] x_i + g_j z + n_j``,
  Willie watches antenna 0 and Bob gets ``sum_i h_ub[i] x_i + h_a z + n_0``.
"""

from __future__ import annotations

import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import channel as ch
from .autoencoder import (
    DEFAULT_TRAIN_SNR, MultiUserSystem, SingleUserSystem, noise_block, one_hot,
)
from .nn import (
    AdamState, ConfigError, Network, NumericalError, UsageError, adam_step, binary_cross_entropy,
    conv1d, cross_entropy, dense,
)
from .results import AUDIT_COLUMNS, COVERT_CURVE_COLUMNS, COVERT_SWEEP_COLUMNS, SweepResult

log = logging.getLogger(__name__)

# (lam_b, lam_u, lam_w): lam_w = 2 lam_b = 4 lam_u (single), lam_w = 3 lam_b = 6 lam_u (multi)
DEFAULT_LAMBDAS = {"single": (2.0, 1.0, 4.0), "multi": (2.0, 1.0, 6.0)}

DEFAULT_SNR_RANGE = {
    ("single", ch.AWGN): (-2.0, 8.0),
    ("single", ch.RAYLEIGH): (10.0, 30.0),
    ("single", ch.RICIAN): (10.0, 30.0),
    ("multi", ch.AWGN): (0.0, 10.0),
    ("multi", ch.RAYLEIGH): (10.0, 30.0),
    ("multi", ch.RICIAN): (0.0, 20.0),
}

UPDATE_ORDERS = {
    "text": ("willie", "alice", "bob"),
    "algorithm": ("willie", "bob", "alice"),
}


@dataclass
class CovertConfig:
    k_c: int = 1
    trigger_dim: int = 16
    lam_b: float | None = None
    lam_u: float | None = None
    lam_w: float | None = None
    snr_low: float | None = None
    snr_high: float | None = None
    epochs: int = 5000
    batch: int = 1024
    lr: float = 1e-3
    lr_drop_epoch: int | None = None
    lr_drop_factor: float = 10.0
    update_order: str = "text"
    search_objective: str = "covert"
    train_size: int = 8192
    detector_steps: int | None = None
    willie_steps: int | None = None
    alice_steps: int = 4
    eval_batch: int = 1024
    eval_every: int = 1
    eval_snrs: tuple | None = None

    def resolve(self, mode, kind):
        """Fill scenario defaults in place and validate; returns self."""
        lb, lu, lw = DEFAULT_LAMBDAS[mode]
        self.lam_b = lb if self.lam_b is None else self.lam_b
        self.lam_u = lu if self.lam_u is None else self.lam_u
        self.lam_w = lw if self.lam_w is None else self.lam_w
        lo, hi = DEFAULT_SNR_RANGE[(mode, kind)]
        self.snr_low = lo if self.snr_low is None else self.snr_low
        self.snr_high = hi if self.snr_high is None else self.snr_high
        if self.lr_drop_epoch is None:
            self.lr_drop_epoch = self.epochs // 2
        if self.eval_snrs is None:
            self.eval_snrs = (float(DEFAULT_TRAIN_SNR[(mode, kind)]),)
        self.validate()
        return self

    def validate(self):
        if min(self.lam_b, self.lam_u, self.lam_w) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.snr_low > self.snr_high:
            raise ConfigError(f"snr_low {self.snr_low} > snr_high {self.snr_high}")
        if self.update_order not in UPDATE_ORDERS:
            raise ConfigError(f"update_order must be one of {sorted(UPDATE_ORDERS)}")
        if self.search_objective not in ("literal", "covert"):
            raise ConfigError("search_objective must be 'literal' or 'covert'")
        if self.k_c < 1 or self.trigger_dim < 1 or self.epochs < 0 or self.batch < 1:
            raise ConfigError("k_c, trigger_dim, batch must be positive")

    @property
    def n_messages(self):
        return 2**self.k_c

    def lr_at(self, epoch):
        return self.lr if epoch <= self.lr_drop_epoch else self.lr / self.lr_drop_factor


# -- networks ------------------------------------------------------------------

DETECTOR_CONV = ((1, 1, 1), (8, 2, 1), (8, 4, 2), (8, 2, 1), (8, 2, 1))


def feature_size(system):
    cfg = system.cfg
    if not cfg.channel.fading:
        return 0
    if cfg.mode == "single":
        return 2
    return 2 + 2 * cfg.n_tx + 2 * cfg.n_tx * cfg.n_rx


def build_alice(system, k_c, trigger_dim, rng):
    n = system.cfg.n
    c = 2**k_c
    feats = feature_size(system)
    wide = 32 + 2 ** (k_c + 1)
    if system.cfg.mode == "multi" and feats:
        hidden = [wide + feats, wide, wide, 8 * c]
    else:
        hidden = [wide, wide, 8 * c]
    layers = [dense(w, "relu") for w in hidden] + [dense(2 * n, "tanh")]
    return Network(trigger_dim + c + feats, layers, rng, name="alice")


def _detector(n, out, activation, rng, name):
    # widened like the autoencoder stacks when 2n is shorter than the conv stack needs
    w = max(2 * n, 9)
    convs = [conv1d(f, k, s, "leaky_relu") for f, k, s in DETECTOR_CONV]
    layers = [dense(w, "tanh"), dense(w, "tanh"), *convs, dense(out, activation)]
    return Network(2 * n, layers, rng, name=name)


def build_bob(n, k_c, rng):
    return _detector(n, 2**k_c, "softmax", rng, "bob")


def build_willie(n, rng):
    return _detector(n, 1, "sigmoid", rng, "willie")


@dataclass
class CovertTriple:
    alice: Network
    bob: Network
    willie: Network
    k_c: int = 1
    trigger_dim: int = 16
    silent: bool = False

    @classmethod
    def create(cls, system, k_c, trigger_dim, rng):
        n = system.cfg.n
        return cls(
            build_alice(system, k_c, trigger_dim, rng),
            build_bob(n, k_c, rng),
            build_willie(n, rng),
            k_c,
            trigger_dim,
        )

    def networks(self):
        return {"alice": self.alice, "bob": self.bob, "willie": self.willie}


# -- batches and channel views -------------------------------------------------


@dataclass
class CovertBatch:
    s: np.ndarray
    m: np.ndarray
    t: np.ndarray
    real: ch.ChannelRealization
    noise: np.ndarray
    snr_db: float
    x: np.ndarray = field(repr=False, default=None)

    def __len__(self):
        return len(self.m)


def draw_normal_traffic(system, b, sigma2, rng):
    """``(s, realization, noise)`` drawn in the same order as the BLER evaluator."""
    cfg = system.cfg
    s = system.messages(b, rng)
    real = system.draw(b, rng)
    shape = (b, 2, cfg.n) if cfg.mode == "single" else (b, cfg.n_rx, 2, cfg.n)
    return s, real, noise_block(shape, sigma2, rng)


def make_batch(system, triple, b, snr_db, normal_rng, covert_rng):
    sigma2 = float(ch.noise_variance(snr_db))
    s, real, noise = draw_normal_traffic(system, b, sigma2, normal_rng)
    m = covert_rng.integers(0, 2**triple.k_c, size=b)
    t = covert_rng.standard_normal((b, triple.trigger_dim))
    return CovertBatch(s, m, t, real, noise, float(snr_db), system.encode(s))


def alice_features(system, real):
    cfg = system.cfg
    if not cfg.channel.fading:
        return np.zeros((len(real), 0))
    parts = [real.h_alice[:, None]]
    if cfg.mode == "multi":
        parts += [real.h_users_to_bob, real.H_eff.reshape(len(real), -1)]
    c = np.concatenate(parts, axis=1)
    return np.concatenate([c.real, c.imag], axis=1)


def alice_input(triple, m, t, feats):
    return np.concatenate([np.asarray(t), one_hot(m, 2**triple.k_c), feats], axis=1)


def alice_generate(triple, system, m, t, feats=None, real=None):
    """Covert blocks ``(batch, 2, n)`` for messages ``m`` and triggers ``t``."""
    need = feature_size(system)
    if feats is None:
        if real is None:
            if need:
                raise ConfigError("fading scenarios need channel features for Alice")
            feats = np.zeros((len(m), 0))
        else:
            feats = alice_features(system, real)
    feats = np.asarray(feats, dtype=np.float64).reshape(len(m), -1)
    if feats.shape[1] != need:
        raise ConfigError(f"Alice expects {need} channel features, got {feats.shape[1]}")
    z = triple.alice(alice_input(triple, m, t, feats)).reshape(len(m), 2, system.cfg.n)
    return np.zeros_like(z) if triple.silent else z


def covert_output(system, x, z, real, noise):
    """Channel outputs with the covert block added.

    Returns ``(user_view, bob_view, willie_view)``. ``user_view`` is what
    the normal receiver gets (single block, or per-antenna blocks).
    """
    zc = ch.to_complex(z)
    if isinstance(system, SingleUserSystem):
        yc = real.h_single[:, None] * ch.to_complex(x) + real.h_alice[:, None] * zc
        y = ch.to_real(yc) + noise
        return y, y, y
    xc = ch.to_complex(x)
    ant = np.einsum("bij,bin->bjn", real.H_eff, xc) + real.h_alice_rx[:, :, None] * zc[:, None]
    ys = ch.to_real(ant) + noise
    yb = np.einsum("bi,bin->bn", real.h_users_to_bob, xc) + real.h_alice[:, None] * zc
    return ys, ch.to_real(yb) + noise[:, 0], ys[:, 0]


def _z_coefficients(system, real):
    """Complex gain from ``z`` to each view: (user, bob, willie)."""
    if isinstance(system, SingleUserSystem):
        return real.h_alice, real.h_alice, real.h_alice
    return real.h_alice_rx, real.h_alice, real.h_alice_rx[:, 0]


def _user_forward(system, y, real):
    if isinstance(system, SingleUserSystem):
        return system.receiver_forward(y)
    return system.receiver_forward(y, real.H_eff)


def _user_losses(system, probs, s):
    if isinstance(system, SingleUserSystem):
        loss, lg = cross_entropy(probs, s)
        return loss, lg, float(np.mean(probs.argmax(axis=1) == s))
    loss, lgs, accs = 0.0, [], []
    for i, p in enumerate(probs):
        li, lg = cross_entropy(p, s[:, i])
        loss += li
        lgs.append(lg)
        accs.append(np.mean(p.argmax(axis=1) == s[:, i]))
    return loss, lgs, float(np.mean(accs))


def _n_users(system):
    return 1 if isinstance(system, SingleUserSystem) else system.cfg.n_tx


def willie_score(triple, block):
    """Probability that each block is normal."""
    block = np.asarray(block)
    return triple.willie(block.reshape(len(block), -1))[:, 0]


def bob_decode(triple, block):
    probs = triple.bob(np.asarray(block).reshape(len(block), -1))
    return probs, probs.argmax(axis=1)


def balanced_accuracy(p_normal, p_covert):
    """Mean of per-class accuracies at threshold 0.5 (normal iff P > 0.5)."""
    return 0.5 * (float(np.mean(np.asarray(p_normal) > 0.5))
                  + float(np.mean(np.asarray(p_covert) <= 0.5)))


# -- losses --------------------------------------------------------------------


def willie_loss(system, p_covert, p_normal):
    """Detector BCE over the covert (label 0) and normal (label 1) halves.

    Averaged over all observations, then summed over users in multi-user mode.
    Returns ``(loss, grad_covert_logits, grad_normal_logits)``.
    """
    u = _n_users(system)
    p = np.concatenate([p_covert, p_normal])
    labels = np.concatenate([np.zeros(len(p_covert)), np.ones(len(p_normal))])
    loss, g = binary_cross_entropy(p, labels)
    g = u * g
    return u * loss, g[: len(p_covert)], g[len(p_covert):]


def alice_loss(l_b, l_u, l_w, lam_b, lam_u, lam_w):
    return lam_b * l_b + lam_u * l_u - lam_w * l_w


def component_losses(triple, system, batch):
    """``(L_B, L_U, L_W)`` on one batch, no gradients."""
    z = alice_generate(triple, system, batch.m, batch.t, real=batch.real)
    y_user, y_bob, y_w = covert_output(system, batch.x, z, batch.real, batch.noise)
    _, y_clean_w = _clean_views(system, batch)
    probs_b, _ = bob_decode(triple, y_bob)
    l_b, _ = cross_entropy(probs_b, batch.m)
    probs_u, _ = _user_forward(system, y_user, batch.real)
    l_u, _, _ = _user_losses(system, probs_u, batch.s)
    l_w, _, _ = willie_loss(system, willie_score(triple, y_w), willie_score(triple, y_clean_w))
    return l_b, l_u, l_w


def _clean_views(system, batch):
    """Receiver and Willie views of the same block with Alice silent."""
    z0 = np.zeros((len(batch), 2, system.cfg.n))
    y_user, _, y_w = covert_output(system, batch.x, z0, batch.real, batch.noise)
    return y_user, y_w


def alice_objective(triple, system, batch, lams):
    """Alice's loss and its gradient w.r.t. Alice's parameters.

    Bob, Willie and the user receiver are treated as fixed functions.
    Returns ``(L_A, grads, parts)`` with ``parts = (L_B, L_U, L_W)``.
    """
    lam_b, lam_u, lam_w = lams
    b = len(batch)
    feats = alice_features(system, batch.real)
    z_flat, t_alice = triple.alice.forward(alice_input(triple, batch.m, batch.t, feats))
    z = z_flat.reshape(b, 2, system.cfg.n)
    y_user, y_bob, y_w = covert_output(system, batch.x, z, batch.real, batch.noise)
    c_user, c_bob, c_w = _z_coefficients(system, batch.real)

    probs_b, t_bob = triple.bob.forward(y_bob.reshape(b, -1))
    l_b, lg_b = cross_entropy(probs_b, batch.m)
    _, g_yb = triple.bob.backward(t_bob, lg_b, terminal_preactivation=True)
    g_z = lam_b * np.conj(c_bob)[:, None] * ch.to_complex(g_yb.reshape(b, 2, -1))

    probs_u, cache = _user_forward(system, y_user, batch.real)
    l_u, lg_u, _ = _user_losses(system, probs_u, batch.s)
    _, g_yu = system.receiver_backward(cache, lg_u)
    g_yu = ch.to_complex(g_yu)
    if g_yu.ndim == 3:
        g_z += lam_u * np.einsum("bj,bjn->bn", np.conj(c_user), g_yu)
    else:
        g_z += lam_u * np.conj(c_user)[:, None] * g_yu

    _, y_clean_w = _clean_views(system, batch)
    p_cov, t_wc = triple.willie.forward(y_w.reshape(b, -1))
    p_norm = triple.willie(y_clean_w.reshape(b, -1))
    l_w, g_cov, _ = willie_loss(system, p_cov[:, 0], p_norm[:, 0])
    _, g_yw = triple.willie.backward(t_wc, g_cov[:, None], terminal_preactivation=True)
    g_z -= lam_w * np.conj(c_w)[:, None] * ch.to_complex(g_yw.reshape(b, 2, -1))

    if triple.silent:
        g_z = np.zeros_like(g_z)
    grads, _ = triple.alice.backward(t_alice, ch.to_real(g_z).reshape(b, -1))
    return alice_loss(l_b, l_u, l_w, lam_b, lam_u, lam_w), grads, (l_b, l_u, l_w)


def _willie_step(triple, system, batch, opt, lr):
    b = len(batch)
    z = alice_generate(triple, system, batch.m, batch.t, real=batch.real)
    _, _, y_w = covert_output(system, batch.x, z, batch.real, batch.noise)
    _, y_clean_w = _clean_views(system, batch)
    inp = np.concatenate([y_w.reshape(b, -1), y_clean_w.reshape(b, -1)])
    p, tape = triple.willie.forward(inp)
    loss, g_cov, g_norm = willie_loss(system, p[:b, 0], p[b:, 0])
    grads, _ = triple.willie.backward(tape, np.concatenate([g_cov, g_norm])[:, None],
                                      terminal_preactivation=True)
    adam_step(triple.willie, grads, opt, lr)
    return loss


def _bob_step(triple, system, batch, opt, lr):
    b = len(batch)
    z = alice_generate(triple, system, batch.m, batch.t, real=batch.real)
    _, y_bob, _ = covert_output(system, batch.x, z, batch.real, batch.noise)
    probs, tape = triple.bob.forward(y_bob.reshape(b, -1))
    loss, lg = cross_entropy(probs, batch.m)
    grads, _ = triple.bob.backward(tape, lg, terminal_preactivation=True)
    adam_step(triple.bob, grads, opt, lr)
    return loss


def _alice_step(triple, system, batch, opt, lr, lams):
    l_a, grads, parts = alice_objective(triple, system, batch, lams)
    adam_step(triple.alice, grads, opt, lr)
    return l_a, parts


def covert_accuracies(triple, system, batch):
    """``(acc_user, acc_bob, acc_willie)`` on one batch with the covert link active."""
    z = alice_generate(triple, system, batch.m, batch.t, real=batch.real)
    y_user, y_bob, y_w = covert_output(system, batch.x, z, batch.real, batch.noise)
    _, y_clean_w = _clean_views(system, batch)
    probs_u, _ = _user_forward(system, y_user, batch.real)
    _, _, acc_u = _user_losses(system, probs_u, batch.s)
    acc_b = float(np.mean(bob_decode(triple, y_bob)[1] == batch.m))
    acc_w = balanced_accuracy(willie_score(triple, y_clean_w), willie_score(triple, y_w))
    return acc_u, acc_b, acc_w


# -- training ------------------------------------------------------------------


def train_covert(cfg, system, streams, triple=None, tag="covert"):
    """Adversarial training of Alice, Bob and Willie against a frozen system.

    The ``(s, m)`` training pairs are drawn once. Every epoch samples one SNR
    uniformly from ``[snr_low, snr_high]``, shuffles the pairs into
    minibatches with fresh triggers, channels and noise, and then, in
    ``cfg.update_order``, runs Bob over ``cfg.detector_steps`` minibatches,
    Willie over ``cfg.willie_steps`` (default: same as Bob) and Alice for
    ``cfg.alice_steps`` steps. Bob and Willie default to one full epoch.
    Curve accuracies are means over fixed evaluation batches, one per SNR in
    ``cfg.eval_snrs``; ``snr_db`` in the curve is the epoch's training SNR.
    Returns ``(triple, curve)``.
    """
    if not system.frozen:
        raise UsageError("freeze the autoencoder system before covert training")
    if triple is None:
        triple = CovertTriple.create(system, cfg.k_c, cfg.trigger_dim, streams.get(tag, "init"))
    lams = (cfg.lam_b, cfg.lam_u, cfg.lam_w)
    opts = {name: AdamState.for_network(net) for name, net in triple.networks().items()}
    rng_snr = streams.get(tag, "snr")
    rng_data = streams.get(tag, "data")
    rng_chan = streams.get(tag, "channel")
    rng_eval = streams.get(tag, "eval")
    train_s = system.messages(cfg.train_size, rng_data)
    train_m = rng_data.integers(0, cfg.n_messages, size=cfg.train_size)
    eval_s = system.messages(cfg.eval_batch, rng_eval)
    eval_m = rng_eval.integers(0, cfg.n_messages, size=cfg.eval_batch)
    eval_sets = [batch_for(system, triple, eval_s, eval_m, v, rng_eval)
                 for v in (cfg.eval_snrs or ())]
    n_batches = max(1, -(-cfg.train_size // cfg.batch))
    det_steps = cfg.detector_steps or n_batches
    w_steps = cfg.willie_steps or det_steps
    curve = SweepResult(COVERT_CURVE_COLUMNS)
    for epoch in range(1, cfg.epochs + 1):
        lr = cfg.lr_at(epoch)
        snr = float(rng_snr.uniform(cfg.snr_low, cfg.snr_high))
        order = rng_data.permutation(cfg.train_size)
        batches = []
        for j in range(max(det_steps, w_steps, cfg.alice_steps)):
            idx = order[(j % n_batches) * cfg.batch :][: cfg.batch]
            batches.append(batch_for(system, triple, train_s[idx], train_m[idx], snr, rng_chan))
        l_w = l_b = l_a = np.nan
        parts = (np.nan, np.nan, np.nan)
        for actor in UPDATE_ORDERS[cfg.update_order]:
            if actor == "willie":
                l_w = np.mean([_willie_step(triple, system, b, opts["willie"], lr)
                               for b in batches[:w_steps]])
            elif actor == "bob":
                l_b = np.mean([_bob_step(triple, system, b, opts["bob"], lr)
                               for b in batches[:det_steps]])
            else:
                for b in batches[: cfg.alice_steps]:
                    l_a, parts = _alice_step(triple, system, b, opts["alice"], lr, lams)
        if not all(np.isfinite(v) for v in (l_w, l_b, l_a)):
            raise NumericalError(
                f"covert loss non-finite at epoch {epoch}: L_W={l_w} L_B={l_b} L_A={l_a} "
                f"(snr {snr:.2f} dB, lr {lr})"
            )
        if eval_sets and cfg.eval_every and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
            accs = [covert_accuracies(triple, system, ev) for ev in eval_sets]
            acc_u, acc_b, acc_w = (float(v) for v in np.mean(accs, axis=0))
            curve.add(epoch=epoch, snr_db=snr, loss_w=float(l_w), loss_b=float(l_b),
                      loss_u=float(parts[1]), loss_a=float(l_a), acc_user=acc_u,
                      acc_bob=acc_b, acc_willie=acc_w)
    return triple, curve


def batch_for(system, triple, s, m, snr_db, rng):
    """Batch for given message pairs with fresh triggers, channel and noise."""
    b = len(s)
    sigma2 = float(ch.noise_variance(snr_db))
    real = system.draw(b, rng)
    cfg = system.cfg
    shape = (b, 2, cfg.n) if cfg.mode == "single" else (b, cfg.n_rx, 2, cfg.n)
    noise = noise_block(shape, sigma2, rng)
    t = rng.standard_normal((b, triple.trigger_dim))
    return CovertBatch(s, m, t, real, noise, float(snr_db), system.encode(s))


# -- SNR range search ----------------------------------------------------------


def search_objective(accs, mode):
    acc_user, acc_bob, acc_w = accs
    if mode == "literal":
        return (acc_user + acc_bob + acc_w) / 3.0
    return (acc_user + acc_bob + 1.0 - abs(2.0 * acc_w - 1.0)) / 3.0


def final_accuracies(triple, system, snr_list, trials, streams, tag):
    """Mean ``(acc_user, acc_bob, acc_willie)`` over an SNR grid."""
    out = []
    for i, snr in enumerate(snr_list):
        rng_n = streams.get(tag, "final-normal", i)
        rng_c = streams.get(tag, "final-covert", i)
        batch = make_batch(system, triple, trials, snr, rng_n, rng_c)
        out.append(covert_accuracies(triple, system, batch))
    return tuple(float(v) for v in np.mean(out, axis=0))


def snr_range_search(cfg, system, streams, start_db, epochs_per_candidate=300,
                     eval_snrs=None, eval_trials=2048, max_candidates=20, step_db=1.0):
    """Greedy widening of the covert training SNR range.

    Starts at ``[start_db, start_db]``, widens the lower bound by ``step_db``
    while the objective improves, then the upper bound. A candidate that does
    not improve is discarded. Each candidate trains a fresh triple for
    ``epochs_per_candidate`` epochs and is scored on ``eval_snrs``.

    Returns ``(low, high, history)``; ``history`` rows are
    ``(low, high, acc_user, acc_bob, acc_willie, objective, accepted)``.
    """
    if eval_snrs is None:
        eval_snrs = [start_db + d for d in range(-6, 7, 2)]
    low = high = float(start_db)
    best = -np.inf
    bound = "low"
    history = []
    for i in range(max_candidates):
        if i == 0:
            cand = (low, high)
        else:
            cand = (low - step_db, high) if bound == "low" else (low, high + step_db)
        run_cfg = CovertConfig(**{**cfg.__dict__, "snr_low": cand[0], "snr_high": cand[1],
                                  "epochs": epochs_per_candidate, "lr_drop_epoch": None,
                                  "eval_every": 0, "eval_snrs": None})
        run_cfg.resolve(system.cfg.mode, system.cfg.channel.kind)
        tag = f"search-{i}"
        triple, _ = train_covert(run_cfg, system, streams, tag=tag)
        accs = final_accuracies(triple, system, eval_snrs, eval_trials, streams, tag)
        c = search_objective(accs, cfg.search_objective)
        accepted = c > best
        history.append((cand[0], cand[1], *accs, c, accepted))
        log.info("range %s objective %.4f %s", cand, c, "accepted" if accepted else "rejected")
        if accepted:
            best = c
            low, high = cand
        elif bound == "low":
            bound = "high"
        else:
            return low, high, history
    warnings.warn("SNR range search ran out of candidate budget; returning best so far",
                  RuntimeWarning, stacklevel=2)
    return low, high, history


# -- evaluation ----------------------------------------------------------------


def _covert_point(triple, system, snr_db, trials, rng_normal, rng_covert, chunk):
    sigma2 = float(ch.noise_variance(snr_db))
    u = _n_users(system)
    bob_err = 0
    user_err_cov = np.zeros(u, dtype=np.int64)
    user_err_clean = np.zeros(u, dtype=np.int64)
    w_norm = w_cov = 0
    done = 0
    while done < trials:
        b = min(chunk, trials - done)
        s, real, noise = draw_normal_traffic(system, b, sigma2, rng_normal)
        m = rng_covert.integers(0, 2**triple.k_c, size=b)
        t = rng_covert.standard_normal((b, triple.trigger_dim))
        x = system.encode(s)
        z = alice_generate(triple, system, m, t, real=real)
        y_user, y_bob, y_w = covert_output(system, x, z, real, noise)
        y_clean, _, y_clean_w = covert_output(system, x, np.zeros_like(z), real, noise)
        bob_err += int(np.sum(bob_decode(triple, y_bob)[1] != m))
        for errs, y in ((user_err_cov, y_user), (user_err_clean, y_clean)):
            if isinstance(system, SingleUserSystem):
                s_hat = system.receive(y)[1]
            else:
                s_hat = system.receive(y, real.H_eff)[1]
            for i, e in system.errors(s, s_hat).items():
                errs[i] += int(e.sum())
        w_norm += int(np.sum(willie_score(triple, y_clean_w) > 0.5))
        w_cov += int(np.sum(willie_score(triple, y_w) <= 0.5))
        done += b
    return {
        "bob_bler": bob_err / trials,
        "user_bler_covert": float(np.mean(user_err_cov)) / trials,
        "user_bler_clean": float(np.mean(user_err_clean)) / trials,
        "willie_acc": 0.5 * (w_norm + w_cov) / trials,
    }


def evaluate_covert(triple, system, snr_list, trials, streams, workers=1, chunk=10000,
                    normal_purpose="ae-bler", covert_purpose="covert-eval"):
    """Per-SNR Bob BLER, user BLER with the covert link on and off, Willie accuracy.

    Normal traffic for point ``i`` comes from stream ``(normal_purpose, "snr", i)``,
    the same stream :func:`autoencoder.evaluate_bler` uses, so the covert-off
    user BLER reproduces the plain autoencoder sweep exactly. In multi-user
    mode the user BLER is the mean over users.
    """
    snr_list = [float(v) for v in snr_list]

    def point(i):
        return _covert_point(triple, system, snr_list[i], trials,
                             streams.get(normal_purpose, "snr", i),
                             streams.get(covert_purpose, "snr", i), chunk)

    if workers > 1:
        with ThreadPoolExecutor(workers) as pool:
            outs = list(pool.map(point, range(len(snr_list))))
    else:
        outs = [point(i) for i in range(len(snr_list))]
    res = SweepResult(COVERT_SWEEP_COLUMNS)
    for snr, row in zip(snr_list, outs):
        res.add(snr_db=snr, **row)
    return res


def audit_detector(triple, system, streams, snr_low, snr_high, snr_list, epochs=500,
                   batch=1024, lr=1e-3, trials=4096, checkpoints=5, tag="audit"):
    """Train a fresh Willie against a frozen Alice; best balanced accuracy per SNR.

    The fresh detector has the jointly-trained Willie's architecture but a new
    initialization. It is scored on held-out traffic at ``checkpoints`` evenly
    spaced points during training, and the best score per SNR is reported.
    """
    fresh = CovertTriple(triple.alice, triple.bob, build_willie(system.cfg.n, streams.get(tag, "init")),
                         triple.k_c, triple.trigger_dim, triple.silent)
    opt = AdamState.for_network(fresh.willie)
    rng_snr = streams.get(tag, "snr")
    rng_normal = streams.get(tag, "normal")
    rng_covert = streams.get(tag, "covert")
    marks = sorted({max(1, round(epochs * (j + 1) / checkpoints)) for j in range(checkpoints)})
    best = np.zeros(len(snr_list))
    for epoch in range(1, epochs + 1):
        snr = float(rng_snr.uniform(snr_low, snr_high))
        b = make_batch(system, fresh, batch, snr, rng_normal, rng_covert)
        _willie_step(fresh, system, b, opt, lr)
        if epoch in marks:
            for i, s in enumerate(snr_list):
                ev = make_batch(system, fresh, trials, s, streams.get(tag, "eval-normal", i),
                                streams.get(tag, "eval-covert", i))
                z = alice_generate(fresh, system, ev.m, ev.t, real=ev.real)
                _, _, y_w = covert_output(system, ev.x, z, ev.real, ev.noise)
                _, y_clean_w = _clean_views(system, ev)
                acc = balanced_accuracy(willie_score(fresh, y_clean_w), willie_score(fresh, y_w))
                best[i] = max(best[i], acc)
    res = SweepResult(AUDIT_COLUMNS)
    for s, a in zip(snr_list, best):
        res.add(snr_db=float(s), audit_acc=float(a))
    return res
