"""Acceptance gate: one test per criterion, each printing a PASS/FAIL line.

The desk-scale criteria (5-10) share one pipeline run through the harness
with the fast profile: (8,4) AWGN autoencoder for 60 epochs, (8,1) covert
link for 500 epochs, 10^4-block sweeps.
"""

import time

import numpy as np
import pytest

from acceptance_report import report
from covertcomm import autoencoder as ae
from covertcomm import baseline as bl
from covertcomm import channel as ch
from covertcomm import covert as cv
from covertcomm.config import resolve_config
from covertcomm.harness import (
    cmd_audit, cmd_sweep, cmd_train_ae, cmd_train_covert, load_system, load_triple,
)
from covertcomm.nn import Network, conv1d, cross_entropy, dense, gradient_check
from covertcomm.results import SweepResult
from covertcomm.rng import Streams

FLOAT_COLS = {"snr_db": float, "bler": float, "bob_bler": float, "user_bler_covert": float,
              "user_bler_clean": float, "willie_acc": float, "acc_bob": float,
              "acc_willie": float, "acc_user": float, "epoch": int, "errors": int,
              "blocks": int, "audit_acc": float, "loss": float, "accuracy": float}

SEED = 0


def _quiet(*_):
    pass


def _read(path):
    res = SweepResult.from_csv(path)
    types = {c: FLOAT_COLS.get(c, str) for c in res.columns}
    return SweepResult.from_csv(path, types)


# -- 1 ----------------------------------------------------------------------------


def _random_net(rng):
    acts = ["relu", "leaky_relu", "tanh", "elu", "sigmoid", "none"]
    n = int(rng.integers(5, 9))
    layers = [dense(2 * n, rng.choice(acts))]
    for _ in range(int(rng.integers(1, 4))):
        layers.append(conv1d(int(rng.integers(1, 4)), int(rng.integers(1, 3)),
                             int(rng.integers(1, 3)), rng.choice(acts)))
    layers.append(dense(int(rng.integers(2, 5)), rng.choice(acts)))
    terminal = rng.choice(["softmax", "sigmoid", "plain"])
    if terminal == "softmax":
        layers.append(dense(int(rng.integers(2, 6)), "softmax"))
    elif terminal == "sigmoid":
        layers.append(dense(1, "sigmoid"))
    net = Network(2 * n, layers, rng)
    # zero biases behind dead ReLUs put preactivations exactly on the kink
    net.set_params(rng.normal(0.0, 0.5, net.size))
    return net, terminal


def _kink_margin(net, x):
    """Smallest |preactivation| feeding a ReLU-type unit."""
    _, tape = net.forward(x)
    margin = np.inf
    for (_, _, a, _), act in zip(tape.records, [row[1] for row in net.layout()]):
        if act in ("relu", "leaky_relu"):
            margin = min(margin, float(np.min(np.abs(a))))
    return margin


def test_1_gradient_correctness():
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(100):
        while True:
            net, terminal = _random_net(rng)
            x = rng.standard_normal((4, net.input_size))
            if _kink_margin(net, x) > 1e-2:
                break
        if terminal == "softmax":
            target = rng.integers(0, net.output_size, 4)

            def loss_fn(p, target=target):
                g = np.zeros_like(p)
                g[np.arange(4), target] = -1.0 / (4 * p[np.arange(4), target])
                return cross_entropy(p, target)[0], g
        else:
            ref = rng.standard_normal((4, net.output_size))

            def loss_fn(out, ref=ref):
                d = out - ref
                return float(0.5 * np.sum(d * d)), d
        worst = max(worst, gradient_check(net, loss_fn, x, rng, n_params=40,
                                                 n_inputs=20, h=2e-4, stencil=4))
    dt = time.perf_counter() - t0
    ok = worst < 1e-4 and dt < 60
    report(1, "gradient correctness", ok, f"max rel err {worst:.2e} over 100 nets, {dt:.1f}s")
    assert ok


# -- 2 ----------------------------------------------------------------------------


def test_2_channel_statistics():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    sigma2 = float(ch.noise_variance(3.0))
    y = ch.add_noise(np.zeros((1_000_000, 2, 1)), sigma2, rng)
    noise_rel = abs(np.mean(np.sum(y * y, axis=1)) / sigma2 - 1)
    ray = ch.sample_fading(ch.ChannelModel("rayleigh"), rng, (1_000_000,))
    ric = ch.sample_fading(ch.ChannelModel("rician", 4.0), rng, (1_000_000,))
    p_ray = np.mean(np.abs(ray) ** 2)
    p_ric = np.mean(np.abs(ric) ** 2)
    los = abs(np.mean(ric)) ** 2 / p_ric
    dt = time.perf_counter() - t0
    ok = (noise_rel < 0.01 and abs(p_ray - 1) < 0.02 and abs(p_ric - 1) < 0.02
          and abs(los / 0.8 - 1) < 0.02 and dt < 60)
    report(2, "channel statistics", ok,
           f"noise rel err {noise_rel:.4f}, E|h|^2 rayleigh {p_ray:.4f} rician {p_ric:.4f}, "
           f"LOS fraction {los:.4f} (target 0.8)")
    assert ok


# -- 3 ----------------------------------------------------------------------------


def _well_conditioned(rng, users, blocks):
    H = ch.complex_normal(rng, (blocks, users, users))
    while True:
        bad = np.linalg.cond(H) > 50
        if not bad.any():
            return H
        H[bad] = ch.complex_normal(rng, (int(bad.sum()), users, users))


def test_3_zero_forcing_oracle():
    rng = np.random.default_rng(3)
    errs = {}
    for users in (2, 4):
        H = _well_conditioned(rng, users, 10_000)
        phases = rng.uniform(0, 2 * np.pi, (10_000, users))
        H_eff = H * np.exp(1j * phases)[..., None]
        xs = ch.normalize_power(rng.standard_normal((10_000, users, 2, 8)))
        x_hat, flagged = ae.zf_equalize(ch.antenna_signals(xs, H_eff), H_eff)
        errs[users] = float(np.max(np.abs(x_hat - xs))) if not flagged.any() else np.inf
    ok = max(errs.values()) < 1e-9
    report(3, "zero-forcing oracle", ok,
           f"max error 2-user {errs[2]:.1e}, 4-user {errs[4]:.1e} over 10^4 blocks")
    assert ok


# -- 4 ----------------------------------------------------------------------------


def test_4_baseline_fidelity():
    t0 = time.perf_counter()
    streams = Streams(4)
    worst = {}
    for kind, grid in (("awgn", [0, 2, 4, 6]), ("rayleigh", [0, 5, 10, 15, 20])):
        res = bl.simulate_baseline_bler("bpsk", kind, grid, 4, 1_000_000, streams)
        rel = []
        for snr, ber in zip(res.column("snr_per_bit_db"), res.column("ber")):
            ref = float(bl.analytic_error_rate("bpsk", kind, 10 ** (snr / 10)))
            if ref > 1e-3:
                rel.append(abs(ber / ref - 1))
        worst[kind] = max(rel)
    dt = time.perf_counter() - t0
    ok = max(worst.values()) < 0.05 and dt < 120
    report(4, "baseline fidelity", ok,
           f"max rel BER error AWGN {worst['awgn']:.4f}, Rayleigh {worst['rayleigh']:.4f} "
           f"(4x10^6 bits/point), {dt:.1f}s")
    assert ok


# -- desk-scale pipeline ----------------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    out = tmp_path_factory.mktemp("desk")
    cfg = resolve_config({"out": str(out), "seed": SEED}, fast=True)
    times = {}
    t0 = time.perf_counter()
    cmd_train_ae(cfg, echo=_quiet)
    times["ae"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    cmd_train_covert(cfg, echo=_quiet)
    times["covert"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    cmd_sweep(cfg, echo=_quiet)
    times["sweep"] = time.perf_counter() - t0
    system = load_system(cfg, "acceptance")
    triple = load_triple(cfg, system, "acceptance")
    return {"cfg": cfg, "out": out, "times": times, "system": system, "triple": triple}


def test_5_autoencoder_desk_run(desk):
    res = _read(desk["out"] / "ae_bler.csv")
    pts = [(s, b, n) for s, b, n in zip(res.column("snr_db"), res.column("bler"),
                                        res.column("blocks")) if -4 <= s <= 8]
    bler8 = dict((s, b) for s, b, _ in pts)[8.0]
    mono = True
    for (s0, b0, n0), (s1, b1, n1) in zip(pts, pts[1:]):
        se = np.sqrt(b0 * (1 - b0) / n0 + b1 * (1 - b1) / n1)
        mono &= b1 <= b0 + 2 * se
    dt = desk["times"]["ae"] + desk["times"]["sweep"]
    ok = bler8 < 1e-2 and mono and desk["times"]["ae"] <= 600
    report(5, "autoencoder (8,4) AWGN", ok,
           f"BLER@8dB {bler8:.2e}, monotone within 2 SE over -4..8 dB: {mono}, "
           f"train {desk['times']['ae']:.0f}s")
    assert ok


def test_6_covert_desk_run(desk):
    cfg, system, triple = desk["cfg"], desk["system"], desk["triple"]
    cc = cfg.covert_config()
    sweep = _read(desk["out"] / "covert_sweep.csv")
    rows = {s: r for s, r in zip(sweep.column("snr_db"), sweep.rows)}
    col = sweep.columns.index
    bob8 = rows[8.0][col("bob_bler")]
    train_snr = cfg["autoencoder"]["train_snr_db"]
    # degradation measured with 10^5 blocks so the ratio is not dominated by counting noise
    deg = cv.evaluate_covert(triple, system, [train_snr], 100_000, Streams(SEED + 1))
    cov, clean = deg.column("user_bler_covert")[0], deg.column("user_bler_clean")[0]
    factor = cov / clean if clean > 0 else (1.0 if cov == 0 else np.inf)
    in_range = [s for s in rows if cc.snr_low <= s <= cc.snr_high]
    w = {s: rows[s][col("willie_acc")] for s in in_range}
    w_ok = all(0.45 <= v <= 0.70 for v in w.values())
    ok_a, ok_b = bob8 <= 0.1, factor <= 2.0
    ok = ok_a and ok_b and w_ok and desk["times"]["covert"] <= 1800
    w_txt = ", ".join(f"{s:g}:{v:.3f}" for s, v in sorted(w.items()))
    report(6, "covert (8,1) AWGN", ok,
           f"(a) Bob BLER@8dB {bob8:.4f} [{'ok' if ok_a else 'X'}]; "
           f"(b) user BLER {clean:.2e}->{cov:.2e} x{factor:.2f} [{'ok' if ok_b else 'X'}]; "
           f"(c) Willie {w_txt} [{'ok' if w_ok else 'X'}]; train {desk['times']['covert']:.0f}s")
    assert ok


def test_7_training_dynamics(desk):
    curve = _read(desk["out"] / "covert_curve.csv")
    epochs = curve.column("epoch")
    acc_w = curve.column("acc_willie")
    acc_b = curve.column("acc_bob")
    peak_epoch = epochs[int(np.argmax(acc_w))]
    half = desk["cfg"]["covert"]["epochs"] / 2
    ok = peak_epoch <= half and acc_b[-1] > 0.9
    report(7, "training dynamics", ok,
           f"Willie peak {max(acc_w):.3f} at epoch {peak_epoch} (half={half:g}), "
           f"final Willie {acc_w[-1]:.3f}, final Bob {acc_b[-1]:.3f}")
    assert ok


def test_8_silent_alice_reduction(desk):
    cfg, system, triple = desk["cfg"], desk["system"], desk["triple"]
    silent = cv.CovertTriple(triple.alice, triple.bob, triple.willie, triple.k_c,
                             triple.trigger_dim, silent=True)
    snrs = cfg["sweep"]["snr_db"]
    res = cv.evaluate_covert(silent, system, snrs, cfg["sweep"]["trials"], Streams(SEED))
    ae_res = _read(desk["out"] / "ae_bler.csv")
    same_paths = res.column("user_bler_covert") == res.column("user_bler_clean")
    same_ae = res.column("user_bler_clean") == ae_res.column("bler")
    ok = same_paths and same_ae
    report(8, "Z = 0 reduction", ok,
           f"covert-path == clean-path at {len(snrs)} SNRs: {same_paths}; "
           f"== autoencoder sweep: {same_ae}")
    assert ok


def test_9_audit(desk):
    t0 = time.perf_counter()
    cmd_audit(desk["cfg"], echo=_quiet)
    dt = time.perf_counter() - t0
    trained = _read(desk["out"] / "audit.csv")
    naive = _read(desk["out"] / "audit_untrained.csv")
    cc = desk["cfg"].covert_config()
    naive_hi = dict(zip(naive.column("snr_db"), naive.column("audit_acc")))[cc.snr_high]
    tr = dict(zip(trained.column("snr_db"), trained.column("audit_acc")))
    ok = naive_hi > 0.9 and all(v <= 0.75 for v in tr.values()) and dt <= 1200
    tr_txt = ", ".join(f"{s:.3g}:{v:.3f}" for s, v in tr.items())
    report(9, "audit sanity", ok,
           f"untrained Alice @snr_U {naive_hi:.3f} (>0.9), trained Alice {tr_txt} (<=0.75), "
           f"{dt:.0f}s")
    assert ok


def test_10_determinism(desk, tmp_path):
    # rerun the autoencoder and sweep stages with the same seed, sweep in parallel
    cfg = resolve_config({"out": str(tmp_path), "seed": SEED,
                          "sweep": {"workers": 4}}, fast=True)
    cmd_train_ae(cfg, echo=_quiet)
    src = desk["out"] / "weights" / "covert"
    dst = tmp_path / "weights" / "covert"
    dst.mkdir(parents=True)
    for f in src.iterdir():
        (dst / f.name).write_bytes(f.read_bytes())
    cmd_sweep(cfg, echo=_quiet)
    names = ["ae_curve.csv", "ae_bler.csv", "covert_sweep.csv", "baseline.csv"]
    same = {n: (tmp_path / n).read_bytes() == (desk["out"] / n).read_bytes() for n in names}
    # short adversarial run repeated twice
    curves = []
    for rep in range(2):
        c = cv.CovertConfig(epochs=15, eval_every=5).resolve("single", "awgn")
        _, curve = cv.train_covert(c, desk["system"], Streams(SEED))
        curves.append(curve.to_csv())
    same["covert_curve (15 epochs x2)"] = curves[0] == curves[1]
    ok = all(same.values())
    report(10, "determinism", ok, ", ".join(f"{k}: {'identical' if v else 'DIFFERENT'}"
                                           for k, v in same.items()))
    assert ok


def test_11_extended_multi_user_fading():
    """Non-gating: a 2-user Rayleigh pipeline trains end to end at toy scale."""
    rng = Streams(11)
    cfg = ae.AeConfig(mode="multi", n_tx=2, channel=ch.ChannelModel("rayleigh"), epochs=5)
    system, curve = ae.train_autoencoder(cfg, rng.get("ae"))
    system.freeze()
    cc = cv.CovertConfig(epochs=5, eval_every=5).resolve("multi", "rayleigh")
    _, ccurve = cv.train_covert(cc, system, rng)
    bler = ae.evaluate_bler(system, [20.0], 2000, rng).column("bler")
    report(11, "extended 2-user Rayleigh (non-gating)", True,
           f"AE accuracy {curve.column('accuracy')[-1]:.3f} after 5 epochs, "
           f"users BLER@20dB {bler[0]:.3f}/{bler[1]:.3f}, covert curve rows {len(ccurve.rows)}; "
           "4-user crossover is a long-run target")
