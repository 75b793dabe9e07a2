import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from covertcomm import autoencoder as ae
from covertcomm import channel as ch
from covertcomm import covert as cv
from covertcomm.nn import ConfigError, NumericalError, UsageError
from covertcomm.rng import Streams


def _small_cfg(**kw):
    base = dict(epochs=3, batch=128, train_size=256, eval_batch=128, eval_every=1)
    base.update(kw)
    return cv.CovertConfig(**base).resolve("single", "awgn")


def test_default_lambdas_and_ranges():
    c = cv.CovertConfig().resolve("single", "awgn")
    assert (c.lam_b, c.lam_u, c.lam_w) == (2.0, 1.0, 4.0)
    assert (c.snr_low, c.snr_high) == (-2.0, 8.0)
    m = cv.CovertConfig().resolve("multi", "rician")
    assert (m.lam_b, m.lam_u, m.lam_w) == (2.0, 1.0, 6.0)
    assert (m.snr_low, m.snr_high) == (0.0, 20.0)
    assert cv.CovertConfig().resolve("multi", "rayleigh").snr_low == 10.0


def test_config_validation():
    with pytest.raises(ConfigError):
        cv.CovertConfig(snr_low=5, snr_high=1).resolve("single", "awgn")
    with pytest.raises(ConfigError):
        cv.CovertConfig(update_order="random").resolve("single", "awgn")
    with pytest.raises(ConfigError):
        cv.CovertConfig(lam_w=-1).resolve("single", "awgn")


def test_lr_drops_tenfold_at_half():
    c = cv.CovertConfig(epochs=100).resolve("single", "awgn")
    assert c.lr_at(50) == 1e-3
    assert c.lr_at(51) == pytest.approx(1e-4)


def test_network_shapes(awgn_system, rayleigh_system):
    rng = np.random.default_rng(0)
    a = cv.build_alice(awgn_system, 1, 16, rng)
    assert a.input_size == 16 + 2
    assert [r[3] for r in a.layout()] == [36, 36, 16, 16]
    assert cv.build_alice(rayleigh_system, 2, 16, rng).input_size == 16 + 4 + 2
    bob = cv.build_bob(8, 1, rng)
    assert bob.layout()[-1][:4] == ("dense", "softmax", bob.layout()[-1][2], 2)
    w = cv.build_willie(8, rng)
    assert w.layout()[-1][1] == "sigmoid" and w.output_size == 1
    assert [r[1] for r in w.layout()[2:-1]] == ["leaky_relu"] * 5


def test_multi_alice_has_extra_first_layer(multi_system):
    a = cv.build_alice(multi_system, 1, 16, np.random.default_rng(0))
    feats = cv.feature_size(multi_system)
    assert feats == 2 + 4 + 8
    assert a.layout()[0][3] == 36 + feats
    assert len(a.layout()) == 5


def test_fading_alice_needs_features(rayleigh_system):
    tri = cv.CovertTriple.create(rayleigh_system, 1, 16, np.random.default_rng(0))
    with pytest.raises(ConfigError):
        cv.alice_generate(tri, rayleigh_system, np.zeros(2, int), np.zeros((2, 16)))
    with pytest.raises(ConfigError):
        cv.alice_generate(tri, rayleigh_system, np.zeros(2, int), np.zeros((2, 16)),
                          feats=np.zeros((2, 3)))


def test_single_user_observation():
    sys_ = ae.build_system(ae.AeConfig(n=2, k=1, channel=ch.ChannelModel("rayleigh")),
                           np.random.default_rng(0))
    real = sys_.draw(1, np.random.default_rng(1))
    x = ch.to_real(np.array([[1.0, 1j]]))
    z = ch.to_real(np.array([[0.5, -0.5]]))
    noise = ch.to_real(np.array([[0.1j, 0.2]]))
    y_u, y_b, y_w = cv.covert_output(sys_, x, z, real, noise)
    expect = real.h_single[0] * np.array([1.0, 1j]) + real.h_alice[0] * np.array([0.5, -0.5]) \
        + np.array([0.1j, 0.2])
    np.testing.assert_allclose(ch.to_complex(y_u)[0], expect)
    assert y_u is y_b is y_w


def test_multi_user_observation(multi_system):
    rng = np.random.default_rng(3)
    real = multi_system.draw(2, rng)
    xs = rng.standard_normal((2, 2, 2, 4))
    z = rng.standard_normal((2, 2, 4))
    noise = rng.standard_normal((2, 2, 2, 4))
    ys, yb, yw = cv.covert_output(multi_system, xs, z, real, noise)
    xc, zc, nc = ch.to_complex(xs), ch.to_complex(z), ch.to_complex(noise)
    j = 1
    ant = sum(real.H_eff[:, i, j, None] * xc[:, i] for i in range(2)) \
        + real.h_alice_rx[:, j, None] * zc + nc[:, j]
    np.testing.assert_allclose(ch.to_complex(ys)[:, j], ant)
    bob = sum(real.h_users_to_bob[:, i, None] * xc[:, i] for i in range(2)) \
        + real.h_alice[:, None] * zc + nc[:, 0]
    np.testing.assert_allclose(ch.to_complex(yb), bob)
    np.testing.assert_array_equal(yw, ys[:, 0])


def test_balanced_accuracy():
    assert cv.balanced_accuracy([0.9, 0.9], [0.1, 0.1]) == 1.0
    assert cv.balanced_accuracy([0.9, 0.1], [0.9, 0.9]) == 0.25
    # exactly 0.5 counts as covert
    assert cv.balanced_accuracy([0.5], [0.5]) == 0.5


def test_search_objective():
    assert cv.search_objective((1.0, 1.0, 0.5), "literal") == pytest.approx(2.5 / 3)
    assert cv.search_objective((1.0, 1.0, 0.5), "covert") == 1.0
    assert cv.search_objective((1.0, 1.0, 1.0), "covert") == pytest.approx(2 / 3)


def test_willie_loss_scales_with_users(multi_system, awgn_system):
    p_c, p_n = np.array([0.2, 0.4]), np.array([0.7, 0.9])
    l1, _, _ = cv.willie_loss(awgn_system, p_c, p_n)
    l2, g_c, _ = cv.willie_loss(multi_system, p_c, p_n)
    assert l2 == pytest.approx(2 * l1)
    ref = -np.mean(np.log([0.8, 0.6, 0.7, 0.9]))
    assert l1 == pytest.approx(ref)
    np.testing.assert_allclose(g_c, 2 * np.array([0.2, 0.4]) / 4)


def test_alice_loss_combination():
    assert cv.alice_loss(1.0, 2.0, 3.0, 2, 1, 4) == 2 + 2 - 12


def _objective_grad_check(system, seed, k_c=1):
    streams = Streams(seed)
    tri = cv.CovertTriple.create(system, k_c, 16, streams.get("t"))
    batch = cv.make_batch(system, tri, 6, 5.0, streams.get("n"), streams.get("c"))
    lams = (2.0, 1.0, 4.0)
    _, grads, parts = cv.alice_objective(tri, system, batch, lams)
    l_b, l_u, l_w = cv.component_losses(tri, system, batch)
    assert parts == pytest.approx((l_b, l_u, l_w), rel=1e-12)
    base = tri.alice.params.copy()
    h = 1e-6
    for j in np.random.default_rng(seed).choice(base.size, 15, replace=False):
        vals = []
        for d in (h, -h):
            p = base.copy()
            p[j] += d
            tri.alice.set_params(p)
            vals.append(cv.alice_loss(*cv.component_losses(tri, system, batch), *lams))
        num = (vals[0] - vals[1]) / (2 * h)
        assert abs(grads[j] - num) <= 1e-6 * max(1.0, abs(num))
    tri.alice.set_params(base)


def test_alice_gradient_awgn(awgn_system):
    _objective_grad_check(awgn_system, 0)


def test_alice_gradient_rayleigh(rayleigh_system):
    _objective_grad_check(rayleigh_system, 1, k_c=2)


def test_alice_gradient_multi(multi_system):
    _objective_grad_check(multi_system, 2)


def test_training_needs_frozen_system():
    sys_ = ae.build_system(ae.AeConfig(), np.random.default_rng(0))
    with pytest.raises(UsageError):
        cv.train_covert(_small_cfg(), sys_, Streams(0))


@pytest.mark.parametrize("order", ["text", "algorithm"])
def test_training_is_deterministic(awgn_system, order):
    cfg = _small_cfg(update_order=order)
    _, c1 = cv.train_covert(cfg, awgn_system, Streams(5))
    tri, c2 = cv.train_covert(cfg, awgn_system, Streams(5))
    assert c1.to_csv() == c2.to_csv()
    assert c1.column("epoch") == [1, 2, 3]
    assert all(0 <= v <= 1 for v in c1.column("acc_willie"))


def test_step_counts(awgn_system, monkeypatch):
    calls = {"willie": 0, "bob": 0, "alice": 0}
    for name in calls:
        real = getattr(cv, f"_{name}_step")

        def counted(*a, name=name, real=real):
            calls[name] += 1
            return real(*a)
        monkeypatch.setattr(cv, f"_{name}_step", counted)
    # 256 pairs in batches of 128: two minibatches per epoch
    cv.train_covert(_small_cfg(epochs=2, willie_steps=1, alice_steps=3), awgn_system, Streams(0))
    assert calls == {"willie": 2, "bob": 4, "alice": 6}


def test_curve_defaults_to_train_snr():
    assert cv.CovertConfig().resolve("single", "awgn").eval_snrs == (4.0,)
    assert cv.CovertConfig().resolve("single", "rician").eval_snrs == (16.0,)


def test_training_freezes_nothing_in_system(awgn_system):
    before = awgn_system.param_bytes()
    cv.train_covert(_small_cfg(epochs=1), awgn_system, Streams(1))
    assert awgn_system.param_bytes() == before


def test_fading_training_runs(rayleigh_system, multi_system):
    for sys_ in (rayleigh_system, multi_system):
        cfg = cv.CovertConfig(epochs=2, batch=64, train_size=128, eval_batch=64).resolve(
            sys_.cfg.mode, "rayleigh")
        _, curve = cv.train_covert(cfg, sys_, Streams(0))
        assert len(curve.rows) == 2


def test_nan_raises(awgn_system, monkeypatch):
    monkeypatch.setattr(cv, "_bob_step", lambda *a: float("nan"))
    with pytest.raises(NumericalError, match="epoch 1"):
        cv.train_covert(_small_cfg(), awgn_system, Streams(0))


def test_silent_alice_leaves_users_untouched(awgn_system):
    tri = cv.CovertTriple.create(awgn_system, 1, 16, np.random.default_rng(0))
    tri.silent = True
    streams = Streams(8)
    res = cv.evaluate_covert(tri, awgn_system, [0.0, 4.0], 4000, streams)
    assert res.column("user_bler_covert") == res.column("user_bler_clean")
    clean = ae.evaluate_bler(awgn_system, [0.0, 4.0], 4000, streams)
    assert res.column("user_bler_clean") == clean.column("bler")


def test_evaluate_parallel_matches_serial(awgn_system):
    tri = cv.CovertTriple.create(awgn_system, 1, 16, np.random.default_rng(0))
    a = cv.evaluate_covert(tri, awgn_system, [0.0, 4.0, 8.0], 1500, Streams(2), chunk=400)
    b = cv.evaluate_covert(tri, awgn_system, [0.0, 4.0, 8.0], 1500, Streams(2), workers=3,
                           chunk=400)
    assert a.to_csv() == b.to_csv()


def test_audit_rows(awgn_system):
    tri = cv.CovertTriple.create(awgn_system, 1, 16, np.random.default_rng(0))
    res = cv.audit_detector(tri, awgn_system, Streams(0), -2, 8, [0.0, 8.0], epochs=3,
                            batch=128, trials=256, checkpoints=2)
    assert res.column("snr_db") == [0.0, 8.0]
    assert all(0.0 <= v <= 1.0 for v in res.column("audit_acc"))


def test_range_search_widens_then_stops(awgn_system, monkeypatch):
    # objective peaks when the range is [2, 6]: low widening accepted twice, high twice
    def fake_train(cfg, system, streams, triple=None, tag=""):
        return (cfg.snr_low, cfg.snr_high), None

    def fake_acc(triple, *a):
        lo, hi = triple
        return (1.0, 1.0, 0.5 + 0.05 * (abs(lo - 2) + abs(hi - 6)))

    monkeypatch.setattr(cv, "train_covert", fake_train)
    monkeypatch.setattr(cv, "final_accuracies", fake_acc)
    low, high, hist = cv.snr_range_search(_small_cfg(), awgn_system, Streams(0), 4.0)
    assert (low, high) == (2.0, 6.0)
    assert [h[-1] for h in hist] == [True, True, True, False, True, True, False]
    assert hist[3][:2] == (1.0, 4.0)


def test_range_search_budget_warning(awgn_system, monkeypatch):
    monkeypatch.setattr(cv, "train_covert", lambda cfg, *a, **k: ((cfg.snr_low,), None))
    monkeypatch.setattr(cv, "final_accuracies", lambda t, *a: (1.0, 1.0, 0.5 - 0.01 * t[0]))
    with pytest.warns(RuntimeWarning):
        low, high, hist = cv.snr_range_search(_small_cfg(), awgn_system, Streams(0), 4.0,
                                              max_candidates=4)
    assert low == 1.0 and len(hist) == 4


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31), st.floats(-5, 15))
def test_silent_alice_outputs_zero(awgn_system, seed, snr):
    tri = cv.CovertTriple.create(awgn_system, 1, 16, np.random.default_rng(seed))
    tri.silent = True
    rng = np.random.default_rng(seed)
    b = cv.make_batch(awgn_system, tri, 8, snr, rng, rng)
    z = cv.alice_generate(tri, awgn_system, b.m, b.t)
    assert not z.any()
    y_u, _, _ = cv.covert_output(awgn_system, b.x, z, b.real, b.noise)
    np.testing.assert_array_equal(y_u, awgn_system.transmit(b.x, b.real, b.noise))
