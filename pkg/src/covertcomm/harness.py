"""Experiment commands: train, sweep, search, audit, export.

Every command works inside one output directory::

    out/
      config.resolved.yaml     resolved config + seed + library versions
      run_record.jsonl         one JSON line appended per command
      weights/ae/*.cwnet       written by train-ae
      weights/covert/*.cwnet   written by train-covert
      *.csv                    results

All randomness is drawn from named streams of the configured seed, so a
rerun with the same config and seed rewrites byte-identical CSVs.
"""

from __future__ import annotations

import json
import logging
import platform
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import __version__
from . import baseline as bl
from . import channel as ch
from .autoencoder import (
    SingleUserSystem, build_system, evaluate_bler, noise_block, train_autoencoder,
)
from .covert import (
    CovertTriple, alice_generate, audit_detector, covert_output, evaluate_covert,
    snr_range_search, train_covert,
)
from .nn import PersistenceError, load_params, save_params
from .results import CONSTELLATION_COLUMNS, SweepResult
from .rng import Streams

log = logging.getLogger(__name__)

SEARCH_COLUMNS = ("low", "high", "acc_user", "acc_bob", "acc_willie", "objective", "accepted")


class PrerequisiteError(RuntimeError):
    pass


@dataclass
class RunRecord:
    run_id: str
    command: str
    config_hash: str
    seed: int
    metrics_path: str | None = None
    weight_paths: list = field(default_factory=list)
    result_paths: list = field(default_factory=list)
    wall_clock: float = 0.0

    def to_json(self):
        return json.dumps(self.__dict__, sort_keys=True)


def _versions():
    return {"covertcomm": __version__, "numpy": np.__version__, "python": platform.python_version()}


def _start(cfg, command):
    out = cfg.out
    out.mkdir(parents=True, exist_ok=True)
    doc = {"config": cfg.data, "seed": cfg["seed"], "config_hash": cfg.hash(),
           "versions": _versions()}
    (out / "config.resolved.yaml").write_text(yaml.safe_dump(doc, sort_keys=True), encoding="utf-8")
    h = cfg.hash()
    run_id = f"{command}-{h[:12]}-{cfg['seed']}-{time.time_ns()}"
    return RunRecord(run_id, command, h, int(cfg["seed"])), time.perf_counter()


def _finish(cfg, rec, t0):
    rec.wall_clock = time.perf_counter() - t0
    with open(cfg.out / "run_record.jsonl", "a", encoding="utf-8") as f:
        f.write(rec.to_json() + "\n")
    return rec


def _write(res, path, rec):
    res.to_csv(path)
    rec.result_paths.append(str(path))


def _streams(cfg):
    return Streams(cfg["seed"])


def _ae_dir(cfg):
    return cfg.out / "weights" / "ae"


def _covert_dir(cfg):
    return cfg.out / "weights" / "covert"


def _save_nets(nets, folder, rec):
    folder.mkdir(parents=True, exist_ok=True)
    for name, net in nets.items():
        path = folder / f"{name}.cwnet"
        save_params(net, path)
        rec.weight_paths.append(str(path))


def _load_nets(nets, folder, needed_by):
    for name, net in nets.items():
        path = folder / f"{name}.cwnet"
        if not path.is_file():
            raise PrerequisiteError(f"{needed_by} needs {path}; run '{_producer(folder)}' first")
        try:
            load_params(net, path)
        except PersistenceError as exc:
            raise PrerequisiteError(
                f"{exc}; the stored weights do not match this config, rerun '{_producer(folder)}'"
            ) from exc


def _producer(folder):
    return "train-ae" if folder.name == "ae" else "train-covert"


def load_system(cfg, needed_by):
    system = build_system(cfg.ae_config(), _streams(cfg).get("ae", "init"))
    _load_nets(system.networks(), _ae_dir(cfg), needed_by)
    return system.freeze()


def load_triple(cfg, system, needed_by):
    cc = cfg.covert_config()
    triple = CovertTriple.create(system, cc.k_c, cc.trigger_dim, _streams(cfg).get("covert", "init"))
    _load_nets(triple.networks(), _covert_dir(cfg), needed_by)
    return triple


def _has_covert(cfg):
    return (_covert_dir(cfg) / "alice.cwnet").is_file()


def _summary(res, cols):
    idx = [res.columns.index(c) for c in cols]
    lines = ["  ".join(f"{c:>14}" for c in cols)]
    for r in res.rows:
        lines.append("  ".join(f"{_cell(r[i]):>14}" for i in idx))
    return "\n".join(lines)


def _cell(v):
    if isinstance(v, float):
        return f"{v:.5g}"
    return str(v)


# -- commands ------------------------------------------------------------------


def cmd_train_ae(cfg, echo=print):
    rec, t0 = _start(cfg, "train-ae")
    streams = _streams(cfg)
    ae_cfg = cfg.ae_config()
    system, curve = train_autoencoder(ae_cfg, streams.get("ae", "train"))
    _save_nets(system.networks(), _ae_dir(cfg), rec)
    _write(curve, cfg.out / "ae_curve.csv", rec)
    rec.metrics_path = str(cfg.out / "ae_curve.csv")
    last = curve.rows[-1] if curve.rows else None
    if last:
        echo(f"autoencoder ({ae_cfg.n},{ae_cfg.k}) {ae_cfg.mode} {ae_cfg.channel.kind}: "
             f"final loss {last[1]:.4f}, accuracy {last[2]:.4f}")
    return _finish(cfg, rec, t0)


def cmd_train_covert(cfg, echo=print):
    system = load_system(cfg, "train-covert")
    rec, t0 = _start(cfg, "train-covert")
    cc = cfg.covert_config()
    triple, curve = train_covert(cc, system, _streams(cfg))
    _save_nets(triple.networks(), _covert_dir(cfg), rec)
    _write(curve, cfg.out / "covert_curve.csv", rec)
    rec.metrics_path = str(cfg.out / "covert_curve.csv")
    if curve.rows:
        echo(_summary(curve, ("epoch", "snr_db", "acc_user", "acc_bob", "acc_willie")
                      ) if len(curve.rows) <= 20 else
             _summary(SweepResult(curve.columns, curve.rows[-5:]),
                      ("epoch", "snr_db", "acc_user", "acc_bob", "acc_willie")))
    return _finish(cfg, rec, t0)


def cmd_sweep(cfg, echo=print):
    """BLER sweep of the autoencoder, the covert link if trained, and the baselines."""
    system = load_system(cfg, "sweep")
    triple = load_triple(cfg, system, "sweep") if _has_covert(cfg) else None
    rec, t0 = _start(cfg, "sweep")
    sw = cfg["sweep"]
    streams = _streams(cfg)
    snrs = sw["snr_db"]
    res = evaluate_bler(system, snrs, sw["trials"], streams, workers=sw["workers"], chunk=sw["chunk"])
    _write(res, cfg.out / "ae_bler.csv", rec)
    echo(_summary(res, ("snr_db", "user_id", "bler")))
    if triple is not None:
        cov = evaluate_covert(triple, system, snrs, sw["trials"], streams, workers=sw["workers"],
                              chunk=sw["chunk"])
        _write(cov, cfg.out / "covert_sweep.csv", rec)
        echo(_summary(cov, cov.columns))
    base = SweepResult(bl.BASELINE_COLUMNS)
    trials = max(sw["trials"], 10_000)
    for scheme in ("bpsk", "qpsk"):
        if cfg["k"] % bl.ModScheme(scheme).bits_per_symbol:
            continue
        base.extend(bl.simulate_baseline_bler(scheme, cfg.model, snrs, cfg["k"], trials, streams,
                                              snr_kind="per_symbol"))
    _write(base, cfg.out / "baseline.csv", rec)
    return _finish(cfg, rec, t0)


def cmd_snr_search(cfg, echo=print):
    system = load_system(cfg, "snr-search")
    rec, t0 = _start(cfg, "snr-search")
    s = cfg["search"]
    low, high, history = snr_range_search(
        cfg.covert_config(), system, _streams(cfg), s["start_db"],
        epochs_per_candidate=s["epochs_per_candidate"], eval_trials=s["eval_trials"],
        max_candidates=s["max_candidates"], step_db=s["step_db"],
    )
    res = SweepResult(SEARCH_COLUMNS)
    for row in history:
        res.add(**dict(zip(SEARCH_COLUMNS, (float(v) for v in row[:-1]))),
                accepted=int(row[-1]))
    _write(res, cfg.out / "snr_search.csv", rec)
    echo(_summary(res, SEARCH_COLUMNS))
    echo(f"selected covert training range [{low}, {high}] dB")
    return _finish(cfg, rec, t0)


def cmd_audit(cfg, echo=print):
    """Fresh detector against the trained Alice and against an untrained one."""
    system = load_system(cfg, "audit")
    triple = load_triple(cfg, system, "audit")
    rec, t0 = _start(cfg, "audit")
    a = cfg["audit"]
    cc = cfg.covert_config()
    streams = _streams(cfg)
    kw = dict(epochs=a["epochs"], batch=cc.batch, lr=cc.lr, trials=a["trials"],
              checkpoints=a["checkpoints"])
    res = audit_detector(triple, system, streams, cc.snr_low, cc.snr_high, a["snr_db"],
                         tag="audit", **kw)
    _write(res, cfg.out / "audit.csv", rec)
    naive = CovertTriple.create(system, cc.k_c, cc.trigger_dim, streams.get("audit", "untrained"))
    res0 = audit_detector(naive, system, streams, cc.snr_low, cc.snr_high, a["snr_db"],
                          tag="audit-untrained", **kw)
    _write(res0, cfg.out / "audit_untrained.csv", rec)
    echo("trained Alice\n" + _summary(res, res.columns))
    echo("untrained Alice\n" + _summary(res0, res0.columns))
    return _finish(cfg, rec, t0)


def constellation_clouds(system, triple, snr_db, trials, rng):
    """Symbol points plus normal / covert received clouds for user 0.

    Received samples are equalized with the true channel so a noiseless
    export lands exactly on the symbol points. ``snr_db=inf`` is noiseless.
    """
    cfg = system.cfg
    res = SweepResult(CONSTELLATION_COLUMNS)
    s_all = np.arange(cfg.M)
    if isinstance(system, SingleUserSystem):
        sym = system.encode(s_all)
    else:
        sym = system.encode(np.stack([s_all] * cfg.n_tx, axis=1))[:, 0]
    sigma2 = float(ch.noise_variance(snr_db))
    s = system.messages(trials, rng)
    real = system.draw(trials, rng)
    shape = (trials, 2, cfg.n) if cfg.mode == "single" else (trials, cfg.n_rx, 2, cfg.n)
    noise = noise_block(shape, sigma2, rng)
    x = system.encode(s)
    clouds = {}
    zs = {"normal": np.zeros((trials, 2, cfg.n))}
    if triple is not None:
        m = rng.integers(0, 2**triple.k_c, size=trials)
        t = rng.standard_normal((trials, triple.trigger_dim))
        zs["covert"] = alice_generate(triple, system, m, t, real=real)
    for kind, z in zs.items():
        y, _, _ = covert_output(system, x, z, real, noise)
        if isinstance(system, SingleUserSystem):
            eq = ch.to_real(ch.to_complex(y) / real.h_single[:, None])
        else:
            eq = system.equalize(y, real.H_eff)[0][:, 0]
        clouds[kind] = eq
    for u in range(cfg.n):
        for p in sym:
            res.add(use_index=u, kind="symbol", re=float(p[0, u]), im=float(p[1, u]),
                    snr_db=float(snr_db))
        for kind, eq in clouds.items():
            for p in eq:
                res.add(use_index=u, kind=kind, re=float(p[0, u]), im=float(p[1, u]),
                        snr_db=float(snr_db))
    return res


def cmd_constellation(cfg, snr_list=None, echo=print):
    system = load_system(cfg, "constellation")
    triple = load_triple(cfg, system, "constellation") if _has_covert(cfg) else None
    rec, t0 = _start(cfg, "constellation")
    c = cfg["constellation"]
    snr_list = c["snr_db"] if snr_list is None else snr_list
    res = SweepResult(CONSTELLATION_COLUMNS)
    for i, snr in enumerate(snr_list):
        res.extend(constellation_clouds(system, triple, float(snr), c["trials"],
                                        _streams(cfg).get("constellation", "cloud", i)))
    _write(res, cfg.out / "constellation.csv", rec)
    echo(f"wrote {len(res.rows)} constellation points at SNR {list(snr_list)} dB")
    return _finish(cfg, rec, t0)


COMMANDS = {
    "train-ae": cmd_train_ae,
    "train-covert": cmd_train_covert,
    "sweep": cmd_sweep,
    "snr-search": cmd_snr_search,
    "constellation": cmd_constellation,
    "audit": cmd_audit,
}
