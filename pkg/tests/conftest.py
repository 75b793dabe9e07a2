import numpy as np
import pytest

from covertcomm import channel as ch
from covertcomm.autoencoder import AeConfig, train_autoencoder


@pytest.fixture(scope="session")
def awgn_system():
    """Briefly trained (8,4) AWGN link, frozen."""
    cfg = AeConfig(n=8, k=4, epochs=20)
    system, _ = train_autoencoder(cfg, np.random.default_rng(0))
    return system.freeze()


@pytest.fixture(scope="session")
def rayleigh_system():
    cfg = AeConfig(n=8, k=2, channel=ch.ChannelModel("rayleigh"), epochs=2, train_size=2048)
    system, _ = train_autoencoder(cfg, np.random.default_rng(1))
    return system.freeze()


@pytest.fixture(scope="session")
def multi_system():
    cfg = AeConfig(n=4, k=2, mode="multi", channel=ch.ChannelModel("rayleigh"), n_tx=2,
                   epochs=2, train_size=2048)
    system, _ = train_autoencoder(cfg, np.random.default_rng(2))
    return system.freeze()


def pytest_terminal_summary(terminalreporter):
    from acceptance_report import LINES

    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(LINES, key=lambda s: int(s.split()[1])):
            terminalreporter.write_line(line)
