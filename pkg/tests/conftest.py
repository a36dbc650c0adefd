import time
from contextlib import contextmanager

import numpy as np
import pytest

from etclip.trainer import PretrainConfig, pretrain_dualenc
from etclip.worldgen import WorldConfig, generate_dataset


@pytest.fixture(scope="session")
def tiny_world():
    return WorldConfig(n_train=60, n_valid_seen=10, n_valid_unseen=20)


@pytest.fixture(scope="session")
def tiny_dataset(tiny_world):
    return generate_dataset(tiny_world, 3)


@pytest.fixture(scope="session")
def tiny_pretrained(tiny_dataset):
    return pretrain_dualenc(tiny_dataset, PretrainConfig(epochs=1, n_pairs=96, probe_size=40, batch_size=32))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance reporting -------------------------------------------------------

_ACCEPT = pytest.StashKey[dict]()


class _Recorder:
    def __init__(self, store: dict):
        self.store = store

    @contextmanager
    def criterion(self, number: int, title: str, budget_s: float | None = None):
        """Record a pass/fail line for ``number``; timing is checked against ``budget_s``."""
        info = {"detail": ""}
        start = time.perf_counter()
        try:
            yield info
            elapsed = time.perf_counter() - start + info.get("extra_seconds", 0.0)
            if budget_s is not None:
                assert elapsed < budget_s, f"took {elapsed:.1f}s, budget {budget_s:.0f}s"
        except BaseException as e:
            self.store[number] = (False, title, f"{type(e).__name__}: {str(e).splitlines()[0][:120]}"
                                  if str(e) else type(e).__name__)
            raise
        self.store[number] = (True, title, f"{elapsed:.1f}s {info['detail']}".strip())


@pytest.fixture
def acceptance(request):
    return _Recorder(request.config.stash.setdefault(_ACCEPT, {}))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    store = config.stash.get(_ACCEPT, {})
    if not store:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(store):
        ok, title, detail = store[n]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {n:2d}. {title}: {detail}")
