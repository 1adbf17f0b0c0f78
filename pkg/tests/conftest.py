import numpy as np
import pytest

from circuitkit.model import ModelConfig, init_random_model


def small_config(**kw):
    base = dict(n_layers=2, n_heads=2, d_model=6, d_head=3, d_mlp=5, vocab=7, n_ctx=5, norm="pre-layernorm")
    base.update(kw)
    return ModelConfig(**base)


def random_model(seed=0, **kw):
    return init_random_model(small_config(**kw), seed)


def random_tokens(rng, cfg, n=3, T=None):
    return rng.integers(0, cfg.vocab, size=(n, T or cfg.n_ctx))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ---------------------------------------------------------------------------
# shared trained induction model and the acceptance summary

CRITERIA = {}


@pytest.fixture(scope="session")
def trained_induction():
    import time

    from circuitkit.zoo import TrainConfig, train_induction

    t0 = time.perf_counter()
    hist = []
    model = train_induction(TrainConfig(seed=0), hist)
    return model, hist, time.perf_counter() - t0


def pytest_runtest_logreport(report):
    name = report.nodeid.split("::")[-1]
    if "test_acceptance.py" not in report.nodeid or not name.startswith("test_criterion_"):
        return
    if report.when == "call" or (report.when == "setup" and report.outcome != "passed"):
        CRITERIA[name] = report.outcome


def pytest_terminal_summary(terminalreporter):
    if not CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(CRITERIA, key=lambda n: int(n.split("_")[2])):
        num, label = name.split("_")[2], " ".join(name.split("_")[3:])
        status = "PASS" if CRITERIA[name] == "passed" else "FAIL"
        terminalreporter.write_line(f"criterion {num} [{label}]: {status}")
