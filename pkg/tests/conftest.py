import numpy as np
import pytest

from moeimbalance import ModelArch, SyntheticRouter


@pytest.fixture
def small_arch():
    return ModelArch("small", layers=3, experts_per_layer=8, top_k=2, vocab_size=200)


@pytest.fixture
def small_router(small_arch):
    return SyntheticRouter.create(small_arch, hidden_dim=16, seed=7)


def random_trace(rng, arch, n):
    """Random valid trace: k distinct experts and Dirichlet weights per (layer, token)."""
    from moeimbalance import RoutingTrace

    E, k, L = arch.experts_per_layer, arch.top_k, arch.layers
    ex = np.argsort(rng.random((L, n, E)), axis=2)[:, :, :k]
    w = rng.dirichlet(np.ones(k), size=(L, n)) if n else np.zeros((L, 0, k))
    return RoutingTrace(arch, ex, w)


# -- acceptance summary -------------------------------------------------------------

_acceptance: dict[str, tuple[str, list]] = {}


def pytest_runtest_logreport(report):
    if "test_acceptance.py::test_criterion_" not in report.nodeid:
        return
    name = report.nodeid.split("::")[-1]
    if report.when == "call" or report.failed or report.skipped:
        outcome = "PASS" if report.passed and report.when == "call" else "FAIL"
        if name not in _acceptance or outcome == "FAIL":
            _acceptance[name] = (outcome, list(report.user_properties))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for name in sorted(_acceptance):
        outcome, props = _acceptance[name]
        num, _, title = name[len("test_criterion_"):].partition("_")
        extra = "  ".join(f"{k}={v}" for k, v in props)
        terminalreporter.write_line(f"criterion {int(num):2d} {outcome}  {title.replace('_', ' ')}  {extra}".rstrip())
