import numpy as np
import pytest

from mairl.envs import GemsConfig, GemsEnv, MatrixGameConfig, MatrixGameEnv


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture
def tiny_gems():
    """2x3 grid, one gem of each colour, short horizon: small enough for exhaustive checks."""
    return GemsEnv(GemsConfig(layout=["1RP", "2B."], horizon=4, gamma=0.9))


@pytest.fixture
def coordination_game():
    # common payoff 1 on matching actions, one state, horizon 3
    pay = [[[1.0, 0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0, 1.0]]]
    return MatrixGameEnv(MatrixGameConfig(payoffs=pay, gamma=0.9, horizon=3))


# --- acceptance summary -----------------------------------------------------------

_ACCEPTANCE = pytest.StashKey()


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, {})

    def record(name: str, ok: bool, detail: str) -> bool:
        line = f"{name} {'PASS' if ok else 'FAIL'}: {detail}"
        lines[name] = line
        print(line)
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for name in sorted(lines, key=lambda k: int(k[1:])):
            terminalreporter.write_line(lines[name])
