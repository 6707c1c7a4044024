import numpy as np
import pytest

from nightfuse.network import NetConfig, init

TINY = NetConfig(base_width=8, blocks_per_level=1, t_embed_dim=16)


def randomized(ckpt, seed=0, scale=0.05):
    """Copy of `ckpt` whose zero-initialized output layer is given random weights."""
    rng = np.random.default_rng(seed)
    params = dict(ckpt.params)
    for name in ("conv_out.weight", "conv_out.bias"):
        params[name] = (scale * rng.standard_normal(params[name].shape)).astype(np.float32)
    return ckpt.with_params(params)


@pytest.fixture(scope="session")
def tiny_noise():
    return randomized(init(TINY, seed=1, objective="noise"), seed=2)


@pytest.fixture(scope="session")
def tiny_velocity():
    return randomized(init(TINY, seed=3, objective="velocity"), seed=4)


_CRITERIA: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record():
    """Log one acceptance criterion's verdict for the end-of-run summary."""

    def _record(number: int, ok: bool, detail: str) -> bool:
        _CRITERIA[number] = (bool(ok), detail)
        return bool(ok)

    return _record


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        ok, detail = _CRITERIA[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
