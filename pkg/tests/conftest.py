import numpy as np
import pytest

from esddkit import autodiff as ad

ACCEPTANCE_LINES: dict[int, str] = {}


def fd_rel_error(fn, arrays, eps=1e-6, floor=1e-6):
    """Largest elementwise relative error between autodiff and central differences.

    ``fn`` maps a list of Tensors to a scalar Tensor. Each entry's error is
    |analytic - numeric| / max(|analytic|, |numeric|, floor); the floor keeps
    entries that are zero in both from dividing by zero.
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Graph() as g:
        out = fn(tensors)
    grads = ad.backward(out, g)
    worst = 0.0
    for k, a in enumerate(arrays):
        analytic = grads.get(tensors[k], np.zeros_like(a))
        numeric = np.zeros_like(a)
        flat = numeric.reshape(-1)
        for i in range(a.size):
            plus, minus = [x.copy() for x in arrays], [x.copy() for x in arrays]
            plus[k].reshape(-1)[i] += eps
            minus[k].reshape(-1)[i] -= eps
            hi = fn([ad.Tensor(x) for x in plus]).item()
            lo = fn([ad.Tensor(x) for x in minus]).item()
            flat[i] = (hi - lo) / (2 * eps)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def acceptance(request):
    """Record one pass/fail line for an acceptance criterion.

    Call ``acceptance(n, passed, detail)``; a criterion whose test dies before
    recording is reported as FAIL.
    """
    recorded = {}

    def record(criterion: int, passed: bool, detail: str):
        line = f"criterion {criterion}: {'PASS' if passed else 'FAIL'} | {detail}"
        ACCEPTANCE_LINES[criterion] = line
        recorded[criterion] = passed
        print(line)
        return passed

    yield record
    marker = request.node.get_closest_marker("criterion")
    if marker is not None:
        n = marker.args[0]
        if n not in recorded:
            ACCEPTANCE_LINES[n] = f"criterion {n}: FAIL | test did not complete"


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(n): acceptance criterion number")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
