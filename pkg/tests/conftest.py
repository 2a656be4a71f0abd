import numpy as np
import pytest
import torch


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)


def central_difference_grad(fn, inputs, eps=1e-6):
    """Gradient of scalar ``fn(*inputs)`` w.r.t. every input by central differences."""
    grads = []
    for x in inputs:
        g = torch.zeros_like(x)
        flat = x.data.view(-1)
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = fn(*inputs).item()
            flat[i] = orig - eps
            lo = fn(*inputs).item()
            flat[i] = orig
            g.view(-1)[i] = (hi - lo) / (2 * eps)
        grads.append(g)
    return grads


def relative_gradient_error(fn, inputs, eps=1e-6):
    """Max over inputs of ||autograd - finite difference|| / ||finite difference||."""
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    analytic = torch.autograd.grad(out, inputs, allow_unused=True)
    with torch.no_grad():
        numeric = central_difference_grad(fn, inputs, eps)
    worst = 0.0
    for a, n in zip(analytic, numeric):
        a = torch.zeros_like(n) if a is None else a
        denom = max(n.norm().item(), 1e-12)
        worst = max(worst, (a - n).norm().item() / denom)
    return worst


@pytest.fixture
def grad_error():
    return relative_gradient_error


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def criterion(request):
    """Record one acceptance line; returns ``passed`` so tests can assert on it."""
    def record(name, passed, detail):
        line = f"{'PASS' if passed else 'FAIL'}  {name}: {detail}"
        request.config.stash.setdefault(_ACCEPTANCE, []).append(line)
        print(line)
        return passed
    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
