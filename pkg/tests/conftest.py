import numpy as np
import pytest
import torch

from din.dataset import generate_synthetic_corpus


def central_diff(f, x: torch.Tensor, eps=1e-6) -> torch.Tensor:
    """Central finite-difference gradient of scalar ``f`` at ``x`` (float64)."""
    x = x.detach().clone()
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    with torch.no_grad():
        for i in range(flat.numel()):
            orig = flat[i].item()
            flat[i] = orig + eps
            hi = float(f(x))
            flat[i] = orig - eps
            lo = float(f(x))
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * eps)
    return grad


def rel_err(a, b) -> float:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-12))


@pytest.fixture(scope="session")
def small_corpus():
    return generate_synthetic_corpus(120, 6, seed=11)


@pytest.fixture(scope="session")
def small_test_corpus():
    return generate_synthetic_corpus(60, 6, seed=12, split="test", id_prefix="t")


def param_grad_errors(module: torch.nn.Module, loss_fn) -> dict[str, float]:
    """Relative error of autograd vs finite differences for every parameter of ``module``."""
    module.zero_grad()
    loss_fn().backward()
    errs = {}
    for name, p in module.named_parameters():
        if p.grad is None:
            continue

        def at(v, p=p):
            old = p.detach().clone()
            with torch.no_grad():
                p.copy_(v)
                out = loss_fn()
                p.copy_(old)
            return out

        errs[name] = rel_err(p.grad, central_diff(at, p.detach()))
    return errs


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    if mod is None or not mod.RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for line in mod.summary_lines():
        terminalreporter.write_line(line)
