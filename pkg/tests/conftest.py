from contextlib import contextmanager

import numpy as np
import pytest
import torch

# criterion number -> (passed, title, detail), filled by test_acceptance
ACCEPTANCE: dict = {}


@pytest.fixture(autouse=True)
def _seed():
    torch.manual_seed(0)
    np.random.seed(0)
    yield


def rel_error(a, b):
    a, b = torch.as_tensor(a), torch.as_tensor(b)
    return float((a - b).abs().max() / max(float(b.abs().max()), 1e-12))


@torch.no_grad()
def finite_difference(fn, x: torch.Tensor, eps: float = 1e-6) -> torch.Tensor:
    """Central-difference gradient of the scalar ``fn(x)`` w.r.t. every entry of ``x``."""
    grad = torch.zeros_like(x)
    flat = x.detach().clone().reshape(-1)
    for i in range(flat.numel()):
        orig = flat[i].item()
        flat[i] = orig + eps
        up = float(fn(flat.view_as(x)))
        flat[i] = orig - eps
        down = float(fn(flat.view_as(x)))
        flat[i] = orig
        grad.view(-1)[i] = (up - down) / (2 * eps)
    return grad


class _Verdict:
    detail = ""


@contextmanager
def criterion(number: int, title: str):
    """Record PASS/FAIL for one acceptance criterion and print its line."""
    verdict = _Verdict()
    try:
        yield verdict
    except BaseException as exc:
        detail = verdict.detail or f"{type(exc).__name__}: {exc}".splitlines()[0][:200]
        ACCEPTANCE[number] = (False, title, detail)
        print(_line(number))
        raise
    ACCEPTANCE[number] = (True, title, verdict.detail)
    print(_line(number))


def _line(number: int) -> str:
    passed, title, detail = ACCEPTANCE[number]
    return f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {title} | {detail}"


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(_line(number))
