import os

os.environ.setdefault("OPENBLAS_NUM_THREADS", "1")
os.environ.setdefault("OMP_NUM_THREADS", "1")
os.environ.setdefault("MKL_NUM_THREADS", "1")

import numpy as np
import pytest

from attnfix.numkernel import Tape, Tensor


def numeric_grad(f, arr, h=1e-5):
    """Central finite differences of scalar ``f`` w.r.t. every entry of ``arr``."""
    g = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = arr[i]
        arr[i] = old + h
        fp = f()
        arr[i] = old - h
        fm = f()
        arr[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_grads(build, params, h=1e-5, tol=1e-4):
    """Compare tape gradients of ``build()`` with finite differences.

    Returns the worst per-coordinate relative error across ``params``.
    """
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = build()
    tape.backward(loss)
    worst = 0.0
    for p in params:
        num = numeric_grad(lambda: build().item(), p.data, h)
        ana = p.grad
        rel = np.abs(ana - num) / np.maximum(1e-6, np.abs(ana) + np.abs(num))
        worst = max(worst, float(rel.max()))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# ----------------------------------------------------------- shared pipelines

ACCEPTANCE: dict[int, tuple[bool, str]] = {}


def record(criterion: int, ok: bool, detail: str) -> None:
    ACCEPTANCE[criterion] = (bool(ok), detail)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[k]
        terminalreporter.write_line(f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


def _timed_run(cfg):
    import time
    from attnfix.harness import Run

    run = Run(cfg)
    t0 = time.perf_counter()
    report = run.run_all()
    return run, report, time.perf_counter() - t0


@pytest.fixture(scope="session")
def backdoor_run(tmp_path_factory):
    """Full backdoor pipeline on the desk-scale preset, built once per session."""
    from attnfix.harness import preset

    return _timed_run(preset("backdoor", out=str(tmp_path_factory.mktemp("backdoor"))))


@pytest.fixture(scope="session")
def fairness_run(tmp_path_factory):
    from attnfix.harness import preset

    return _timed_run(preset("unfairness", out=str(tmp_path_factory.mktemp("unfairness"))))
