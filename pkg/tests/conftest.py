import re

import numpy as np
import pytest

from eegtsc import tensor as T
from eegtsc.data import ShapePreset, generate_synthetic


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (modified in place, then restored)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f()
        x[i] = old - h
        fm = f()
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def rel_error(a, b) -> float:
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def gradcheck(fn, arrays, seed=0, h=1e-5) -> float:
    """Largest relative error between tape gradients and finite differences.

    ``fn(*tensors)`` returns a tensor; the scalar checked is its dot product
    with a fixed random projection.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    proj = None

    def scalar(*ts):
        nonlocal proj
        out = fn(*ts)
        if proj is None:
            proj = np.random.default_rng(seed).normal(size=out.shape)
        return T.sum_all(T.mul(out, T.Tensor(proj)))

    tensors = [T.Tensor(a, requires_grad=True) for a in arrays]
    loss = scalar(*tensors)
    T.backward(loss)
    worst = 0.0
    for t, a in zip(tensors, arrays):
        def f():
            with T.no_grad():
                return scalar(*[T.Tensor(b) for b in arrays]).item()
        num = numeric_grad(f, a, h)
        worst = max(worst, rel_error(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def tiny_flip_splits():
    preset = ShapePreset("tiny", S=2, C=2, T=48, Y=2, n_train=16, n_val=8, n_test=8)
    return generate_synthetic(preset, "subject_flip", 0.3, seed=0)


# ---- acceptance summary -------------------------------------------------------

_acceptance = {}


def pytest_runtest_logreport(report):
    m = re.search(r"test_acceptance\.py::test_criterion_(\d+)_(\w+)", report.nodeid)
    if not m:
        return
    key = int(m.group(1))
    failed = report.failed
    if report.when == "call" or failed:
        prev = _acceptance.get(key)
        _acceptance[key] = (m.group(2), "FAIL" if failed or (prev and prev[1] == "FAIL") else
                            ("SKIP" if report.skipped else "PASS"))


def pytest_terminal_summary(terminalreporter):
    if not _acceptance:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(_acceptance):
        name, status = _acceptance[key]
        terminalreporter.write_line(f"criterion {key} ({name.replace('_', ' ')}): {status}")


# ---- finite differences through whole models ------------------------------------

class KinkRecorder:
    """Records the ReLU on/off pattern and max-pool selections of a forward pass.

    A finite-difference stencil that changes this pattern straddles a point
    where the loss is not differentiable, so its estimate is not a derivative.
    """

    def __init__(self, monkeypatch):
        self.trace = []
        relu, pool = T.relu, T.pool1d
        from numpy.lib.stride_tricks import sliding_window_view

        def rec_relu(x):
            self.trace.append(x.data > 0)
            return relu(x)

        def rec_pool(x, kind, window, stride=None, padding="valid"):
            if kind == "max":
                data = x.data
                if padding == "same":
                    s = stride or window
                    total = max((-(-data.shape[-1] // s) - 1) * s + window - data.shape[-1], 0)
                    data = np.pad(data, ((0, 0), (0, 0), (total // 2, total - total // 2)),
                                  constant_values=-np.inf)
                win = sliding_window_view(data, window, axis=-1)[..., ::stride or window, :]
                self.trace.append(win.argmax(axis=-1))
            return pool(x, kind, window, stride, padding=padding)

        monkeypatch.setattr(T, "relu", rec_relu)
        monkeypatch.setattr(T, "pool1d", rec_pool)

    def run(self, fn):
        self.trace = []
        value = fn()
        return value, [a.copy() for a in self.trace]


def model_fd_error(model, subjects, x, y, monkeypatch, n_params=20, seed=0, h=1e-5) -> float:
    """Relative error of tape gradients vs central differences on ``n_params`` random entries.

    Entries whose stencil crosses a kink (see :class:`KinkRecorder`) are re-drawn.
    """
    rec = KinkRecorder(monkeypatch)

    def loss():
        with T.no_grad():
            return T.softmax_cross_entropy(model(subjects, x), y).item()

    model.zero_grad()
    T.backward(T.softmax_cross_entropy(model(subjects, x), y))
    _, ref = rec.run(loss)
    named = list(model.named_parameters())
    r = np.random.default_rng(seed)
    ana, num = [], []
    attempts = 0
    while len(ana) < n_params:
        attempts += 1
        assert attempts < 20 * n_params, "too many probes straddle kinks"
        p = named[int(r.integers(len(named)))][1]
        idx = tuple(int(r.integers(s)) for s in p.shape)
        old = p.data[idx]
        p.data[idx] = old + h
        fp, tp = rec.run(loss)
        p.data[idx] = old - h
        fm, tm = rec.run(loss)
        p.data[idx] = old
        if any(not np.array_equal(a, b) for a, b in zip(ref, tp)) or \
                any(not np.array_equal(a, b) for a, b in zip(ref, tm)):
            continue
        ana.append(p.grad[idx])
        num.append((fp - fm) / (2 * h))
    ana, num = np.array(ana), np.array(num)
    return float(np.linalg.norm(ana - num) / max(np.linalg.norm(num), 1e-12))
