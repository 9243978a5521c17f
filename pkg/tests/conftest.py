import numpy as np
import pytest
import torch

from spfusion.datamodel import Calibration, LabeledScene


K_TEST = np.array([[100.0, 0.0, 64.0], [0.0, 100.0, 48.0], [0.0, 0.0, 1.0]])


def identity_calibration(H=96, W=128, K=K_TEST) -> Calibration:
    return Calibration(K, np.eye(3), np.zeros(3), (H, W))


def random_rotation(rng) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def small_scene(seed=0, n=20, H=8, W=12, C=3, scene_id=None, domain_tag="source") -> LabeledScene:
    rng = np.random.default_rng(seed)
    K = np.array([[6.0, 0, W / 2], [0, 6.0, H / 2], [0, 0, 1]])
    pts = np.concatenate([rng.uniform(-1, 1, (n, 2)), rng.uniform(1, 4, (n, 1))], 1)
    labels = rng.integers(0, C, n)
    labels[0] = 255
    return LabeledScene(pts, labels, rng.uniform(0, 1, (H, W, 3)), rng.integers(0, C, (H, W)),
                        Calibration(K, np.eye(3), np.zeros(3), (H, W)), scene_id or f"s{seed}", domain_tag, C)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def f64():
    old = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    yield
    torch.set_default_dtype(old)


def fd_rel_error(fn, *inputs, step=1e-5) -> float:
    """Max relative error of autograd against central differences, over all inputs jointly."""
    xs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    grads = torch.autograd.grad(fn(*xs), xs)
    errs, scale = 0.0, 1e-300
    with torch.no_grad():
        for x, g in zip(xs, grads):
            flat = x.view(-1)
            num = torch.zeros_like(flat)
            for j in range(flat.numel()):
                orig = flat[j].item()
                flat[j] = orig + step
                plus = float(fn(*xs))
                flat[j] = orig - step
                minus = float(fn(*xs))
                flat[j] = orig
                num[j] = (plus - minus) / (2 * step)
            errs = max(errs, float((g.reshape(-1) - num).abs().max()))
            scale = max(scale, float(g.abs().max()), float(num.abs().max()))
    return errs / scale


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
