import numpy as np
import pytest
import torch

from nerfstyle.field import FieldSpec, RadianceField
from nerfstyle.scene_io import MultiViewScene
from nerfstyle.toy import ToySceneSpec, make_toy_scene

TINY_SPEC = FieldSpec(pos_freqs=2, dir_freqs=1, base_width=8, base_depth=2, skips=(), app_hidden=4)


def tiny_field(seed=0, dtype=torch.float64, spec=TINY_SPEC):
    torch.manual_seed(seed)
    return RadianceField(spec).to(dtype)


def unit(v):
    v = np.asarray(v, dtype=np.float64)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


@pytest.fixture(scope="session")
def small_scene_dir(tmp_path_factory):
    """8-view 40x40 toy scene for quick pipeline tests."""
    return make_toy_scene(tmp_path_factory.mktemp("small_scene"), ToySceneSpec(n_views=8, width=40, height=40))


@pytest.fixture(scope="session")
def small_scene(small_scene_dir):
    return MultiViewScene.from_directory(small_scene_dir)


@pytest.fixture(scope="session")
def toy_scene_dir(tmp_path_factory):
    """The standard 30-view 100x100 toy scene."""
    return make_toy_scene(tmp_path_factory.mktemp("toy_scene"), ToySceneSpec())


@pytest.fixture(scope="session")
def toy_scene(toy_scene_dir):
    return MultiViewScene.from_directory(toy_scene_dir)


def finite_difference_check(loss_fn, params, eps=1e-6, max_entries=None, seed=0, floor=1e-6):
    """Compare autograd gradients of ``loss_fn()`` with central differences.

    Returns the worst relative error ``|g - n| / max(|g|, |n|, floor)`` over the
    checked entries (all of them unless ``max_entries`` subsamples per tensor).
    The floor keeps vanishing gradients, where the central difference is pure
    round-off, from dominating the ratio.
    """
    params = list(params)
    for p in params:
        p.grad = None
    loss = loss_fn()
    grads = torch.autograd.grad(loss, params)
    rng = np.random.default_rng(seed)
    worst = 0.0
    for p, g in zip(params, grads):
        flat = p.data.view(-1)
        idx = np.arange(flat.numel())
        if max_entries is not None and len(idx) > max_entries:
            idx = rng.choice(idx, max_entries, replace=False)
        for i in idx:
            orig = flat[i].item()
            with torch.no_grad():
                flat[i] = orig + eps
                up = loss_fn().item()
                flat[i] = orig - eps
                down = loss_fn().item()
                flat[i] = orig
            num = (up - down) / (2 * eps)
            ana = g.view(-1)[i].item()
            worst = max(worst, abs(ana - num) / max(abs(ana), abs(num), floor))
    return worst


def piecewise_quadrature(sigma, color, delta, steps=100_000):
    """Brute-force midpoint quadrature of the rendering integral over a
    piecewise-constant medium; independent of the compositing formula."""
    edges = np.concatenate([[0.0], np.cumsum(delta)])
    L = edges[-1]
    dt = L / steps
    t = (np.arange(steps) + 0.5) * dt
    seg = np.clip(np.searchsorted(edges, t, side="right") - 1, 0, len(delta) - 1)
    s = sigma[seg]
    optical = np.cumsum(s * dt) - s * dt / 2  # optical depth up to each midpoint
    w = np.exp(-optical) * s * dt
    return (w[:, None] * color[seg]).sum(0), w.sum()


# ---------------------------------------------------------------------------
# acceptance reporting: one PASS/FAIL line per criterion

_CRITERIA = {}


def pytest_runtest_logreport(report):
    n = getattr(report, "criterion", None)
    if n is None:
        return
    failed = report.failed or (report.when == "call" and report.skipped)
    _CRITERIA[n] = _CRITERIA.get(n, True) and not failed


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        outcome.get_result().criterion = marker.args[0]


def pytest_terminal_summary(terminalreporter):
    if not _CRITERIA:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_CRITERIA):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if _CRITERIA[n] else 'FAIL'}")
