import numpy as np
import pytest

from resformer_mtl.backend import Tensor, no_grad

# tolerances, defined once
ORACLE_ATOL = 1e-6
FD_STEP = 1e-3
FD_RTOL_OP = 1e-4
FD_RTOL_MODEL = 1e-3
FD_FLOOR = 1e-7


def relative_error(a, b, floor=FD_FLOOR):
    return abs(a - b) / max(abs(a), abs(b), floor)


def finite_difference_check(loss_fn, params, n_probes, rng, h=FD_STEP):
    """Compare backward() gradients with central differences on random entries.

    ``loss_fn`` builds a fresh scalar Tensor from the current parameter
    values. Returns a list of (analytic, numeric, relative error).
    """
    for prm in params:
        prm.zero_grad()
    loss_fn().backward()
    analytic = [prm.grad.copy() for prm in params]
    sizes = np.array([prm.size for prm in params], dtype=np.float64)
    results = []
    for _ in range(n_probes):
        k = rng.choice(len(params), p=sizes / sizes.sum())
        idx = tuple(rng.integers(0, n) for n in params[k].shape)
        orig = params[k].data[idx]
        with no_grad():
            params[k].data[idx] = orig + h
            up = loss_fn().item()
            params[k].data[idx] = orig - h
            down = loss_fn().item()
        params[k].data[idx] = orig
        num = (up - down) / (2 * h)
        a = float(analytic[k][idx])
        results.append((a, num, relative_error(a, num)))
    return results


def input_gradient_check(fn, x, rng, n_probes=20, h=FD_STEP):
    """Finite-difference check of d sum(fn(x) * r)/dx for a random projection r."""
    xt = Tensor(x.copy(), requires_grad=True)
    out = fn(xt)
    proj = rng.standard_normal(out.shape)
    (out * proj).sum().backward()
    results = []
    for _ in range(n_probes):
        idx = tuple(rng.integers(0, n) for n in x.shape)
        xp, xm = x.copy(), x.copy()
        xp[idx] += h
        xm[idx] -= h
        with no_grad():
            num = ((fn(Tensor(xp)).data - fn(Tensor(xm)).data) * proj).sum() / (2 * h)
        a = float(xt.grad[idx])
        results.append((a, num, relative_error(a, num)))
    return results


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def randomize_bn(module, rng):
    """Give every BatchNorm non-trivial affine params and running statistics."""
    from resformer_mtl.nn import BatchNorm2d

    stack = [module]
    while stack:
        m = stack.pop()
        if isinstance(m, BatchNorm2d):
            m.gamma.data[...] = rng.uniform(0.5, 1.5, m.gamma.shape)
            m.beta.data[...] = rng.uniform(-0.5, 0.5, m.beta.shape)
            m._buffers["running_mean"][...] = rng.uniform(-0.3, 0.3, m.gamma.shape)
            m._buffers["running_var"][...] = rng.uniform(0.5, 2.0, m.gamma.shape)
        stack.extend(child for _, child in m._children())


# -- acceptance summary -------------------------------------------------------------

_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance_log(request):
    """Record one PASS/FAIL line; lines are echoed and repeated in the run summary."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(line):
        lines.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
