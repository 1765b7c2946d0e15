"""Finite-difference gradient checking shared by several test modules."""

import numpy as np

from hetloc.nn.tensor import Tensor

STEP = 1e-3


def rel_err(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), 1e-12))


def numeric_grad(f, arrays, k, h=STEP):
    """Central differences of scalar ``f(*arrays)`` with respect to ``arrays[k]``."""
    x = arrays[k]
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        fp = f(*arrays)
        x[i] = old - h
        fm = f(*arrays)
        x[i] = old
        g[i] = (fp - fm) / (2 * h)
    return g


def check_op(op, arrays, seed=0, h=STEP):
    """Max relative error between analytic and numeric gradients of
    ``sum(op(*tensors) * R)`` over every input, with a fixed random ``R``."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = None

    def scalar(*arrs):
        nonlocal probe
        out = op(*[Tensor(a) for a in arrs]).data
        if probe is None:
            probe = np.random.default_rng(seed).standard_normal(out.shape)
        return float((out * probe).sum())

    scalar(*arrays)
    ts = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = op(*ts)
    (out * probe).sum().backward()
    errs = []
    for k, t in enumerate(ts):
        num = numeric_grad(scalar, arrays, k, h)
        errs.append(rel_err(t.grad, num))
    return max(errs)


def to_float64(module, rng=None):
    """Cast parameters to float64; with ``rng``, also draw non-zero biases so the
    check runs at a generic point rather than on a ReLU kink."""
    for name, p in module.named_parameters():
        p.data = p.data.astype(np.float64)
        if rng is not None and name.endswith(".b"):
            p.data = rng.uniform(-0.2, 0.2, size=p.shape)
    return module


class TooManyKinks(AssertionError):
    pass


class KinkRecorder:
    """Records every ReLU mask and max-pool choice made while active.

    Finite differences are only trustworthy when the perturbed evaluations
    take the same piecewise-linear branch as the base point; comparing the
    recorded patterns detects when a step crosses a kink.
    """

    def __init__(self, monkeypatch):
        from hetloc.nn import tensor as T

        self.log = []
        relu, pool = T.relu, T.maxpool2x2

        def rec_relu(x):
            self.log.append((x.data > 0).tobytes())
            return relu(x)

        def rec_pool(x):
            n, c, h, w = x.shape
            b = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
            self.log.append(b.reshape(n, c, h // 2, w // 2, 4).argmax(-1).tobytes())
            return pool(x)

        monkeypatch.setattr(T, "relu", rec_relu)
        monkeypatch.setattr(T, "maxpool2x2", rec_pool)

    def pattern(self, fn):
        self.log = []
        value = fn()
        return value, tuple(self.log)


def module_gradient_error(module, loss_fn, rng, recorder, per_param=6, tries=200):
    """Max relative error over ``per_param`` kink-free coordinates of every parameter."""
    module.zero_grad()
    loss, base = recorder.pattern(loss_fn)
    loss.backward()
    errs = []
    for name, p in module.named_parameters():
        flat = p.data.reshape(-1)
        analytic, numeric = [], []
        for k in rng.permutation(flat.size)[:tries]:
            old = flat[k]
            flat[k] = old + STEP
            fp, pat_p = recorder.pattern(loss_fn)
            flat[k] = old - STEP
            fm, pat_m = recorder.pattern(loss_fn)
            flat[k] = old
            if pat_p != base or pat_m != base:
                continue
            analytic.append(p.grad.reshape(-1)[k])
            numeric.append((float(fp.data) - float(fm.data)) / (2 * STEP))
            if len(analytic) == per_param:
                break
        if len(analytic) < min(per_param, flat.size) // 2:
            raise TooManyKinks(f"{name}: too few kink-free coordinates ({len(analytic)})")
        errs.append(rel_err(np.array(analytic), np.array(numeric)))
    return max(errs)


def jittered_gradient_error(make_instance, rng, recorder, attempts=100):
    """Gradient error of one instance, re-drawing the input jitter when the
    drawn point sits too close to a kink to give enough usable coordinates."""
    for _ in range(attempts):
        module, loss_fn = make_instance(rng)
        try:
            return module_gradient_error(module, loss_fn, rng, recorder)
        except TooManyKinks:
            continue
    raise AssertionError("no kink-free jitter found")
