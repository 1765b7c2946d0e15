import numpy as np
import pytest

from hetloc.core import Rng
from hetloc.errors import UsageError
from hetloc.nn import tensor as T
from hetloc.nn.layers import SGD, Linear, ScEncoder, UNet3, sgd_step
from hetloc.nn.tensor import Tensor

from helpers import KinkRecorder, check_op, jittered_gradient_error, to_float64

N_INSTANCES = 20
OP_TOL = 1e-4


def spaced(rng, shape, gap=0.05):
    """Random values whose pairwise gaps exceed ``gap`` and that avoid 0."""
    n = int(np.prod(shape))
    base = (np.arange(n) - n / 2 + 0.5) * gap * 2
    vals = base[rng.permutation(n)] + rng.uniform(-gap / 4, gap / 4, size=n)
    return vals.reshape(shape)


def _cases():
    """(name, op, array factory) for every differentiable primitive."""
    u = lambda r, *s: r.uniform(-1, 1, size=s)
    pos = lambda r, *s: r.uniform(0.5, 2.0, size=s)
    return [
        ("add", lambda a, b: T.add(a, b), lambda r: [u(r, 3, 4), u(r, 4)]),
        ("sub", lambda a, b: T.sub(a, b), lambda r: [u(r, 3, 4), u(r, 3, 1)]),
        ("mul", lambda a, b: T.mul(a, b), lambda r: [u(r, 3, 4), u(r, 3, 4)]),
        ("div", lambda a, b: T.div(a, b), lambda r: [u(r, 3, 4), pos(r, 3, 4)]),
        ("square", T.square, lambda r: [u(r, 5)]),
        ("sqrt", lambda a: T.sqrt(a, 1e-12), lambda r: [pos(r, 5)]),
        ("exp", T.exp, lambda r: [u(r, 2, 3)]),
        ("log", T.log, lambda r: [pos(r, 2, 3)]),
        ("relu", T.relu, lambda r: [spaced(r, (4, 5))]),
        ("clamp_min", lambda a: T.clamp_min(a, 0.013), lambda r: [spaced(r, (4, 5))]),
        ("sum_axis", lambda a: T.tsum(a, axis=1), lambda r: [u(r, 3, 4)]),
        ("mean", lambda a: T.mean(a, axis=0, keepdims=True), lambda r: [u(r, 3, 4)]),
        ("reshape", lambda a: T.reshape(a, (6, 2)), lambda r: [u(r, 3, 4)]),
        ("getitem", lambda a: T.getitem(a, (slice(1, 3), slice(None, None, 2))), lambda r: [u(r, 4, 5)]),
        ("concat", lambda a, b: T.concat([a, b], axis=1), lambda r: [u(r, 2, 3), u(r, 2, 2)]),
        ("stack", lambda a, b: T.stack([a, b], axis=0), lambda r: [u(r, 3), u(r, 3)]),
        ("matmul", T.matmul, lambda r: [u(r, 3, 4), u(r, 4, 2)]),
        ("linear", T.linear, lambda r: [u(r, 3, 4), u(r, 5, 4), u(r, 5)]),
        ("amax", lambda a: T.amax(a, axis=(0, 2)), lambda r: [spaced(r, (3, 4, 2))]),
        ("softmax", lambda a: T.softmax(a, axis=-1), lambda r: [u(r, 3, 5)]),
        ("log_softmax", lambda a: T.log_softmax(a, axis=0), lambda r: [u(r, 4, 3)]),
        ("l2_normalize", lambda a: T.l2_normalize(a, axis=-1), lambda r: [u(r, 3, 6)]),
        ("dft2_magnitude", T.dft2_magnitude, lambda r: [u(r, 1, 2, 4, 6)]),
        ("pad2d", lambda a: T.pad2d(a, 1, 2), lambda r: [u(r, 1, 2, 3, 4)]),
        ("pad2d_circular", lambda a: T.pad2d(a, 1, 2, circular_w=True), lambda r: [u(r, 1, 2, 3, 4)]),
        ("conv2d", lambda x, w, b: T.conv2d(x, w, b, padding=1),
         lambda r: [u(r, 2, 2, 5, 6), u(r, 3, 2, 3, 3), u(r, 3)]),
        ("conv2d_circular", lambda x, w, b: T.conv2d(x, w, b, padding=1, circular_w=True),
         lambda r: [u(r, 1, 2, 4, 8), u(r, 2, 2, 3, 3), u(r, 2)]),
        ("maxpool2x2", T.maxpool2x2, lambda r: [spaced(r, (1, 2, 4, 6))]),
        ("upsample2x", T.upsample2x, lambda r: [u(r, 1, 2, 3, 2)]),
    ]


CASES = _cases()


@pytest.mark.parametrize("name,op,make", CASES, ids=[c[0] for c in CASES])
def test_op_gradient_matches_finite_differences(name, op, make):
    worst = 0.0
    for i in range(N_INSTANCES):
        rng = Rng(1000 + i).split(name)
        worst = max(worst, check_op(op, make(rng), seed=i))
    assert worst < OP_TOL, f"{name}: relative error {worst:.2e}"


def _jitter(arr, rng, scale=1e-3):
    return arr + rng.uniform(-scale, scale, size=arr.shape)


def test_encoder_end_to_end_gradient(monkeypatch):
    rec = KinkRecorder(monkeypatch)
    worst = 0.0
    for i in range(N_INSTANCES):
        rng = Rng(50 + i)
        enc = to_float64(ScEncoder(rng.split("net"), rings=8, sectors=16, channels=(3,), keep=(4, 4), dim=6), rng.split("bias"))
        x = rng.uniform(0, 1, size=(2, 8, 16))
        target = rng.normal(size=(2, 6))

        def make(r):
            xj = _jitter(x, r)
            return enc, lambda: T.tsum(T.square(enc(Tensor(xj)) - target))

        worst = max(worst, jittered_gradient_error(make, rng, rec))
    assert worst < 1e-3, worst


def test_unet_end_to_end_gradient(monkeypatch):
    rec = KinkRecorder(monkeypatch)
    worst = 0.0
    for i in range(N_INSTANCES):
        rng = Rng(80 + i)
        net = to_float64(UNet3(rng.split("net"), channels=(2, 3, 4)), rng.split("bias"))
        x = rng.uniform(0, 1, size=(1, 1, 8, 8))
        probe = rng.normal(size=(1, 1, 8, 8))

        def make(r):
            xj = _jitter(x, r, 0.2)
            return net, lambda: T.tsum(net(Tensor(xj)) * probe)

        worst = max(worst, jittered_gradient_error(make, rng, rec))
    assert worst < 1e-3, worst


def test_input_gradient_through_unet():
    rng = Rng(3)
    net = to_float64(UNet3(rng.split("net"), channels=(2, 2, 2)))
    probe = rng.normal(size=(1, 1, 8, 8))
    x = _jitter(rng.uniform(0, 1, size=(1, 1, 8, 8)), rng)
    err = check_op(lambda a: net(a) * probe, [x])
    assert err < 1e-3


def test_sum_gradient_is_ones_and_scalar_check():
    w = Tensor(np.zeros((3, 4)), requires_grad=True)
    T.tsum(w).backward()
    assert np.array_equal(w.grad, np.ones((3, 4)))
    with pytest.raises(UsageError):
        (w * 2.0).backward()


def test_unreachable_parameters_get_zero_gradient():
    a = Tensor(np.ones(3), requires_grad=True)
    b = Tensor(np.ones(2), requires_grad=True)
    T.tsum(a * 3.0).backward(params=[a, b])
    assert np.array_equal(b.grad, np.zeros(2))


def test_backward_is_bit_reproducible():
    def grads():
        net = UNet3(Rng(9), channels=(4, 4, 4))
        x = Rng(10).uniform(size=(2, 1, 16, 16)).astype(np.float32)
        T.tsum(T.square(net(x))).backward()
        return [p.grad.tobytes() for p in net.parameters()]

    assert grads() == grads()


def test_forward_examples():
    x = Rng(1).uniform(size=(1, 1, 6, 7))
    dirac = np.zeros((1, 1, 3, 3))
    dirac[0, 0, 1, 1] = 1.0
    assert np.allclose(T.conv2d(Tensor(x), Tensor(dirac)).data[0, 0], x[0, 0, 1:-1, 1:-1])
    assert np.allclose(T.softmax(Tensor(np.full(7, 0.3))).data, 1 / 7)
    img = Rng(2).uniform(size=(2, 8, 8))
    base = T.dft2_magnitude(Tensor(img)).data
    assert np.abs(base - T.dft2_magnitude(Tensor(np.roll(img, 3, axis=-1))).data).max() < 1e-5
    assert np.abs(base - T.dft2_magnitude(Tensor(np.roll(img, 5, axis=-2))).data).max() < 1e-5


def test_shape_errors_name_both_shapes():
    with pytest.raises(UsageError, match=r"\(2, 3\).*\(4, 5\)"):
        T.matmul(Tensor(np.zeros((2, 3))), Tensor(np.zeros((4, 5))))
    with pytest.raises(UsageError, match=r"\(2, 3\).*\(2, 4\)"):
        T.add(Tensor(np.zeros((2, 3))), Tensor(np.zeros((2, 4))))
    with pytest.raises(UsageError):
        T.conv2d(Tensor(np.zeros((1, 2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


@pytest.mark.parametrize("side", [8, 16, 24, 40])
def test_unet_preserves_spatial_shape(side):
    net = UNet3(Rng(0), channels=(2, 3, 4), out_channels=2)
    assert net(np.zeros((3, side, side), np.float32)).shape == (3, 2, side, side)
    with pytest.raises(UsageError):
        net(np.zeros((12, 12), np.float32))


def test_encoder_descriptor_is_unit_norm_and_shift_invariant():
    enc = ScEncoder(Rng(4), rings=16, sectors=32, keep=(8, 8), dim=32)
    sc = Rng(5).uniform(size=(16, 32)).astype(np.float32)
    d = enc(sc).data[0]
    assert d.shape == (32,) and abs(np.linalg.norm(d) - 1) < 1e-5
    assert np.abs(enc(np.roll(sc, 7, axis=1)).data[0] - d).max() < 1e-4


def test_sgd_step_examples():
    p = [np.array([1.0, 2.0])]
    g = [np.array([0.5, -1.0])]
    same, _ = sgd_step(p, g, lr=0.0, momentum=0.9)
    assert np.array_equal(same[0], p[0])
    plain, _ = sgd_step(p, g, lr=0.1, momentum=0.0)
    assert np.allclose(plain[0], p[0] - 0.1 * g[0])
    w, v = [np.array(0.0)], None
    for _ in range(200):
        w, v = sgd_step(w, [2 * (w[0] - 3.0)], lr=0.1, momentum=0.0, velocity=v)
    assert abs(float(w[0]) - 3.0) < 1e-3
    with pytest.raises(UsageError):
        sgd_step([np.zeros(2)], [np.zeros(3)], 0.1)


def test_sgd_matches_functional_form():
    lin = Linear(3, 2, Rng(0))
    opt = SGD(lin.parameters(), lr=0.05, momentum=0.9)
    params = [p.data.astype(np.float64) for p in lin.parameters()]
    vel = None
    x = Rng(1).uniform(size=(4, 3)).astype(np.float32)
    for _ in range(3):
        opt.zero_grad()
        T.tsum(T.square(lin(x))).backward()
        grads = [p.grad for p in lin.parameters()]
        params, vel = sgd_step(params, grads, 0.05, 0.9, vel)
        opt.step()
    for a, b in zip(params, lin.parameters()):
        assert np.allclose(a, b.data, atol=1e-5)


def test_training_is_deterministic_golden_checksum():
    def run():
        net = UNet3(Rng(21), channels=(2, 4, 4))
        opt = SGD(net.parameters(), lr=0.01, momentum=0.9)
        x = Rng(22).uniform(size=(2, 1, 16, 16)).astype(np.float32)
        for _ in range(5):
            opt.zero_grad()
            T.mean(T.square(net(x) - 0.5)).backward()
            opt.step()
        return net.checksum()

    first = run()
    assert first == run()
    assert first != UNet3(Rng(21), channels=(2, 4, 4)).checksum()


def test_state_dict_round_trip():
    a, b = UNet3(Rng(1)), UNet3(Rng(2))
    assert a.checksum() != b.checksum()
    b.load_state_dict(a.state_dict())
    assert a.checksum() == b.checksum()
    with pytest.raises(UsageError):
        b.load_state_dict({"nope": np.zeros(1)})
