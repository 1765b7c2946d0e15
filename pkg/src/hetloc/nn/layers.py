"""Parameter containers and the two networks.

``UNet3`` extracts dense embeddings for pose tracking; ``ScEncoder`` maps a
Scan Context matrix to a unit-norm, sector-rotation-invariant descriptor.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

from ..core import Rng
from ..errors import UsageError
from . import tensor as T
from .tensor import Tensor


class Module:
    """Anything with named parameters. Children are discovered from attributes."""

    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor) and val.requires_grad:
                yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(prefix + name + ".")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]):
        own = dict(self.named_parameters())
        if set(own) != set(state):
            raise UsageError(f"state mismatch: missing {set(own) - set(state)}, "
                             f"unexpected {set(state) - set(own)}")
        for k, p in own.items():
            if p.shape != tuple(state[k].shape):
                raise UsageError(f"{k}: shape {state[k].shape} != {p.shape}")
            p.data = np.array(state[k], dtype=p.data.dtype)

    def zero_grad(self):
        for p in self.parameters():
            p.grad = None

    def checksum(self) -> str:
        h = hashlib.sha256()
        for k, v in sorted(self.named_parameters()):
            h.update(k.encode())
            h.update(np.ascontiguousarray(v.data, dtype="<f4").tobytes())
        return h.hexdigest()


def _uniform(rng: Rng, shape, fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape).astype(np.float32), requires_grad=True)


class Conv2d(Module):
    def __init__(self, cin: int, cout: int, k: int, rng: Rng, circular_w: bool = False):
        self.w = _uniform(rng, (cout, cin, k, k), cin * k * k)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)
        self.pad = k // 2
        self.circular_w = circular_w

    def __call__(self, x: Tensor) -> Tensor:
        return T.conv2d(x, self.w, self.b, self.pad, self.circular_w)


class Linear(Module):
    def __init__(self, cin: int, cout: int, rng: Rng):
        self.w = _uniform(rng, (cout, cin), cin)
        self.b = Tensor(np.zeros(cout, dtype=np.float32), requires_grad=True)

    def __call__(self, x: Tensor) -> Tensor:
        return T.linear(x, self.w, self.b)


class UNet3(Module):
    """Three down/up stages with skip connections; output keeps the input's size."""

    def __init__(self, rng: Rng, channels=(8, 16, 32), out_channels: int = 1, in_channels: int = 1):
        c1, c2, c3 = channels
        self.channels = tuple(channels)
        self.out_channels = out_channels
        self.in_channels = in_channels
        self.enc1 = Conv2d(in_channels, c1, 3, rng.split("enc1"))
        self.enc2 = Conv2d(c1, c2, 3, rng.split("enc2"))
        self.enc3 = Conv2d(c2, c3, 3, rng.split("enc3"))
        self.bottom = Conv2d(c3, c3, 3, rng.split("bottom"))
        self.dec3 = Conv2d(2 * c3, c2, 3, rng.split("dec3"))
        self.dec2 = Conv2d(2 * c2, c1, 3, rng.split("dec2"))
        self.dec1 = Conv2d(2 * c1, c1, 3, rng.split("dec1"))
        self.head = Conv2d(c1, out_channels, 1, rng.split("head"))

    def config(self) -> dict:
        return {"kind": "unet3", "channels": list(self.channels),
                "out_channels": self.out_channels, "in_channels": self.in_channels}

    def __call__(self, x) -> Tensor:
        x = T.as_tensor(x)
        if x.ndim == 2:
            x = x.reshape(1, 1, *x.shape)
        elif x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        h, w = x.shape[-2:]
        if h % 8 or w % 8:
            raise UsageError(f"UNet3 needs sides divisible by 8, got {h}x{w}")
        e1 = T.relu(self.enc1(x))
        e2 = T.relu(self.enc2(T.maxpool2x2(e1)))
        e3 = T.relu(self.enc3(T.maxpool2x2(e2)))
        b = T.relu(self.bottom(T.maxpool2x2(e3)))
        d3 = T.relu(self.dec3(T.concat([T.upsample2x(b), e3], axis=1)))
        d2 = T.relu(self.dec2(T.concat([T.upsample2x(d3), e2], axis=1)))
        d1 = T.relu(self.dec1(T.concat([T.upsample2x(d2), e1], axis=1)))
        return self.head(d1)


class ScEncoder(Module):
    """Conv stack (circular along sectors) -> |DFT2| -> low-frequency block -> linear -> unit norm.

    Circular padding makes the conv features shift-equivariant along the
    sector axis, and the DFT magnitude removes the shift, so integer-sector
    rotations of the input leave the descriptor unchanged.
    """

    def __init__(self, rng: Rng, rings: int = 32, sectors: int = 64, channels=(8, 8),
                 keep: tuple[int, int] = (16, 16), dim: int = 128):
        self.rings, self.sectors = rings, sectors
        self.channels = tuple(channels)
        self.keep = (min(keep[0], rings), min(keep[1], sectors))
        self.dim = dim
        convs = []
        cin = 1
        for i, c in enumerate(channels):
            convs.append(Conv2d(cin, c, 3, rng.split(f"conv{i}"), circular_w=True))
            cin = c
        for i, cv in enumerate(convs):
            setattr(self, f"conv{i}", cv)
        self._n_conv = len(convs)
        self.proj = Linear(cin * self.keep[0] * self.keep[1], dim, rng.split("proj"))

    def config(self) -> dict:
        return {"kind": "sc_encoder", "rings": self.rings, "sectors": self.sectors,
                "channels": list(self.channels), "keep": list(self.keep), "dim": self.dim}

    def spectra(self, sc) -> Tensor:
        """(N, C, rings, sectors) conv features before the DFT."""
        x = T.as_tensor(sc)
        if x.ndim == 2:
            x = x.reshape(1, 1, *x.shape)
        elif x.ndim == 3:
            x = x.reshape(x.shape[0], 1, *x.shape[1:])
        if x.shape[-2:] != (self.rings, self.sectors):
            raise UsageError(
                f"encoder expects {self.rings}x{self.sectors} input, got {x.shape[-2]}x{x.shape[-1]}"
            )
        for i in range(self._n_conv):
            x = T.relu(getattr(self, f"conv{i}")(x))
        return x

    def __call__(self, sc) -> Tensor:
        f = self.spectra(sc)
        mag = T.dft2_magnitude(f)
        kr, ks = self.keep
        low = mag[:, :, :kr, :ks]
        flat = low.reshape(low.shape[0], -1)
        return T.l2_normalize(self.proj(flat), axis=-1)


class SGD:
    """Momentum SGD: ``v <- momentum * v + g``; ``p <- p - lr * v``."""

    def __init__(self, params, lr: float, momentum: float = 0.0):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            v *= self.momentum
            v += p.grad
            p.data = (p.data - self.lr * v).astype(p.data.dtype)

    def zero_grad(self):
        for p in self.params:
            p.grad = None


def sgd_step(params, grads, lr: float, momentum: float = 0.0, velocity=None):
    """Functional form. Returns ``(new_params, new_velocity)`` as numpy arrays."""
    if velocity is None:
        velocity = [np.zeros_like(np.asarray(p)) for p in params]
    new_p, new_v = [], []
    for p, g, v in zip(params, grads, velocity):
        p, g = np.asarray(p), np.asarray(g)
        if p.shape != g.shape:
            raise UsageError(f"sgd_step: param {p.shape} vs grad {g.shape}")
        v = momentum * np.asarray(v) + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v
