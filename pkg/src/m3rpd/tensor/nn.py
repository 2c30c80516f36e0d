"""Parameter creation and small layer helpers."""
import zlib

import numpy as np

from .tensor import Tensor, conv2d, dense, layer_norm, relu


def param_rng(seed, name):
    """Independent generator for one named parameter.

    Keyed on the name so that two models built from the same seed agree on
    every parameter they have in common, whatever else they contain.
    """
    return np.random.default_rng([int(seed), zlib.crc32(name.encode("utf-8"))])


def he_uniform(seed, name, shape, fan_in, dtype=np.float32):
    limit = np.sqrt(6.0 / fan_in)
    data = param_rng(seed, name).uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def glorot_uniform(seed, name, shape, fan_in, fan_out, dtype=np.float32):
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    data = param_rng(seed, name).uniform(-limit, limit, size=shape).astype(dtype)
    return Tensor(data, requires_grad=True, name=name)


def zeros(name, shape, dtype=np.float32):
    return Tensor(np.zeros(shape, dtype=dtype), requires_grad=True, name=name)


def ones(name, shape, dtype=np.float32):
    return Tensor(np.ones(shape, dtype=dtype), requires_grad=True, name=name)


class Module:
    """Anything holding named parameter tensors as attributes or child modules."""

    def named_parameters(self, prefix=""):
        out = []
        for key, val in vars(self).items():
            if key.startswith("_"):
                continue
            full = f"{prefix}{key}"
            if isinstance(val, Tensor) and val.requires_grad:
                out.append((full, val))
            elif isinstance(val, Module):
                out.extend(val.named_parameters(full + "."))
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        out.extend(item.named_parameters(f"{full}.{i}."))
        return out

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def num_parameters(self):
        return int(sum(p.data.size for p in self.parameters()))

    def astype(self, dtype):
        for p in self.parameters():
            p.data = p.data.astype(dtype)
        return self


class Conv(Module):
    def __init__(self, seed, name, k, cin, cout, padding=None, dtype=np.float32):
        self.w = he_uniform(seed, f"{name}.w", (k, k, cin, cout), k * k * cin, dtype)
        self.b = zeros(f"{name}.b", (cout,), dtype)
        self._pad = k // 2 if padding is None else padding

    def __call__(self, x):
        return conv2d(x, self.w, self.b, stride=1, padding=self._pad)


class Dense(Module):
    def __init__(self, seed, name, din, dout, dtype=np.float32):
        self.w = he_uniform(seed, f"{name}.w", (din, dout), din, dtype)
        self.b = zeros(f"{name}.b", (dout,), dtype)

    def __call__(self, x):
        return dense(x, self.w, self.b)


class LayerNorm(Module):
    """Per-position normalization over channels with a learned per-channel scale and shift."""

    def __init__(self, name, channels, dtype=np.float32):
        self.g = ones(f"{name}.g", (channels,), dtype)
        self.b = zeros(f"{name}.b", (channels,), dtype)

    def __call__(self, x):
        return layer_norm(x, self.g, self.b)


class Head(Module):
    """One hidden relu layer followed by a single-logit output."""

    def __init__(self, seed, name, din, width=64, dtype=np.float32):
        self.hidden = Dense(seed, f"{name}.hidden", din, width, dtype)
        self.out = Dense(seed, f"{name}.out", width, 1, dtype)

    def __call__(self, x):
        return self.out(relu(self.hidden(x)))

    def zero_(self):
        for p in self.parameters():
            p.data[...] = 0
