"""Parameter containers, initialisation and the small layer set the network needs."""

import numpy as np

from . import autodiff as ad
from .autodiff import Parameter


def trunc_normal(rng, shape, std=0.02):
    """Normal(0, std) truncated to two standard deviations by resampling."""
    out = rng.standard_normal(shape)
    bad = np.abs(out) > 2.0
    while bad.any():
        out[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(out) > 2.0
    return out * std


class Module:
    """Walks its attributes for parameters and sub-modules in definition order."""

    def named_parameters(self, prefix=""):
        for key, value in vars(self).items():
            yield from _walk(value, f"{prefix}{key}")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self):
        return sum(p.size for p in self.parameters() if p.trainable)

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)


def _walk(value, name):
    if isinstance(value, Parameter):
        yield name, value
    elif isinstance(value, Module):
        yield from value.named_parameters(name + ".")
    elif isinstance(value, (list, tuple)):
        for i, v in enumerate(value):
            yield from _walk(v, f"{name}.{i}")
    elif isinstance(value, dict):
        for k, v in value.items():
            yield from _walk(v, f"{name}.{k}")


class Linear(Module):
    """``x @ weight + bias`` with weight (d_in, d_out), initialised with fan-in scaling std 1/sqrt(d_in)."""

    def __init__(self, rng, d_in, d_out, bias=True, group="default"):
        self.weight = Parameter(trunc_normal(rng, (d_in, d_out), std=1.0 / np.sqrt(d_in)), group=group)
        self.bias = Parameter(np.zeros(d_out), group=group) if bias else None
        self.d_in, self.d_out = d_in, d_out

    def forward(self, x):
        y = ad.matmul(x, self.weight)
        return y + self.bias if self.bias is not None else y

    def zero_init(self):
        self.weight.data[...] = 0.0
        if self.bias is not None:
            self.bias.data[...] = 0.0


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, group="default"):
        self.gamma = Parameter(np.ones(dim), group=group)
        self.beta = Parameter(np.zeros(dim), group=group)
        self.eps = eps

    def forward(self, x):
        return ad.layer_norm(x, self.gamma, self.beta, self.eps)


class Conv2d(Module):
    """Cross-correlation layer over (N, C, H, W) tensors."""

    def __init__(self, rng, c_in, c_out, k, stride=1, padding=None, groups=1, group="default"):
        self.weight = Parameter(trunc_normal(rng, (c_out, c_in // groups, k, k)), group=group)
        self.bias = Parameter(np.zeros(c_out), group=group)
        self.stride = stride
        self.padding = k // 2 if padding is None else padding
        self.groups = groups

    def forward(self, x):
        return ad.conv2d(x, self.weight, self.bias, self.stride, self.padding, self.groups)

    def zero_init(self):
        self.weight.data[...] = 0.0
        self.bias.data[...] = 0.0


def finalize_names(module):
    """Stamp each parameter with its dotted path (used by checkpoints and error messages)."""
    for name, p in module.named_parameters():
        p.name = name
    return module
