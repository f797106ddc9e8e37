"""U-Net generator and patch discriminator built on :mod:`bonesup.tensor`.

Parameter names are canonical and double as checkpoint entry names
(prefixed by the network's role, e.g. ``G.enc0.conv.weight``).

Generator layer list for ``depth`` d and base width b (``ch(i) = b * 2**min(i, 3)``):

* ``enc{i}`` for i in 0..d-1: conv 4x4/s2/p1 ``in -> ch(i)`` (no bias),
  norm (gamma, beta), leaky_relu(0.2); ``in`` is 1 for i=0 else ch(i-1).
* ``dec{i}`` for i in d-1..1: conv-transpose 4x4/s2/p1 ``in -> ch(i-1)``
  (no bias), norm, relu, then concat with ``enc{i-1}``'s output; ``in`` is
  ch(d-1) for the innermost level, else 2*ch(i).
* ``dec0``: conv-transpose 4x4/s2/p1 ``(2*ch(0) if d > 1 else ch(0)) -> 1``
  with bias, then tanh.

Discriminator (``levels`` L): ``conv0`` 4x4/s2 ``in -> b`` with bias and
leaky_relu; ``conv{i}`` for i in 1..L-1, 4x4/s2 ``-> ch(i)`` without bias,
followed by ``norm{i}`` and leaky_relu; ``out`` 3x3/s1/p1 ``-> 1`` with bias.
"""

from __future__ import annotations

from collections import OrderedDict

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    as_tensor,
    concat,
    conv2d,
    conv_transpose2d,
    leaky_relu,
    normalize,
    relu,
    tanh,
)

INIT_STD = 0.02
NORM_MODES = ("batch", "instance")


def _width(base, level):
    return base * 2 ** min(level, 3)


def _normal(rng, shape):
    return Tensor(rng.normal(0.0, INIT_STD, size=shape), requires_grad=True)


def _ones(n):
    return Tensor(np.ones(n), requires_grad=True)


def _zeros(n):
    return Tensor(np.zeros(n), requires_grad=True)


class Network:
    """Ordered collection of named parameter tensors plus a forward pass."""

    kind = "network"

    def __init__(self):
        self.params: "OrderedDict[str, Tensor]" = OrderedDict()

    def __call__(self, *args):
        return self.forward(*args)

    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def set_requires_grad(self, flag):
        for p in self.params.values():
            p.requires_grad = flag

    def config(self) -> dict:
        raise NotImplementedError

    def load_arrays(self, arrays):
        """Replace parameter values from a name -> array mapping (exact names and shapes)."""
        if set(arrays) != set(self.params):
            missing = set(self.params) - set(arrays)
            extra = set(arrays) - set(self.params)
            raise DimensionError(f"parameter names differ: missing={sorted(missing)} extra={sorted(extra)}")
        for name, p in self.params.items():
            arr = np.asarray(arrays[name], dtype=np.float32)
            if arr.shape != p.shape:
                raise DimensionError(f"{name}: shape {arr.shape} != {p.shape}")
            p.data = arr.copy()


class Generator(Network):
    kind = "generator"

    def __init__(self, depth, base_channels, norm_mode, seed, image_size=None):
        super().__init__()
        if depth < 1:
            raise ConfigError("generator depth must be >= 1")
        if base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
        if image_size is not None:
            check_image_size(image_size, depth)
        self.depth = depth
        self.base_channels = base_channels
        self.norm_mode = norm_mode
        self.image_size = image_size
        rng = np.random.default_rng(seed)
        p = self.params
        in_ch = 1
        for i in range(depth):
            out = _width(base_channels, i)
            p[f"enc{i}.conv.weight"] = _normal(rng, (out, in_ch, 4, 4))
            p[f"enc{i}.norm.gamma"] = _ones(out)
            p[f"enc{i}.norm.beta"] = _zeros(out)
            in_ch = out
        for i in range(depth - 1, 0, -1):
            out = _width(base_channels, i - 1)
            p[f"dec{i}.convt.weight"] = _normal(rng, (in_ch, out, 4, 4))
            p[f"dec{i}.norm.gamma"] = _ones(out)
            p[f"dec{i}.norm.beta"] = _zeros(out)
            in_ch = 2 * out
        p["dec0.convt.weight"] = _normal(rng, (in_ch, 1, 4, 4))
        p["dec0.convt.bias"] = _zeros(1)

    def config(self):
        return {"depth": self.depth, "base_channels": self.base_channels, "norm_mode": self.norm_mode}

    def forward(self, x):
        x = as_tensor(x)
        if x.ndim != 4 or x.shape[1] != 1:
            raise DimensionError(f"generator expects N x 1 x H x W input, got {x.shape}")
        h, w = x.shape[2], x.shape[3]
        if self.image_size is not None and (h, w) != (self.image_size, self.image_size):
            raise DimensionError(f"generator built for {self.image_size}px, got {h}x{w}")
        if h % 2**self.depth or w % 2**self.depth:
            raise DimensionError(f"image size {h}x{w} not divisible by 2^{self.depth}")
        p = self.params
        skips = []
        for i in range(self.depth):
            x = conv2d(x, p[f"enc{i}.conv.weight"], stride=2, padding=1)
            x = normalize(x, self.norm_mode, p[f"enc{i}.norm.gamma"], p[f"enc{i}.norm.beta"])
            x = leaky_relu(x, 0.2)
            skips.append(x)
        for i in range(self.depth - 1, 0, -1):
            x = conv_transpose2d(x, p[f"dec{i}.convt.weight"], stride=2, padding=1)
            x = normalize(x, self.norm_mode, p[f"dec{i}.norm.gamma"], p[f"dec{i}.norm.beta"])
            x = relu(x)
            x = concat([x, skips[i - 1]], axis=1)
        x = conv_transpose2d(x, p["dec0.convt.weight"], p["dec0.convt.bias"], stride=2, padding=1)
        return tanh(x)


class Discriminator(Network):
    kind = "discriminator"

    def __init__(self, levels, base_channels, conditional, seed, norm_mode="batch"):
        super().__init__()
        if levels < 1:
            raise ConfigError("discriminator levels must be >= 1")
        if base_channels < 1:
            raise ConfigError("base_channels must be >= 1")
        if norm_mode not in NORM_MODES:
            raise ConfigError(f"norm_mode must be one of {NORM_MODES}")
        self.levels = levels
        self.base_channels = base_channels
        self.conditional = bool(conditional)
        self.norm_mode = norm_mode
        self.in_channels = 2 if conditional else 1
        rng = np.random.default_rng(seed)
        p = self.params
        p["conv0.weight"] = _normal(rng, (base_channels, self.in_channels, 4, 4))
        p["conv0.bias"] = _zeros(base_channels)
        in_ch = base_channels
        for i in range(1, levels):
            out = _width(base_channels, i)
            p[f"conv{i}.weight"] = _normal(rng, (out, in_ch, 4, 4))
            p[f"norm{i}.gamma"] = _ones(out)
            p[f"norm{i}.beta"] = _zeros(out)
            in_ch = out
        p["out.weight"] = _normal(rng, (1, in_ch, 3, 3))
        p["out.bias"] = _zeros(1)

    @property
    def receptive_field(self):
        """Input pixels seen by one logit (per axis)."""
        rf, jump = 1, 1
        for _ in range(self.levels):
            rf += 3 * jump
            jump *= 2
        return rf + 2 * jump

    def config(self):
        return {
            "levels": self.levels,
            "base_channels": self.base_channels,
            "conditional": self.conditional,
            "norm_mode": self.norm_mode,
        }

    def forward(self, source, candidate=None):
        """Logit grid for ``candidate``; ``source`` is required iff conditional.

        ``forward(candidate)`` is accepted for unconditional discriminators.
        """
        if candidate is None:
            source, candidate = None, source
        candidate = as_tensor(candidate)
        if self.conditional:
            if source is None:
                raise DimensionError("conditional discriminator needs a source image")
            x = concat([as_tensor(source), candidate], axis=1)
        else:
            if source is not None:
                raise DimensionError("unconditional discriminator takes no source image")
            x = candidate
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise DimensionError(
                f"discriminator expects {self.in_channels} input channels, got shape {x.shape}"
            )
        p = self.params
        x = leaky_relu(conv2d(x, p["conv0.weight"], p["conv0.bias"], stride=2, padding=1), 0.2)
        for i in range(1, self.levels):
            x = conv2d(x, p[f"conv{i}.weight"], stride=2, padding=1)
            x = normalize(x, self.norm_mode, p[f"norm{i}.gamma"], p[f"norm{i}.beta"])
            x = leaky_relu(x, 0.2)
        return conv2d(x, p["out.weight"], p["out.bias"], stride=1, padding=1)


def check_image_size(image_size, depth):
    if image_size < 2**depth or image_size % 2**depth:
        raise ConfigError(f"image size {image_size} is not divisible by 2^{depth}")


def build_generator(depth=3, base_channels=16, norm_mode="batch", seed=0, image_size=None):
    return Generator(depth, base_channels, norm_mode, seed, image_size=image_size)


def build_discriminator(levels=3, base_channels=16, conditional=True, seed=0, norm_mode="batch"):
    return Discriminator(levels, base_channels, conditional, seed, norm_mode=norm_mode)


def forward_generator(params: Generator, image):
    image = as_tensor(image)
    lo, hi = float(image.data.min()), float(image.data.max())
    if lo < -1.0 - 1e-6 or hi > 1.0 + 1e-6:
        raise ValueError(f"generator input must lie in [-1, 1], got [{lo:.4g}, {hi:.4g}]")
    return params.forward(image)


def forward_discriminator(params: Discriminator, source, candidate):
    return params.forward(source, candidate)


def default_depth(image_size):
    """Depth 3 at 64 px, one more level per doubling (6 at 512)."""
    depth = 3
    size = 64
    while size < image_size:
        size *= 2
        depth += 1
    return depth
