"""Convolution layers for the baseline classifiers.

Plain cross-correlation in channels-last layout: each filter is dotted
with every stride-placed input window ('valid' placement, no flipping),
then a per-unit bias is added and an optional rectifier applied.  The
same class covers 2-d windows over [H, W, C] inputs and 3-d windows over
[H, W, D, C] inputs; the window length picks the variant.
"""

import math

import numpy as np

from .autograd import (
    Tensor,
    add,
    extract_windows,
    matmul,
    relu,
    reshape,
    transpose,
)
from .errors import ContractError, ShapeError


class ConvLayer:
    """A bank of affine filters slid over a channels-last image or volume."""

    def __init__(self, units, window, in_channels, stride=None,
                 activation="none", seed=0, dtype=np.float64):
        window = tuple(int(w) for w in window)
        if len(window) not in (2, 3):
            raise ContractError(f"window must have 2 or 3 entries, got {window}")
        if units < 1 or in_channels < 1 or any(w < 1 for w in window):
            raise ContractError("units, window and channel counts must be >= 1")
        if stride is None:
            stride = (1,) * len(window)
        stride = tuple(int(s) for s in stride)
        if len(stride) != len(window):
            raise ContractError("stride rank must match window rank")
        if any(s < 1 for s in stride):
            raise ContractError("stride entries must be >= 1")
        if activation not in ("none", "relu"):
            raise ContractError(f"unknown activation {activation!r}")
        self.units = int(units)
        self.window = window
        self.in_channels = int(in_channels)
        self.stride = stride
        self.activation = activation

        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 1], dtype=np.uint64)))
        a = math.sqrt(1.0 / (math.prod(window) * in_channels))
        self.kernel = Tensor(
            rng.uniform(-a, a, (units,) + window + (in_channels,)).astype(dtype),
            requires_grad=True)
        self.bias = Tensor(np.zeros(units, dtype=dtype), requires_grad=True)

    def parameters(self):
        return [("kernel", self.kernel), ("bias", self.bias)]

    def output_shape(self, spatial):
        if len(spatial) != len(self.window):
            raise ShapeError(f"expected {len(self.window)} spatial axes, "
                             f"got {len(spatial)}")
        out = []
        for ext, k, s in zip(spatial, self.window, self.stride):
            if ext < k:
                raise ShapeError(f"window {self.window} exceeds input spatial "
                                 f"extent {tuple(spatial)}")
            out.append((ext - k) // s + 1)
        return tuple(out) + (self.units,)

    def forward(self, x):
        rank = len(self.window) + 2
        batched = x.data.ndim == rank
        if not batched:
            if x.data.ndim != rank - 1:
                raise ShapeError(f"expected rank {rank - 1} or {rank} input, "
                                 f"got {x.shape}")
            x = reshape(x, (1,) + x.data.shape)
        if x.data.shape[-1] != self.in_channels:
            raise ShapeError(f"input has {x.data.shape[-1]} channels, layer "
                             f"expects {self.in_channels}")
        n = x.data.shape[0]
        out_spatial = self.output_shape(x.data.shape[1:-1])[:-1]
        u = self.units
        d = math.prod(self.window) * self.in_channels
        m = n * math.prod(out_spatial)
        dtype = x.data.dtype

        cols = reshape(extract_windows(x, self.window, self.stride), (m, d))
        kern = reshape(self.kernel, (u, d))
        out = matmul(cols, transpose(kern))                       # [M, U]
        ones_col = Tensor(np.ones((m, 1), dtype=dtype))
        out = add(out, matmul(ones_col, reshape(self.bias, (1, u))))
        if self.activation == "relu":
            out = relu(out)
        out = reshape(out, (n,) + out_spatial + (u,))
        return out if batched else reshape(out, out_spatial + (u,))
