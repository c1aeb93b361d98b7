"""Sharpened cosine similarity layers and magnitude-based pooling.

The unit-level operator compares a kernel k against an input window x by

    sign(k . x) * ( |k . x| / ((||k|| + q) (||x|| + q)) ) ** p

where the exponent p > 0 sharpens the similarity (p = 1 is the plain,
stabilized cosine) and q > 0 keeps the denominator away from zero for
near-empty windows.  The layer learns one p per unit and a single q per
layer; kernels are compared against every stride-placed window of the
input ('valid' placement -- padding is the patch extractor's job).

MaxAbsPool keeps the signed entry of largest magnitude in each window, so
strong negative responses survive pooling.
"""

import math
from dataclasses import dataclass

import numpy as np

from .autograd import (
    Tensor,
    _check_binary,
    _lift,
    _unbroadcast,
    add,
    exp,
    extract_windows,
    l2_norm,
    log,
    matmul,
    mul,
    power,
    reshape,
    transpose,
)
from .errors import ContractError, DomainError, ShapeError


# ---- scalar reference operators -----------------------------------------


def cosine_similarity(k, x):
    """Cosine of the angle between two nonzero vectors, in [-1, 1]."""
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    nk = math.sqrt(float(k @ k))
    nx = math.sqrt(float(x @ x))
    if nk == 0.0 or nx == 0.0:
        raise DomainError("cosine_similarity is undefined for zero vectors")
    return float(k @ x) / (nk * nx)


def scs_unit(k, x, p, q):
    """Sharpened, stabilized cosine similarity of one kernel/window pair.

    At p=1, q=0 this reduces exactly to cosine_similarity.  The magnitude
    is bounded by 1 whenever p >= 1 and q >= 0.
    """
    if p <= 0:
        raise ContractError(f"sharpening exponent must be positive, got {p}")
    if q < 0:
        raise ContractError(f"stabilizer must be nonnegative, got {q}")
    k = np.asarray(k, dtype=np.float64).reshape(-1)
    x = np.asarray(x, dtype=np.float64).reshape(-1)
    nk = math.sqrt(float(k @ k))
    nx = math.sqrt(float(x @ x))
    if q == 0.0 and (nk == 0.0 or nx == 0.0):
        raise DomainError("q=0 requires both vectors to be nonzero")
    dot = float(k @ x)
    base = abs(dot) / ((nk + q) * (nx + q))
    return math.copysign(base ** p, dot) if dot != 0.0 else 0.0


# ---- autodiff primitives specific to this layer family ------------------


def signed_pow(s, p):
    """sign(s) * |s| ** p with gradients for both operands.

    Derivatives follow the identity sign(s) |s|**p = s |s|**(p-1):
    d/ds = p |s|**(p-1) and d/dp = sign(s) |s|**p ln|s|.  At s = 0 the
    p-gradient is 0 (the limit) and the s-gradient is 0 whenever the true
    one-sided derivative is unbounded (p < 1).
    """
    s = _lift(s)
    p = _lift(p, like=s)
    _check_binary(s, p, "signed_pow")
    a = np.abs(s.data)
    mag = a ** p.data
    out = Tensor(np.sign(s.data) * mag, _prev=(s, p), _op="signed_pow")

    def _bw():
        with np.errstate(divide="ignore", invalid="ignore"):
            ds = p.data * a ** (p.data - 1.0)
        ds = np.where(np.isfinite(ds), ds, 0.0)
        safe = np.where(a > 0, a, 1.0)
        dp = np.where(a > 0, out.data * np.log(safe), 0.0)
        s.grad += _unbroadcast(out.grad * ds, s.data.shape)
        p.grad += _unbroadcast(out.grad * dp, p.data.shape)

    out._backward = _bw
    return out


def softplus(x):
    """log(1 + e^x) built from registered ops (inputs stay moderate here)."""
    return log(add(exp(x), 1.0))


def inverse_softplus(y):
    if y <= 0:
        raise ContractError("inverse_softplus needs a positive argument")
    return math.log(math.expm1(y))


# ---- the layer -----------------------------------------------------------


class ScsLayer:
    """A bank of sharpened-cosine units slid over a channels-last image.

    Parameters are the kernels [units, kh, kw, cin], a per-unit log
    exponent (p = exp(p_log), so p stays positive), and a raw stabilizer
    (q = softplus(q_raw) + q_floor, so q stays above q_floor).  No bias,
    no activation: the similarity itself is the feature.
    """

    def __init__(self, units, window, in_channels, stride=(1, 1),
                 q_floor=1e-6, q_init=0.1, seed=0, dtype=np.float64):
        kh, kw = (int(w) for w in window)
        if units < 1 or kh < 1 or kw < 1 or in_channels < 1:
            raise ContractError("units, window and channel counts must be >= 1")
        if q_floor <= 0:
            raise ContractError("q_floor must be strictly positive")
        if q_init <= q_floor:
            raise ContractError("q_init must exceed q_floor")
        sh, sw = (int(s) for s in stride)
        if sh < 1 or sw < 1:
            raise ContractError("stride entries must be >= 1")
        self.units = int(units)
        self.window = (kh, kw)
        self.in_channels = int(in_channels)
        self.stride = (sh, sw)
        self.q_floor = float(q_floor)

        rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0], dtype=np.uint64)))
        a = math.sqrt(1.0 / (kh * kw * in_channels))
        self.kernel = Tensor(
            rng.uniform(-a, a, (units, kh, kw, in_channels)).astype(dtype),
            requires_grad=True)
        # p_log = 0 -> p = 1: every unit starts as a plain cosine
        self.p_log = Tensor(np.zeros(units, dtype=dtype), requires_grad=True)
        self.q_raw = Tensor(
            np.full(1, inverse_softplus(q_init - q_floor), dtype=dtype),
            requires_grad=True)

    @property
    def p(self):
        """Current per-unit exponents."""
        return np.exp(self.p_log.data)

    @property
    def q(self):
        """Current stabilizer value."""
        return float(np.log1p(np.exp(self.q_raw.data[0]))) + self.q_floor

    def parameters(self):
        return [("kernel", self.kernel), ("p_log", self.p_log),
                ("q_raw", self.q_raw)]

    def output_shape(self, spatial):
        h, w = spatial
        kh, kw = self.window
        sh, sw = self.stride
        if h < kh or w < kw:
            raise ShapeError(f"window {self.window} exceeds input spatial "
                             f"extent {(h, w)}")
        return ((h - kh) // sh + 1, (w - kw) // sw + 1, self.units)

    def forward(self, x):
        """Apply every unit at every window position.

        x: Tensor [H, W, Cin] or [N, H, W, Cin]; returns [.., H', W', units]
        with H' = floor((H - kh) / sh) + 1 and likewise for W'.
        """
        batched = x.data.ndim == 4
        if not batched:
            if x.data.ndim != 3:
                raise ShapeError(f"expected rank 3 or 4 input, got {x.shape}")
            x = reshape(x, (1,) + x.data.shape)
        if x.data.shape[-1] != self.in_channels:
            raise ShapeError(f"input has {x.data.shape[-1]} channels, layer "
                             f"expects {self.in_channels}")
        n, h, w, _ = x.data.shape
        oh, ow, u = self.output_shape((h, w))
        d = self.window[0] * self.window[1] * self.in_channels
        m = n * oh * ow
        dtype = x.data.dtype

        cols = reshape(extract_windows(x, self.window, self.stride), (m, d))
        kern = reshape(self.kernel, (u, d))
        dots = matmul(cols, transpose(kern))                      # [M, U]

        q = add(softplus(self.q_raw), self.q_floor)               # [1]
        kq = add(reshape(l2_norm(kern, axis=1), (1, u)), q)       # [1, U]
        xq = add(reshape(l2_norm(cols, axis=1), (m, 1)), q)       # [M, 1]
        ones_col = Tensor(np.ones((m, 1), dtype=dtype))
        ones_row = Tensor(np.ones((1, u), dtype=dtype))
        denom = mul(matmul(ones_col, kq), matmul(xq, ones_row))   # [M, U]

        s = mul(dots, power(denom, -1.0))
        p = matmul(ones_col, reshape(exp(self.p_log), (1, u)))    # [M, U]
        out = reshape(signed_pow(s, p), (n, oh, ow, u))
        return out if batched else reshape(out, (oh, ow, u))


# ---- pooling -------------------------------------------------------------


@dataclass(frozen=True)
class PoolSpec:
    window: tuple
    stride: tuple
    mode: str = "maxabs"

    def __post_init__(self):
        if self.mode not in ("maxabs", "max"):
            raise ContractError(f"unknown pool mode {self.mode!r}")
        if any(int(v) < 1 for v in self.window) or any(int(v) < 1 for v in self.stride):
            raise ContractError("pool window and stride entries must be >= 1")


def pool(x, spec):
    """Window pooling over the two spatial axes of [.., H, W, C].

    mode 'maxabs' keeps the signed value of largest magnitude, mode 'max'
    the largest signed value.  Ties go to the lowest flat index of the
    window (row-major), so e.g. a [2, -2] window pools to +2 under maxabs.
    Backward routes the upstream gradient one-hot to the chosen element.
    """
    x = _lift(x)
    batched = x.data.ndim == 4
    if not batched:
        if x.data.ndim != 3:
            raise ShapeError(f"expected rank 3 or 4 input, got {x.data.shape}")
        out3 = pool(reshape(x, (1,) + x.data.shape), spec)
        return reshape(out3, out3.data.shape[1:])

    ph, pw = (int(v) for v in spec.window)
    sh, sw = (int(v) for v in spec.stride)
    n, h, w, c = x.data.shape
    if h < ph or w < pw:
        raise ShapeError(f"pool window {(ph, pw)} exceeds input spatial "
                         f"extent {(h, w)}")
    oh = (h - ph) // sh + 1
    ow = (w - pw) // sw + 1

    view = np.lib.stride_tricks.sliding_window_view(x.data, (ph, pw), axis=(1, 2))
    vals = view[:, ::sh, ::sw].reshape(n, oh, ow, c, ph * pw)
    key = np.abs(vals) if spec.mode == "maxabs" else vals
    choice = np.argmax(key, axis=-1)                              # first == lowest index
    picked = np.take_along_axis(vals, choice[..., None], axis=-1)[..., 0]
    out = Tensor(np.ascontiguousarray(picked), _prev=(x,), _op=f"pool_{spec.mode}")

    # flat source index per window slot, within one [H, W, C] item
    idx = np.arange(h * w * c).reshape(h, w, c)
    iview = np.lib.stride_tricks.sliding_window_view(idx, (ph, pw), axis=(0, 1))
    src = np.ascontiguousarray(iview[::sh, ::sw]).reshape(oh, ow, c, ph * pw)

    def _bw():
        per_item = h * w * c
        tgt = x.grad.reshape(n, per_item)
        g = out.grad.reshape(n, -1)
        flat_src = src.reshape(-1, ph * pw)
        for i in range(n):
            sel = np.take_along_axis(flat_src, choice[i].reshape(-1, 1), axis=1)[:, 0]
            tgt[i] += np.bincount(sel, weights=g[i], minlength=per_item)

    out._backward = _bw
    return out


def maxabspool(x, spec):
    if spec.mode != "maxabs":
        raise ContractError("maxabspool requires a spec with mode 'maxabs'")
    return pool(x, spec)


def maxpool(x, spec):
    if spec.mode != "max":
        raise ContractError("maxpool requires a spec with mode 'max'")
    return pool(x, spec)
