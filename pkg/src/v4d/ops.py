"""Forward and backward numerical kernels for every layer type.

Two interfaces are provided:

* Public functional ops (``conv3d``, ``conv4d_full``, ``conv4d_factorized``,
  ``channel_stack``, ``maxpool``, ``global_avg_pool``, ``dense_affine``,
  ``relu``) take and return channels-last arrays, matching the on-disk and
  dataset conventions.
* Layer classes used by the network builder keep activations in the
  channels-first rank-6 layout ``(N, C, T, D, H, W)`` that the compiled
  kernels prefer; 3D-mode networks simply run with ``T == 1``. Each layer
  caches its forward context and exposes ``backward(dy) -> (dx, grads)``
  with exact analytic gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import kernels


class OpError(ValueError):
    """An operation's preconditions were violated."""


class ConvMode(str, Enum):
    """Temporal-processing strategy for volumetric sequences."""

    MODE_3D = "3d"      # last volume only, 3D convolutions
    MODE_3DC = "3d-c"   # frames stacked into input channels, 3D convolutions
    MODE_F4D = "f-4d"   # factorized spatial+temporal 4D convolutions
    MODE_4D = "4d"      # full 4D spatio-temporal convolutions

    @classmethod
    def parse(cls, text: str) -> "ConvMode":
        t = text.strip().lower().replace("_", "-")
        for m in cls:
            if m.value == t:
                return m
        raise OpError(f"unknown conv mode {text!r} (have: {[m.value for m in cls]})")

    @property
    def temporal(self) -> bool:
        return self in (ConvMode.MODE_F4D, ConvMode.MODE_4D)


@dataclass
class ConvParams:
    """Convolution weights/bias plus stride and padding policy.

    ``weights`` has shape ``[kD,kH,kW,Cin,Cout]`` for 3D convolutions or
    ``[kT,kD,kH,kW,Cin,Cout]`` for the 4D modes; ``stride`` has one entry
    per kernel axis.
    """

    weights: np.ndarray
    bias: np.ndarray
    stride: tuple[int, ...] = (1, 1, 1)
    padding: str = "same"

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        self.stride = tuple(int(s) for s in self.stride)
        if self.weights.ndim not in (5, 6):
            raise OpError(f"kernel rank must be 5 or 6, got {self.weights.ndim}")
        if self.bias.ndim != 1 or self.bias.shape[0] != self.weights.shape[-1]:
            raise OpError("bias shape must be [Cout]")
        if len(self.stride) != self.weights.ndim - 2:
            raise OpError(
                f"stride needs {self.weights.ndim - 2} entries, got {len(self.stride)}"
            )
        if any(s < 1 for s in self.stride):
            raise OpError(f"stride entries must be >= 1, got {self.stride}")
        if self.padding not in ("same", "valid"):
            raise OpError(f"padding must be 'same' or 'valid', got {self.padding!r}")
        if self.padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise OpError(f"'same' padding requires odd kernel extents, got {self.kernel}")

    @property
    def kernel(self) -> tuple[int, ...]:
        return self.weights.shape[: self.weights.ndim - 2]


def out_extent(extent: int, kernel: int, stride: int, padding: str) -> int:
    if padding == "same":
        return -(-extent // stride)
    return (extent - kernel) // stride + 1


def pad_amounts(extent: int, kernel: int, stride: int, padding: str) -> tuple[int, int]:
    """Zero-pad amounts so the windowed extent matches ``out_extent``."""
    if padding == "valid":
        return (0, 0)
    total = max((out_extent(extent, kernel, stride, "same") - 1) * stride + kernel - extent, 0)
    before = total // 2
    return before, total - before


def _check_conv_geometry(extents, kernel, stride, padding):
    for e, k, s in zip(extents, kernel, stride):
        before, after = pad_amounts(e, k, s, padding)
        if e + before + after < k:
            raise OpError(f"kernel {kernel} larger than padded input {tuple(extents)}")


# ---------------------------------------------------------------------------
# channels-first core used by both the functional ops and the layer classes


def _conv_fwd_cf(xcf, weights, bias, stride4, padding):
    """xcf (N,C,T,D,H,W) -> (padded input, output) with bias added."""
    kt, kd, kh, kw = weights.shape[:4]
    if xcf.shape[1] != weights.shape[4]:
        raise OpError(
            f"channel mismatch: input has {xcf.shape[1]}, kernel expects {weights.shape[4]}"
        )
    extents = xcf.shape[2:]
    _check_conv_geometry(extents, (kt, kd, kh, kw), stride4, padding)
    pads = [pad_amounts(e, k, s, padding)
            for e, k, s in zip(extents, (kt, kd, kh, kw), stride4)]
    xp = np.ascontiguousarray(
        np.pad(xcf, [(0, 0), (0, 0)] + pads) if any(p != (0, 0) for p in pads) else xcf
    )
    y = kernels.conv_fwd(xp, weights, stride4)
    if bias is not None:
        y += bias[None, :, None, None, None, None]
    return xp, y


def _to_cf(x):
    """channels-last (N,[T,]D,H,W,C) -> channels-first rank-6 (N,C,T,D,H,W)."""
    if x.ndim == 5:
        x = x[:, None]
    return np.ascontiguousarray(np.moveaxis(x, 5, 1))


def _to_cl(ycf, squeeze_time):
    y = np.moveaxis(ycf, 1, 5)
    if squeeze_time:
        y = y[:, 0]
    return np.ascontiguousarray(y)


# ---------------------------------------------------------------------------
# public functional ops (channels-last)


def conv3d(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """3D convolution of ``x [N,D,H,W,Cin] -> [N,D',H',W',Cout]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 5:
        raise OpError(f"conv3d input must be rank 5, got {x.ndim}")
    if p.weights.ndim != 5:
        raise OpError("conv3d kernel must be rank 5 [kD,kH,kW,Cin,Cout]")
    w6 = p.weights[None]
    _, y = _conv_fwd_cf(_to_cf(x), w6, p.bias, (1, *p.stride), p.padding)
    return _to_cl(y, squeeze_time=True)


def conv4d_full(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Full 4D convolution of ``x [N,T,D,H,W,Cin] -> [N,T',D',H',W',Cout]``.

    Computed as the accumulation of 3D convolutions over time-shifted volume
    slices, one per temporal kernel tap, with the bias added once.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 6:
        raise OpError(f"conv4d input must be rank 6, got {x.ndim}")
    if p.weights.ndim != 6:
        raise OpError("conv4d kernel must be rank 6 [kT,kD,kH,kW,Cin,Cout]")
    if p.stride[0] > x.shape[1]:
        raise OpError(
            f"temporal stride {p.stride[0]} exceeds sequence length {x.shape[1]}"
        )
    _, y = _conv_fwd_cf(_to_cf(x), p.weights, p.bias, p.stride, p.padding)
    return _to_cl(y, squeeze_time=False)


def conv4d_factorized(x: np.ndarray, spatial: ConvParams, temporal: ConvParams) -> np.ndarray:
    """Factorized 4D convolution: spatial-only stage, then temporal-only stage."""
    if spatial.weights.ndim != 6 or spatial.weights.shape[0] != 1:
        raise OpError("spatial stage kernel must have shape [1,kD,kH,kW,Cin,Cmid]")
    if temporal.weights.ndim != 6 or temporal.weights.shape[1:4] != (1, 1, 1):
        raise OpError("temporal stage kernel must have shape [kT,1,1,1,Cmid,Cout]")
    return conv4d_full(conv4d_full(x, spatial), temporal)


def channel_stack(x: np.ndarray) -> np.ndarray:
    """Fold the time axis into channels: ``[N,T,D,H,W,C] -> [N,D,H,W,T*C]``.

    Output channel ``t*C + c`` holds frame ``t`` channel ``c``.
    """
    x = np.asarray(x)
    if x.ndim != 6:
        raise OpError(f"channel_stack input must be rank 6, got {x.ndim}")
    n, t, d, h, w, c = x.shape
    return np.ascontiguousarray(np.moveaxis(x, 1, 4).reshape(n, d, h, w, t * c))


def channel_unstack(y: np.ndarray, time_steps: int) -> np.ndarray:
    """Inverse of :func:`channel_stack`."""
    y = np.asarray(y)
    if y.ndim != 5 or y.shape[4] % time_steps:
        raise OpError("channel_unstack needs rank-5 input with channels divisible by T")
    n, d, h, w, tc = y.shape
    return np.ascontiguousarray(
        np.moveaxis(y.reshape(n, d, h, w, time_steps, tc // time_steps), 4, 1)
    )


def maxpool(x: np.ndarray, window, stride, padding: str = "valid") -> np.ndarray:
    """Max pooling over the middle axes of a channels-last tensor."""
    x = np.asarray(x, dtype=np.float64)
    naxes = x.ndim - 2
    window = tuple(int(v) for v in window)
    stride = tuple(int(v) for v in stride)
    if len(window) != naxes or len(stride) != naxes:
        raise OpError(f"window/stride must have {naxes} entries for rank {x.ndim}")
    if any(v < 1 for v in window) or any(v < 1 for v in stride):
        raise OpError("degenerate pooling window or stride")
    lift = 4 - naxes  # leading singleton spatial axes up to rank 6
    xcf = np.ascontiguousarray(np.moveaxis(x, x.ndim - 1, 1))
    xcf = xcf.reshape(xcf.shape[:2] + (1,) * lift + xcf.shape[2:])
    pool = MaxPool((1,) * lift + window, (1,) * lift + stride, padding)
    ycf = pool.forward(xcf)
    y = ycf.reshape(ycf.shape[:2] + ycf.shape[2 + lift:])
    return np.ascontiguousarray(np.moveaxis(y, 1, y.ndim - 1))


def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over all non-batch, non-channel axes: ``[N,...,C] -> [N,C]``."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim < 3:
        raise OpError(f"global_avg_pool input must be rank >= 3, got {x.ndim}")
    return x.mean(axis=tuple(range(1, x.ndim - 1)))


def dense_affine(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Affine map ``[N,F] @ [F,O] + [O]``."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.ndim != 2 or weights.ndim != 2 or x.shape[1] != weights.shape[0]:
        raise OpError(
            f"dense_affine dimension mismatch: x {x.shape}, weights {weights.shape}"
        )
    if bias.shape != (weights.shape[1],):
        raise OpError(f"bias shape {bias.shape} != ({weights.shape[1]},)")
    return x @ weights + bias


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


# ---------------------------------------------------------------------------
# layer classes (channels-first activations), used by v4d.model


def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    scale = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-scale, scale, size=shape)


class Layer:
    """Base layer: pure forward map with cached context for backward."""

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dy: np.ndarray, need_dx: bool = True):
        """Return ``(dx, grads)``; grads keyed by local parameter name."""
        raise NotImplementedError

    def param_items(self):
        return []

    def out_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        return tuple(in_shape)


class Conv(Layer):
    """Spatio-temporal convolution layer; 3D is the ``kT == 1`` case."""

    def __init__(self, kernel, cin, cout, stride=(1, 1, 1, 1), padding="same",
                 rng: np.random.Generator | None = None):
        kt, kd, kh, kw = kernel
        self.kernel = (kt, kd, kh, kw)
        self.cin, self.cout = int(cin), int(cout)
        self.stride = tuple(int(s) for s in stride)
        self.padding = padding
        if padding == "same" and any(k % 2 == 0 for k in self.kernel):
            raise OpError(f"'same' padding requires odd kernel extents, got {self.kernel}")
        taps = kt * kd * kh * kw
        if rng is None:
            self.w = np.zeros((kt, kd, kh, kw, cin, cout))
        else:
            self.w = glorot_uniform(rng, (kt, kd, kh, kw, cin, cout),
                                    taps * cin, taps * cout)
        self.b = np.zeros(cout)
        self._ctx = None

    def forward(self, x):
        if x.shape[1] != self.cin:
            raise OpError(f"expected {self.cin} input channels, got {x.shape[1]}")
        pads = [pad_amounts(e, k, s, self.padding)
                for e, k, s in zip(x.shape[2:], self.kernel, self.stride)]
        xp, y = _conv_fwd_cf(x, self.w, self.b, self.stride, self.padding)
        self._ctx = (xp, pads)
        return y

    def backward(self, dy, need_dx=True):
        xp, pads = self._ctx
        dy = np.ascontiguousarray(dy)
        db = dy.sum(axis=(0, 2, 3, 4, 5))
        dw = kernels.conv_wgrad(xp, dy, self.w.shape, self.stride)
        dx = None
        if need_dx:
            dx = kernels.conv_igrad(dy, self.w, xp.shape, pads, self.stride)
        return dx, {"w": dw, "b": db}

    def param_items(self):
        return [("w", "w"), ("b", "b")]

    def out_shape(self, in_shape):
        n, c = in_shape[:2]
        outs = tuple(out_extent(e, k, s, self.padding)
                     for e, k, s in zip(in_shape[2:], self.kernel, self.stride))
        return (n, self.cout) + outs


class ReLU(Layer):
    def forward(self, x):
        self._mask = x > 0  # gradient at exactly 0 is 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy, need_dx=True):
        return dy * self._mask, {}


class MaxPool(Layer):
    """Max pooling over the (T,D,H,W) axes; ties go to the lowest flat index."""

    def __init__(self, window, stride, padding="valid"):
        self.window = tuple(int(v) for v in window)
        self.stride = tuple(int(v) for v in stride)
        self.padding = padding
        if any(v < 1 for v in self.window) or any(v < 1 for v in self.stride):
            raise OpError("degenerate pooling window or stride")

    def forward(self, x):
        pads = [pad_amounts(e, k, s, self.padding)
                for e, k, s in zip(x.shape[2:], self.window, self.stride)]
        if any(e + b + a < k for e, k, (b, a) in zip(x.shape[2:], self.window, pads)):
            raise OpError(f"pooling window {self.window} larger than padded input")
        xp = np.pad(x, [(0, 0), (0, 0)] + pads, constant_values=-np.inf)
        view = sliding_window_view(xp, self.window, axis=(2, 3, 4, 5))
        view = view[:, :, ::self.stride[0], ::self.stride[1], ::self.stride[2], ::self.stride[3]]
        flat = view.reshape(view.shape[:6] + (-1,))
        self._arg = flat.argmax(axis=-1)
        y = np.take_along_axis(flat, self._arg[..., None], axis=-1)[..., 0]
        self._geom = (x.shape, xp.shape, pads)
        return y

    def backward(self, dy, need_dx=True):
        x_shape, xp_shape, pads = self._geom
        offs = np.unravel_index(self._arg, self.window)
        grid = np.indices(dy.shape)
        dxp = np.zeros(xp_shape)
        idx = (grid[0], grid[1]) + tuple(
            grid[2 + a] * self.stride[a] + offs[a] for a in range(4)
        )
        np.add.at(dxp, idx, dy)
        sl = [slice(None), slice(None)] + [
            slice(b, xp_shape[i + 2] - a) for i, (b, a) in enumerate(pads)
        ]
        return np.ascontiguousarray(dxp[tuple(sl)]), {}

    def out_shape(self, in_shape):
        outs = tuple(out_extent(e, k, s, self.padding)
                     for e, k, s in zip(in_shape[2:], self.window, self.stride))
        return tuple(in_shape[:2]) + outs


class GlobalAvgPool(Layer):
    """(N,C,T,D,H,W) -> (N,C) mean over all spatio-temporal positions."""

    def forward(self, x):
        self._shape = x.shape
        return x.mean(axis=(2, 3, 4, 5))

    def backward(self, dy, need_dx=True):
        n, c, t, d, h, w = self._shape
        scale = 1.0 / (t * d * h * w)
        dx = np.broadcast_to(dy[:, :, None, None, None, None] * scale, self._shape)
        return np.ascontiguousarray(dx), {}

    def out_shape(self, in_shape):
        return tuple(in_shape[:2])


class Affine(Layer):
    """Fully connected output layer (N,F) -> (N,O)."""

    def __init__(self, fin, fout, rng: np.random.Generator | None = None):
        self.fin, self.fout = int(fin), int(fout)
        if rng is None:
            self.w = np.zeros((fin, fout))
        else:
            self.w = glorot_uniform(rng, (fin, fout), fin, fout)
        self.b = np.zeros(fout)

    def forward(self, x):
        if x.ndim != 2 or x.shape[1] != self.fin:
            raise OpError(f"affine expects (N,{self.fin}), got {x.shape}")
        self._x = x
        return x @ self.w + self.b

    def backward(self, dy, need_dx=True):
        grads = {"w": self._x.T @ dy, "b": dy.sum(axis=0)}
        return dy @ self.w.T, grads

    def param_items(self):
        return [("w", "w"), ("b", "b")]

    def out_shape(self, in_shape):
        return (in_shape[0], self.fout)
