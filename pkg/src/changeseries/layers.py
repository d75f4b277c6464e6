"""From-scratch differentiable layers on numpy arrays.

Conventions: feature maps are (B, C, H, W) float64, where B is whichever
axis plays the batch role (timestamps for the segmentation path, edge rows
for the change path).  Each layer caches what its backward pass needs on
self, so a layer instance handles one forward/backward pair at a time.
backward(dy) returns dx and accumulates parameter gradients in place.
"""

from __future__ import annotations

import math

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .rng import SeededRng


class Param:
    __slots__ = ("value", "grad")

    def __init__(self, value: np.ndarray):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad = np.zeros_like(self.value)


def kaiming_uniform(rng: SeededRng, shape: tuple, fan_in: int) -> np.ndarray:
    """U(-b, b) with b = sqrt(6 / fan_in)."""
    bound = math.sqrt(6.0 / fan_in)
    return (rng.uniform(shape) * 2.0 - 1.0) * bound


def _im2col(x: np.ndarray, kernel: int, pad: int) -> np.ndarray:
    """(B, C, H, W) -> (B*H*W, C*kernel^2) patch matrix (stride 1)."""
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (kernel, kernel), axis=(2, 3))
    b, c, h, w = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * kernel * kernel)


def _conv_raw(x: np.ndarray, weight: np.ndarray, pad: int) -> np.ndarray:
    """Stride-1 cross-correlation used by both forward and backward paths."""
    cout, cin, k, _ = weight.shape
    b, _, h, w = x.shape
    cols = _im2col(x, k, pad)
    y = cols @ weight.reshape(cout, cin * k * k).T
    return y.reshape(b, h, w, cout).transpose(0, 3, 1, 2)


class Conv2d:
    """Same-size convolution, kernel 1 or 3, stride 1, pad kernel//2."""

    def __init__(self, cin: int, cout: int, kernel: int, rng: SeededRng):
        if kernel not in (1, 3):
            raise ValueError("only 1x1 and 3x3 kernels are supported")
        self.kernel = kernel
        self.pad = kernel // 2
        fan_in = cin * kernel * kernel
        self.weight = Param(kaiming_uniform(rng, (cout, cin, kernel, kernel), fan_in))
        self.bias = Param(np.zeros(cout))
        self._cols = None
        self._xshape = None

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        cout = self.weight.value.shape[0]
        b, _, h, w = x.shape
        self._xshape = x.shape
        self._cols = _im2col(x, self.kernel, self.pad)
        y = self._cols @ self.weight.value.reshape(cout, -1).T + self.bias.value
        return y.reshape(b, h, w, cout).transpose(0, 3, 1, 2)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        cout = self.weight.value.shape[0]
        dyf = dy.transpose(0, 2, 3, 1).reshape(-1, cout)
        self.weight.grad += (dyf.T @ self._cols).reshape(self.weight.value.shape)
        self.bias.grad += dyf.sum(axis=0)
        ## dx is itself a stride-1 convolution with spatially flipped,
        ## channel-transposed weights
        wflip = self.weight.value[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        return _conv_raw(dy, np.ascontiguousarray(wflip), self.pad)


class TransposeConv2x2:
    """2x2 transpose convolution with stride 2: doubles H and W."""

    def __init__(self, cin: int, cout: int, rng: SeededRng):
        self.weight = Param(kaiming_uniform(rng, (cin, cout, 2, 2), cin * 4))
        self.bias = Param(np.zeros(cout))
        self._x = None

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        b, _, h, w = x.shape
        cout = self.weight.value.shape[1]
        y = np.einsum("bchw,cdij->bdhiwj", x, self.weight.value, optimize=True)
        return y.reshape(b, cout, 2 * h, 2 * w) + self.bias.value[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, cout, h2, w2 = dy.shape
        dyr = dy.reshape(b, cout, h2 // 2, 2, w2 // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        ## dyr: (b, d, h, w, i, j)
        self.weight.grad += np.einsum("bchw,bdhwij->cdij", self._x, dyr, optimize=True)
        self.bias.grad += dy.sum(axis=(0, 2, 3))
        return np.einsum("bdhwij,cdij->bchw", dyr, self.weight.value, optimize=True)


class BatchNorm2d:
    """Per-channel normalization over (B, H, W) with batch statistics.

    Statistics come from the current batch in every mode; the time axis
    rides in B, so normalization sees the whole series jointly.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Param(np.ones(channels))
        self.beta = Param(np.zeros(channels))
        self._xhat = None
        self._invstd = None

    def params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def forward(self, x: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=(0, 2, 3), keepdims=True)
        var = x.var(axis=(0, 2, 3), keepdims=True)
        self._invstd = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._invstd
        return self.gamma.value[None, :, None, None] * self._xhat + self.beta.value[None, :, None, None]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        n = dy.shape[0] * dy.shape[2] * dy.shape[3]
        dbeta = dy.sum(axis=(0, 2, 3))
        dgamma = (dy * self._xhat).sum(axis=(0, 2, 3))
        self.beta.grad += dbeta
        self.gamma.grad += dgamma
        g = self.gamma.value[None, :, None, None] * self._invstd
        return g * (dy - dbeta[None, :, None, None] / n - self._xhat * dgamma[None, :, None, None] / n)


class Identity:
    """Stands in for BatchNorm2d when normalization is switched off."""

    def params(self):
        return iter(())

    def forward(self, x: np.ndarray) -> np.ndarray:
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy


class ReLU:
    def __init__(self):
        self._mask = None

    def params(self):
        return iter(())

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._mask = x > 0
        return np.where(self._mask, x, 0.0)

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return np.where(self._mask, dy, 0.0)


class Sigmoid:
    """Numerically stable sigmoid, output clipped strictly inside (0, 1)."""

    CLIP = 1e-12

    def __init__(self):
        self._y = None

    def params(self):
        return iter(())

    def forward(self, x: np.ndarray) -> np.ndarray:
        y = np.empty_like(x)
        pos = x >= 0
        y[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        y[~pos] = ex / (1.0 + ex)
        self._y = np.clip(y, self.CLIP, 1.0 - self.CLIP)
        return self._y

    def backward(self, dy: np.ndarray) -> np.ndarray:
        return dy * self._y * (1.0 - self._y)


class MaxPool2x2:
    def __init__(self):
        self._idx = None
        self._shape = None

    def params(self):
        return iter(())

    def forward(self, x: np.ndarray) -> np.ndarray:
        b, c, h, w = x.shape
        if h % 2 or w % 2:
            raise ValueError(f"pooling needs even extents, got {h}x{w}")
        self._shape = x.shape
        view = x.reshape(b, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        flat = view.reshape(b, c, h // 2, w // 2, 4)
        self._idx = flat.argmax(axis=-1)
        return np.take_along_axis(flat, self._idx[..., None], axis=-1)[..., 0]

    def backward(self, dy: np.ndarray) -> np.ndarray:
        b, c, h, w = self._shape
        flat = np.zeros((b, c, h // 2, w // 2, 4))
        np.put_along_axis(flat, self._idx[..., None], dy[..., None], axis=-1)
        view = flat.reshape(b, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
        return view.reshape(b, c, h, w)


class Linear:
    """y = x @ W + b over the trailing axis."""

    def __init__(self, d_in: int, d_out: int, rng: SeededRng):
        self.weight = Param(kaiming_uniform(rng, (d_in, d_out), d_in))
        self.bias = Param(np.zeros(d_out))
        self._x = None

    def params(self):
        yield "weight", self.weight
        yield "bias", self.bias

    def forward(self, x: np.ndarray) -> np.ndarray:
        self._x = x
        return x @ self.weight.value + self.bias.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d_in = self.weight.value.shape[0]
        d_out = self.weight.value.shape[1]
        xf = self._x.reshape(-1, d_in)
        dyf = dy.reshape(-1, d_out)
        self.weight.grad += xf.T @ dyf
        self.bias.grad += dyf.sum(axis=0)
        return dy @ self.weight.value.T


class LayerNorm:
    """Normalization over the trailing feature axis with scale and shift."""

    def __init__(self, dim: int, eps: float = 1e-5):
        self.eps = eps
        self.gamma = Param(np.ones(dim))
        self.beta = Param(np.zeros(dim))
        self._xhat = None
        self._invstd = None

    def params(self):
        yield "gamma", self.gamma
        yield "beta", self.beta

    def forward(self, x: np.ndarray) -> np.ndarray:
        mean = x.mean(axis=-1, keepdims=True)
        var = x.var(axis=-1, keepdims=True)
        self._invstd = 1.0 / np.sqrt(var + self.eps)
        self._xhat = (x - mean) * self._invstd
        return self.gamma.value * self._xhat + self.beta.value

    def backward(self, dy: np.ndarray) -> np.ndarray:
        d = dy.shape[-1]
        dgamma = (dy * self._xhat).reshape(-1, d).sum(axis=0)
        dbeta = dy.reshape(-1, d).sum(axis=0)
        self.gamma.grad += dgamma
        self.beta.grad += dbeta
        dxhat = dy * self.gamma.value
        return self._invstd * (
            dxhat
            - dxhat.mean(axis=-1, keepdims=True)
            - self._xhat * (dxhat * self._xhat).mean(axis=-1, keepdims=True)
        )


class ConvBlock:
    """[conv3x3 -> norm -> ReLU] x 2, the workhorse of encoder and decoders."""

    def __init__(self, cin: int, cout: int, use_norm: bool, rng: SeededRng):
        self.conv1 = Conv2d(cin, cout, 3, rng)
        self.norm1 = BatchNorm2d(cout) if use_norm else Identity()
        self.act1 = ReLU()
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.norm2 = BatchNorm2d(cout) if use_norm else Identity()
        self.act2 = ReLU()
        self._chain = [self.conv1, self.norm1, self.act1, self.conv2, self.norm2, self.act2]

    def params(self):
        for label, layer in (
            ("conv1", self.conv1),
            ("norm1", self.norm1),
            ("conv2", self.conv2),
            ("norm2", self.norm2),
        ):
            for name, p in layer.params():
                yield f"{label}.{name}", p

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self._chain:
            x = layer.forward(x)
        return x

    def backward(self, dy: np.ndarray) -> np.ndarray:
        for layer in reversed(self._chain):
            dy = layer.backward(dy)
        return dy
