"""Minimal dense-prediction layers with exact analytic gradients.

Everything operates on channels-last (B, H, W, C) float arrays; the batch
axis carries the rotation copies of the input stack. Convolution is im2col +
GEMM in NHWC layout, which keeps the window gather sequential and needs no
transposes, so results are fast and bitwise deterministic for a fixed BLAS
thread count. Each layer caches what its backward pass needs; backward
accumulates into preallocated grad buffers so optimizer references stay
valid.
"""

from __future__ import annotations

import os

import numpy as np

DEBUG_NAN = os.environ.get("MGLAB_DEBUG_NAN", "") not in ("", "0")


class ShapeError(ValueError):
    pass


class Layer:
    """Base layer: parameter dicts plus forward/backward."""

    trainable = True

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, dout: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0


def _windows(xp: np.ndarray, k: int, stride: int, out_h: int, out_w: int) -> np.ndarray:
    """Strided (B, out_h, out_w, k, k, C) view of padded NHWC input."""
    b, _, _, c = xp.shape
    sb, sh, sw, sc = xp.strides
    return np.lib.stride_tricks.as_strided(
        xp,
        (b, out_h, out_w, k, k, c),
        (sb, stride * sh, stride * sw, sh, sw, sc),
        writeable=False,
    )


class Conv2d(Layer):
    """Cross-correlation with square kernel, stride, and symmetric zero padding.

    Weights are stored (k, k, in_ch, out_ch) so the im2col GEMM reads them
    without rearrangement. ``init="zero"`` starts a head at exactly zero
    output, which keeps sigmoid heads at 0.5 and clamped heads unsaturated.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel: int, stride: int = 1, pad: int = 0,
                 rng: np.random.Generator | None = None, dtype=np.float32, init: str = "he"):
        super().__init__()
        self.in_ch, self.out_ch = in_ch, out_ch
        self.kernel, self.stride, self.pad = kernel, stride, pad
        rng = rng or np.random.default_rng(0)
        fan_in = in_ch * kernel * kernel
        if init == "he":
            weight = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(kernel, kernel, in_ch, out_ch))
        elif init == "zero":
            weight = np.zeros((kernel, kernel, in_ch, out_ch))
        else:
            raise ValueError(f"unknown init '{init}'")
        self.params = {"weight": weight.astype(dtype), "bias": np.zeros(out_ch, dtype=dtype)}
        self.grads = {k: np.zeros_like(v) for k, v in self.params.items()}
        self._cache = None

    def forward(self, x):
        if x.ndim != 4 or x.shape[3] != self.in_ch:
            raise ShapeError(f"conv expects (B, H, W, {self.in_ch}), got {x.shape}")
        k, s, p = self.kernel, self.stride, self.pad
        b, h, w, _ = x.shape
        out_h = (h + 2 * p - k) // s + 1
        out_w = (w + 2 * p - k) // s + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError(f"conv output would be empty for input {x.shape}")
        xp = np.pad(x, ((0, 0), (p, p), (p, p), (0, 0))) if p else x
        cols = _windows(xp, k, s, out_h, out_w).reshape(b * out_h * out_w, k * k * self.in_ch)
        out = cols @ self.params["weight"].reshape(-1, self.out_ch)
        out += self.params["bias"]
        self._cache = (cols, x.shape)
        return out.reshape(b, out_h, out_w, self.out_ch)

    def backward(self, dout):
        cols, x_shape = self._cache
        b, h, w, _ = x_shape
        k, s, p = self.kernel, self.stride, self.pad
        out_h, out_w = dout.shape[1], dout.shape[2]

        dmat = dout.reshape(-1, self.out_ch)
        self.grads["weight"] += (cols.T @ dmat).reshape(self.grads["weight"].shape)
        self.grads["bias"] += dmat.sum(axis=0)

        # Transpose convolution: dilate dout by the stride, pad, correlate
        # with the spatially flipped kernel.
        h_d = (out_h - 1) * s + 1
        w_d = (out_w - 1) * s + 1
        pad_t = k - 1 - p
        pad_b = h + p - (out_h - 1) * s - 1
        pad_r = w + p - (out_w - 1) * s - 1
        if min(pad_t, pad_b, pad_r) < 0:
            raise ShapeError("unsupported conv geometry for backward")
        dd = np.zeros((b, h_d + pad_t + pad_b, w_d + pad_t + pad_r, self.out_ch), dtype=dout.dtype)
        dd[:, pad_t:pad_t + h_d:s, pad_t:pad_t + w_d:s] = dout
        cols_d = _windows(dd, k, 1, h, w).reshape(b * h * w, k * k * self.out_ch)
        w_flip = self.params["weight"][::-1, ::-1].transpose(0, 1, 3, 2).reshape(-1, self.in_ch)
        return (cols_d @ w_flip).reshape(b, h, w, self.in_ch)


class ReLU(Layer):
    def __init__(self):
        super().__init__()
        self._mask = None

    def forward(self, x):
        self._mask = x > 0
        return np.where(self._mask, x, 0)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)


class Sigmoid(Layer):
    """Numerically stable sigmoid, saturation-clipped into the open (0, 1)."""

    SAT = 1e-7

    def __init__(self):
        super().__init__()
        self._out = None

    def forward(self, x):
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        np.clip(out, self.SAT, 1.0 - self.SAT, out=out)
        self._out = out
        return out

    def backward(self, dout):
        return dout * self._out * (1.0 - self._out)


class HardClip(Layer):
    """Clamp to [-bound, bound]; gradient passes only strictly inside."""

    def __init__(self, bound: float):
        super().__init__()
        self.bound = bound
        self._mask = None

    def forward(self, x):
        self._mask = np.abs(x) < self.bound
        return np.clip(x, -self.bound, self.bound)

    def backward(self, dout):
        return np.where(self._mask, dout, 0)


class ResidualBlock(Layer):
    """Two 3x3 same-resolution convs with a skip: relu(x + conv(relu(conv(x)))).

    The second conv starts at zero so a fresh block is the identity (up to the
    outer relu); activation magnitudes then stay near the input scale, which
    keeps impulsive single-sample updates from compounding through the trunk.
    """

    def __init__(self, channels: int, rng: np.random.Generator | None = None, dtype=np.float32):
        super().__init__()
        rng = rng or np.random.default_rng(0)
        self.conv1 = Conv2d(channels, channels, 3, stride=1, pad=1, rng=rng, dtype=dtype)
        self.conv2 = Conv2d(channels, channels, 3, stride=1, pad=1, rng=rng, dtype=dtype,
                            init="zero")
        self.relu1 = ReLU()
        self.relu2 = ReLU()

    @property
    def params(self):
        return {f"conv1.{k}": v for k, v in self.conv1.params.items()} | {
            f"conv2.{k}": v for k, v in self.conv2.params.items()
        }

    @params.setter
    def params(self, value):
        if value:  # base-class init passes {}
            raise AttributeError("set parameters through the sub-convs")

    @property
    def grads(self):
        return {f"conv1.{k}": v for k, v in self.conv1.grads.items()} | {
            f"conv2.{k}": v for k, v in self.conv2.grads.items()
        }

    @grads.setter
    def grads(self, value):
        if value:
            raise AttributeError("set gradients through the sub-convs")

    def zero_grads(self):
        self.conv1.zero_grads()
        self.conv2.zero_grads()

    def forward(self, x):
        h = self.relu1.forward(self.conv1.forward(x))
        return self.relu2.forward(x + self.conv2.forward(h))

    def backward(self, dout):
        d = self.relu2.backward(dout)
        dh = self.conv2.backward(d)
        dx_path = self.conv1.backward(self.relu1.backward(dh))
        return d + dx_path


def bilinear_weights(in_n: int, out_n: int, dtype=np.float64) -> np.ndarray:
    """(out_n, in_n) interpolation matrix, half-pixel-center convention."""
    w = np.zeros((out_n, in_n), dtype=np.float64)
    scale = in_n / out_n
    for o in range(out_n):
        src = (o + 0.5) * scale - 0.5
        src = min(max(src, 0.0), in_n - 1.0)
        i0 = int(np.floor(src))
        i1 = min(i0 + 1, in_n - 1)
        f = src - i0
        w[o, i0] += 1.0 - f
        w[o, i1] += f
    return w.astype(dtype)


def avgpool_weights(in_n: int, out_n: int, dtype=np.float64) -> np.ndarray:
    """(out_n, in_n) adaptive average-pooling matrix (variable bin edges)."""
    w = np.zeros((out_n, in_n), dtype=np.float64)
    for o in range(out_n):
        lo = (o * in_n) // out_n
        hi = -(-((o + 1) * in_n) // out_n)  # ceil
        w[o, lo:hi] = 1.0 / (hi - lo)
    return w.astype(dtype)


class LinearResample2d(Layer):
    """Separable linear resampling over the spatial axes of NHWC tensors.

    Forward computes Wr (x) Wc^T on every (batch, channel) slice; backward is
    the exact transpose map, so gradients are exact.
    """

    def __init__(self, w_row: np.ndarray, w_col: np.ndarray):
        super().__init__()
        self.w_row = w_row
        self.w_col = w_col
        self._in_shape = None

    @classmethod
    def bilinear(cls, in_hw: tuple[int, int], out_hw: tuple[int, int], dtype=np.float32):
        return cls(bilinear_weights(in_hw[0], out_hw[0], dtype), bilinear_weights(in_hw[1], out_hw[1], dtype))

    @classmethod
    def avg_pool(cls, in_hw: tuple[int, int], out_hw: tuple[int, int], dtype=np.float32):
        return cls(avgpool_weights(in_hw[0], out_hw[0], dtype), avgpool_weights(in_hw[1], out_hw[1], dtype))

    def _apply(self, x, w_row, w_col):
        b, h, w, c = x.shape
        oh, ow = w_row.shape[0], w_col.shape[0]
        t = np.matmul(w_row, x.reshape(b, h, w * c))  # (b, oh, w*c)
        t = t.reshape(b * oh, w, c)
        y = np.matmul(w_col, t)  # (b*oh, ow, c)
        return y.reshape(b, oh, ow, c)

    def forward(self, x):
        if x.shape[1:3] != (self.w_row.shape[1], self.w_col.shape[1]):
            raise ShapeError(
                f"resample built for {self.w_row.shape[1]}x{self.w_col.shape[1]}, got {x.shape[1:3]}"
            )
        self._in_shape = x.shape
        return self._apply(x, self.w_row, self.w_col)

    def backward(self, dout):
        return self._apply(dout, self.w_row.T, self.w_col.T)


class Sequential(Layer):
    """Ordered layer list with prefix-named parameters and a trainable flag."""

    def __init__(self, layers: list[Layer]):
        super().__init__()
        self.layers = layers
        self.trainable = True

    def forward(self, x):
        for i, layer in enumerate(self.layers):
            x = layer.forward(x)
            if DEBUG_NAN and not np.all(np.isfinite(x)):
                raise FloatingPointError(f"non-finite values after layer {i} ({type(layer).__name__})")
        return x

    def backward(self, dout):
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def named_params(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.params.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def named_grads(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for i, layer in enumerate(self.layers):
            for k, v in layer.grads.items():
                out[f"{prefix}{i}.{k}"] = v
        return out

    def zero_grads(self):
        for layer in self.layers:
            layer.zero_grads()

    def load_named(self, named: dict[str, np.ndarray], prefix: str = "") -> None:
        """Copy values into existing parameter arrays (shape-checked)."""
        for name, value in named.items():
            if not name.startswith(prefix):
                continue
            rest = name[len(prefix):]
            idx, key = rest.split(".", 1)
            target = self.layers[int(idx)].params[key]
            if target.shape != value.shape:
                raise ShapeError(f"checkpoint shape mismatch for {name}: {value.shape} vs {target.shape}")
            target[...] = value
