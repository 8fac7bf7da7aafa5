"""Hand-differentiated layers on numpy arrays.

Every layer caches what it needs in ``forward`` and returns the input gradient
from ``backward`` while filling ``self.grads`` (same keys as ``self.params``).
Convolutions are stride-1, unpadded cross-correlations.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Callable, Iterator, Protocol

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import NumericalError, ValidationError

BN_EPSILON = 1e-5
BN_MOMENTUM = 0.1
LOG_FLOOR = 1e-6


def precision_dtype(mode: str | None = None) -> np.dtype:
    """``fast`` -> float32, ``check`` -> float64. Defaults to ``$TRM_PRECISION`` or ``fast``."""
    mode = mode or os.environ.get("TRM_PRECISION", "fast")
    if mode == "fast":
        return np.dtype(np.float32)
    if mode == "check":
        return np.dtype(np.float64)
    raise ValidationError(f"precision (TRM_PRECISION) must be 'fast' or 'check', got {mode!r}")


def ensure_finite(x: np.ndarray, where: str) -> np.ndarray:
    if not np.all(np.isfinite(x)):
        raise NumericalError(f"non-finite values in {where}")
    return x


# ---------------------------------------------------------------------------
# functional kernels
# ---------------------------------------------------------------------------

def _im2col(x: np.ndarray, kh: int, kw: int) -> np.ndarray:
    """N x Cin x h x w -> (N*oh*ow) x (Cin*kh*kw) patch matrix."""
    n, cin, h, w = x.shape
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))  # N, Cin, oh, ow, kh, kw
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n * (h - kh + 1) * (w - kw + 1), cin * kh * kw)


def conv2d_forward(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None = None) -> np.ndarray:
    """Valid cross-correlation. ``x``: N x Cin x h x w, ``weight``: Cout x Cin x kh x kw."""
    if x.ndim != 4 or weight.ndim != 4:
        raise ValidationError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    n, cin, h, w = x.shape
    cout, wcin, kh, kw = weight.shape
    if cin != wcin:
        raise ValidationError(f"input has {cin} channels, kernel expects {wcin}")
    if kh > h or kw > w:
        raise ValidationError(f"kernel {kh}x{kw} larger than input {h}x{w}")
    out = _im2col(x, kh, kw) @ weight.reshape(cout, -1).T
    if bias is not None:
        out += bias
    return np.ascontiguousarray(out.reshape(n, h - kh + 1, w - kw + 1, cout).transpose(0, 3, 1, 2))


def conv2d_backward(
    grad_out: np.ndarray, x: np.ndarray, weight: np.ndarray, has_bias: bool = True
) -> tuple[np.ndarray, np.ndarray, np.ndarray | None]:
    """Returns ``(grad_input, grad_weight, grad_bias)``; ``grad_bias`` is None without bias."""
    cout, cin, kh, kw = weight.shape
    n, _, h, w = x.shape
    oh, ow = h - kh + 1, w - kw + 1
    if grad_out.shape != (n, cout, oh, ow):
        raise ValidationError(f"grad_out shape {grad_out.shape} inconsistent with forward pass")
    g = grad_out.transpose(0, 2, 3, 1).reshape(-1, cout)
    grad_w = (g.T @ _im2col(x, kh, kw)).reshape(weight.shape)
    grad_cols = (g @ weight.reshape(cout, -1)).reshape(n, oh, ow, cin, kh, kw)
    grad_x = np.zeros((n, cin, h, w), dtype=grad_cols.dtype)
    for i in range(kh):
        for j in range(kw):
            grad_x[:, :, i : i + oh, j : j + ow] += grad_cols[..., i, j].transpose(0, 3, 1, 2)
    grad_b = grad_out.sum(axis=(0, 2, 3)) if has_bias else None
    return grad_x, grad_w, grad_b


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> tuple[float, np.ndarray]:
    """Mean negative log-likelihood and its gradient w.r.t. ``logits``."""
    labels = np.asarray(labels)
    n, k = logits.shape
    if labels.shape != (n,):
        raise ValidationError(f"expected {n} labels, got shape {labels.shape}")
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValidationError(f"labels must lie in [0, {k})")
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_p = shifted - log_z
    rows = np.arange(n)
    loss = float(-log_p[rows, labels].mean())
    grad = np.exp(log_p)
    grad[rows, labels] -= 1.0
    grad /= n
    return loss, grad


# ---------------------------------------------------------------------------
# layers
# ---------------------------------------------------------------------------

class Layer:
    """Base layer: no parameters, no buffers."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.buffers: dict[str, np.ndarray] = {}

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def zero_grad(self) -> None:
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)

    def n_trainable(self) -> int:
        return sum(p.size for p in self.params.values())


def fan_in_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, dtype) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Layer):
    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: tuple[int, int],
        bias: bool = True,
        rng: np.random.Generator | None = None,
        dtype=np.float64,
    ) -> None:
        super().__init__()
        kh, kw = kernel_size
        if min(in_channels, out_channels, kh, kw) < 1:
            raise ValidationError("conv dimensions must be positive")
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_channels, self.out_channels = in_channels, out_channels
        self.kernel_size = (kh, kw)
        self.has_bias = bias
        self.params["weight"] = fan_in_uniform(rng, (out_channels, in_channels, kh, kw), in_channels * kh * kw, dtype)
        if bias:
            self.params["bias"] = np.zeros(out_channels, dtype=dtype)
        self.zero_grad()
        self._x: np.ndarray | None = None

    def output_hw(self, h: int, w: int) -> tuple[int, int]:
        return h - self.kernel_size[0] + 1, w - self.kernel_size[1] + 1

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._x = x
        return conv2d_forward(x, self.params["weight"], self.params.get("bias"))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        gx, gw, gb = conv2d_backward(grad, self._x, self.params["weight"], self.has_bias)
        self.grads["weight"] += gw
        if self.has_bias:
            self.grads["bias"] += gb
        return gx


class BatchNorm(Layer):
    """Non-affine batch norm over every axis except axis 1."""

    def __init__(
        self, num_features: int, eps: float = BN_EPSILON, momentum: float = BN_MOMENTUM, dtype=np.float64
    ) -> None:
        super().__init__()
        if not 0.0 < momentum < 1.0:
            raise ValidationError("momentum must lie in (0, 1)")
        self.num_features = num_features
        self.eps = eps
        self.momentum = momentum
        self.buffers["running_mean"] = np.zeros(num_features, dtype=dtype)
        self.buffers["running_var"] = np.ones(num_features, dtype=dtype)
        self._cache: tuple | None = None

    def _shape(self, x: np.ndarray) -> tuple[tuple[int, ...], tuple[int, ...]]:
        if x.ndim < 2 or x.shape[1] != self.num_features:
            raise ValidationError(f"batch norm expects N x {self.num_features} x ..., got {x.shape}")
        axes = (0,) + tuple(range(2, x.ndim))
        bshape = (1, -1) + (1,) * (x.ndim - 2)
        return axes, bshape

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        axes, bshape = self._shape(x)
        if training:
            count = x.size // self.num_features
            if count < 2:
                raise ValidationError("batch norm in training mode needs at least 2 values per feature")
            mean = x.mean(axis=axes)
            var = x.var(axis=axes)
            m = self.momentum
            rm, rv = self.buffers["running_mean"], self.buffers["running_var"]
            rm *= 1 - m
            rm += m * mean
            rv *= 1 - m
            rv += m * var * (count / (count - 1))
        else:
            mean, var = self.buffers["running_mean"], self.buffers["running_var"]
        inv_std = 1.0 / np.sqrt(var + self.eps)
        xhat = (x - mean.reshape(bshape)) * inv_std.reshape(bshape)
        self._cache = (training, xhat, inv_std, axes, bshape)
        return xhat.astype(x.dtype, copy=False)

    def backward(self, grad: np.ndarray) -> np.ndarray:
        training, xhat, inv_std, axes, bshape = self._cache
        if not training:
            return grad * inv_std.reshape(bshape)
        count = grad.size // self.num_features
        g_sum = grad.sum(axis=axes).reshape(bshape)
        gx_sum = (grad * xhat).sum(axis=axes).reshape(bshape)
        return (inv_std.reshape(bshape) / count) * (count * grad - g_sum - xhat * gx_sum)


def batchnorm_forward(x: np.ndarray, layer: BatchNorm, training: bool = True) -> np.ndarray:
    return layer.forward(x, training)


class Dense(Layer):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator | None = None, dtype=np.float64):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.params["weight"] = fan_in_uniform(rng, (out_features, in_features), in_features, dtype)
        self.params["bias"] = np.zeros(out_features, dtype=dtype)
        self.zero_grad()
        self._x: np.ndarray | None = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        self._x = x
        return x @ self.params["weight"].T + self.params["bias"]

    def backward(self, grad: np.ndarray) -> np.ndarray:
        self.grads["weight"] += grad.T @ self._x
        self.grads["bias"] += grad.sum(axis=0)
        return grad @ self.params["weight"]


class Square(Layer):
    def forward(self, x, training=True):
        self._x = x
        return x * x

    def backward(self, grad):
        return 2.0 * self._x * grad


class SafeLog(Layer):
    """``log(max(x, floor))``; zero gradient where the floor is active."""

    def __init__(self, floor: float = LOG_FLOOR) -> None:
        super().__init__()
        self.floor = floor

    def forward(self, x, training=True):
        self._x = x
        return np.log(np.maximum(x, self.floor))

    def backward(self, grad):
        x = self._x
        return np.where(x > self.floor, grad / np.maximum(x, self.floor), 0.0).astype(grad.dtype, copy=False)


class MeanPoolTime(Layer):
    """Mean pooling along the last axis with window ``size`` and ``stride``."""

    def __init__(self, size: int, stride: int) -> None:
        super().__init__()
        if size < 1 or stride < 1:
            raise ValidationError("pool size and stride must be positive")
        self.size, self.stride = size, stride

    def output_len(self, length: int) -> int:
        return (length - self.size) // self.stride + 1

    def forward(self, x, training=True):
        if x.shape[-1] < self.size:
            raise ValidationError(f"pool window {self.size} longer than input length {x.shape[-1]}")
        self._shape = x.shape
        win = sliding_window_view(x, self.size, axis=-1)[..., :: self.stride, :]
        return win.mean(axis=-1)

    def backward(self, grad):
        out = np.zeros(self._shape, dtype=grad.dtype)
        share = grad / self.size
        for j in range(grad.shape[-1]):
            start = j * self.stride
            out[..., start : start + self.size] += share[..., j : j + 1]
        return out


class Dropout(Layer):
    """Inverted dropout; identity outside training."""

    def __init__(self, p: float, rng: np.random.Generator | None = None) -> None:
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValidationError("dropout probability must lie in [0, 1)")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self._mask: np.ndarray | None = None

    def forward(self, x, training=True):
        if not training or self.p == 0.0:
            self._mask = None
            return x
        keep = 1.0 - self.p
        self._mask = (self.rng.random(x.shape) < keep).astype(x.dtype) / keep
        return x * self._mask

    def backward(self, grad):
        return grad if self._mask is None else grad * self._mask


class Flatten(Layer):
    def forward(self, x, training=True):
        self._shape = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._shape)


class Sequential(Layer):
    """Named chain of layers; parameters are exposed as ``"<layer>.<param>"``."""

    def __init__(self, layers: list[tuple[str, Layer]]) -> None:
        super().__init__()
        self.layers = layers

    def forward(self, x, training=True):
        for _, layer in self.layers:
            x = layer.forward(x, training)
        return x

    def backward(self, grad):
        for _, layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def named_layers(self) -> Iterator[tuple[str, Layer]]:
        return iter(self.layers)

    def zero_grad(self) -> None:
        for _, layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.grads.items()}

    def n_trainable(self) -> int:
        return sum(layer.n_trainable() for _, layer in self.layers)


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

class Differentiable(Protocol):
    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray: ...
    def backward(self, grad: np.ndarray) -> np.ndarray: ...
    def zero_grad(self) -> None: ...


def _param_views(fragment) -> tuple[dict[str, np.ndarray], Callable[[], dict[str, np.ndarray]]]:
    if hasattr(fragment, "parameters"):
        return fragment.parameters(), fragment.gradients
    return dict(fragment.params), lambda: fragment.grads


def _buffers(fragment) -> list[np.ndarray]:
    if hasattr(fragment, "buffer_arrays"):
        return list(fragment.buffer_arrays())
    if hasattr(fragment, "layers"):
        return [b for _, layer in fragment.layers for b in layer.buffers.values()]
    return list(fragment.buffers.values())


@dataclass
class GradCheckReport:
    errors: dict[str, float] = field(default_factory=dict)
    tolerance: float = 1e-4

    @property
    def max_error(self) -> float:
        return max(self.errors.values(), default=0.0)

    @property
    def passed(self) -> bool:
        return self.max_error <= self.tolerance

    def __str__(self) -> str:
        worst = max(self.errors, key=self.errors.get) if self.errors else "-"
        return f"grad_check {'PASS' if self.passed else 'FAIL'}: max rel err {self.max_error:.3e} ({worst})"


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> float:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if analytic.size else 0.0


def grad_check(
    fragment: Differentiable,
    x: np.ndarray,
    labels: np.ndarray | None = None,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    training: bool = True,
    seed: int = 0,
) -> GradCheckReport:
    """Compare analytic gradients with central differences on every parameter and input element.

    With ``labels`` the loss is softmax cross-entropy of the fragment output;
    otherwise it is a fixed random projection ``sum(out * R)``. Running
    statistics are restored after every probe so inference-mode checks see a
    fixed function.

    Relative errors use ``max(|analytic|, |numeric|, 1e-6 * max(1, S))`` as
    denominator, where ``S`` is the summed magnitude of the loss terms: entries
    whose true gradient is zero (e.g. a bias feeding a training-mode batch
    norm) are judged against the roundoff scale of the loss, not against 0.
    """
    if x.dtype != np.float64:
        raise ValidationError("grad_check runs in 64-bit mode only")
    x = x.copy()
    params, grads_of = _param_views(fragment)
    buffers = _buffers(fragment)
    saved = [b.copy() for b in buffers]

    def restore() -> None:
        for b, s in zip(buffers, saved):
            b[...] = s

    probe_out = fragment.forward(x, training)
    restore()
    proj = np.random.default_rng(seed).standard_normal(probe_out.shape)

    def loss_and_grad(inp: np.ndarray) -> tuple[float, np.ndarray]:
        out = fragment.forward(inp, training)
        restore()
        ensure_finite(out, "grad_check forward")
        if labels is not None:
            return softmax_cross_entropy(out, labels)
        return float(np.sum(out * proj)), proj

    if labels is None:
        scale = float(np.sum(np.abs(probe_out * proj)))
    else:
        scale = abs(softmax_cross_entropy(probe_out, labels)[0])
    floor = 1e-6 * max(1.0, scale)
    fragment.zero_grad()
    _, g = loss_and_grad(x)
    grad_x = fragment.backward(g)
    analytic = {k: v.copy() for k, v in grads_of().items()}
    analytic["input"] = grad_x

    targets = dict(params)
    targets["input"] = x
    report = GradCheckReport(tolerance=tolerance)
    for name, arr in targets.items():
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        nflat = numeric.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            lp, _ = loss_and_grad(x)
            flat[i] = orig - step
            lm, _ = loss_and_grad(x)
            flat[i] = orig
            nflat[i] = (lp - lm) / (2 * step)
        ensure_finite(analytic[name], f"analytic gradient {name}")
        report.errors[name] = relative_error(analytic[name], numeric, floor)
    return report
