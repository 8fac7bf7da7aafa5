"""Topographic Representation Module.

The raw ``[B x C x TP]`` batch is scattered per time point onto the montage
grid, giving ``B*TP`` single-channel ``H x W`` images. A stack of valid
convolutions (each followed by non-affine batch norm) shrinks the grid to
``1 x 1`` while producing ``C`` feature maps, which are reassembled into
``[B x C x TP]``: the module's output has the input's shape.

Kernel sizes follow the feature map: while the map exceeds ``k x k`` in
either dimension a ``k x k`` kernel (clamped to the map) is used, after that
one kernel the size of the whole map finishes the stack.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .montage import Montage, gather_batch, scatter_batch
from .numerics import BatchNorm, Conv2d, ensure_finite


@dataclass(frozen=True)
class KernelStep:
    kernel_h: int
    kernel_w: int
    out_h: int
    out_w: int
    has_bias: bool


@dataclass(frozen=True)
class KernelSchedule:
    base_k: int
    grid: tuple[int, int]
    steps: tuple[KernelStep, ...]

    def __len__(self) -> int:
        return len(self.steps)

    def __iter__(self):
        return iter(self.steps)

    def kernels(self) -> list[tuple[int, int]]:
        return [(s.kernel_h, s.kernel_w) for s in self.steps]

    def outputs(self) -> list[tuple[int, int]]:
        return [(s.out_h, s.out_w) for s in self.steps]


def derive_schedule(grid: tuple[int, int], base_k: int) -> KernelSchedule:
    H, W = grid
    if H < 1 or W < 1:
        raise ValidationError(f"grid must be at least 1x1, got {H}x{W}")
    if base_k < 2:
        raise ValidationError(f"base kernel size must be >= 2, got {base_k}")
    h, w = H, W
    shapes: list[tuple[int, int, int, int]] = []
    while True:
        if h > base_k or w > base_k:
            kh, kw = min(base_k, h), min(base_k, w)
        else:
            kh, kw = h, w
        h, w = h - kh + 1, w - kw + 1
        shapes.append((kh, kw, h, w))
        if (h, w) == (1, 1):
            break
    last = len(shapes) - 1
    steps = tuple(KernelStep(kh, kw, oh, ow, i in (0, last)) for i, (kh, kw, oh, ow) in enumerate(shapes))
    return KernelSchedule(base_k=base_k, grid=(H, W), steps=steps)


def count_parameters(n_channels: int, schedule: KernelSchedule) -> int:
    total = 0
    for i, step in enumerate(schedule.steps):
        cin = 1 if i == 0 else n_channels
        total += n_channels * cin * step.kernel_h * step.kernel_w
        if step.has_bias:
            total += n_channels
    return total


class TrmModule:
    """Scatter + convolution/batch-norm stack; ``[B x C x TP]`` in and out."""

    def __init__(
        self,
        montage: Montage,
        base_k: int,
        rng: np.random.Generator | None = None,
        dtype=np.float32,
    ) -> None:
        rng = rng if rng is not None else np.random.default_rng(0)
        self.montage = montage
        self.n_channels = montage.n_channels
        self.schedule = derive_schedule(montage.grid, base_k)
        self.dtype = np.dtype(dtype)
        C = self.n_channels
        self.layers: list[tuple[str, Conv2d | BatchNorm]] = []
        for i, step in enumerate(self.schedule.steps):
            cin = 1 if i == 0 else C
            conv = Conv2d(cin, C, (step.kernel_h, step.kernel_w), bias=step.has_bias, rng=rng, dtype=dtype)
            self.layers.append((f"conv{i}", conv))
            self.layers.append((f"bn{i}", BatchNorm(C, dtype=dtype)))
        self._in_shape: tuple[int, int, int] | None = None

    def forward(self, x: np.ndarray, training: bool = True) -> np.ndarray:
        if x.ndim != 3 or x.shape[1] != self.n_channels:
            raise ValidationError(f"TRM expects B x {self.n_channels} x TP input, got {x.shape}")
        ensure_finite(x, "TRM input")
        B, C, TP = x.shape
        self._in_shape = (B, C, TP)
        # fold batch and time into one convolution batch so weights are shared over time
        h = scatter_batch(x.transpose(0, 2, 1).reshape(B * TP, C), self.montage)
        for _, layer in self.layers:
            h = layer.forward(h, training)
        ensure_finite(h, "TRM output")
        return np.ascontiguousarray(h.reshape(B, TP, C).transpose(0, 2, 1))

    def backward(self, grad: np.ndarray) -> np.ndarray:
        B, C, TP = self._in_shape
        if grad.shape != (B, C, TP):
            raise ValidationError(f"grad shape {grad.shape} does not match TRM output {(B, C, TP)}")
        g = grad.transpose(0, 2, 1).reshape(B * TP, C, 1, 1)
        for _, layer in reversed(self.layers):
            g = layer.backward(g)
        gx = gather_batch(g, self.montage)
        return np.ascontiguousarray(gx.reshape(B, TP, C).transpose(0, 2, 1))

    def zero_grad(self) -> None:
        for _, layer in self.layers:
            layer.zero_grad()

    def parameters(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.params.items()}

    def gradients(self) -> dict[str, np.ndarray]:
        return {f"{n}.{k}": v for n, layer in self.layers for k, v in layer.grads.items()}

    def buffer_arrays(self):
        return [b for _, layer in self.layers for b in layer.buffers.values()]

    def n_trainable(self) -> int:
        return sum(layer.n_trainable() for _, layer in self.layers)


def trm_forward(x: np.ndarray, module: TrmModule, training: bool = True) -> np.ndarray:
    return module.forward(x, training)


def trm_backward(grad_out: np.ndarray, module: TrmModule) -> tuple[np.ndarray, dict[str, np.ndarray]]:
    """Backward pass for the last :func:`trm_forward`; parameter gradients start from zero."""
    module.zero_grad()
    gx = module.backward(grad_out)
    return gx, {k: v.copy() for k, v in module.gradients().items()}
