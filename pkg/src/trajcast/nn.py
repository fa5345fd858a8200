"""Minimal float64 layer stack with exact backward passes.

Everything runs in 64-bit floats.  Each layer caches what its forward pass
saw, accumulates parameter gradients in place on ``Tensor.grad``, and
returns the input gradient from ``backward``.  There is no graph: the
network is a fixed stack and the caller drives the reverse pass.

Convolution accumulates shifted planes in a fixed (in-channel, kernel-row,
kernel-col) order, so every output element receives its terms in exactly
the order a naive six-deep loop would produce them.  That keeps outputs
bit-identical to a straightforward reference implementation while staying
vectorized over the spatial plane.

A single model instance's forward/backward is single-writer.  Concurrent
training requires one gradient buffer set per worker; read-only inference
on frozen parameters is safe from any number of threads.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

log = logging.getLogger(__name__)


class Tensor:
    """A dense float64 array plus a same-shaped gradient buffer."""

    __slots__ = ("values", "grad", "name")

    def __init__(self, values: np.ndarray, name: str = "") -> None:
        self.values = np.ascontiguousarray(values, dtype=np.float64)
        self.grad = np.zeros_like(self.values)
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def zero_grad(self) -> None:
        self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Tensor({self.name or 'unnamed'}, shape={self.values.shape})"


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int, fan_out: int) -> np.ndarray:
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv2d:
    """Same-padded stride-1 convolution over (channels, height, width) input.

    Kernel size must be odd so the window centers on each pixel; borders
    read zeros.  ``activation`` is "relu" (default) or "linear".
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        activation: str = "relu",
        name: str = "conv",
    ) -> None:
        if kernel_size < 1 or kernel_size % 2 == 0:
            raise ValueError(f"kernel size must be odd and positive, got {kernel_size}")
        if activation not in ("relu", "linear"):
            raise ValueError(f"unknown activation {activation!r}")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.activation = activation
        fan = kernel_size * kernel_size
        self.weight = Tensor(
            glorot_uniform(
                rng,
                (out_channels, in_channels, kernel_size, kernel_size),
                fan_in=in_channels * fan,
                fan_out=out_channels * fan,
            ),
            name=f"{name}.weight",
        )
        self.bias = Tensor(np.zeros(out_channels), name=f"{name}.bias")
        self._padded: np.ndarray | None = None
        self._pre: np.ndarray | None = None

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        c, h, w = in_shape
        if c != self.in_channels:
            raise ValueError(f"expected {self.in_channels} input channels, got {c}")
        return (self.out_channels, h, w)

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.ndim != 3 or x.shape[0] != self.in_channels:
            raise ValueError(
                f"expected ({self.in_channels}, H, W) input, got shape {x.shape}"
            )
        k = self.kernel_size
        pad = k // 2
        _, h, w = x.shape
        xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad)))
        pre = np.zeros((self.out_channels, h, w))
        wv = self.weight.values
        # Term order per output element: (ci, dh, dw), same as naive loops.
        for ci in range(self.in_channels):
            for dh in range(k):
                for dw in range(k):
                    pre += wv[:, ci, dh, dw, None, None] * xp[ci, dh : dh + h, dw : dw + w]
        pre += self.bias.values[:, None, None]
        self._padded = xp
        self._pre = pre
        if self.activation == "relu":
            return np.maximum(pre, 0.0)
        return pre.copy()

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._pre is None or self._padded is None:
            raise RuntimeError("backward called before forward")
        k = self.kernel_size
        pad = k // 2
        _, h, w = dout.shape
        g = dout * (self._pre > 0.0) if self.activation == "relu" else dout
        self.bias.grad += g.sum(axis=(1, 2))
        xp = self._padded
        wv = self.weight.values
        dxp = np.zeros_like(xp)
        for ci in range(self.in_channels):
            for dh in range(k):
                for dw in range(k):
                    window = xp[ci, dh : dh + h, dw : dw + w]
                    self.weight.grad[:, ci, dh, dw] += np.einsum("chw,hw->c", g, window)
                    dxp[ci, dh : dh + h, dw : dw + w] += np.tensordot(
                        wv[:, ci, dh, dw], g, axes=(0, 0)
                    )
        return dxp[:, pad : pad + h, pad : pad + w]

    def decision_signature(self) -> bytes:
        if self._pre is None:
            return b""
        if self.activation == "linear":
            return b"linear"
        return (self._pre > 0.0).tobytes()


class MaxPool2d:
    """Non-overlapping t x t max pooling; trailing partial blocks are dropped.

    Backward routes each block's gradient to the first maximum in row-major
    block order, making the reverse pass deterministic under ties.
    """

    def __init__(self, pool_size: int) -> None:
        if pool_size < 1:
            raise ValueError(f"pool size must be >= 1, got {pool_size}")
        self.pool_size = pool_size
        self._in_shape: tuple[int, int, int] | None = None
        self._argmax: np.ndarray | None = None

    def params(self) -> list[Tensor]:
        return []

    def output_shape(self, in_shape: tuple[int, ...]) -> tuple[int, ...]:
        c, h, w = in_shape
        t = self.pool_size
        if t > h and t > w:
            raise ValueError(f"pool size {t} exceeds both spatial extents {h}x{w}")
        return (c, h // t, w // t)

    def forward(self, x: np.ndarray) -> np.ndarray:
        c, h, w = x.shape
        t = self.pool_size
        if t > h and t > w:
            raise ValueError(f"pool size {t} exceeds both spatial extents {h}x{w}")
        ho, wo = h // t, w // t
        blocks = (
            x[:, : ho * t, : wo * t]
            .reshape(c, ho, t, wo, t)
            .transpose(0, 1, 3, 2, 4)
            .reshape(c, ho, wo, t * t)
        )
        self._in_shape = (c, h, w)
        self._argmax = blocks.argmax(axis=3)
        return blocks.max(axis=3)

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._in_shape is None or self._argmax is None:
            raise RuntimeError("backward called before forward")
        c, h, w = self._in_shape
        t = self.pool_size
        _, ho, wo = dout.shape
        dx = np.zeros((c, h, w))
        dh, dw = self._argmax // t, self._argmax % t
        ci = np.arange(c)[:, None, None]
        hi = (np.arange(ho) * t)[None, :, None] + dh
        wi = (np.arange(wo) * t)[None, None, :] + dw
        dx[ci, hi, wi] = dout
        return dx

    def decision_signature(self) -> bytes:
        if self._argmax is None:
            return b""
        return self._argmax.tobytes()


class DenseTanh:
    """tanh(W @ main + W_side @ side + b) with two input paths.

    ``side_dim`` may be zero, in which case the layer reduces to a single
    affine path.
    """

    def __init__(
        self,
        main_dim: int,
        side_dim: int,
        out_dim: int,
        rng: np.random.Generator,
        name: str = "dense",
    ) -> None:
        self.main_dim = main_dim
        self.side_dim = side_dim
        self.out_dim = out_dim
        self.weight = Tensor(
            glorot_uniform(rng, (out_dim, main_dim), main_dim, out_dim),
            name=f"{name}.weight",
        )
        self.side_weight = Tensor(
            glorot_uniform(rng, (out_dim, side_dim), max(side_dim, 1), out_dim),
            name=f"{name}.side_weight",
        )
        self.bias = Tensor(np.zeros(out_dim), name=f"{name}.bias")
        self._main: np.ndarray | None = None
        self._side: np.ndarray | None = None
        self._out: np.ndarray | None = None

    def params(self) -> list[Tensor]:
        return [self.weight, self.side_weight, self.bias]

    def forward(self, main: np.ndarray, side: np.ndarray | None = None) -> np.ndarray:
        if side is None:
            side = np.zeros(self.side_dim)
        if main.shape != (self.main_dim,) or side.shape != (self.side_dim,):
            raise ValueError(
                f"expected inputs ({self.main_dim},) and ({self.side_dim},), "
                f"got {main.shape} and {side.shape}"
            )
        pre = self.weight.values @ main + self.side_weight.values @ side + self.bias.values
        self._main, self._side = main, side
        self._out = np.tanh(pre)
        return self._out

    def backward(self, dout: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        if self._out is None or self._main is None or self._side is None:
            raise RuntimeError("backward called before forward")
        g = dout * (1.0 - self._out**2)
        self.weight.grad += np.outer(g, self._main)
        self.side_weight.grad += np.outer(g, self._side)
        self.bias.grad += g
        return self.weight.values.T @ g, self.side_weight.values.T @ g


class Linear:
    """Plain affine map W @ x + b."""

    def __init__(
        self, in_dim: int, out_dim: int, rng: np.random.Generator, name: str = "linear"
    ) -> None:
        self.in_dim = in_dim
        self.out_dim = out_dim
        self.weight = Tensor(
            glorot_uniform(rng, (out_dim, in_dim), in_dim, out_dim), name=f"{name}.weight"
        )
        self.bias = Tensor(np.zeros(out_dim), name=f"{name}.bias")
        self._in: np.ndarray | None = None

    def params(self) -> list[Tensor]:
        return [self.weight, self.bias]

    def forward(self, x: np.ndarray) -> np.ndarray:
        if x.shape != (self.in_dim,):
            raise ValueError(f"expected ({self.in_dim},) input, got {x.shape}")
        self._in = x
        return self.weight.values @ x + self.bias.values

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._in is None:
            raise RuntimeError("backward called before forward")
        self.weight.grad += np.outer(dout, self._in)
        self.bias.grad += dout
        return self.weight.values.T @ dout


class Embedding:
    """Row-lookup table for one categorical field."""

    def __init__(
        self, num_categories: int, dim: int, rng: np.random.Generator, name: str = "embed"
    ) -> None:
        self.num_categories = num_categories
        self.dim = dim
        self.table = Tensor(
            rng.uniform(-0.05, 0.05, size=(num_categories, dim)), name=f"{name}.table"
        )
        self._index: int | None = None

    def params(self) -> list[Tensor]:
        return [self.table]

    def forward(self, index: int) -> np.ndarray:
        if not 0 <= index < self.num_categories:
            raise IndexError(f"category {index} outside [0, {self.num_categories})")
        self._index = index
        return self.table.values[index].copy()

    def backward(self, dout: np.ndarray) -> None:
        if self._index is None:
            raise RuntimeError("backward called before forward")
        self.table.grad[self._index] += dout


class CentroidHead:
    """Softmax-weighted sum of fixed candidate locations.

    ``centers`` is a (K, 2) array of (lon, lat); the output is the convex
    combination of centers under softmax(e).  Softmax subtracts the max
    logit for stability.
    """

    def __init__(self, centers: np.ndarray) -> None:
        centers = np.ascontiguousarray(centers, dtype=np.float64)
        if centers.ndim != 2 or centers.shape[1] != 2 or centers.shape[0] < 1:
            raise ValueError(f"centers must be (K, 2) with K >= 1, got {centers.shape}")
        self.centers = centers
        self._weights: np.ndarray | None = None

    def params(self) -> list[Tensor]:
        return []

    @property
    def num_centers(self) -> int:
        return self.centers.shape[0]

    def forward(self, e: np.ndarray) -> np.ndarray:
        if e.shape != (self.num_centers,):
            raise ValueError(f"expected ({self.num_centers},) logits, got {e.shape}")
        z = np.exp(e - e.max())
        w = z / z.sum()
        self._weights = w
        return w @ self.centers

    def backward(self, dout: np.ndarray) -> np.ndarray:
        if self._weights is None:
            raise RuntimeError("backward called before forward")
        w = self._weights
        s = self.centers @ dout
        return w * (s - float(w @ s))

    @property
    def last_weights(self) -> np.ndarray:
        if self._weights is None:
            raise RuntimeError("no forward pass recorded")
        return self._weights


class Stack:
    """A fixed sequence of image layers (conv/pool) driven front to back."""

    def __init__(self, layers: Sequence) -> None:
        self.layers = list(layers)

    def params(self) -> list[Tensor]:
        return [p for layer in self.layers for p in layer.params()]

    def forward(self, x: np.ndarray) -> np.ndarray:
        for layer in self.layers:
            x = layer.forward(x)
        return x

    def backward(self, dout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            dout = layer.backward(dout)
        return dout

    def decision_signature(self) -> bytes:
        return b"|".join(layer.decision_signature() for layer in self.layers)


class SGD:
    """Classic momentum SGD: v <- mu*v + g; p <- p - lr*v.

    A step with any non-finite gradient is skipped entirely and logged, so
    one bad batch cannot poison the parameters.
    """

    def __init__(self, params: Sequence[Tensor], lr: float, momentum: float = 0.0) -> None:
        if lr <= 0.0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        if not 0.0 <= momentum < 1.0:
            raise ValueError(f"momentum must be in [0, 1), got {momentum}")
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.values) for p in self.params]

    def step(self) -> bool:
        """Apply one update; returns False if skipped on non-finite grads."""
        for p in self.params:
            if not np.all(np.isfinite(p.grad)):
                log.warning("skipping SGD step: non-finite gradient in %s", p.name)
                return False
        for p, v in zip(self.params, self.velocity):
            v *= self.momentum
            v += p.grad
            p.values -= self.lr * v
        return True

    def zero_grad(self) -> None:
        for p in self.params:
            p.zero_grad()


def global_grad_norm(params: Sequence[Tensor]) -> float:
    total = 0.0
    for p in params:
        total += float((p.grad * p.grad).sum())
    return math.sqrt(total)


def clip_grad_norm(params: Sequence[Tensor], max_norm: float) -> tuple[float, bool]:
    """Scale all gradients so their global norm is at most ``max_norm``.

    Returns (pre-clip norm, whether clipping fired).
    """
    norm = global_grad_norm(params)
    if norm > max_norm and norm > 0.0:
        scale = max_norm / norm
        for p in params:
            p.grad *= scale
        return norm, True
    return norm, False


@dataclass
class GradCheckResult:
    """Comparison of analytic gradients against central finite differences."""

    max_error: float
    per_tensor: dict[str, float] = field(default_factory=dict)
    excluded: int = 0

    def __float__(self) -> float:
        return self.max_error


def relative_error(analytic: float, numeric: float) -> float:
    return abs(analytic - numeric) / max(1.0, abs(analytic), abs(numeric))


def grad_check_fn(
    forward: Callable[[], float],
    backward: Callable[[], None],
    tensors: Sequence[Tensor],
    epsilon: float = 1e-5,
    signature: Callable[[], bytes] | None = None,
) -> GradCheckResult:
    """Verify analytic gradients of a scalar function by central differences.

    ``forward`` recomputes the scalar from current tensor values;
    ``backward`` fills ``tensor.grad`` (called once, after one forward).
    If ``signature`` is given, elements whose +/- epsilon perturbations
    land on different branch decisions (ReLU sign flips, pool argmax
    moves) are excluded: the function is not differentiable there.
    """
    for t in tensors:
        t.zero_grad()
    forward()
    backward()
    analytic = [t.grad.copy() for t in tensors]

    result = GradCheckResult(max_error=0.0)
    for i, t in enumerate(tensors):
        name = f"{i}:{t.name}" if t.name else f"tensor{i}"
        worst = 0.0
        flat = t.values.ravel()
        grad_flat = analytic[i].ravel()
        for j in range(flat.size):
            saved = flat[j]
            flat[j] = saved + epsilon
            f_plus = forward()
            sig_plus = signature() if signature is not None else b""
            flat[j] = saved - epsilon
            f_minus = forward()
            sig_minus = signature() if signature is not None else b""
            flat[j] = saved
            if signature is not None and sig_plus != sig_minus:
                result.excluded += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * epsilon)
            worst = max(worst, relative_error(float(grad_flat[j]), numeric))
        result.per_tensor[name] = worst
        result.max_error = max(result.max_error, worst)
    forward()  # leave caches consistent with unperturbed values
    return result


def grad_check(stack: Stack, x: np.ndarray, epsilon: float = 1e-5) -> GradCheckResult:
    """Gradient-check a layer stack on input ``x``.

    The scalar under test is a fixed random weighting of the stack output,
    which exercises every output element.  Both the layer parameters and
    the input itself are checked.
    """
    probe_rng = np.random.default_rng(1234)
    out_shape = stack.forward(np.asarray(x, dtype=np.float64)).shape
    probe = probe_rng.standard_normal(out_shape)
    x_t = Tensor(np.asarray(x, dtype=np.float64), name="input")

    def forward() -> float:
        return float((stack.forward(x_t.values) * probe).sum())

    def backward() -> None:
        x_t.grad += stack.backward(probe)

    return grad_check_fn(
        forward,
        backward,
        [*stack.params(), x_t],
        epsilon=epsilon,
        signature=stack.decision_signature,
    )
