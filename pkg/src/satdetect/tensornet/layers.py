"""Layer set for SegNet-style encoder/decoder nets on NCHW tensors.

Each layer is a small object with ``out_shape`` for build-time shape
algebra plus ``forward``/``backward`` that stash whatever they need in a
per-call context dict. The pooling layer records the flat input index of
every window maximum; the matching unpool layer consumes those indices,
which the owning network injects into its context.
"""
from __future__ import annotations

import numpy as np

from ..geo import ValidationError

Shape3 = tuple[int, int, int]  # (C, H, W); batch dimension stays dynamic


class ShapeError(ValidationError):
    """A tensor does not fit where the network expects it to."""


class Layer:
    """Common base: stateless unless a subclass defines parameters."""

    def __init__(self) -> None:
        self.params: dict[str, np.ndarray] = {}

    def out_shape(self, in_shape: Shape3) -> Shape3:
        raise NotImplementedError

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        """Default: nothing to initialize."""

    def forward(self, x: np.ndarray, ctx: dict) -> np.ndarray:
        raise NotImplementedError

    def backward(
        self, grad: np.ndarray, ctx: dict
    ) -> tuple[np.ndarray, dict[str, np.ndarray]]:
        raise NotImplementedError

    @property
    def kind(self) -> str:
        return type(self).__name__.lower()

    def spec(self) -> dict:
        """JSON-ready constructor arguments, used by checkpoints."""
        return {}


class Conv2d(Layer):
    """Plain 2D convolution (cross-correlation) with zero padding."""

    def __init__(self, cin: int, cout: int, k: int, stride: int = 1, pad: int = 0):
        super().__init__()
        if min(cin, cout, k, stride) < 1 or pad < 0:
            raise ValidationError("conv2d: cin/cout/k/stride must be >= 1, pad >= 0")
        self.cin, self.cout, self.k, self.stride, self.pad = cin, cout, k, stride, pad
        self.params = {
            "weight": np.zeros((cout, cin, k, k)),
            "bias": np.zeros(cout),
        }

    def spec(self) -> dict:
        return {
            "cin": self.cin,
            "cout": self.cout,
            "k": self.k,
            "stride": self.stride,
            "pad": self.pad,
        }

    def init_params(self, rng: np.random.Generator, dtype) -> None:
        fan_in = self.cin * self.k * self.k
        bound = np.sqrt(6.0 / fan_in)  # Kaiming uniform for ReLU fan-in
        self.params["weight"] = rng.uniform(
            -bound, bound, size=(self.cout, self.cin, self.k, self.k)
        ).astype(dtype)
        b = 1.0 / np.sqrt(fan_in)
        self.params["bias"] = rng.uniform(-b, b, size=self.cout).astype(dtype)

    def out_shape(self, in_shape: Shape3) -> Shape3:
        c, h, w = in_shape
        if c != self.cin:
            raise ShapeError(f"conv2d expects {self.cin} channels, got {c}")
        ho = (h + 2 * self.pad - self.k) // self.stride + 1
        wo = (w + 2 * self.pad - self.k) // self.stride + 1
        if ho < 1 or wo < 1:
            raise ShapeError(f"conv2d output would be empty for input {in_shape}")
        return (self.cout, ho, wo)

    def _windows(self, x: np.ndarray) -> np.ndarray:
        p = self.pad
        if p:
            x = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
        win = np.lib.stride_tricks.sliding_window_view(x, (self.k, self.k), axis=(2, 3))
        return win[:, :, :: self.stride, :: self.stride]  # (N,C,Ho,Wo,k,k)

    def forward(self, x: np.ndarray, ctx: dict) -> np.ndarray:
        win = self._windows(x)
        ctx["windows"] = win
        ctx["in_shape"] = x.shape
        out = np.einsum("nchwij,ocij->nohw", win, self.params["weight"], optimize=True)
        return out + self.params["bias"][None, :, None, None]

    def backward(self, grad, ctx):
        win = ctx["windows"]
        n, cin, hp, wp = ctx["in_shape"]
        d_weight = np.einsum("nchwij,nohw->ocij", win, grad, optimize=True)
        d_bias = grad.sum(axis=(0, 2, 3))
        ho, wo = grad.shape[2], grad.shape[3]
        s, p, k = self.stride, self.pad, self.k
        dx_pad = np.zeros((n, cin, hp + 2 * p, wp + 2 * p), dtype=grad.dtype)
        w = self.params["weight"]
        for i in range(k):
            for j in range(k):
                contrib = np.einsum("nohw,oc->nchw", grad, w[:, :, i, j], optimize=True)
                dx_pad[:, :, i : i + s * ho : s, j : j + s * wo : s] += contrib
        dx = dx_pad if p == 0 else dx_pad[:, :, p:-p, p:-p]
        return dx, {"weight": d_weight, "bias": d_bias}


class Relu(Layer):
    def out_shape(self, in_shape: Shape3) -> Shape3:
        return in_shape

    def forward(self, x, ctx):
        ctx["mask"] = x > 0
        return np.where(ctx["mask"], x, 0.0)

    def backward(self, grad, ctx):
        return grad * ctx["mask"], {}


class Sigmoid(Layer):
    def out_shape(self, in_shape: Shape3) -> Shape3:
        return in_shape

    def forward(self, x, ctx):
        out = 0.5 * (1.0 + np.tanh(0.5 * x))  # overflow-safe logistic
        ctx["out"] = out
        return out

    def backward(self, grad, ctx):
        out = ctx["out"]
        return grad * out * (1.0 - out), {}


class MaxPool2x2(Layer):
    """2x2/stride-2 max pooling that records flat argmax indices.

    The stored index for output cell (n, c, oh, ow) is r * W + c of the
    winning input pixel, enabling exact non-linear upsampling later.
    Ties resolve to the first position in row-major window order.
    """

    def out_shape(self, in_shape: Shape3) -> Shape3:
        c, h, w = in_shape
        if h % 2 or w % 2:
            raise ShapeError(f"maxpool2x2 needs even H and W, got {h}x{w}")
        return (c, h // 2, w // 2)

    def forward(self, x, ctx):
        n, c, h, w = x.shape
        win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
        win = win.reshape(n, c, h // 2, w // 2, 4)
        local = win.argmax(axis=-1)
        values = np.take_along_axis(win, local[..., None], axis=-1)[..., 0]
        oh = np.arange(h // 2)[None, None, :, None]
        ow = np.arange(w // 2)[None, None, None, :]
        rows = 2 * oh + local // 2
        cols = 2 * ow + local % 2
        ctx["indices"] = rows * w + cols
        ctx["in_shape"] = x.shape
        return values

    def backward(self, grad, ctx):
        n, c, h, w = ctx["in_shape"]
        idx = ctx["indices"].reshape(n, c, -1)
        dx = np.zeros((n, c, h * w), dtype=grad.dtype)
        np.put_along_axis(dx, idx, grad.reshape(n, c, -1), axis=2)
        return dx.reshape(n, c, h, w), {}


class Unpool2x2(Layer):
    """Sparse upsample through a linked pool's stored indices.

    ``pool`` names the earlier MaxPool2x2 layer by index within the
    network; the network injects that pool's recorded indices into this
    layer's context on every forward pass.
    """

    def __init__(self, pool: int):
        super().__init__()
        self.pool = pool

    def spec(self) -> dict:
        return {"pool": self.pool}

    def out_shape(self, in_shape: Shape3) -> Shape3:
        c, h, w = in_shape
        return (c, h * 2, w * 2)

    def forward(self, x, ctx):
        indices = ctx["pool_indices"]
        if indices.shape != x.shape:
            raise ShapeError(
                f"unpool input {x.shape} does not match pool indices {indices.shape}"
            )
        n, c, h, w = x.shape
        out = np.zeros((n, c, 4 * h * w), dtype=x.dtype)
        np.put_along_axis(out, indices.reshape(n, c, -1), x.reshape(n, c, -1), axis=2)
        ctx["indices"] = indices
        return out.reshape(n, c, 2 * h, 2 * w)

    def backward(self, grad, ctx):
        indices = ctx["indices"]
        n, c = indices.shape[0], indices.shape[1]
        flat = grad.reshape(n, c, -1)
        dx = np.take_along_axis(flat, indices.reshape(n, c, -1), axis=2)
        return dx.reshape(indices.shape), {}


class GlobalAveragePool(Layer):
    """Mean over H and W, emitted as (N, C, 1, 1)."""

    def out_shape(self, in_shape: Shape3) -> Shape3:
        return (in_shape[0], 1, 1)

    def forward(self, x, ctx):
        ctx["hw"] = x.shape[2] * x.shape[3]
        ctx["in_shape"] = x.shape
        return x.mean(axis=(2, 3), keepdims=True)

    def backward(self, grad, ctx):
        n, c, h, w = ctx["in_shape"]
        return np.broadcast_to(grad / ctx["hw"], (n, c, h, w)).copy(), {}


LAYER_KINDS = {
    "conv2d": Conv2d,
    "relu": Relu,
    "sigmoid": Sigmoid,
    "maxpool2x2": MaxPool2x2,
    "unpool2x2": Unpool2x2,
    "globalaveragepool": GlobalAveragePool,
}


def layer_from_spec(kind: str, spec: dict) -> Layer:
    if kind not in LAYER_KINDS:
        raise ValidationError(f"unknown layer kind {kind!r}")
    return LAYER_KINDS[kind](**spec)
