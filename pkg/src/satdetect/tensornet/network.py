"""Network assembly, forward/backward orchestration and cache validity."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..geo import ValidationError
from .layers import Layer, MaxPool2x2, ShapeError, Unpool2x2

Shape3 = tuple[int, int, int]


class StaleCacheError(ValidationError):
    """A backward pass used a cache from before a parameter update."""


@dataclass
class ForwardCache:
    version: int
    contexts: list[dict]
    input_shape: tuple
    output_shape: tuple


@dataclass
class Gradients:
    """Parameter gradients keyed like ``conv0.weight`` plus the input grad."""

    params: dict[str, np.ndarray]
    wrt_input: np.ndarray


def check_tensor(x: np.ndarray, where: str = "input") -> np.ndarray:
    x = np.asarray(x)
    if x.ndim != 4:
        raise ShapeError(f"{where}: expected NCHW tensor, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{where}: non-finite values")
    return x


class Network:
    """An ordered layer chain with validated shape algebra.

    Unpool layers name their source pool by layer index; the network
    verifies the pairing at build time (matching channel count and
    spatial size) and routes the recorded indices at run time. The
    ``version`` counter increments on every parameter mutation so that a
    cache from an older forward pass cannot silently feed backward.
    """

    _SHORT = {"conv2d": "conv", "maxpool2x2": "maxpool", "unpool2x2": "unpool",
              "globalaveragepool": "gap"}

    def __init__(
        self,
        layers: list[Layer],
        input_shape: Shape3,
        dtype=np.float64,
        seed: int = 0,
    ):
        if not layers:
            raise ValidationError("network needs at least one layer")
        self.layers = list(layers)
        self.input_shape = tuple(input_shape)
        self.dtype = np.dtype(dtype)
        self.seed = seed
        self.version = 0
        self.names = self._assign_names()
        self.shapes = self._validate_chain()
        rng = np.random.default_rng(seed)
        for layer in self.layers:
            layer.init_params(rng, self.dtype)

    def _assign_names(self) -> list[str]:
        return [
            f"{self._SHORT.get(layer.kind, layer.kind)}{i}"
            for i, layer in enumerate(self.layers)
        ]

    def _validate_chain(self) -> list[Shape3]:
        shapes = [self.input_shape]
        pool_out: dict[int, Shape3] = {}
        for i, layer in enumerate(self.layers):
            try:
                out = layer.out_shape(shapes[-1])
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({self.names[i]}): {err}") from None
            if isinstance(layer, MaxPool2x2):
                pool_out[i] = out
            if isinstance(layer, Unpool2x2):
                if layer.pool not in pool_out:
                    raise ShapeError(
                        f"layer {i} ({self.names[i]}): pool link {layer.pool} is not "
                        "an earlier maxpool layer"
                    )
                if pool_out[layer.pool] != shapes[-1]:
                    raise ShapeError(
                        f"layer {i} ({self.names[i]}): input {shapes[-1]} does not "
                        f"match linked pool output {pool_out[layer.pool]}"
                    )
            shapes.append(out)
        return shapes

    @property
    def output_shape(self) -> Shape3:
        return self.shapes[-1]

    def parameters(self) -> list[tuple[str, np.ndarray]]:
        out = []
        for name, layer in zip(self.names, self.layers):
            for pname in sorted(layer.params):
                out.append((f"{name}.{pname}", layer.params[pname]))
        return out

    def set_parameter(self, full_name: str, value: np.ndarray) -> None:
        layer_name, pname = full_name.split(".")
        layer = self.layers[self.names.index(layer_name)]
        if layer.params[pname].shape != value.shape:
            raise ShapeError(
                f"{full_name}: shape {value.shape} != {layer.params[pname].shape}"
            )
        layer.params[pname] = value.astype(self.dtype)
        self.version += 1

    def bump_version(self) -> None:
        self.version += 1

    def forward(self, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
        x = check_tensor(x).astype(self.dtype, copy=False)
        if tuple(x.shape[1:]) != self.input_shape:
            raise ShapeError(
                f"layer 0 ({self.names[0]}): input {tuple(x.shape[1:])} does not "
                f"match declared {self.input_shape}"
            )
        contexts: list[dict] = []
        in_shape = x.shape
        for i, layer in enumerate(self.layers):
            ctx: dict = {}
            if isinstance(layer, Unpool2x2):
                ctx["pool_indices"] = contexts[layer.pool]["indices"]
            try:
                x = layer.forward(x, ctx)
            except ShapeError as err:
                raise ShapeError(f"layer {i} ({self.names[i]}): {err}") from None
            contexts.append(ctx)
        cache = ForwardCache(
            version=self.version,
            contexts=contexts,
            input_shape=in_shape,
            output_shape=x.shape,
        )
        return x, cache

    def backward(self, cache: ForwardCache, loss_grad: np.ndarray) -> Gradients:
        if cache.version != self.version:
            raise StaleCacheError(
                f"cache built at version {cache.version}, network now at {self.version}"
            )
        grad = check_tensor(loss_grad, "loss_grad").astype(self.dtype, copy=False)
        if grad.shape != cache.output_shape:
            raise ShapeError(
                f"loss_grad shape {grad.shape} != output {cache.output_shape}"
            )
        param_grads: dict[str, np.ndarray] = {}
        for i in range(len(self.layers) - 1, -1, -1):
            layer = self.layers[i]
            grad, pgrads = layer.backward(grad, cache.contexts[i])
            for pname, g in pgrads.items():
                param_grads[f"{self.names[i]}.{pname}"] = g
        return Gradients(params=param_grads, wrt_input=grad)

    def spec(self) -> dict:
        """Structural description, enough to rebuild an identical skeleton."""
        return {
            "input_shape": list(self.input_shape),
            "dtype": self.dtype.str,
            "seed": self.seed,
            "layers": [
                {"kind": layer.kind, **({"spec": layer.spec()} if layer.spec() else {})}
                for layer in self.layers
            ],
        }
