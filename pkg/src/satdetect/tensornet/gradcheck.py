"""Central finite-difference verification of every backward pass.

The loss is a fixed random linear functional of the network output, so
its gradient with respect to the output is a constant tensor and every
layer's backward gets exercised. Relative error compares the analytic
gradient with (L(p + eps) - L(p - eps)) / 2 eps per sampled parameter.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import Network


@dataclass(frozen=True)
class GradCheckReport:
    per_layer: dict[str, float]  # max relative error per parameter tensor
    max_rel_error: float
    tolerance: float
    checks: int

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance

    def __str__(self) -> str:
        lines = [
            f"gradient check: {'PASS' if self.passed else 'FAIL'} "
            f"(max rel err {self.max_rel_error:.3e}, tol {self.tolerance:.0e}, "
            f"{self.checks} probes)"
        ]
        for name in sorted(self.per_layer):
            lines.append(f"  {name}: {self.per_layer[name]:.3e}")
        return "\n".join(lines)


def _rel_err(a: float, n: float) -> float:
    scale = max(abs(a), abs(n))
    if scale < 1e-8:
        return 0.0
    return abs(a - n) / scale


def sweep_configs(n: int = 50, seed: int = 0):
    """n small random (label, network, input) triples over every layer kind.

    Five templates rotate so the sweep exercises each layer type many
    times: bare convs, conv/relu stacks, pooled heads with a sigmoid,
    pool/unpool pairs, and a global-average classification head. Shapes
    and channel counts vary with the seed.
    """
    from .layers import Conv2d, GlobalAveragePool, MaxPool2x2, Relu, Sigmoid, Unpool2x2

    rng = np.random.default_rng(seed)
    configs = []
    for i in range(n):
        cin = int(rng.integers(1, 4))
        mid = int(rng.integers(1, 5))
        size = 2 * int(rng.integers(2, 5))
        batch = int(rng.integers(1, 3))
        k = int(rng.choice([1, 3]))
        pad = (k - 1) // 2
        template = i % 5
        if template == 0:
            layers = [Conv2d(cin, mid, k, pad=pad)]
            label = f"conv{k}x{k}"
        elif template == 1:
            layers = [Conv2d(cin, mid, k, pad=pad), Relu(), Conv2d(mid, 1, 1)]
            label = "conv-relu-conv"
        elif template == 2:
            layers = [Conv2d(cin, mid, 3, pad=1), MaxPool2x2(), Sigmoid()]
            label = "conv-pool-sigmoid"
        elif template == 3:
            layers = [
                Conv2d(cin, mid, 3, pad=1),
                MaxPool2x2(),
                Relu(),
                Unpool2x2(pool=1),
                Conv2d(mid, 1, 3, pad=1),
            ]
            label = "pool-unpool"
        else:
            layers = [Conv2d(cin, mid, 3, pad=1), MaxPool2x2(), GlobalAveragePool(), Sigmoid()]
            label = "gap-head"
        net = Network(layers, input_shape=(cin, size, size), seed=int(rng.integers(2**31)))
        x = rng.uniform(-1.0, 1.0, size=(batch, cin, size, size))
        configs.append((f"{i:02d}-{label}", net, x))
    return configs


def gradient_check(
    net: Network,
    x: np.ndarray,
    tolerance: float = 1e-4,
    epsilon: float = 1e-5,
    max_probes_per_tensor: int = 16,
    rng: np.random.Generator | None = None,
    check_input: bool = True,
) -> GradCheckReport:
    """Compare analytic and numeric gradients on a sample of coordinates."""
    rng = rng or np.random.default_rng(0)
    x = np.asarray(x, dtype=np.float64)
    out, cache = net.forward(x)
    direction = rng.uniform(-1.0, 1.0, size=out.shape)
    grads = net.backward(cache, direction)

    def loss() -> float:
        y, _ = net.forward(x)
        return float((y * direction).sum())

    per_layer: dict[str, float] = {}
    checks = 0
    for name, param in net.parameters():
        analytic = grads.params[name]
        flat = param.reshape(-1)
        n_probe = min(max_probes_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=n_probe, replace=False)
        worst = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            upper = loss()
            flat[idx] = orig - epsilon
            lower = loss()
            flat[idx] = orig
            numeric = (upper - lower) / (2.0 * epsilon)
            worst = max(worst, _rel_err(float(analytic.reshape(-1)[idx]), numeric))
            checks += 1
        per_layer[name] = worst
    if check_input:
        flat = x.reshape(-1)
        n_probe = min(max_probes_per_tensor, flat.size)
        picks = rng.choice(flat.size, size=n_probe, replace=False)
        worst = 0.0
        for idx in picks:
            orig = flat[idx]
            flat[idx] = orig + epsilon
            upper = loss()
            flat[idx] = orig - epsilon
            lower = loss()
            flat[idx] = orig
            numeric = (upper - lower) / (2.0 * epsilon)
            worst = max(worst, _rel_err(float(grads.wrt_input.reshape(-1)[idx]), numeric))
            checks += 1
        per_layer["input"] = worst
    max_err = max(per_layer.values()) if per_layer else 0.0
    return GradCheckReport(
        per_layer=per_layer,
        max_rel_error=max_err,
        tolerance=tolerance,
        checks=checks,
    )
