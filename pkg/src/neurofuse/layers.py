"""Network building blocks: parameter registry, layers, and (de)serialization.

Modules register child modules and parameters automatically on attribute
assignment, so ``named_parameters`` and ``state_dict`` walk the tree without
per-layer bookkeeping. Freezing a subtree drops its parameters out of the
gradient tape entirely and pins its batch-norm layers to inference
statistics, which turns a frozen backbone into a deterministic feature
extractor.
"""

from __future__ import annotations

from typing import Iterator

import numpy as np

from . import tensor as T
from .tensor import Tensor


class Parameter(Tensor):
    """A trainable tensor with a registry name."""

    __slots__ = ("name",)

    def __init__(self, data, name: str = ""):
        super().__init__(np.asarray(data, dtype=np.float32), requires_grad=True)
        self.name = name


class Module:
    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_modules", {})
        object.__setattr__(self, "_buffers", {})
        object.__setattr__(self, "_training", True)
        object.__setattr__(self, "_frozen", False)

    def __setattr__(self, key, value):
        if isinstance(value, Parameter):
            self._params[key] = value
        elif isinstance(value, Module):
            self._modules[key] = value
        object.__setattr__(self, key, value)

    # -- tree walks ----------------------------------------------------------

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Parameter]]:
        for key, p in self._params.items():
            p.name = f"{prefix}{key}"
            yield p.name, p
        for key, mod in self._modules.items():
            yield from mod.named_parameters(f"{prefix}{key}.")

    def parameters(self) -> list[Parameter]:
        return [p for _, p in self.named_parameters()]

    def trainable_parameters(self) -> list[Parameter]:
        return [p for p in self.parameters() if p.requires_grad]

    def modules(self) -> Iterator["Module"]:
        yield self
        for mod in self._modules.values():
            yield from mod.modules()

    def named_buffers(self, prefix: str = "") -> Iterator[tuple[str, np.ndarray]]:
        for key, buf in self._buffers.items():
            yield f"{prefix}{key}", buf
        for key, mod in self._modules.items():
            yield from mod.named_buffers(f"{prefix}{key}.")

    def register_buffer(self, key: str, value: np.ndarray) -> None:
        self._buffers[key] = value
        object.__setattr__(self, key, value)

    # -- mode and freezing -----------------------------------------------------

    def train(self) -> "Module":
        for mod in self.modules():
            mod._training = True
        return self

    def eval(self) -> "Module":
        for mod in self.modules():
            mod._training = False
        return self

    def freeze(self) -> "Module":
        for mod in self.modules():
            mod._frozen = True
        for p in self.parameters():
            p.requires_grad = False
        return self

    def unfreeze(self) -> "Module":
        for mod in self.modules():
            mod._frozen = False
        for p in self.parameters():
            p.requires_grad = True
        return self

    @property
    def effective_training(self) -> bool:
        return self._training and not self._frozen

    def zero_grad(self) -> None:
        for p in self.parameters():
            if p.grad is not None:
                p.grad[...] = 0.0

    def astype(self, dtype) -> "Module":
        """Cast parameters and buffers in place (f64 for high-precision checks)."""
        for p in self.parameters():
            p.data = p.data.astype(dtype)
            p.grad = None
        for mod in self.modules():
            for key in list(mod._buffers):
                mod.register_buffer(key, mod._buffers[key].astype(dtype))
        return self

    # -- state ------------------------------------------------------------------

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {name: p.data.copy() for name, p in self.named_parameters()}
        out.update({name: buf.copy() for name, buf in self.named_buffers()})
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        """Install a full state dict; any name or shape disagreement is fatal."""
        targets: dict[str, np.ndarray] = {name: p.data for name, p in self.named_parameters()}
        targets.update({name: buf for name, buf in self.named_buffers()})
        missing = sorted(set(targets) - set(state))
        extra = sorted(set(state) - set(targets))
        mismatched = sorted(
            f"{name} (have {targets[name].shape}, file has {np.asarray(state[name]).shape})"
            for name in set(targets) & set(state)
            if targets[name].shape != np.asarray(state[name]).shape
        )
        problems = []
        if missing:
            problems.append(f"missing tensors: {', '.join(missing)}")
        if extra:
            problems.append(f"unexpected tensors: {', '.join(extra)}")
        if mismatched:
            problems.append(f"shape mismatches: {'; '.join(mismatched)}")
        if problems:
            raise ValueError("state does not fit this network: " + " | ".join(problems))
        for name, arr in state.items():
            targets[name][...] = arr

    def __call__(self, x: Tensor) -> Tensor:
        return self.forward(x)

    def forward(self, x: Tensor) -> Tensor:
        raise NotImplementedError

    def out_shape(self, in_shape: tuple[int, int, int]) -> tuple[int, int, int]:
        """Spatial shape inference, (H, W, C) in -> (H, W, C) out."""
        raise NotImplementedError


def count_trainable_params(net: Module) -> int:
    return sum(p.size for p in net.parameters() if p.requires_grad)


# -- weight init ----------------------------------------------------------------


def he_normal(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(np.float32)


# -- layers -----------------------------------------------------------------------


def _pool_geometry(h: int, w: int, window: int, stride: int, padding: str) -> tuple[int, int]:
    if padding == "same":
        return -(-h // stride), -(-w // stride)
    return (h - window) // stride + 1, (w - window) // stride + 1


class Conv2d(Module):
    def __init__(self, kh, kw, cin, cout, stride=1, padding="same", bias=True, zero_init=False, rng=None):
        super().__init__()
        self.stride, self.padding = stride, padding
        if zero_init:
            w = np.zeros((kh, kw, cin, cout), dtype=np.float32)
        else:
            w = he_normal(rng, (kh, kw, cin, cout), fan_in=kh * kw * cin)
        self.w = Parameter(w)
        self.b = Parameter(np.zeros(cout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, padding=self.padding)

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        kh, kw, _, cout = self.w.shape
        pt, pb, pl, pr, oh, ow = T._conv_geometry(h, w, kh, kw, self.stride, self.padding)
        return oh, ow, cout


class SeparableConv2d(Module):
    """Depthwise spatial filter (no bias) then pointwise projection (with bias)."""

    def __init__(self, kh, kw, cin, cout, stride=1, padding="same", rng=None):
        super().__init__()
        self.stride, self.padding = stride, padding
        self.dw = Parameter(he_normal(rng, (kh, kw, cin, 1), fan_in=kh * kw))
        self.pw = Parameter(he_normal(rng, (1, 1, cin, cout), fan_in=cin))
        self.b = Parameter(np.zeros(cout, dtype=np.float32))

    def forward(self, x):
        return T.depthwise_separable_conv(x, self.dw, self.pw, self.b, stride=self.stride, padding=self.padding)

    def out_shape(self, in_shape):
        h, w, _ = in_shape
        kh, kw, _, _ = self.dw.shape
        pt, pb, pl, pr, oh, ow = T._conv_geometry(h, w, kh, kw, self.stride, self.padding)
        return oh, ow, self.pw.shape[3]


class BatchNorm(Module):
    def __init__(self, channels: int, momentum: float = 0.99, eps: float = 1e-5):
        super().__init__()
        self.momentum, self.eps = momentum, eps
        self.gamma = Parameter(np.ones(channels, dtype=np.float32))
        self.beta = Parameter(np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_mean", np.zeros(channels, dtype=np.float32))
        self.register_buffer("running_var", np.ones(channels, dtype=np.float32))

    def forward(self, x):
        mode = "train" if self.effective_training else "infer"
        return T.batch_norm(
            x, self.gamma, self.beta, self.running_mean, self.running_var,
            mode=mode, momentum=self.momentum, eps=self.eps,
        )

    def out_shape(self, in_shape):
        return in_shape


class MaxPool2d(Module):
    def __init__(self, window: int, stride: int | None = None, padding: str = "valid"):
        super().__init__()
        self.window = window
        self.stride = window if stride is None else stride
        self.padding = padding

    def forward(self, x):
        return T.max_pool(x, self.window, self.stride, self.padding)

    def out_shape(self, in_shape):
        h, w, c = in_shape
        oh, ow = _pool_geometry(h, w, self.window, self.stride, self.padding)
        return oh, ow, c


class GlobalAvgPool(Module):
    def forward(self, x):
        return T.global_avg_pool(x)

    def out_shape(self, in_shape):
        return (in_shape[2],)


class Dense(Module):
    def __init__(self, fin: int, fout: int, bias: bool = True, rng=None):
        super().__init__()
        self.w = Parameter(he_normal(rng, (fin, fout), fan_in=fin))
        self.b = Parameter(np.zeros(fout, dtype=np.float32)) if bias else None

    def forward(self, x):
        return T.dense(x, self.w, self.b)


class ReLU(Module):
    def forward(self, x):
        return T.relu(x)

    def out_shape(self, in_shape):
        return in_shape


class Sigmoid(Module):
    def forward(self, x):
        return T.sigmoid(x)


class Softmax(Module):
    def forward(self, x):
        return T.softmax(x)


class Dropout(Module):
    """Inverted dropout; identity outside effective training.

    Draws come from ``self.rng``, reseeded by the trainer so runs are
    reproducible end to end.
    """

    def __init__(self, p: float):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must be in [0, 1), got {p}")
        self.p = p
        self.rng = np.random.default_rng(0)

    def forward(self, x):
        if not self.effective_training or self.p == 0.0:
            return x
        mask = (self.rng.random(x.shape) >= self.p).astype(x.dtype) / (1.0 - self.p)
        return T.mul(x, Tensor(mask))


class Sequential(Module):
    def __init__(self, *layers: Module):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(layers):
            setattr(self, f"l{i}", layer)

    def forward(self, x):
        for layer in self.layers:
            x = layer(x)
        return x

    def out_shape(self, in_shape):
        for layer in self.layers:
            in_shape = layer.out_shape(in_shape)
        return in_shape
