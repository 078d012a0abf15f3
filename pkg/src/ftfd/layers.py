"""Weight-bearing building blocks: parameter registry, conv/linear/BN/dropout.

Modules register parameters (trainable Tensors) and buffers (live numpy
arrays such as batch-norm running stats). ``state_arrays`` flattens both
into dotted-name -> array for checkpointing; construction order fixes the
names, so save/load is deterministic.
"""

from __future__ import annotations

import numpy as np

from . import tensor as tz
from .tensor import Tensor


class Module:
    """Base class with recursive parameter/buffer discovery and train/eval mode."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._buffers: dict[str, np.ndarray] = {}
        self._mode = "train"

    # -- registration ----------------------------------------------------
    def param(self, name: str, array: np.ndarray) -> Tensor:
        t = Tensor(array, requires_grad=True)
        self._params[name] = t
        return t

    def buffer(self, name: str, array: np.ndarray) -> np.ndarray:
        self._buffers[name] = array
        return array

    def children(self):
        for name, value in vars(self).items():
            if isinstance(value, Module):
                yield name, value
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Module):
                        yield f"{name}.{i}", item

    def named_params(self, prefix: str = "") -> dict[str, Tensor]:
        out = {prefix + k: v for k, v in self._params.items()}
        for name, child in self.children():
            out.update(child.named_params(f"{prefix}{name}."))
        return out

    def named_buffers(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {prefix + k: v for k, v in self._buffers.items()}
        for name, child in self.children():
            out.update(child.named_buffers(f"{prefix}{name}."))
        return out

    # -- mode / gradients -------------------------------------------------
    @property
    def mode(self) -> str:
        return self._mode

    def train(self):
        self._mode = "train"
        for _, child in self.children():
            child.train()
        return self

    def eval(self):
        self._mode = "eval"
        for _, child in self.children():
            child.eval()
        return self

    def zero_grad(self):
        for p in self.named_params().values():
            p.zero_grad()

    # -- checkpoint state --------------------------------------------------
    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.named_params().items()}
        out.update(self.named_buffers())
        return out

    def load_state_arrays(self, state: dict[str, np.ndarray]):
        params = self.named_params()
        buffers = self.named_buffers()
        for name, arr in state.items():
            if name in params:
                tgt = params[name].data
            elif name in buffers:
                tgt = buffers[name]
            else:
                raise KeyError(f"unknown weight name {name!r}")
            if tgt.shape != arr.shape:
                raise ValueError(
                    f"{name}: shape mismatch {arr.shape} vs expected {tgt.shape}"
                )
            tgt[...] = arr
        missing = (set(params) | set(buffers)) - set(state)
        if missing:
            raise KeyError(f"checkpoint missing weights: {sorted(missing)[:4]}…")


def kaiming_uniform(rng: np.random.Generator, shape, fan_in: int, dtype) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


class Conv2d(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, *,
                 stride: int = 1, padding: int = 0, dtype=np.float64):
        super().__init__()
        self.stride = stride
        self.padding = padding
        fan_in = c_in * kernel * kernel
        self.weight = self.param(
            "weight", kaiming_uniform(rng, (c_out, c_in, kernel, kernel), fan_in, dtype))
        self.bias = self.param("bias", np.zeros(c_out, dtype=dtype))

    def __call__(self, x) -> Tensor:
        return tz.conv2d(x, self.weight, self.bias,
                         stride=self.stride, padding=self.padding)


class Linear(Module):
    def __init__(self, d_in: int, d_out: int, rng, *, dtype=np.float64,
                 bias_init: float = 0.0):
        super().__init__()
        self.weight = self.param(
            "weight", kaiming_uniform(rng, (d_out, d_in), d_in, dtype))
        self.bias = self.param("bias", np.full(d_out, bias_init, dtype=dtype))

    def __call__(self, x) -> Tensor:
        return tz.linear(x, self.weight, self.bias)


class BatchNorm2d(Module):
    def __init__(self, channels: int, *, eps: float = 1e-5, momentum: float = 0.1,
                 dtype=np.float64):
        super().__init__()
        self.eps = eps
        self.momentum = momentum
        self.update_running = True
        self.gamma = self.param("gamma", np.ones(channels, dtype=dtype))
        self.beta = self.param("beta", np.zeros(channels, dtype=dtype))
        self.state = tz.BatchNormState(
            mean=self.buffer("running_mean", np.zeros(channels, dtype=dtype)),
            var=self.buffer("running_var", np.ones(channels, dtype=dtype)),
        )
        self._init_flag = self.buffer("initialized", np.zeros(1, dtype=dtype))
        self.state.initialized = False

    def __call__(self, x) -> Tensor:
        xb, squeeze = batchify(x)
        self.state.initialized = bool(self._init_flag[0])
        out = tz.batchnorm2d(
            xb, self.gamma, self.beta, self.state, self._mode,
            eps=self.eps, momentum=self.momentum,
            update_running=self.update_running and self._mode == "train",
        )
        if self.state.initialized:
            self._init_flag[0] = 1.0
        return tz.reshape(out, out.shape[1:]) if squeeze else out


class Dropout(Module):
    """Inverted dropout with its own seeded stream; masks can be frozen."""

    def __init__(self, p: float, seed: int):
        super().__init__()
        self.p = p
        self._rng = np.random.default_rng(seed)
        self.freeze = False
        self._mask = None

    def __call__(self, x) -> Tensor:
        if self._mode == "eval" or self.p == 0.0:
            return x
        if self.freeze:
            if self._mask is None or self._mask.shape != x.shape:
                self._mask = self._rng.random(x.shape) >= self.p
            return tz.dropout(x, self.p, "train", mask=self._mask)
        return tz.dropout(x, self.p, "train", self._rng)

    def thaw(self):
        self.freeze = False
        self._mask = None


class ConvBNReLU(Module):
    def __init__(self, c_in: int, c_out: int, kernel: int, rng, *,
                 stride: int = 1, padding: int = 0, dtype=np.float64):
        super().__init__()
        self.conv = Conv2d(c_in, c_out, kernel, rng,
                           stride=stride, padding=padding, dtype=dtype)
        self.bn = BatchNorm2d(c_out, dtype=dtype)

    def __call__(self, x) -> Tensor:
        return tz.relu(self.bn(self.conv(x)))


def set_bn_updates(module: Module, enabled: bool):
    """Toggle running-stat updates everywhere (frozen for gradient checks)."""
    if isinstance(module, BatchNorm2d):
        module.update_running = enabled
    for _, child in module.children():
        set_bn_updates(child, enabled)


def set_dropout_freeze(module: Module, frozen: bool):
    if isinstance(module, Dropout):
        if frozen:
            module.freeze = True
        else:
            module.thaw()
    for _, child in module.children():
        set_dropout_freeze(child, frozen)


def batchify(x) -> tuple[Tensor, bool]:
    """Promote a (C,H,W) tensor/array to batch size 1; report if it was unbatched."""
    t = x if isinstance(x, Tensor) else Tensor(x)
    if t.ndim == 3:
        return tz.reshape(t, (1, *t.shape)), True
    if t.ndim == 4:
        return t, False
    raise ValueError(f"expected C,H,W or N,C,H,W input, got shape {tuple(t.shape)}")
