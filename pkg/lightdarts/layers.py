"""
Parameter-owning building blocks.

``Module`` keeps an ordered registry of its Tensors and child modules so that
networks can enumerate, replace and serialise their parameters by name.
"""

from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from . import functional as F
from .exceptions import ShapeError
from .tensor import Tensor


class Module:
    """Base class for anything holding learnable Tensors."""

    def __init__(self):
        object.__setattr__(self, "_params", {})
        object.__setattr__(self, "_children", {})

    def __setattr__(self, name: str, value) -> None:
        if isinstance(value, Tensor):
            self._params[name] = value
        elif isinstance(value, Module):
            self._children[name] = value
        else:
            object.__setattr__(self, name, value)

    def __getattr__(self, name: str):
        params = self.__dict__.get("_params", {})
        if name in params:
            return params[name]
        children = self.__dict__.get("_children", {})
        if name in children:
            return children[name]
        raise AttributeError(f"{type(self).__name__} has no attribute {name!r}")

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _slots(self, prefix: str = "") -> Iterator[Tuple[str, "Module", str]]:
        for key in self._params:
            yield f"{prefix}{key}", self, key
        for child_name, child in self._children.items():
            yield from child._slots(f"{prefix}{child_name}.")

    def named_parameters(self, prefix: str = "") -> Iterator[Tuple[str, Tensor]]:
        for name, owner, key in self._slots(prefix):
            yield name, owner._params[key]

    def parameters(self) -> List[Tensor]:
        return [tensor for _, tensor in self.named_parameters()]

    def num_parameters(self) -> int:
        return sum(t.size for t in self.parameters())

    def modules(self) -> Iterator["Module"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def replace_parameters(self, tensors: Sequence[Tensor]) -> None:
        """Swap in new Tensors, in ``named_parameters`` order."""
        slots = list(self._slots())
        if len(slots) != len(tensors):
            raise ShapeError(f"expected {len(slots)} parameter tensors, got {len(tensors)}")
        for (name, owner, key), tensor in zip(slots, tensors):
            if owner._params[key].shape != tensor.shape:
                raise ShapeError(
                    f"parameter {name}: shape {tensor.shape}, expected {owner._params[key].shape}"
                )
            owner._params[key] = tensor

    def zero_grad(self) -> None:
        for tensor in self.parameters():
            tensor.zero_grad()


class ModuleList(Module):
    """Indexed container of modules, named "0", "1", ..."""

    def __init__(self, modules: Sequence[Module] = ()):
        super().__init__()
        for module in modules:
            self.append(module)

    def append(self, module: Module) -> None:
        self._children[str(len(self._children))] = module

    def __getitem__(self, index: int) -> Module:
        return self._children[str(index)]

    def __len__(self) -> int:
        return len(self._children)

    def __iter__(self) -> Iterator[Module]:
        return iter(self._children.values())


def uniform_init(rng: np.random.Generator, shape: Tuple[int, ...], fan_in: int) -> np.ndarray:
    """Uniform in +-sqrt(1/fan_in)."""
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Conv2d(Module):
    """Bias-free convolution."""

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        kernel_size: int,
        rng: np.random.Generator,
        stride: int = 1,
        padding: int = 0,
        dilation: int = 1,
        groups: int = 1,
    ):
        super().__init__()
        self.stride = stride
        self.padding = padding
        self.dilation = dilation
        self.groups = groups
        fan_in = (in_channels // groups) * kernel_size * kernel_size
        shape = (out_channels, in_channels // groups, kernel_size, kernel_size)
        self.weight = Tensor(uniform_init(rng, shape, fan_in), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.conv2d(x, self.weight, self.stride, self.dilation, self.groups, self.padding)


class ChannelNorm(Module):
    """
    Per-channel normalisation with learned scale and shift.

    Uses batch statistics unless frozen statistics have been installed. While
    ``collecting`` is on, each forward also stores the batch mean and variance.
    """

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.gamma = Tensor(np.ones(channels), requires_grad=True)
        self.beta = Tensor(np.zeros(channels), requires_grad=True)
        self.frozen: Optional[Tuple[np.ndarray, np.ndarray]] = None
        self.collecting = False
        self.collected: List[Tuple[np.ndarray, np.ndarray, int]] = []

    def forward(self, x: Tensor) -> Tensor:
        if self.collecting:
            self.collected.append(
                (x.data.mean(axis=(0, 2, 3)), x.data.var(axis=(0, 2, 3)), x.shape[0])
            )
        return F.channel_norm(x, self.gamma, self.beta, self.eps, stats=self.frozen)

    def freeze_collected(self) -> None:
        """Install the sample-weighted average of the collected batch statistics."""
        if not self.collected:
            raise ValueError("no statistics collected")
        total = sum(count for _, _, count in self.collected)
        mean = sum(m * count for m, _, count in self.collected) / total
        var = sum(v * count for _, v, count in self.collected) / total
        self.frozen = (mean, var)
        self.collected = []
        self.collecting = False


class Linear(Module):
    def __init__(self, in_features: int, out_features: int, rng: np.random.Generator):
        super().__init__()
        self.weight = Tensor(
            uniform_init(rng, (out_features, in_features), in_features), requires_grad=True
        )
        self.bias = Tensor(uniform_init(rng, (out_features,), in_features), requires_grad=True)

    def forward(self, x: Tensor) -> Tensor:
        return F.linear(x, self.weight, self.bias)


def norm_layers(module: Module) -> List[ChannelNorm]:
    return [m for m in module.modules() if isinstance(m, ChannelNorm)]


def norm_statistics(module: Module) -> Dict[str, np.ndarray]:
    """Frozen statistics of every norm layer, keyed like ``named_parameters``."""
    stats: Dict[str, np.ndarray] = {}

    def walk(current: Module, prefix: str) -> None:
        if isinstance(current, ChannelNorm) and current.frozen is not None:
            stats[f"{prefix}frozen_mean"] = current.frozen[0]
            stats[f"{prefix}frozen_var"] = current.frozen[1]
        for name, child in current._children.items():
            walk(child, f"{prefix}{name}.")

    walk(module, "")
    return stats


def load_norm_statistics(module: Module, stats: Dict[str, np.ndarray]) -> None:
    def walk(current: Module, prefix: str) -> None:
        if isinstance(current, ChannelNorm):
            mean = stats.get(f"{prefix}frozen_mean")
            var = stats.get(f"{prefix}frozen_var")
            if mean is not None and var is not None:
                current.frozen = (mean, var)
        for name, child in current._children.items():
            walk(child, f"{prefix}{name}.")

    walk(module, "")
