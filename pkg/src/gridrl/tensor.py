"""Dense tensor ops with reverse-mode gradients.

Arrays are ``torch.Tensor`` objects and the recording tape is torch's
autograd graph. The functions here pin the op set the model uses, add the
shape contracts, and provide the central-difference checker that audits
every backward rule independently of autograd.
"""

from __future__ import annotations

import contextlib
import hashlib
import math
from collections import OrderedDict
from typing import Callable, Iterable, Iterator

import torch
import torch.nn.functional as F

DEFAULT_DTYPE = torch.float32


class ShapeError(ValueError):
    pass


class GradCheckError(ArithmeticError):
    pass


@contextlib.contextmanager
def float64_mode():
    """Run the enclosed block with float64 as the default dtype."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def configure_runtime(threads: int = 1) -> None:
    torch.set_num_threads(max(1, int(threads)))
    torch.use_deterministic_algorithms(True)


def _shape(t) -> tuple:
    return tuple(t.shape)


# --- op set ---------------------------------------------------------------

def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 1 or a.shape[-1] != b.shape[-2 if b.dim() > 1 else 0]:
        raise ShapeError(f"matmul shape mismatch: {_shape(a)} @ {_shape(b)}")
    return a @ b


def _broadcast_check(a, b, name):
    try:
        torch.broadcast_shapes(_shape(a), _shape(b))
    except RuntimeError:
        raise ShapeError(f"{name} shape mismatch: {_shape(a)} vs {_shape(b)}") from None


def add(a, b):
    _broadcast_check(a, b, "add")
    return a + b


def multiply(a, b):
    _broadcast_check(a, b, "multiply")
    return a * b


def broadcast(a: torch.Tensor, shape) -> torch.Tensor:
    try:
        return a.expand(*shape)
    except RuntimeError:
        raise ShapeError(f"cannot broadcast {_shape(a)} to {tuple(shape)}") from None


def embedding(table: torch.Tensor, ids: torch.Tensor) -> torch.Tensor:
    if table.dim() != 2:
        raise ShapeError(f"embedding table must be 2-d, got {_shape(table)}")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise ShapeError(f"embedding ids outside table of {table.shape[0]} rows")
    return F.embedding(ids, table)


def softmax(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ShapeError(f"softmax over empty axis: shape {_shape(x)}")
    return torch.softmax(x, dim=-1)


def log_softmax(x: torch.Tensor) -> torch.Tensor:
    if x.dim() == 0 or x.shape[-1] == 0:
        raise ShapeError(f"log-softmax over empty axis: shape {_shape(x)}")
    return torch.log_softmax(x, dim=-1)


def layer_norm(x: torch.Tensor, gain: torch.Tensor, bias: torch.Tensor, eps: float = 1e-5) -> torch.Tensor:
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise ShapeError(f"layer-norm shape mismatch: input {_shape(x)} vs gain {_shape(gain)}")
    return F.layer_norm(x, x.shape[-1:], gain, bias, eps)


def gelu(x: torch.Tensor) -> torch.Tensor:
    return F.gelu(x)


def reshape(x: torch.Tensor, shape) -> torch.Tensor:
    if math.prod(shape) != x.numel() and -1 not in shape:
        raise ShapeError(f"cannot reshape {_shape(x)} to {tuple(shape)}")
    return x.reshape(*shape)


def transpose(x: torch.Tensor, dim0: int = -2, dim1: int = -1) -> torch.Tensor:
    return x.transpose(dim0, dim1)


def cross_entropy(logits: torch.Tensor, targets: torch.Tensor, ignore_index: int = -100) -> torch.Tensor:
    """Mean NLL over targets not equal to ``ignore_index``."""
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(f"cross-entropy shape mismatch: logits {_shape(logits)} vs targets {_shape(targets)}")
    if logits.shape[-1] == 0:
        raise ShapeError("cross-entropy over empty class axis")
    return F.cross_entropy(
        logits.reshape(-1, logits.shape[-1]), targets.reshape(-1), ignore_index=ignore_index
    )


def reduce_sum(x, dim=None):
    return x.sum() if dim is None else x.sum(dim)


def reduce_mean(x, dim=None):
    return x.mean() if dim is None else x.mean(dim)


# --- parameters -----------------------------------------------------------

class ParamStore:
    """Named trainable tensors plus their gradient accumulators."""

    def __init__(self, tensors: dict | None = None):
        self._params: "OrderedDict[str, torch.Tensor]" = OrderedDict()
        self.grads: dict = {}
        for name, t in (tensors or {}).items():
            self.add(name, t)

    def add(self, name: str, tensor: torch.Tensor) -> torch.Tensor:
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        p = tensor.detach().clone().requires_grad_(True)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> torch.Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> list:
        return list(self._params)

    def num_elements(self) -> int:
        return sum(p.numel() for p in self._params.values())

    def zero_grad(self) -> None:
        self.grads = {name: torch.zeros_like(p) for name, p in self._params.items()}

    def clone(self, dtype=None) -> "ParamStore":
        return ParamStore(
            {n: (p.detach().to(dtype) if dtype else p.detach()) for n, p in self._params.items()}
        )

    def load(self, other: "ParamStore") -> None:
        with torch.no_grad():
            for name, p in self._params.items():
                p.copy_(other[name])

    def digest(self) -> str:
        h = hashlib.sha256()
        for name, p in self._params.items():
            h.update(name.encode())
            h.update(p.detach().contiguous().numpy().tobytes())
        return h.hexdigest()

    def grad_norm(self, names: Iterable[str]) -> float:
        total = 0.0
        for name in names:
            g = self.grads.get(name)
            if g is not None:
                total += float((g.double() ** 2).sum())
        return math.sqrt(total)


def backward(loss: torch.Tensor, params: ParamStore, accumulate: bool = False) -> dict:
    """Populate ``params.grads``; parameters the loss does not reach get zeros."""
    if loss.dim() != 0:
        raise ShapeError(f"backward needs a scalar loss, got shape {_shape(loss)}")
    names = params.names()
    tensors = [params[n] for n in names]
    grads = torch.autograd.grad(loss, tensors, allow_unused=True)
    if not accumulate or not params.grads:
        params.zero_grad()
    for name, g in zip(names, grads):
        if g is not None:
            params.grads[name] = params.grads[name] + g
    return params.grads


# --- finite differences ---------------------------------------------------

def finite_diff_check(
    f: Callable[[torch.Tensor], torch.Tensor],
    point: torch.Tensor,
    epsilon: float = 1e-6,
    analytic: torch.Tensor | None = None,
    coords: Iterable[int] | None = None,
) -> float:
    """Max over coordinates of |analytic - central| / (|central| + 1e-8).

    ``analytic`` defaults to the autograd gradient of ``f`` at ``point``;
    ``coords`` restricts the check to those flat indices.
    """
    x = point.detach().clone()
    if analytic is None:
        xg = x.clone().requires_grad_(True)
        value = f(xg)
        if value.dim() != 0:
            raise ShapeError("finite_diff_check needs a scalar function")
        (analytic,) = torch.autograd.grad(value, xg, allow_unused=True)
        if analytic is None:
            analytic = torch.zeros_like(x)
    analytic = analytic.detach().reshape(-1)
    flat = x.reshape(-1)
    worst = 0.0
    with torch.no_grad():
        for i in range(flat.numel()) if coords is None else coords:
            orig = flat[i].item()
            flat[i] = orig + epsilon
            up = float(f(flat.reshape(x.shape)))
            flat[i] = orig - epsilon
            down = float(f(flat.reshape(x.shape)))
            flat[i] = orig
            if not (math.isfinite(up) and math.isfinite(down)):
                raise GradCheckError(f"non-finite function value at coordinate {i}")
            central = (up - down) / (2 * epsilon)
            a = float(analytic[i])
            if not math.isfinite(a):
                raise GradCheckError(f"non-finite analytic gradient at coordinate {i}")
            worst = max(worst, abs(a - central) / (abs(central) + 1e-8))
    return worst
