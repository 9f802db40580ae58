"""Dense tensor operations with reverse-mode differentiation.

Tensors are ``torch.Tensor`` in NCHW row-major layout; the gradient tape is
torch's autograd graph. Every op here validates its operands and raises
:class:`~emnet.errors.ShapeError` naming the offending axes, so model code
never sees an opaque backend error. Elementwise activations run on fused kernels
and are checked against the literal formula versions (``*_ref``).
"""
from __future__ import annotations

import contextlib
import logging
import math
import os
import random
from typing import Callable, Iterable, Sequence

import numpy as np
import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ShapeError

log = logging.getLogger(__name__)

SIGMOID_CLAMP = 40.0


def configure_threads() -> None:
    n = os.environ.get("EMNET_THREADS")
    if n:
        torch.set_num_threads(int(n))


def seed_everything(seed: int) -> None:
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


@contextlib.contextmanager
def precision(dtype: torch.dtype = torch.float64):
    """Temporarily switch the default floating dtype (float64 for oracle runs)."""
    prev = torch.get_default_dtype()
    torch.set_default_dtype(dtype)
    try:
        yield
    finally:
        torch.set_default_dtype(prev)


# -- layers -----------------------------------------------------------------


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride: int = 1,
           padding: int = 0, groups: int = 1) -> Tensor:
    if x.dim() != 4:
        raise ShapeError(f"conv2d input must be [N,C,H,W], got rank {x.dim()}")
    if weight.dim() != 4:
        raise ShapeError(f"conv2d weight must be [Cout,C/groups,k,k], got rank {weight.dim()}")
    if stride < 1 or padding < 0 or groups < 1:
        raise ShapeError(f"invalid stride={stride} padding={padding} groups={groups}")
    n, c, h, w = x.shape
    cout, cin_g, kh, kw = weight.shape
    if c % groups:
        raise ShapeError(f"input channels (axis 1) = {c} not divisible by groups={groups}")
    if cout % groups:
        raise ShapeError(f"output channels (weight axis 0) = {cout} not divisible by groups={groups}")
    if cin_g * groups != c:
        raise ShapeError(f"weight axis 1 = {cin_g} but input axis 1 / groups = {c // groups}")
    if h + 2 * padding < kh or w + 2 * padding < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input axes 2,3 ({h}x{w}, padding {padding})")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"bias shape {tuple(bias.shape)} != ({cout},)")
    return F.conv2d(x, weight, bias, stride=stride, padding=padding, groups=groups)


def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    if weight.dim() != 2:
        raise ShapeError(f"linear weight must be [Dout,Din], got rank {weight.dim()}")
    if x.shape[-1] != weight.shape[1]:
        raise ShapeError(f"linear input last axis = {x.shape[-1]} but weight axis 1 = {weight.shape[1]}")
    out = x @ weight.transpose(0, 1)
    if bias is not None:
        if bias.shape != (weight.shape[0],):
            raise ShapeError(f"bias shape {tuple(bias.shape)} != ({weight.shape[0]},)")
        out = out + bias
    return out


# -- activations --------------------------------------------------------------


def relu(x: Tensor) -> Tensor:
    return F.relu(x)


def relu6(x: Tensor) -> Tensor:
    return F.relu6(x)


def sigmoid(x: Tensor) -> Tensor:
    return torch.sigmoid(torch.clamp(x, -SIGMOID_CLAMP, SIGMOID_CLAMP))


def swish(x: Tensor) -> Tensor:
    return x * sigmoid(x)


def h_sigmoid(x: Tensor) -> Tensor:
    """ReLU6(x + 3) / 6."""
    return F.hardsigmoid(x)


def h_swish(x: Tensor) -> Tensor:
    """x * ReLU6(x + 3) / 6."""
    return F.hardswish(x)


# Literal formula versions; the fused kernels above are tested against these.


def relu_ref(x: Tensor) -> Tensor:
    return torch.clamp(x, min=0.0)


def relu6_ref(x: Tensor) -> Tensor:
    return torch.clamp(x, 0.0, 6.0)


def sigmoid_ref(x: Tensor) -> Tensor:
    x = torch.clamp(x, -SIGMOID_CLAMP, SIGMOID_CLAMP)
    return 1.0 / (1.0 + torch.exp(-x))


def swish_ref(x: Tensor) -> Tensor:
    return x * sigmoid_ref(x)


def h_sigmoid_ref(x: Tensor) -> Tensor:
    return relu6_ref(x + 3.0) / 6.0


def h_swish_ref(x: Tensor) -> Tensor:
    return x * relu6_ref(x + 3.0) / 6.0


ACTIVATIONS: dict[str, Callable[[Tensor], Tensor]] = {
    "RE": relu,
    "HS": h_swish,
    "relu": relu,
    "relu6": relu6,
    "sigmoid": sigmoid,
    "swish": swish,
    "h_sigmoid": h_sigmoid,
    "h_swish": h_swish,
}


class Activation(nn.Module):
    def __init__(self, name: str):
        super().__init__()
        if name not in ACTIVATIONS:
            raise ValueError(f"unknown activation {name!r}")
        self.name = name
        self.fn = ACTIVATIONS[name]

    def forward(self, x):
        return self.fn(x)

    def extra_repr(self):
        return self.name


# -- reductions ---------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    if not -x.dim() <= axis < x.dim():
        raise ShapeError(f"softmax axis {axis} out of range for rank {x.dim()}")
    return torch.softmax(x, dim=axis)


def softmax_ref(x: Tensor, axis: int = -1) -> Tensor:
    """exp(x - max) / sum(exp(x - max)), written out."""
    shifted = x - x.amax(dim=axis, keepdim=True).detach()
    e = torch.exp(shifted)
    return e / e.sum(dim=axis, keepdim=True)


def global_avg_pool(x: Tensor) -> Tensor:
    if x.dim() != 4:
        raise ShapeError(f"global_avg_pool expects [N,C,H,W], got rank {x.dim()}")
    if x.shape[2] < 1 or x.shape[3] < 1:
        raise ShapeError("global_avg_pool needs H,W >= 1")
    return x.mean(dim=(2, 3), keepdim=True)


def batch_norm(x: Tensor, running_mean: Tensor | None, running_var: Tensor | None,
               weight: Tensor | None = None, bias: Tensor | None = None,
               training: bool = False, momentum: float = 0.1, eps: float = 1e-5) -> Tensor:
    """Per-channel normalization; batch statistics when training, running ones otherwise."""
    if x.dim() != 4:
        raise ShapeError(f"batch_norm expects [N,C,H,W], got rank {x.dim()}")
    c = x.shape[1]
    for name, t in (("running_mean", running_mean), ("running_var", running_var),
                    ("weight", weight), ("bias", bias)):
        if t is not None and t.shape != (c,):
            raise ShapeError(f"batch_norm {name} shape {tuple(t.shape)} != channels axis 1 ({c},)")
    if training and x.shape[0] < 2:
        raise ShapeError("batch_norm in training mode needs batch size >= 2 (axis 0)")
    return F.batch_norm(x, running_mean, running_var, weight, bias, training, momentum, eps)


class BatchNorm2d(nn.BatchNorm2d):
    """``momentum=None`` gives a cumulative average of batch statistics."""

    def forward(self, x):
        factor = self.momentum or 0.0
        if self.training and self.track_running_stats:
            self.num_batches_tracked.add_(1)
            if self.momentum is None:
                factor = 1.0 / float(self.num_batches_tracked)
        return batch_norm(x, self.running_mean, self.running_var, self.weight, self.bias,
                          self.training, factor, self.eps)


# -- differentiation ----------------------------------------------------------


def backward(loss: Tensor, params: Iterable[tuple[str, nn.Parameter]] | None = None) -> dict[str, Tensor | None]:
    """Run reverse-mode accumulation from a scalar loss.

    Returns ``{name: grad}`` for the given named parameters; unreachable
    parameters map to ``None``.
    """
    if loss.numel() != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise ValueError("loss was not produced under an active tape (requires_grad is False)")
    loss.reshape(()).backward()
    if params is None:
        return {}
    return {name: p.grad for name, p in params}


def grad_check_fd(f: Callable[..., Tensor], points: Tensor | Sequence[Tensor],
                  eps: float = 1e-6) -> float:
    """Max relative error between autograd and central differences.

    ``f`` maps the tensors in ``points`` to a scalar. The error per
    coordinate is ``|analytic - numeric| / max(1, |analytic|)``. Run it in
    float64.
    """
    if isinstance(points, Tensor):
        points = [points]
    points = [p.detach().clone().requires_grad_(True) for p in points]
    out = f(*points)
    if out.numel() != 1:
        raise ShapeError("grad_check_fd needs a scalar-valued function")
    analytic = torch.autograd.grad(out.reshape(()), points, allow_unused=True)
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(points, analytic):
            g = torch.zeros_like(p) if g is None else g
            flat = p.view(-1)
            gflat = g.reshape(-1)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + eps
                up = f(*points).item()
                flat[i] = orig - eps
                down = f(*points).item()
                flat[i] = orig
                numeric = (up - down) / (2 * eps)
                a = gflat[i].item()
                err = abs(a - numeric) / max(1.0, abs(a))
                if not math.isfinite(err):
                    return math.inf
                worst = max(worst, err)
    return worst


def module_grad_check(module: nn.Module, loss_fn: Callable[[nn.Module], Tensor],
                      eps: float = 1e-6, max_coords: int | None = None,
                      generator: torch.Generator | None = None) -> float:
    """grad_check_fd over a module's parameters (optionally a random coordinate subset)."""
    named = [(n, p) for n, p in module.named_parameters() if p.requires_grad]
    module.zero_grad(set_to_none=True)
    loss = loss_fn(module)
    grads = backward(loss, named)
    coords = [(n, p, i) for n, p in named for i in range(p.numel())]
    if max_coords is not None and len(coords) > max_coords:
        idx = torch.randperm(len(coords), generator=generator)[:max_coords].tolist()
        coords = [coords[i] for i in sorted(idx)]
    worst = 0.0
    with torch.no_grad():
        for name, p, i in coords:
            flat = p.data.view(-1)
            orig = flat[i].item()
            flat[i] = orig + eps
            up = loss_fn(module).item()
            flat[i] = orig - eps
            down = loss_fn(module).item()
            flat[i] = orig
            g = grads[name]
            a = 0.0 if g is None else g.reshape(-1)[i].item()
            numeric = (up - down) / (2 * eps)
            worst = max(worst, abs(a - numeric) / max(1.0, abs(a)))
    return worst


def assert_finite(t: Tensor, what: str = "tensor") -> Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t
