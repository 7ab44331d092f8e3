"""Differentiable operators for volumetric networks.

Tensors are ``torch.Tensor`` values laid out as (B, C, D, H, W) with width
fastest; the flattened (S, C) point view used by graph reasoning is a
reshape of the same storage. Reverse-mode bookkeeping is torch autograd;
this module pins down the operator contracts on top of it (shape errors
that name the offending axis, finiteness of every forward result, pooling
tie rules, classic-L2 Adam).
"""
from __future__ import annotations

import contextlib
import math
from typing import Iterable, Sequence

import torch
import torch.nn.functional as F

AXES = ("batch", "channel", "depth", "height", "width")
SPATIAL_AXES = AXES[2:]


class ShapeError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class BackwardError(RuntimeError):
    pass


_CHECK_FINITE = True


def set_finite_checks(enabled: bool) -> None:
    global _CHECK_FINITE
    _CHECK_FINITE = bool(enabled)


def _finite(out: torch.Tensor, op: str) -> torch.Tensor:
    if _CHECK_FINITE and not bool(torch.isfinite(out).all()):
        raise NonFiniteError(f"{op}: produced NaN or Inf values")
    return out


def reference_mode(seed: int | None = None) -> None:
    """Single-threaded, deterministic kernels; bitwise reproducible runs."""
    torch.set_num_threads(1)
    torch.use_deterministic_algorithms(True)
    if seed is not None:
        torch.manual_seed(seed)


@contextlib.contextmanager
def float64_mode():
    """Temporarily make float64 the default dtype (gradient checks only)."""
    previous = torch.get_default_dtype()
    torch.set_default_dtype(torch.float64)
    try:
        yield
    finally:
        torch.set_default_dtype(previous)


def _triple(v: int | Sequence[int]) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(a) for a in v)
    if len(v) != 3:
        raise ShapeError(f"expected 3 per-axis values, got {v}")
    return v


def _require_ndim(x: torch.Tensor, ndim: int, op: str, what: str = "input") -> None:
    if x.dim() != ndim:
        raise ShapeError(f"{op}: {what} must have {ndim} axes, got shape {tuple(x.shape)}")


# ---------------------------------------------------------------- convolution


def conv3d(x, w, b=None, stride=1, padding=0):
    """3D cross-correlation with zero padding.

    x: (B, Cin, D, H, W), w: (Cout, Cin, kd, kh, kw), b: (Cout,) or None.
    """
    _require_ndim(x, 5, "conv3d")
    _require_ndim(w, 5, "conv3d", "weight")
    stride, padding = _triple(stride), _triple(padding)
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"conv3d: channel axis mismatch, input has {x.shape[1]} channels "
            f"but weight expects {w.shape[1]}"
        )
    if b is not None and tuple(b.shape) != (w.shape[0],):
        raise ShapeError(f"conv3d: bias shape {tuple(b.shape)} does not match {w.shape[0]} output channels")
    for axis, n, k, p, s in zip(SPATIAL_AXES, x.shape[2:], w.shape[2:], padding, stride):
        if s < 1:
            raise ShapeError(f"conv3d: {axis} stride must be >= 1, got {s}")
        if n + 2 * p < k:
            raise ShapeError(f"conv3d: {axis} axis of extent {n} (padding {p}) is smaller than kernel {k}")
    return _finite(F.conv3d(x, w, b, stride=stride, padding=padding), "conv3d")


def unit_conv(x, w, b=None):
    """Per-point affine map on the flattened (S, Cin) view: x @ w.T + b.

    Equivalent to ``conv3d`` with a 1x1x1 kernel on the grid view.
    """
    _require_ndim(x, 2, "unit_conv")
    _require_ndim(w, 2, "unit_conv", "weight")
    if x.shape[1] != w.shape[1]:
        raise ShapeError(
            f"unit_conv: channel axis mismatch, input has {x.shape[1]} channels "
            f"but weight expects {w.shape[1]}"
        )
    out = x @ w.t()
    if b is not None:
        out = out + b
    return _finite(out, "unit_conv")


def matmul(a, b):
    _require_ndim(a, 2, "matmul", "left operand")
    _require_ndim(b, 2, "matmul", "right operand")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner extents differ ({a.shape[1]} vs {b.shape[0]})")
    return _finite(a @ b, "matmul")


# -------------------------------------------------------------------- pooling


def pool3d(x, mode: str = "max", k: int = 3, stride: int = 1, padding: int = 1):
    """Max or min pooling over k^3 neighbourhoods.

    Padding never wins: max pooling pads with -inf and min pooling is
    evaluated as -max(-x), i.e. padded with +inf. Gradient flows to one
    extremum per window; among ties, the lowest linear index.
    """
    _require_ndim(x, 5, "pool3d")
    if mode == "max":
        out = F.max_pool3d(x, k, stride=stride, padding=padding)
    elif mode == "min":
        out = -F.max_pool3d(-x, k, stride=stride, padding=padding)
    else:
        raise ValueError(f"pool3d: unsupported mode {mode!r} (expected 'max' or 'min')")
    return _finite(out, "pool3d")


# ---------------------------------------------------------------- activations


def relu(x):
    return _finite(torch.relu(x), "relu")


def sigmoid(x):
    return _finite(torch.sigmoid(x), "sigmoid")


# ------------------------------------------------------------- normalization


def batchnorm3d(
    x,
    gamma,
    beta,
    eps: float = 1e-5,
    training: bool = True,
    running_mean=None,
    running_var=None,
    momentum: float = 0.1,
):
    """Per-channel normalization; channel axis is 1.

    Statistics pool over every other axis, so (B, C, D, H, W) and the
    flattened (S, C) view are both accepted. In training mode the running
    buffers (if given) are updated in place with ``momentum`` using the
    unbiased batch variance.
    """
    if x.dim() < 2:
        raise ShapeError(f"batchnorm3d: need a channel axis, got shape {tuple(x.shape)}")
    c = x.shape[1]
    for name, t in (("gamma", gamma), ("beta", beta)):
        if tuple(t.shape) != (c,):
            raise ShapeError(f"batchnorm3d: {name} shape {tuple(t.shape)} does not match {c} channels")
    group = x.numel() // c if c else 0
    if group == 0:
        raise ShapeError("batchnorm3d: zero-size normalization group")
    view = (1, c) + (1,) * (x.dim() - 2)
    if training:
        dims = [0] + list(range(2, x.dim()))
        mean = x.mean(dim=dims)
        var = x.var(dim=dims, unbiased=False)
        if running_mean is not None and running_var is not None:
            with torch.no_grad():
                unbiased = var * (group / (group - 1)) if group > 1 else var
                running_mean.mul_(1 - momentum).add_(momentum * mean.detach())
                running_var.mul_(1 - momentum).add_(momentum * unbiased.detach())
    else:
        if running_mean is None or running_var is None:
            raise ValueError("batchnorm3d: inference mode requires running statistics")
        mean, var = running_mean, running_var
    out = (x - mean.reshape(view)) / torch.sqrt(var.reshape(view) + eps)
    out = out * gamma.reshape(view) + beta.reshape(view)
    return _finite(out, "batchnorm3d")


# ----------------------------------------------------------------- upsampling


def upsample2x(x, mode: str = "transpose", weight=None, bias=None):
    """Double every spatial extent.

    ``transpose``: transposed 2x2x2 convolution, weight (Cin, Cout, 2, 2, 2).
    ``nearest``: each voxel becomes a 2x2x2 block, channels unchanged.
    """
    _require_ndim(x, 5, "upsample2x")
    if mode == "nearest":
        out = x.repeat_interleave(2, dim=2).repeat_interleave(2, dim=3).repeat_interleave(2, dim=4)
    elif mode == "transpose":
        if weight is None:
            raise ValueError("upsample2x: transpose mode needs a weight")
        _require_ndim(weight, 5, "upsample2x", "weight")
        if weight.shape[0] != x.shape[1] or tuple(weight.shape[2:]) != (2, 2, 2):
            raise ShapeError(
                f"upsample2x: weight {tuple(weight.shape)} incompatible with {x.shape[1]} input channels"
            )
        out = F.conv_transpose3d(x, weight, bias, stride=2)
    else:
        raise ValueError(f"upsample2x: unsupported mode {mode!r}")
    return _finite(out, "upsample2x")


# ------------------------------------------------------------------- backward


def backward(loss) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``.grad``.

    A loss value can be back-propagated once; a second call raises.
    """
    if loss.numel() != 1 or loss.dim() > 1:
        raise BackwardError(f"backward: loss must be a scalar, got shape {tuple(loss.shape)}")
    if not loss.requires_grad:
        raise BackwardError("backward: loss is detached from any differentiable input")
    if getattr(loss, "_backward_done", False):
        raise BackwardError("backward: this loss was already back-propagated")
    loss.backward()
    loss._backward_done = True


def zero_grad(params: Iterable[torch.Tensor]) -> None:
    for p in params:
        p.grad = None


# ----------------------------------------------------------------------- Adam


def adam_step(
    params: Sequence[torch.Tensor],
    grads: Sequence[torch.Tensor | None],
    state: dict,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
    weight_decay: float = 0.0,
) -> None:
    """One bias-corrected Adam update, in place.

    Weight decay is the classic L2 term added to the gradient (not the
    decoupled AdamW form). ``state`` maps ``id(param)`` to its moments and
    step count and is created on first use.
    """
    if not lr > 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                continue
            if weight_decay:
                g = g + weight_decay * p
            st = state.get(id(p))
            if st is None:
                st = state[id(p)] = {
                    "step": 0,
                    "m": torch.zeros_like(p),
                    "v": torch.zeros_like(p),
                }
            st["step"] += 1
            t = st["step"]
            st["m"].mul_(beta1).add_(g, alpha=1 - beta1)
            st["v"].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = st["m"] / (1 - beta1**t)
            v_hat = st["v"] / (1 - beta2**t)
            p.sub_(lr * m_hat / (v_hat.sqrt() + eps))


class Adam:
    """Stateful wrapper around :func:`adam_step` for a fixed parameter list."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=0.0):
        if not lr >= 0:
            raise ValueError(f"invalid learning rate {lr}")
        self.params = list(params)
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self) -> None:
        zero_grad(self.params)

    def step(self) -> None:
        # lr == 0 is a legal no-op configuration (parameters stay bitwise fixed)
        if self.lr == 0:
            return
        adam_step(
            self.params,
            [p.grad for p in self.params],
            self.state,
            self.lr,
            self.betas[0],
            self.betas[1],
            self.eps,
            self.weight_decay,
        )


def kaiming_uniform_(t: torch.Tensor, fan_in: int, generator=None) -> torch.Tensor:
    bound = math.sqrt(6.0 / max(fan_in, 1))
    with torch.no_grad():
        t.uniform_(-bound, bound, generator=generator)
    return t
