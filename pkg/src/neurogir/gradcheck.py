"""Central-difference verification of analytic gradients.

The numeric side never touches autograd: it perturbs one input element at a
time and re-evaluates the forward function in float64. Outputs that are not
scalar are contracted against a fixed random cotangent first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
import torch

Shape = Sequence[int]


@dataclass
class InputReport:
    index: int
    shape: tuple
    max_rel_error: float
    probed: int
    kinks: list[int] = field(default_factory=list)


@dataclass
class GradcheckReport:
    name: str
    tol: float
    inputs: list[InputReport]

    @property
    def max_rel_error(self) -> float:
        return max((r.max_rel_error for r in self.inputs), default=0.0)

    @property
    def passed(self) -> bool:
        return all(np.isfinite(r.max_rel_error) for r in self.inputs) and self.max_rel_error <= self.tol

    def summary(self) -> str:
        kinks = sum(len(r.kinks) for r in self.inputs)
        status = "PASS" if self.passed else "FAIL"
        extra = f"  ({kinks} kink point(s) excluded)" if kinks else ""
        return f"{status}  {self.name:<24s} max rel err {self.max_rel_error:.3e}{extra}"


def _as_inputs(inputs, rng: np.random.Generator) -> list[torch.Tensor]:
    out = []
    for item in inputs:
        if isinstance(item, torch.Tensor):
            t = item.detach().to(torch.float64).clone()
        else:
            t = torch.from_numpy(rng.standard_normal(tuple(item)))
        out.append(t.requires_grad_(True))
    return out


def gradcheck(
    op: Callable[..., torch.Tensor],
    inputs: Sequence[torch.Tensor | Shape],
    tol: float = 1e-4,
    h: float = 1e-3,
    name: str = "op",
    seed: int = 0,
    check: Sequence[int] | None = None,
    max_probes: int | None = None,
    kink_tol: float = 0.05,
    max_kink_fraction: float = 0.5,
    atol: float = 1e-5,
) -> GradcheckReport:
    """Compare autograd gradients of ``op`` with central differences.

    ``inputs`` are tensors or shapes (filled with standard normals). ``check``
    restricts which inputs are differentiated; ``max_probes`` caps the number
    of probed elements per input (sampled without replacement).

    The error for one input is ``max|analytic - numeric| / max(|analytic|,
    |numeric|, atol)`` over its probed elements, with step ``h``; ``atol``
    keeps inputs whose true gradient is zero from dividing roundoff by zero. A probed element
    is a non-differentiable point when its one-sided slopes jump by more than
    ``kink_tol`` of that scale, or when the central difference at ``h`` and at
    ``h/10`` disagree by more than ``tol / 2`` (a hinge inside the probe
    interval). Such points are listed in ``kinks`` and excluded; a smooth op
    with a wrong backward trips neither test. More than ``max_kink_fraction``
    excluded points fails the input.
    """
    rng = np.random.default_rng(seed)
    xs = _as_inputs(inputs, rng)
    check = list(range(len(xs))) if check is None else list(check)

    out = op(*xs)
    cot = None
    if out.numel() != 1:
        cot = torch.from_numpy(rng.standard_normal(tuple(out.shape)))

    def scalar(o: torch.Tensor) -> torch.Tensor:
        return (o * cot).sum() if cot is not None else o.reshape(())

    grads = torch.autograd.grad(scalar(out), [xs[i] for i in check], allow_unused=True)

    reports = []
    for i, g in zip(check, grads):
        x = xs[i]
        analytic = np.zeros(x.shape) if g is None else g.detach().numpy().copy()
        flat = x.detach().view(-1)
        idx = np.arange(flat.numel())
        if max_probes is not None and idx.size > max_probes:
            idx = np.sort(rng.choice(idx, size=max_probes, replace=False))
        probes = np.empty((idx.size, 4))
        with torch.no_grad():
            base = float(scalar(op(*xs)))
            for n, j in enumerate(idx):
                orig = float(flat[j])
                for col, step in enumerate((h, -h, h / 10, -h / 10)):
                    flat[j] = orig + step
                    probes[n, col] = float(scalar(op(*xs)))
                flat[j] = orig
        fp, fm, fp_fine, fm_fine = probes.T
        num = (fp - fm) / (2 * h)
        num_fine = (fp_fine - fm_fine) / (h / 5)
        a = analytic.reshape(-1)[idx]
        scale = max(np.abs(a).max(initial=0.0), np.abs(num).max(initial=0.0), atol)
        jump = np.abs((fp - base) / h - (base - fm) / h) > kink_tol * scale
        hinge = np.abs(num - num_fine) > 0.5 * tol * scale
        kink = jump | hinge
        keep = ~kink
        err = np.abs(a[keep] - num[keep]).max(initial=0.0) / scale
        if idx.size and kink.mean() > max_kink_fraction:
            err = float("inf")
        reports.append(InputReport(i, tuple(x.shape), float(err), int(keep.sum()), [int(j) for j in idx[kink]]))
    return GradcheckReport(name, tol, reports)


# --------------------------------------------------------------------- suite
#
# Each case builder takes a seed and returns (op, inputs, options). Inputs are
# float64 tensors; shapes vary with the seed. Pooling-based cases use
# well-separated distinct values so a +-h probe never swaps an extremum.


def _distinct(rng, shape, lo, hi):
    n = int(np.prod(shape))
    vals = np.linspace(lo, hi, n)
    return torch.from_numpy(rng.permutation(vals).reshape(shape))


def _off_kink(rng, shape, margin=0.05):
    x = rng.standard_normal(shape)
    x = np.where(np.abs(x) < margin, np.sign(x + 1e-300) * margin + x, x)
    return torch.from_numpy(x)


def _randn(rng, *shape):
    return torch.from_numpy(rng.standard_normal(shape))


def _case_conv3d(rng):
    from . import tensor_core as tc

    b, cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 3)), int(rng.integers(1, 4))
    d, h, w = (int(v) for v in rng.integers(3, 6, 3))
    stride = int(rng.integers(1, 3))
    x, wt, bias = _randn(rng, b, cin, d, h, w), _randn(rng, cout, cin, 3, 3, 3), _randn(rng, cout)
    return (lambda x, wt, bias: tc.conv3d(x, wt, bias, stride=stride, padding=1)), [x, wt, bias], {}


def _case_unit_conv(rng):
    from . import tensor_core as tc

    s, cin, cout = (int(v) for v in rng.integers(2, 7, 3))
    return tc.unit_conv, [_randn(rng, s, cin), _randn(rng, cout, cin), _randn(rng, cout)], {}


def _pool_case(mode):
    def build(rng):
        from . import tensor_core as tc

        shape = (1, int(rng.integers(1, 3))) + tuple(int(v) for v in rng.integers(3, 6, 3))
        x = _distinct(rng, shape, -1.0, 1.0)
        return (lambda x: tc.pool3d(x, mode, 3, 1, 1)), [x], {}

    return build


def _case_relu(rng):
    from . import tensor_core as tc

    return tc.relu, [_off_kink(rng, (int(rng.integers(3, 30)),))], {}


def _case_sigmoid(rng):
    from . import tensor_core as tc

    return tc.sigmoid, [_randn(rng, int(rng.integers(3, 30)))], {}


def _case_batchnorm(rng):
    from . import tensor_core as tc

    c = int(rng.integers(1, 4))
    x = _randn(rng, 2, c, *(int(v) for v in rng.integers(1, 4, 3)))
    return (lambda x, g, b: tc.batchnorm3d(x, g, b, 1e-5, True)), [x, _randn(rng, c), _randn(rng, c)], {}


def _case_matmul(rng):
    from . import tensor_core as tc

    m, k, n = (int(v) for v in rng.integers(1, 7, 3))
    return tc.matmul, [_randn(rng, m, k), _randn(rng, k, n)], {}


def _case_upsample_transpose(rng):
    from . import tensor_core as tc

    cin, cout = int(rng.integers(1, 4)), int(rng.integers(1, 4))
    x = _randn(rng, 1, cin, *(int(v) for v in rng.integers(1, 4, 3)))
    w, b = _randn(rng, cin, cout, 2, 2, 2), _randn(rng, cout)
    return (lambda x, w, b: tc.upsample2x(x, "transpose", w, b)), [x, w, b], {}


def _case_upsample_nearest(rng):
    from . import tensor_core as tc

    x = _randn(rng, 1, int(rng.integers(1, 3)), *(int(v) for v in rng.integers(1, 4, 3)))
    return (lambda x: tc.upsample2x(x, "nearest")), [x], {}


def _case_gir(rng):
    from torch.func import functional_call

    from .gir import GirBlock, GirConfig

    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**31)))
        block = GirBlock(GirConfig.from_channels(8)).double().train()
    names = [n for n, _ in block.named_parameters()]
    dims = [(2, 2, 4), (1, 4, 4), (2, 4, 2), (4, 2, 2), (1, 2, 8)][int(rng.integers(5))]
    x = _randn(rng, int(rng.integers(1, 3)), 8, *dims)
    params = [p.detach().clone() for p in block.parameters()]

    def op(x, *ps):
        return functional_call(block, dict(zip(names, ps)), (x,))

    return op, [x, *params], {}


def _case_soft_skeleton(rng):
    from .losses import soft_skeleton

    shape = (1, 1) + tuple(int(v) for v in rng.integers(4, 6, 3))
    x = _distinct(rng, shape, 0.02, 0.98)
    return (lambda x: soft_skeleton(x, 3)), [x], {}


def _case_skeleton_loss(rng):
    from .losses import LossConfig, skeleton_loss

    shape = (int(rng.integers(1, 3)), 1) + tuple(int(v) for v in rng.integers(4, 6, 3))
    x = _distinct(rng, shape, 0.02, 0.98)
    y = torch.from_numpy((rng.random(shape) < 0.4).astype(np.float64))
    cfg = LossConfig(skeleton_iters=3)
    return (lambda x: skeleton_loss(x, y, cfg)), [x], {}


def _case_bce(rng):
    from .losses import bce_loss

    shape = (1, 1) + tuple(int(v) for v in rng.integers(2, 5, 3))
    y = torch.from_numpy((rng.random(shape) < 0.5).astype(np.float64))
    return (lambda z: bce_loss(z, y)), [_randn(rng, *shape) * 3], {}


def _case_compound(rng):
    from .losses import LossConfig, compound_loss

    shape = (1, 1, 6, 6, 6)
    z = _distinct(rng, shape, -2.0, 2.0)
    y = torch.from_numpy((rng.random(shape) < 0.4).astype(np.float64))
    p = float(rng.uniform(0.0, 0.3))
    cfg = LossConfig(skeleton_iters=3)
    return (lambda z: compound_loss(z, y, p, cfg)), [z], {}


def _case_residual_block(rng):
    from torch.func import functional_call

    from .backbone import ResidualBlock

    cin, cout = int(rng.integers(1, 3)), int(rng.integers(1, 4))
    with torch.random.fork_rng():
        torch.manual_seed(int(rng.integers(2**31)))
        block = ResidualBlock(cin, cout).double().train()
    names = [n for n, _ in block.named_parameters()]
    params = [p.detach().clone() for p in block.parameters()]
    x = _randn(rng, 2, cin, 3, 3, 3)

    def op(x, *ps):
        return functional_call(block, dict(zip(names, ps)), (x,))

    return op, [x, *params], {"max_probes": 40}


SUITE = {
    "conv3d": _case_conv3d,
    "unit_conv": _case_unit_conv,
    "pool3d_max": _pool_case("max"),
    "pool3d_min": _pool_case("min"),
    "relu": _case_relu,
    "sigmoid": _case_sigmoid,
    "batchnorm3d": _case_batchnorm,
    "matmul": _case_matmul,
    "upsample_transpose": _case_upsample_transpose,
    "upsample_nearest": _case_upsample_nearest,
    "gir_forward": _case_gir,
    "soft_skeleton": _case_soft_skeleton,
    "skeleton_loss": _case_skeleton_loss,
    "bce": _case_bce,
    "compound_loss": _case_compound,
    "residual_block": _case_residual_block,
}


def run_case(name: str, seed: int, tol: float = 1e-4, suite: dict | None = None) -> GradcheckReport:
    suite = SUITE if suite is None else suite
    rng = np.random.default_rng([seed, 7919])
    op, inputs, opts = suite[name](rng)
    return gradcheck(op, inputs, tol=tol, name=f"{name}[seed={seed}]", seed=seed, **opts)


def run_suite(names=None, seeds=range(5), tol: float = 1e-4, suite: dict | None = None) -> list[GradcheckReport]:
    suite = SUITE if suite is None else suite
    names = list(suite) if names is None else list(names)
    unknown = [n for n in names if n not in suite]
    if unknown:
        raise KeyError(f"unknown gradcheck case(s): {unknown}; available: {sorted(suite)}")
    return [run_case(n, s, tol, suite) for n in names for s in seeds]
