"""Masked feature statistics, nearest-neighbor mask resampling and gradient checking.

Tensors follow the torch ``(N, C, H, W)`` layout; the last two dimensions are
always spatial.  Masks broadcast over channels, so a ``(N, 1, H, W)`` weight
map pairs with any ``(N, C, H, W)`` feature map.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Iterable, Protocol, Sequence

import torch
import torch.nn.functional as F
from torch import Tensor, nn


@dataclass(frozen=True)
class NumericsConfig:
    epsilon: float = 1e-6
    grad_check_step: float = 1e-3
    dtype: torch.dtype = torch.float32

    def __post_init__(self):
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")


DEFAULT = NumericsConfig()
# 64-bit verification runs use a smaller epsilon.
VERIFY = NumericsConfig(epsilon=1e-8, dtype=torch.float64)
# Step ladder for deep or kinked compositions.
STEP_LADDER = (1e-3, 1e-4, 1e-5, 1e-6)


class DifferentiableOp(Protocol):
    def __call__(self, *inputs: Tensor) -> Tensor: ...


def masked_mean(y: Tensor, t: Tensor, eps: float = DEFAULT.epsilon, keepdim: bool = False) -> Tensor:
    """Weighted spatial mean ``sum(y * t) / (eps + sum(t))`` per instance and channel."""
    num = (y * t).sum(dim=(-2, -1), keepdim=keepdim)
    den = t.sum(dim=(-2, -1), keepdim=keepdim) + eps
    return num / den


def masked_std(y: Tensor, t: Tensor, eps: float = DEFAULT.epsilon, keepdim: bool = False) -> Tensor:
    """Weighted spatial standard deviation, floored at ``sqrt(eps)``.

    Deviations are weighted by ``t`` (``sum(t * (y - mu)**2)``) so pixels with
    zero weight do not contribute ``mu**2`` terms.
    """
    mu = masked_mean(y, t, eps, keepdim=True)
    var = (t * (y - mu) ** 2).sum(dim=(-2, -1), keepdim=keepdim) / (t.sum(dim=(-2, -1), keepdim=keepdim) + eps)
    return torch.sqrt(var + eps)


def nearest_indices(src: int, dst: int) -> Tensor:
    """Source index for each of ``dst`` outputs: ``floor((i + 0.5) * src / dst)``.

    This samples the source pixel whose center is nearest to the output
    pixel center; for an exact 2x decimation it picks odd source indices.
    """
    idx = torch.floor((torch.arange(dst, dtype=torch.float64) + 0.5) * (src / dst)).long()
    return idx.clamp_(0, src - 1)


def nn_downsample(mask: Tensor, h2: int, w2: int) -> Tensor:
    h, w = mask.shape[-2:]
    if h2 <= 0 or w2 <= 0:
        raise ValueError(f"target size must be positive, got {h2}x{w2}")
    if h2 > h or w2 > w:
        raise ValueError(f"cannot downsample {h}x{w} to larger {h2}x{w2}")
    if (h2, w2) == (h, w):
        return mask
    rows = nearest_indices(h, h2).to(mask.device)
    cols = nearest_indices(w, w2).to(mask.device)
    return mask.index_select(-2, rows).index_select(-1, cols)


# ---------------------------------------------------------------------------
# Finite-difference gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckReport:
    max_rel_error: float
    tolerance: float
    worst: str = ""
    errors: dict[str, float] = field(default_factory=dict)
    failure: str | None = None

    @property
    def passed(self) -> bool:
        return self.failure is None and self.max_rel_error <= self.tolerance

    def __bool__(self) -> bool:
        return self.passed

    def __str__(self) -> str:
        status = "PASS" if self.passed else "FAIL"
        msg = f"{status} max_rel_error={self.max_rel_error:.3e} (tol {self.tolerance:.0e}) worst={self.worst}"
        return msg + (f" [{self.failure}]" if self.failure else "")


def _first_nonfinite(t: Tensor) -> tuple[int, ...] | None:
    bad = ~torch.isfinite(t)
    if not bad.any():
        return None
    return tuple(int(i) for i in bad.nonzero()[0])


def grad_check(
    op: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    tolerance: float = 1e-4,
    *,
    wrt: Iterable[tuple[str, Tensor]] | None = None,
    step: float | Sequence[float] = DEFAULT.grad_check_step,
    directions: int = 5,
    atol: float = 1e-9,
    seed: int = 0,
) -> GradCheckReport:
    """Compare autograd vector-Jacobian products against central differences.

    A random output cotangent ``u`` turns ``op`` into the scalar
    ``s(x) = <u, op(x)>``.  For each checked tensor and each random direction
    ``v`` the analytic ``<grad s, v>`` is compared with
    ``(s(x + step v) - s(x - step v)) / (2 step)``.  The relative error is
    ``|fd - an| / max(|fd|, |an|, atol)``.  ``step`` may be a sequence, in
    which case each direction keeps its best-agreeing step: truncation error
    shrinks and roundoff grows as the step shrinks, and a wrong gradient
    disagrees at every step.

    ``wrt`` defaults to the floating-point ``inputs`` plus the parameters of
    ``op`` when it is an ``nn.Module``.  Checked tensors are perturbed in place
    and restored.  Everything must be float64.
    """
    inputs = list(inputs)
    if wrt is None:
        named = [(f"input[{i}]", x) for i, x in enumerate(inputs) if x.is_floating_point()]
        if isinstance(op, nn.Module):
            named += [(n, p) for n, p in op.named_parameters()]
    else:
        named = list(wrt)
    for name, t in named:
        if t.dtype != torch.float64:
            raise TypeError(f"grad_check needs float64 tensors; {name} is {t.dtype}")

    gen = torch.Generator().manual_seed(seed)
    leaves = []
    for _, t in named:
        leaves.append(t if t.requires_grad else t.requires_grad_(True))

    out = op(*inputs)
    loc = _first_nonfinite(out.detach())
    if loc is not None:
        return GradCheckReport(math.inf, tolerance, "output", failure=f"non-finite output at {loc}")
    u = torch.randn(out.shape, generator=gen, dtype=out.dtype)
    grads = torch.autograd.grad((out * u).sum(), leaves, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g.detach() for g, t in zip(grads, leaves)]
    for (name, _), g in zip(named, grads):
        loc = _first_nonfinite(g)
        if loc is not None:
            return GradCheckReport(math.inf, tolerance, name, failure=f"non-finite gradient for {name} at {loc}")

    def scalar() -> float:
        # grad stays enabled: ops such as a gradient penalty differentiate internally
        return float((op(*inputs).detach() * u).sum())

    steps = [step] if isinstance(step, (int, float)) else list(step)
    errors: dict[str, float] = {}
    for (name, t), g in zip(named, grads):
        worst = 0.0
        for _ in range(directions):
            v = torch.randn(t.shape, generator=gen, dtype=t.dtype)
            analytic = float((g * v).sum())
            best = math.inf
            for h in steps:
                with torch.no_grad():
                    t.add_(v, alpha=h)
                plus = scalar()
                with torch.no_grad():
                    t.sub_(v, alpha=2 * h)
                minus = scalar()
                with torch.no_grad():
                    t.add_(v, alpha=h)
                fd = (plus - minus) / (2 * h)
                if not math.isfinite(fd):
                    return GradCheckReport(math.inf, tolerance, name, errors, failure=f"non-finite difference for {name}")
                best = min(best, abs(fd - analytic) / max(abs(fd), abs(analytic), atol))
            worst = max(worst, best)
        errors[name] = worst
    worst_name = max(errors, key=errors.get) if errors else ""
    return GradCheckReport(errors.get(worst_name, 0.0), tolerance, worst_name, errors)


# ---------------------------------------------------------------------------
# Standard differentiable building blocks, exposed for self-tests.
# ---------------------------------------------------------------------------


def _standard_ops(gen: torch.Generator) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    def r(*shape):
        return torch.randn(*shape, generator=gen, dtype=torch.float64)

    w3, b3 = r(4, 3, 3, 3), r(4)
    w_fc, b_fc = r(5, 6), r(5)
    return {
        "conv2d_s1": (lambda x, w, b: F.conv2d(x, w, b, stride=1, padding=1), [r(2, 3, 6, 6), w3, b3]),
        "conv2d_s2": (lambda x, w, b: F.conv2d(x, w, b, stride=2, padding=1), [r(2, 3, 6, 6), w3, b3]),
        "upsample_conv": (
            lambda x, w, b: F.conv2d(F.interpolate(x, scale_factor=2, mode="nearest"), w, b, padding=1),
            [r(1, 3, 3, 3), w3, b3],
        ),
        "add": (torch.add, [r(2, 3, 4, 4), r(2, 3, 4, 4)]),
        "mul": (torch.mul, [r(2, 3, 4, 4), r(2, 3, 4, 4)]),
        "leaky_relu": (lambda x: F.leaky_relu(x, 0.2), [r(2, 3, 4, 4)]),
        "sigmoid": (torch.sigmoid, [r(2, 3, 4, 4)]),
        "tanh": (torch.tanh, [r(2, 3, 4, 4)]),
        "concat": (lambda a, b: torch.cat([a, b], dim=1), [r(2, 3, 4, 4), r(2, 2, 4, 4)]),
        "global_avg_pool": (lambda x: x.mean(dim=(2, 3)), [r(2, 3, 4, 4)]),
        "fully_connected": (F.linear, [r(3, 6), w_fc, b_fc]),
        "masked_mean": (lambda y, t: masked_mean(y, t, VERIFY.epsilon), [r(2, 3, 5, 5), torch.rand(2, 1, 5, 5, generator=gen, dtype=torch.float64)]),
        "masked_std": (lambda y, t: masked_std(y, t, VERIFY.epsilon), [r(2, 3, 5, 5), torch.rand(2, 1, 5, 5, generator=gen, dtype=torch.float64)]),
        "nn_downsample": (lambda m: nn_downsample(m, 3, 2), [r(1, 1, 7, 5)]),
    }


def standard_ops(seed: int = 0) -> dict[str, tuple[Callable[..., Tensor], list[Tensor]]]:
    """Name -> (op, example float64 inputs) for every stock differentiable op."""
    return _standard_ops(torch.Generator().manual_seed(seed))
