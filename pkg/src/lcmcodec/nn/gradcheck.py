"""Reverse-mode vs. central finite-difference gradient comparison."""

from __future__ import annotations

from dataclasses import dataclass, field

import torch


@dataclass
class GradCheckResult:
    max_rel_error: float
    nondifferentiable: bool
    checked: int
    errors: list[float] = field(default_factory=list)

    def ok(self, tol: float) -> bool:
        return self.max_rel_error <= tol


def grad_check(
    op,
    inputs,
    seed: int = 0,
    h: float = 1e-4,
    samples: int | None = 64,
    floor: float = 1e-8,
    kink_tol: float = 1e-2,
) -> GradCheckResult:
    """Compare autograd gradients of ``op(*inputs)`` with central differences.

    The scalar checked is <op(inputs), r> for a fixed random projection r.
    Inputs are promoted to float64.  At most ``samples`` coordinates per input
    are perturbed.  A coordinate whose one-sided differences disagree by more
    than ``kink_tol`` (relative) marks the point as near-nondifferentiable; it
    is reported rather than failed.
    """
    gen = torch.Generator().manual_seed(seed)
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    out = op(*xs)
    r = torch.randn(out.shape, generator=gen, dtype=torch.float64)

    def scalar(vals):
        with torch.no_grad():
            return float((op(*vals) * r).sum())

    (out * r).sum().backward()
    errors = []
    kink = False
    for i, x in enumerate(xs):
        grad = x.grad if x.grad is not None else torch.zeros_like(x)
        n = x.numel()
        idx = torch.randperm(n, generator=gen)[: samples or n] if samples else torch.arange(n)
        base = [v.detach().clone() for v in xs]
        f0 = scalar(base)
        for k in idx.tolist():
            flat = base[i].view(-1)
            orig = float(flat[k])
            flat[k] = orig + h
            fp = scalar(base)
            flat[k] = orig - h
            fm = scalar(base)
            flat[k] = orig
            num = (fp - fm) / (2 * h)
            ana = float(grad.view(-1)[k])
            d_fwd, d_bwd = (fp - f0) / h, (f0 - fm) / h
            if abs(d_fwd - d_bwd) > kink_tol * max(1.0, abs(num)):
                kink = True
            errors.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    return GradCheckResult(max(errors) if errors else 0.0, kink, len(errors), errors)


def param_grad_check(
    loss_fn,
    module: torch.nn.Module,
    seed: int = 0,
    h: float = 1e-4,
    samples: int = 32,
    floor: float = 1e-8,
) -> GradCheckResult:
    """Same comparison for a scalar ``loss_fn()`` with respect to module parameters.

    The module must already be in float64.
    """
    gen = torch.Generator().manual_seed(seed)
    params = [p for p in module.parameters() if p.requires_grad]
    module.zero_grad()
    loss_fn().backward()
    grads = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p) for p in params]
    sizes = torch.tensor([p.numel() for p in params], dtype=torch.float64)
    picks = torch.multinomial(sizes / sizes.sum(), samples, replacement=True, generator=gen)
    errors = []
    kink = False
    with torch.no_grad():
        f0 = float(loss_fn())
        for pi in picks.tolist():
            flat = params[pi].data.view(-1)
            k = int(torch.randint(flat.numel(), (1,), generator=gen))
            orig = float(flat[k])
            flat[k] = orig + h
            fp = float(loss_fn())
            flat[k] = orig - h
            fm = float(loss_fn())
            flat[k] = orig
            num = (fp - fm) / (2 * h)
            ana = float(grads[pi].view(-1)[k])
            if abs((fp - f0) - (f0 - fm)) / h > 1e-2 * max(1.0, abs(num)):
                kink = True
            errors.append(abs(ana - num) / max(abs(ana), abs(num), floor))
    return GradCheckResult(max(errors) if errors else 0.0, kink, len(errors), errors)
