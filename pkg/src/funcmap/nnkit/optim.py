"""AdamW with per-group decay flags, and a reduce-on-plateau learning-rate rule."""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch


@torch.no_grad()
def adamw_step(params, grads, exp_avgs, exp_avg_sqs, step: int, *, lr: float, betas=(0.9, 0.99),
               eps: float = 1e-8, weight_decay: float = 0.0, decoupled: bool = True) -> None:
    """One in-place bias-corrected Adam update; ``step`` is the 1-based step count.

    With ``decoupled`` the decay is applied to the weights (AdamW); otherwise it is
    folded into the gradient as an L2 term (classic Adam).
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    b1, b2 = betas
    bc1 = 1 - b1**step
    bc2 = 1 - b2**step
    for p, g, m, v in zip(params, grads, exp_avgs, exp_avg_sqs):
        if p.shape != g.shape:
            raise ValueError(f"gradient shape {tuple(g.shape)} does not match parameter {tuple(p.shape)}")
        if weight_decay:
            if decoupled:
                p.mul_(1 - lr * weight_decay)
            else:
                g = g + weight_decay * p
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / bc2).sqrt_().add_(eps)
        p.addcdiv_(m, denom, value=-lr / bc1)


class AdamW(torch.optim.Optimizer):
    """Thin optimizer wrapper around :func:`adamw_step` (param groups keep their own lr/decay)."""

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.99), eps=1e-8, weight_decay=0.0, decoupled=True):
        if lr <= 0:
            raise ValueError(f"learning rate must be positive, got {lr}")
        super().__init__(params, dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, decoupled=decoupled))

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        for group in self.param_groups:
            ps, gs, ms, vs = [], [], [], []
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                ps.append(p)
                gs.append(p.grad)
                ms.append(st["exp_avg"])
                vs.append(st["exp_avg_sq"])
            if not ps:
                continue
            step = self.state[ps[0]]["step"] + 1
            for p in ps:
                self.state[p]["step"] = step
            adamw_step(ps, gs, ms, vs, step, lr=group["lr"], betas=group["betas"], eps=group["eps"],
                       weight_decay=group["weight_decay"], decoupled=group["decoupled"])
        return loss


@dataclass
class PlateauScheduler:
    """Multiply every group's lr by ``factor`` after ``patience`` updates without improvement."""

    optimizer: torch.optim.Optimizer | None = None
    lr: float = 1e-2
    patience: int = 5
    factor: float = 0.5
    min_lr: float = 1e-5
    best: float = math.inf
    bad: int = 0

    def __post_init__(self):
        if self.optimizer is not None:
            self.lr = float(self.optimizer.param_groups[0]["lr"])

    def update(self, metric: float) -> float:
        if metric < self.best:
            self.best = float(metric)
            self.bad = 0
            return self.lr
        self.bad += 1
        if self.bad >= self.patience:
            self.bad = 0
            self.lr = max(self.lr * self.factor, self.min_lr)
            if self.optimizer is not None:
                for g in self.optimizer.param_groups:
                    g["lr"] = max(g["lr"] * self.factor, self.min_lr)
        return self.lr

    def state_dict(self) -> dict:
        return {"lr": self.lr, "patience": self.patience, "factor": self.factor, "min_lr": self.min_lr,
                "best": self.best, "bad": self.bad}
