"""Optimizers for the two training stages.

Stage 1 uses AdamW with AMSGrad plus per-tensor update clipping: the step
size shrinks whenever the gradient's root-mean-square relative to the second
moment exceeds 1, which suppresses instability spikes early in training.
Stage 2 uses plain decoupled-weight-decay Adam.
"""

from __future__ import annotations

import torch

from .errors import ConfigurationError

OPTIMIZER_KINDS = ("stable-adamw+amsgrad", "adamw")


class StableAdamW(torch.optim.Optimizer):
    """AdamW with AMSGrad and RMS-based update clipping.

    For each parameter tensor the effective learning rate is
    ``lr / max(1, rms)`` with ``rms = sqrt(mean(g^2 / max(v_hat, eps^2)))``,
    where ``v_hat`` is the bias-corrected (AMSGrad-maximized) second moment.
    Weight decay is decoupled and scaled by the same clipped rate.
    """

    def __init__(
        self,
        params,
        lr: float = 1e-3,
        betas: tuple[float, float] = (0.9, 0.999),
        eps: float = 1e-8,
        weight_decay: float = 0.0,
        amsgrad: bool = True,
    ) -> None:
        if lr < 0.0:
            raise ConfigurationError(f"invalid learning rate {lr}")
        if not 0.0 <= betas[0] < 1.0 or not 0.0 <= betas[1] < 1.0:
            raise ConfigurationError(f"invalid betas {betas}")
        defaults = dict(lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, amsgrad=amsgrad)
        super().__init__(params, defaults)

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()

        for group in self.param_groups:
            beta1, beta2 = group["betas"]
            eps = group["eps"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                grad = p.grad
                state = self.state[p]
                if not state:
                    state["step"] = 0
                    state["exp_avg"] = torch.zeros_like(p)
                    state["exp_avg_sq"] = torch.zeros_like(p)
                    if group["amsgrad"]:
                        state["max_exp_avg_sq"] = torch.zeros_like(p)
                state["step"] += 1
                t = state["step"]

                exp_avg, exp_avg_sq = state["exp_avg"], state["exp_avg_sq"]
                exp_avg.mul_(beta1).add_(grad, alpha=1.0 - beta1)
                exp_avg_sq.mul_(beta2).addcmul_(grad, grad, value=1.0 - beta2)

                bias_c1 = 1.0 - beta1**t
                bias_c2 = 1.0 - beta2**t
                if group["amsgrad"]:
                    torch.maximum(state["max_exp_avg_sq"], exp_avg_sq, out=state["max_exp_avg_sq"])
                    second = state["max_exp_avg_sq"]
                else:
                    second = exp_avg_sq

                v_hat = second / bias_c2
                rms = (grad.pow(2) / v_hat.clamp_min(eps * eps)).mean().sqrt().item()
                lr = group["lr"] / max(1.0, rms)

                if group["weight_decay"] != 0.0:
                    p.mul_(1.0 - lr * group["weight_decay"])
                denom = v_hat.sqrt().add_(eps)
                p.addcdiv_(exp_avg, denom, value=-lr / bias_c1)

        return loss


def make_optimizer(
    kind: str,
    params,
    lr: float,
    betas: tuple[float, float] = (0.9, 0.999),
    weight_decay: float = 0.0,
    eps: float = 1e-8,
) -> torch.optim.Optimizer:
    """Build the configured stepper; unknown kinds fail loudly."""
    params = list(params)
    if not params:
        raise ConfigurationError("no parameters to optimize")
    if kind == "stable-adamw+amsgrad":
        return StableAdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay, amsgrad=True)
    if kind == "adamw":
        return torch.optim.AdamW(params, lr=lr, betas=betas, eps=eps, weight_decay=weight_decay)
    raise ConfigurationError(f"unknown optimizer kind {kind!r}; expected one of {OPTIMIZER_KINDS}")
