"""ADADELTA optimizer.

Keeps two exponentially decayed accumulators per parameter (squared
gradients and squared updates) and scales each step by the ratio of their
RMS values, so no learning rate needs tuning. Defaults: decay rho = 0.95,
conditioning eps = 1e-6.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn as nn


@dataclass
class AdadeltaState:
    """Per-parameter accumulators, keyed by parameter name."""

    rho: float = 0.95
    eps: float = 1e-6
    sq_grad: dict[str, torch.Tensor] = field(default_factory=dict)
    sq_update: dict[str, torch.Tensor] = field(default_factory=dict)

    def accumulators(self, name: str, like: torch.Tensor
                     ) -> tuple[torch.Tensor, torch.Tensor]:
        if name not in self.sq_grad:
            self.sq_grad[name] = torch.zeros_like(like)
            self.sq_update[name] = torch.zeros_like(like)
        return self.sq_grad[name], self.sq_update[name]


def adadelta_update(params: dict[str, torch.Tensor],
                    grads: dict[str, torch.Tensor],
                    state: AdadeltaState) -> None:
    """Apply one ADADELTA step in place.

    For each parameter: accumulate E[g^2], compute
    dx = -g * sqrt(E[dx^2] + eps) / sqrt(E[g^2] + eps),
    accumulate E[dx^2], then apply dx. A zero gradient yields a zero update
    and the accumulators decay toward zero.
    """
    with torch.no_grad():
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(
                    f"gradient shape {tuple(g.shape)} does not match "
                    f"parameter {name} {tuple(p.shape)}")
            sq_g, sq_u = state.accumulators(name, p)
            sq_g.mul_(state.rho).addcmul_(g, g, value=1.0 - state.rho)
            dx = -g * torch.sqrt(sq_u + state.eps) / torch.sqrt(sq_g + state.eps)
            sq_u.mul_(state.rho).addcmul_(dx, dx, value=1.0 - state.rho)
            p.add_(dx)


def step_module(module: nn.Module, state: AdadeltaState) -> None:
    """ADADELTA step over a module's parameters using their .grad fields."""
    params = dict(module.named_parameters())
    grads = {name: p.grad for name, p in params.items() if p.grad is not None}
    adadelta_update({n: p.data for n, p in params.items()}, grads, state)
