"""Adam with per-group settings, elementwise gradient clipping, freezing.

Weight decay is coupled L2: it is folded into the gradient (g <- g + wd*theta)
before the moment updates.  Clipping is elementwise value clamping into
[low, high], applied by the training loop once per optimizer step after a
full accumulation window.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


@dataclass
class ParamGroup:
    name: str
    params: dict                      # parameter name -> Tensor
    lr: float
    weight_decay: float = 0.0
    frozen: bool = False

    def grad_norm(self):
        total = 0.0
        for p in self.params.values():
            if p.grad is not None:
                total += float((p.grad * p.grad).sum())
        return float(np.sqrt(total))


def clip_gradients(params, low=-10.0, high=10.0):
    """Clamp every gradient entry into [low, high], in place."""
    if not (np.isfinite(low) and np.isfinite(high) and low < high):
        raise ContractError(f"bad clip range [{low}, {high}]")
    for p in params:
        if p.grad is not None:
            np.clip(p.grad, low, high, out=p.grad)


class Adam:
    """Standard Adam with bias correction, one state slot per parameter."""

    def __init__(self, groups, betas=(0.9, 0.999), eps=1e-8):
        self.groups = list(groups)
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.state = {}
        for group in self.groups:
            for name, p in group.params.items():
                key = f"{group.name}.{name}"
                self.state[key] = {
                    "m": np.zeros_like(p.data),
                    "v": np.zeros_like(p.data),
                    "step": 0,
                }

    def zero_grad(self):
        for group in self.groups:
            for p in group.params.values():
                p.grad = None

    def step_group(self, group):
        """Apply one Adam update to every parameter of an unfrozen group."""
        if group.frozen:
            raise ContractError(f"optimizer step on frozen group {group.name!r}")
        for name, p in group.params.items():
            if p.grad is None:
                continue
            g = p.grad
            if group.weight_decay:
                g = g + group.weight_decay * p.data
            st = self.state[f"{group.name}.{name}"]
            st["step"] += 1
            st["m"] = self.beta1 * st["m"] + (1 - self.beta1) * g
            st["v"] = self.beta2 * st["v"] + (1 - self.beta2) * (g * g)
            m_hat = st["m"] / (1 - self.beta1 ** st["step"])
            v_hat = st["v"] / (1 - self.beta2 ** st["step"])
            p.data -= group.lr * m_hat / (np.sqrt(v_hat) + self.eps)

    def step(self):
        """Update all unfrozen groups; frozen groups are skipped entirely."""
        for group in self.groups:
            if not group.frozen:
                self.step_group(group)

    def all_params(self):
        out = []
        for group in self.groups:
            out.extend(group.params.values())
        return out
