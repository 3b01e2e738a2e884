"""Adam optimizer."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from recnet.engine.tensor import Tensor


@dataclass
class AdamState:
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params, grads, state: AdamState, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8) -> None:
    """Apply one bias-corrected Adam update in place.

    ``params`` and ``grads`` map names to arrays; parameters whose gradient is
    ``None`` are left alone but still share the step counter.
    """
    state.step += 1
    t = state.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        v = state.v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


class Adam:
    """Adam over a name -> ``Tensor`` mapping of parameters."""

    def __init__(self, params: dict[str, Tensor], lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.state = AdamState()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        adam_step(
            {k: p.data for k, p in self.params.items()},
            {k: p.grad for k, p in self.params.items()},
            self.state,
            self.lr,
            *self.betas,
            self.eps,
        )

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Flat arrays for ``np.savez``."""
        out = {"step": np.array(self.state.step)}
        for k in self.state.m:
            out[f"m/{k}"] = self.state.m[k]
            out[f"v/{k}"] = self.state.v[k]
        return out

    def load_state_arrays(self, arrays) -> None:
        self.state = AdamState(step=int(arrays["step"]))
        for key in arrays:
            if key.startswith("m/"):
                self.state.m[key[2:]] = np.array(arrays[key])
            elif key.startswith("v/"):
                self.state.v[key[2:]] = np.array(arrays[key])
