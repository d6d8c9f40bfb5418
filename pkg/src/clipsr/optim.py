"""Adam with bias correction.

Defaults follow the adversarial-training settings used by the SR trainer:
``beta1 = 0.0`` (the first moment is the raw gradient) and ``beta2 = 0.9``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import ContractError, Tensor


@dataclass
class AdamState:
    lr: float = 2e-4
    beta1: float = 0.0
    beta2: float = 0.9
    eps: float = 1e-8
    step: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)


def adam_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None], state: AdamState) -> list[np.ndarray]:
    """Return updated copies of ``params``; moments in ``state`` are mutated.

    A ``None`` gradient leaves the parameter and its moments untouched.
    """
    if len(params) != len(grads):
        raise ContractError(f"adam_step: {len(params)} params but {len(grads)} grads")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ContractError(f"adam_step: state tracks {len(state.m)} params, got {len(params)}")
    for p, g, m in zip(params, grads, state.m):
        if g is not None and (g.shape != p.shape or m.shape != p.shape):
            raise ContractError(f"adam_step: shape mismatch param {p.shape}, grad {g.shape}, moment {m.shape}")

    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** t
    c2 = 1.0 - b2 ** t
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        if g is None:
            out.append(p)
            continue
        m = state.m[i] = b1 * state.m[i] + (1.0 - b1) * g
        v = state.v[i] = b2 * state.v[i] + (1.0 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        out.append((p - state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype))
    return out


class Adam:
    """Optimizer bound to a fixed list of parameter tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 2e-4, betas=(0.0, 0.9), eps: float = 1e-8):
        self.params = list(params)
        self.state = AdamState(lr=lr, beta1=betas[0], beta2=betas[1], eps=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        new = adam_step([p.data for p in self.params], [p.grad for p in self.params], self.state)
        for p, d in zip(self.params, new):
            p.data = d

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {"step": np.array([self.state.step], dtype=np.float32)}
        for i, (m, v) in enumerate(zip(self.state.m, self.state.v)):
            out[f"m.{i}"] = m
            out[f"v.{i}"] = v
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        self.state.step = int(arrays["step"][0])
        n = len(self.params)
        if n and f"m.{n - 1}" in arrays:
            self.state.m = [arrays[f"m.{i}"].astype(self.params[i].dtype) for i in range(n)]
            self.state.v = [arrays[f"v.{i}"].astype(self.params[i].dtype) for i in range(n)]
