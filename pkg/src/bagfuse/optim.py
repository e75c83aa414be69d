"""AdaBelief optimizer and a patience-based early-stopping controller."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping

import numpy as np

from .errors import ContractError
from .tensor import Tensor

__all__ = ["OptimizerConfig", "AdaBelief", "EarlyStopper"]


@dataclass(frozen=True)
class OptimizerConfig:
    lr: float = 5e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-16
    weight_decay: float = 0.0
    decoupled: bool = True
    rectify: bool = False


class AdaBelief:
    """Adaptive optimizer driven by the belief in the gradient direction.

    Per parameter theta with gradient g, at step t:

        m <- b1*m + (1-b1)*g
        s <- b2*s + (1-b2)*(g - m)^2
        theta <- theta - lr * (m / (1-b1^t)) / (sqrt(s / (1-b2^t)) + eps)

    With ``decoupled`` weight decay an extra ``lr * wd * theta`` is subtracted;
    otherwise ``wd * theta`` is folded into g before the moments.  The
    rectified variant is intentionally not implemented.
    """

    def __init__(
        self,
        params: Iterable[tuple[str, Tensor]] | Mapping[str, Tensor],
        lr: float = 5e-4,
        beta1: float = 0.9,
        beta2: float = 0.999,
        eps: float = 1e-16,
        weight_decay: float = 0.0,
        decoupled: bool = True,
        rectify: bool = False,
    ):
        if rectify:
            raise ContractError("AdaBelief: the rectified update is not supported")
        if not 0.0 <= beta1 < 1.0 or not 0.0 <= beta2 < 1.0:
            raise ContractError(f"AdaBelief: betas must lie in [0, 1), got ({beta1}, {beta2})")
        if lr <= 0 or eps <= 0:
            raise ContractError("AdaBelief: lr and eps must be positive")
        if isinstance(params, Mapping):
            params = list(params.items())
        self.params: list[tuple[str, Tensor]] = list(params)
        names = [n for n, _ in self.params]
        if len(set(names)) != len(names):
            raise ContractError("AdaBelief: duplicate parameter names")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.weight_decay = weight_decay
        self.decoupled = decoupled
        self.t = 0
        self.m = {n: np.zeros_like(p.data) for n, p in self.params}
        self.s = {n: np.zeros_like(p.data) for n, p in self.params}

    @classmethod
    def from_config(cls, params, cfg: OptimizerConfig) -> "AdaBelief":
        return cls(
            params,
            lr=cfg.lr,
            beta1=cfg.beta1,
            beta2=cfg.beta2,
            eps=cfg.eps,
            weight_decay=cfg.weight_decay,
            decoupled=cfg.decoupled,
            rectify=cfg.rectify,
        )

    def step(self) -> None:
        """Apply one update; every parameter must hold a gradient, cleared after."""
        missing = [n for n, p in self.params if p.grad is None]
        if missing:
            raise ContractError(f"AdaBelief: missing gradient for {', '.join(missing)}")
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in self.params:
            g = p.grad
            if self.weight_decay and not self.decoupled:
                g = g + self.weight_decay * p.data
            m = self.m[name]
            s = self.s[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            diff = g - m
            s *= self.beta2
            s += (1.0 - self.beta2) * diff * diff
            delta = self.lr * (m / bc1) / (np.sqrt(s / bc2) + self.eps)
            if self.weight_decay and self.decoupled:
                delta = delta + self.lr * self.weight_decay * p.data
            p.data -= delta
            p.grad = None

    def zero_grad(self) -> None:
        for _, p in self.params:
            p.grad = None

    def state_dict(self) -> dict:
        return {
            "t": self.t,
            "m": {n: a.copy() for n, a in self.m.items()},
            "s": {n: a.copy() for n, a in self.s.items()},
        }

    def load_state_dict(self, state: dict) -> None:
        if set(state["m"]) != set(self.m) or set(state["s"]) != set(self.s):
            raise ContractError("AdaBelief: state parameter names do not match")
        for n, a in state["m"].items():
            if a.shape != self.m[n].shape:
                raise ContractError(f"AdaBelief: state shape mismatch for {n}")
        self.t = int(state["t"])
        self.m = {n: np.array(a, copy=True) for n, a in state["m"].items()}
        self.s = {n: np.array(a, copy=True) for n, a in state["s"].items()}


class EarlyStopper:
    """Stop after ``patience`` consecutive epochs without strict improvement.

    Scores are higher-is-better (validation weighted F1).  Ties count as
    non-improvements.  On improvement a deep copy of the parameter snapshot
    is kept so the best epoch can be restored exactly.
    """

    def __init__(self, patience: int = 10):
        if patience < 1:
            raise ContractError(f"EarlyStopper: patience must be >= 1, got {patience}")
        self.patience = patience
        self.best_score = -math.inf
        self.best_epoch = -1
        self.epochs_since_best = 0
        self.best_checkpoint: dict[str, np.ndarray] | None = None
        self._epoch = -1

    def update(self, epoch_score: float, snapshot: Mapping[str, np.ndarray]) -> str:
        """Record one epoch; returns ``"stop"`` exactly when patience runs out."""
        self._epoch += 1
        if epoch_score > self.best_score:
            self.best_score = epoch_score
            self.best_epoch = self._epoch
            self.epochs_since_best = 0
            self.best_checkpoint = {k: np.array(v, copy=True) for k, v in snapshot.items()}
            return "continue"
        self.epochs_since_best += 1
        return "stop" if self.epochs_since_best == self.patience else "continue"
