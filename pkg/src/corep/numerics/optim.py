"""Adam optimizer over a single ParamGroup, with serializable state."""
from __future__ import annotations

from typing import Mapping

import numpy as np

from .params import ParamGroup


class Adam:
    """Standard Adam.  One instance owns one parameter group.

    Only parameters whose names appear in the gradient mapping are updated;
    the step counter and moments stay untouched otherwise, so skipping a
    group entirely (e.g. while it is frozen) leaves its state bit-identical.
    """

    def __init__(self, params: ParamGroup, lr: float,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = params
        self.lr = float(lr)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.eps = float(eps)
        self.t = 0
        self.m = {n: np.zeros_like(params[n]) for n in params.trainable_names()}
        self.v = {n: np.zeros_like(params[n]) for n in params.trainable_names()}

    def step(self, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        b1t = 1.0 - self.beta1 ** self.t
        b2t = 1.0 - self.beta2 ** self.t
        # saturating second moments on pathological gradients stall the
        # parameter instead of poisoning it; forward checks own the failure
        with np.errstate(over="ignore"):
            for name in self.params.trainable_names():
                if name not in grads:
                    continue
                g = np.asarray(grads[name], dtype=np.float64)
                self.m[name] = self.beta1 * self.m[name] + (1.0 - self.beta1) * g
                self.v[name] = self.beta2 * self.v[name] + (1.0 - self.beta2) * (g * g)
                m_hat = self.m[name] / b1t
                v_hat = self.v[name] / b2t
                self.params.set(name,
                                self.params[name] - self.lr * m_hat / (np.sqrt(v_hat) + self.eps))

    # -- checkpoint support ---------------------------------------------------

    def state_group(self) -> ParamGroup:
        out = ParamGroup()
        out.add("__t", np.float64(self.t), trainable=False)
        for name in self.m:
            out.add(f"m.{name}", self.m[name], trainable=False)
            out.add(f"v.{name}", self.v[name], trainable=False)
        return out

    def load_state_group(self, group: ParamGroup) -> None:
        self.t = int(group["__t"])
        for name in self.m:
            self.m[name] = np.array(group[f"m.{name}"], dtype=np.float64)
            self.v[name] = np.array(group[f"v.{name}"], dtype=np.float64)
