"""Adam with bias correction."""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import parameter
from .errors import ContractError


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def copy(self):
        return AdamState(self.lr, self.beta1, self.beta2, self.eps, self.t,
                         {k: a.copy() for k, a in self.m.items()},
                         {k: a.copy() for k, a in self.v.items()})


def adam_step(params, grads, state):
    """Apply one Adam update in place on ``params`` and ``state``.

    ``grads`` maps parameter names to arrays shaped like the parameters.
    """
    missing = [name for name in params if name not in grads]
    if missing:
        raise ContractError(f"no gradient for parameters: {missing[:5]}")
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.t
    c2 = 1.0 - b2 ** state.t
    for name in params:
        p = params[name]
        g = np.asarray(grads[name], dtype=p.dtype)
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / c1
        v_hat = v / c2
        update = (state.lr * m_hat / (np.sqrt(v_hat) + state.eps)).astype(p.dtype)
        params[name] = parameter(p.data - update, name=name)
    return params, state
