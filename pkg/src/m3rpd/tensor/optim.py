from dataclasses import dataclass, field

import numpy as np


@dataclass
class AdamState:
    learning_rate: float = 0.001
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-7
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate >= 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        for nm in ("beta1", "beta2"):
            b = getattr(self, nm)
            if not 0 < b < 1:
                raise ValueError(f"{nm} must be in (0, 1), got {b}")


class Adam:
    """Adam with bias correction over a fixed list of parameter tensors.

    Only the parameters passed in are ever touched, which is how frozen
    parameters are kept out of an update.
    """

    def __init__(self, params, learning_rate=0.001, beta1=0.9, beta2=0.999, epsilon=1e-7):
        self.params = list(params)
        self.state = AdamState(learning_rate, beta1, beta2, epsilon)
        self.state.m = [np.zeros_like(p.data) for p in self.params]
        self.state.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, grads=None):
        st = self.state
        if grads is None:
            grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        if len(grads) != len(self.params):
            raise ValueError(f"adam_step: {len(grads)} grads for {len(self.params)} params")
        for p, g in zip(self.params, grads):
            if g.shape != p.data.shape:
                raise ValueError(f"adam_step: grad shape {g.shape} != param shape {p.data.shape} ({p.name})")
            if not np.isfinite(g).all():
                raise FloatingPointError(f"adam_step: non-finite gradient for parameter {p.name!r}")
        st.step_count += 1
        t = st.step_count
        dt = self.params[0].data.dtype if self.params else np.float32
        b1, b2 = dt.type(st.beta1), dt.type(st.beta2)
        c1 = dt.type(1.0 - st.beta1**t)
        c2 = dt.type(1.0 - st.beta2**t)
        lr, eps = dt.type(st.learning_rate), dt.type(st.epsilon)
        for p, g, m, v in zip(self.params, grads, st.m, st.v):
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * (g * g)
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + eps)
