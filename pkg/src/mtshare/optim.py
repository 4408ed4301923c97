"""First-order optimizers and step-decay learning-rate schedule."""

import numpy as np


class StepDecay:
    """Multiply lr by `factor` every `every` steps. factor in (0, 1]."""

    def __init__(self, factor=0.5, every=4000):
        if not (0 < factor <= 1):
            raise ValueError("decay factor must be in (0, 1]")
        self.factor = factor
        self.every = every


class Optimizer:
    def __init__(self, params, lr, weight_decay=0.0, schedule=None):
        if lr < 0:
            raise ValueError("learning_rate must be >= 0")
        self.params = list(params)
        self.lr = lr
        self.weight_decay = weight_decay
        self.schedule = schedule
        self.step_count = 0

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self._update()
        self.step_count += 1
        if self.schedule is not None and self.step_count % self.schedule.every == 0:
            self.lr *= self.schedule.factor

    def _update(self):
        raise NotImplementedError

    # checkpointing
    def state(self):
        return {"lr": self.lr, "step_count": self.step_count, "slots": self._slots()}

    def set_state(self, st):
        self.lr = st["lr"]
        self.step_count = st["step_count"]
        self._set_slots(st["slots"])

    def _slots(self):
        return {}

    def _set_slots(self, slots):
        pass


class SGD(Optimizer):
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, schedule=None):
        super().__init__(params, lr, weight_decay, schedule)
        self.momentum = momentum
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def _update(self):
        for p, v in zip(self.params, self.velocity):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= self.lr * v

    def _slots(self):
        return {"velocity": [v.copy() for v in self.velocity]}

    def _set_slots(self, slots):
        self.velocity = [np.array(v) for v in slots["velocity"]]


class Adam(Optimizer):
    def __init__(self, params, lr, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.0, schedule=None):
        super().__init__(params, lr, weight_decay, schedule)
        self.betas = betas
        self.eps = eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def _update(self):
        b1, b2 = self.betas
        t = self.step_count + 1
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            m *= b1
            m += (1 - b1) * g
            v *= b2
            v += (1 - b2) * g * g
            mhat = m / (1 - b1 ** t)
            vhat = v / (1 - b2 ** t)
            p.data -= self.lr * mhat / (np.sqrt(vhat) + self.eps)

    def _slots(self):
        return {"m": [m.copy() for m in self.m], "v": [v.copy() for v in self.v]}

    def _set_slots(self, slots):
        self.m = [np.array(m) for m in slots["m"]]
        self.v = [np.array(v) for v in slots["v"]]
