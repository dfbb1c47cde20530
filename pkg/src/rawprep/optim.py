"""SGD with momentum, decoupled-from-nothing weight decay, milestone schedule.

Update rule per parameter: v <- momentum*v + (g + weight_decay*w), then
w <- w - lr_effective*v, with lr_effective = lr * factor^(milestones passed).
Velocity buffers are created up front so the buffer set always matches the
trainable parameter set exactly.
"""

import numpy as np


class SGD:
    def __init__(self, params, lr, momentum=0.9, weight_decay=0.0, milestones=(), decay_factor=0.1):
        if lr <= 0:
            raise ValueError("learning rate must be positive")
        if not 0.0 <= momentum < 1.0:
            raise ValueError("momentum must lie in [0, 1)")
        if weight_decay < 0:
            raise ValueError("weight decay must be non-negative")
        if list(milestones) != sorted(milestones):
            raise ValueError("milestones must be sorted")
        self.params = list(params)
        self.lr = float(lr)
        self.momentum = float(momentum)
        self.weight_decay = float(weight_decay)
        self.milestones = [int(m) for m in milestones]
        self.decay_factor = float(decay_factor)
        self.epoch = 0
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def effective_lr(self, epoch=None):
        e = self.epoch if epoch is None else epoch
        passed = sum(1 for m in self.milestones if m <= e)
        return self.lr * self.decay_factor ** passed

    def set_epoch(self, epoch):
        if epoch < 0:
            raise ValueError("epoch must be non-negative")
        self.epoch = int(epoch)

    def step(self):
        lr = self.effective_lr()
        for p, v in zip(self.params, self.velocity):
            g = p.grad_or_zeros()
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data -= lr * v

    def zero_grad(self):
        for p in self.params:
            p.grad = None
