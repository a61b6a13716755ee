"""AdamW with decoupled weight decay, two learning-rate groups keyed by
the "backbone." name prefix, global-norm gradient clipping, and a step
schedule applied through an external scale factor."""

import numpy as np


class OptimError(RuntimeError):
    pass


class AdamW:
    """Moments are kept in the parameter dtype; `lr_scale` multiplies
    both group learning rates (step decay lives in the training loop)."""

    def __init__(self, named_params, lr_backbone=1e-5, lr_rest=1e-4,
                 betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-4, clip_norm=0.1):
        self.params = list(named_params)
        if not self.params:
            raise OptimError("no parameters to optimize")
        names = [name for name, _ in self.params]
        if len(set(names)) != len(names):
            raise OptimError("duplicate parameter names")
        self.lr_backbone = lr_backbone
        self.lr_rest = lr_rest
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in self.params}
        self.v = {name: np.zeros_like(p.data) for name, p in self.params}

    def _lr(self, name):
        return self.lr_backbone if name.startswith("backbone.") else self.lr_rest

    def zero_grad(self):
        for _, p in self.params:
            p.grad = None

    def clip_gradients(self):
        """Scale all gradients so their global L2 norm is <= clip_norm;
        returns the pre-clip norm. Parameters without a gradient (not
        reached by the loss, e.g. a fusion path that is switched off)
        are left alone."""
        total = 0.0
        for name, p in self.params:
            if p.grad is None:
                continue
            total += float((p.grad.astype(np.float64) ** 2).sum())
        norm = float(np.sqrt(total))
        if self.clip_norm > 0 and norm > self.clip_norm:
            scale = self.clip_norm / norm
            for _, p in self.params:
                if p.grad is not None:
                    p.grad = p.grad * scale
        return norm

    def step(self, lr_scale=1.0):
        grad_norm = self.clip_gradients()
        self.step_count += 1
        b1, b2 = self.betas
        bias1 = 1.0 - b1 ** self.step_count
        bias2 = 1.0 - b2 ** self.step_count
        for name, p in self.params:
            g = p.grad
            if g is None:
                continue
            m = self.m[name]
            v = self.v[name]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            lr = self._lr(name) * lr_scale
            update = (m / bias1) / (np.sqrt(v / bias2) + self.eps)
            p.data = p.data - lr * (update + self.weight_decay * p.data)
        return grad_norm

    def state_arrays(self):
        out = []
        for name, _ in self.params:
            out.append((f"m.{name}", self.m[name]))
            out.append((f"v.{name}", self.v[name]))
        return out

    def load_state_arrays(self, arrays, step_count):
        for name, p in self.params:
            for prefix, store in (("m", self.m), ("v", self.v)):
                key = f"{prefix}.{name}"
                if key not in arrays:
                    raise OptimError(f"optimizer state missing {key}")
                if arrays[key].shape != p.data.shape:
                    raise OptimError(f"{key}: shape {arrays[key].shape} != {p.data.shape}")
                store[name] = arrays[key].astype(p.data.dtype)
        self.step_count = int(step_count)
