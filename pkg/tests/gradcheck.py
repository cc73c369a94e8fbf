"""Central finite-difference gradient oracle shared by the tests."""
import numpy as np

from metapi import autodiff as ad


def check_gradients(params, loss_fn, eps=1e-5, n_probe=6, rng=None):
    """Max relative error between backprop and central differences over sampled entries."""
    rng = rng or np.random.default_rng(0)
    ad.zero_grad(params)
    ad.backward(loss_fn())
    worst = 0.0
    for p in params:
        flat = p.data.reshape(-1)
        grad = p.grad.reshape(-1)
        for i in rng.choice(flat.size, size=min(n_probe, flat.size), replace=False):
            old = flat[i]
            flat[i] = old + eps
            with ad.no_grad():
                up = loss_fn().item()
            flat[i] = old - eps
            with ad.no_grad():
                down = loss_fn().item()
            flat[i] = old
            fd = (up - down) / (2 * eps)
            worst = max(worst, abs(fd - grad[i]) / max(1e-6, abs(fd), abs(grad[i])))
    return worst
