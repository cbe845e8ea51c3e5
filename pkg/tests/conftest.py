"""Shared test helpers: whole-model gradient certification."""

import numpy as np

from cellcounter.tensor import Tape, backward


def model_param_gradcheck(loss_fn, named_params, coords_per_tensor=4, h=1e-5):
    """Max relative error between analytic and central-difference gradients
    over a deterministic sample of coordinates of every parameter tensor.

    ``loss_fn`` re-runs the full forward pass and returns a scalar Tensor;
    it must be deterministic in the parameter values. Run in float64 mode.
    """
    for _, t in named_params:
        t.grad = None
    with Tape():
        loss = loss_fn()
    backward(loss)
    analytic = {name: t.grad.copy() for name, t in named_params}

    worst = 0.0
    for name, t in named_params:
        flat = t.data.reshape(-1)
        n = flat.size
        if coords_per_tensor is None or n <= coords_per_tensor:
            coords = range(n)
        else:
            coords = np.linspace(0, n - 1, coords_per_tensor).astype(int)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            fp = loss_fn().item()
            flat[i] = orig - h
            fm = loss_fn().item()
            flat[i] = orig
            numeric = (fp - fm) / (2.0 * h)
            a = float(analytic[name].reshape(-1)[i])
            err = abs(a - numeric) / max(1.0, abs(a))
            worst = max(worst, err)
    return worst
