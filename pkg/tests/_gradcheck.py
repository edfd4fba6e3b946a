"""Central finite-difference checks for the autodiff engine."""

import numpy as np

H = 1e-5
FLOOR = 1e-6  # relative error denominator floor for near-zero gradients


def rel_error(a, n):
    return abs(a - n) / max(abs(a), abs(n), FLOOR)


def numeric_grad(f, arr, index, h=H):
    old = arr[index]
    arr[index] = old + h
    up = f()
    arr[index] = old - h
    down = f()
    arr[index] = old
    return (up - down) / (2 * h)


def check_tensor_fn(fn, inputs, rtol=1e-4, n_coords=None, seed=0):
    """``fn(*tensors)`` returns a scalar Tensor; compares every (or a sample
    of) input coordinate. Returns the worst relative error."""
    from kmap.numcore import Tensor

    leaves = [Tensor(np.array(x, dtype=np.float64), requires_grad=True) for x in inputs]
    out = fn(*leaves)
    out.backward()
    rng = np.random.default_rng(seed)
    worst = 0.0
    for leaf in leaves:
        coords = list(np.ndindex(leaf.shape))
        if n_coords is not None and len(coords) > n_coords:
            coords = [coords[i] for i in rng.choice(len(coords), n_coords, replace=False)]
        for idx in coords:
            num = numeric_grad(lambda: fn(*[Tensor(l.data) for l in leaves]).item(), leaf.data, idx)
            ana = 0.0 if leaf.grad is None else leaf.grad[idx]
            worst = max(worst, rel_error(ana, num))
    assert worst < rtol, f"max relative error {worst:.3g}"
    return worst
