"""Shared finite-difference gradient checking used across test modules."""

import numpy as np

from attralign import autodiff as ad


def rel_error(a: np.ndarray, b: np.ndarray, floor: float = 1e-6) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def check_grads(fn, inputs, step=1e-5, tol=1e-4, coords=None, rng=None):
    """Compare backward() against finite_diff_grad for every input.

    fn maps a list of Tensors to a scalar Tensor. When ``coords`` is given,
    only that many randomly chosen coordinates per input are finite-differenced
    (model-sized inputs are too large for a full sweep).
    """
    tensors = [ad.Tensor(x, requires_grad=True) for x in inputs]
    out = fn(tensors)
    grads = ad.backward(out, tensors)
    worst = 0.0
    for i, t in enumerate(tensors):

        def partial(x, i=i):
            args = [ad.Tensor(v.data) for v in tensors]
            args[i] = x
            return fn(args)

        analytic = grads[t].data
        if coords is None:
            fd = ad.finite_diff_grad(partial, t, step=step).data
            err = rel_error(analytic, fd)
        else:
            n = min(coords, t.size)
            picks = (rng or np.random.default_rng(0)).choice(t.size, size=n, replace=False)
            err = 0.0
            base = t.data.copy()
            flat = base.reshape(-1)
            for j in picks:
                orig = flat[j]
                flat[j] = orig + step
                with ad.no_grad():
                    fp = partial(ad.Tensor(base)).item()
                flat[j] = orig - step
                with ad.no_grad():
                    fm = partial(ad.Tensor(base)).item()
                flat[j] = orig
                fd_j = (fp - fm) / (2 * step)
                err = max(err, rel_error(analytic.reshape(-1)[j], fd_j))
        worst = max(worst, err)
        assert err < tol, f"input {i}: rel error {err:.3e} >= {tol}"
    return worst
