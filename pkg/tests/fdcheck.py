"""Shared finite-difference gradient oracle for the test suite.

Central differences at h=1e-5 on 64-bit floats, compared with a guarded relative
error |a - b| / max(1, |a|, |b|) so near-zero entries are judged on absolute terms.
"""

import numpy as np

from rform.autodiff import backward


def rel_err(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return np.abs(a - b) / np.maximum(1.0, np.maximum(np.abs(a), np.abs(b)))


def fd_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of the scalar-valued f() w.r.t. x, perturbed in place."""
    g = np.zeros_like(x)
    flat = x.ravel()
    gf = g.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = f()
        flat[i] = old - h
        fm = f()
        flat[i] = old
        gf[i] = (fp - fm) / (2.0 * h)
    return g


def max_grad_err(build_loss, leaves, h: float = 1e-5) -> float:
    """Max guarded relative error between tape gradients and central differences.

    build_loss() must rebuild the loss from the same leaf tensors each call so the
    in-place perturbations are visible.
    """
    for leaf in leaves:
        if leaf.grad is not None:
            leaf.grad = np.zeros_like(leaf.data)
    loss = build_loss()
    backward(loss)
    worst = 0.0
    for leaf in leaves:
        ad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.data)
        ad = np.array(ad, copy=True)
        fd = fd_grad(lambda: float(build_loss().data), leaf.data, h)
        worst = max(worst, float(rel_err(ad, fd).max()))
    return worst


def check_grads(build_loss, leaves, h: float = 1e-5, tol: float = 1e-6) -> None:
    err = max_grad_err(build_loss, leaves, h)
    assert err <= tol, f"gradient mismatch: max guarded relative error {err:.3e} > {tol}"
