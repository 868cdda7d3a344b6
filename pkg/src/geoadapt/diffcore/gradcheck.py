"""Finite-difference verification of backward rules."""

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    passed: bool
    n_elements: int

    def __str__(self):
        status = "ok" if self.passed else "FAIL"
        return f"gradcheck {status}: max rel err {self.max_rel_error:.3e} (tol {self.tol:.1e}, n={self.n_elements})"


def grad_check(f, x, h=1e-6, tol=1e-4):
    """Compare the analytic gradient of scalar-valued ``f`` at ``x`` against
    central differences (f(x+h) - f(x-h)) / 2h, element by element.

    ``x`` must be float64; the reported error is |analytic - numeric|
    relative to max(|analytic|, |numeric|, 1), so near-zero gradients are
    judged on an absolute scale.
    """
    if x.dtype != np.float64:
        raise TypeError("grad_check requires a float64 input")
    probe = Tensor(x.data.copy(), requires_grad=True)
    out = f(probe)
    if out.size != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    out.backward()
    analytic = probe.grad.copy() if probe.grad is not None else np.zeros_like(x.data)

    base = x.data.copy()
    numeric = np.zeros_like(base)
    flat = base.reshape(-1)
    num_flat = numeric.reshape(-1)
    for i in range(flat.size):
        keep = flat[i]
        flat[i] = keep + h
        fp = f(Tensor(base.copy())).item()
        flat[i] = keep - h
        fm = f(Tensor(base.copy())).item()
        flat[i] = keep
        num_flat[i] = (fp - fm) / (2 * h)

    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1.0)
    rel = np.abs(analytic - numeric) / scale
    max_rel = float(rel.max()) if rel.size else 0.0
    return GradCheckReport(max_rel, tol, max_rel < tol, int(base.size))
