"""Shared test utilities."""

import numpy as np

from fsmeta.numerics import Parameter, Tensor, backward, functional as F
from fsmeta.numerics.gradcheck import check_gradients


def projected(out: Tensor, proj: np.ndarray) -> Tensor:
    """Scalar loss sum(out * proj), so every output element carries weight."""
    return F.sum(F.mul(out, Tensor(proj)))


def gradcheck(build, arrays, rng, tol):
    """Backprop through ``build(*tensors)`` and compare every input grad to central differences."""
    params = [Parameter(a, name=f"p{i}") for i, a in enumerate(arrays)]
    out = build(*params)
    proj = rng.standard_normal(out.shape)
    backward(projected(out, proj))
    analytic = [p.grad.copy() for p in params]

    def f():
        return float(np.sum(build(*[Tensor(p.data) for p in params]).data * proj))

    errs = check_gradients(f, [p.data for p in params], analytic)
    assert max(errs) < tol, errs
    return errs
