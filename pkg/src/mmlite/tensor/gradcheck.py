"""Central finite-difference gradient checking."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .core import Tape, Tensor
from . import ops


@dataclass
class GradCheckReport:
    max_rel_err: float
    passed: bool
    per_input: list = field(default_factory=list)
    n_coords: int = 0

    def __str__(self) -> str:
        state = "pass" if self.passed else "FAIL"
        return f"{state} max_rel_err={self.max_rel_err:.3e} over {self.n_coords} coords"


def _scalarize(out: Tensor, weights: np.ndarray) -> Tensor:
    return ops.sum(ops.mul(out, Tensor._wrap(weights)))


def grad_check(op_closure, inputs, eps: float = 1e-6, tol: float = 1e-6, seed: int = 0) -> GradCheckReport:
    """Compare tape gradients of ``op_closure(*inputs)`` with central differences.

    A non-scalar output is reduced with a fixed random projection so every
    output element contributes. Relative error is ``|a - n| / max(1, |a|, |n|)``.
    Failures are reported, not raised.
    """
    inputs = list(inputs)
    if not 1e-7 <= eps <= 1e-4:
        raise ContractError(f"grad_check: eps {eps} outside [1e-7, 1e-4]")
    for t in inputs:
        if t.dtype != np.float64:
            raise ContractError("grad_check: inputs must be float64")

    probe = op_closure(*inputs)
    rng = np.random.default_rng(seed)
    weights = rng.uniform(-1.0, 1.0, size=probe.shape)

    def value() -> float:
        out = op_closure(*inputs)
        return float(np.sum(out.data * weights))

    flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    with Tape() as tape:
        loss = _scalarize(op_closure(*inputs), weights)
    tape.backward(loss)
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in inputs]
    for t, f in zip(inputs, flags):
        t.requires_grad = f
        t.grad = None

    worst, per_input, count = 0.0, [], 0
    for t, a in zip(inputs, analytic):
        flat = t.data.reshape(-1)
        af = a.reshape(-1)
        local = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            fp = value()
            flat[i] = orig - eps
            fm = value()
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            err = abs(af[i] - num) / max(1.0, abs(af[i]), abs(num))
            local = max(local, err)
        count += flat.size
        per_input.append(local)
        worst = max(worst, local)
    return GradCheckReport(max_rel_err=worst, passed=worst <= tol, per_input=per_input, n_coords=count)
