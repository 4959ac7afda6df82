"""Finite-difference validation of analytic gradients.

The checker walks every scalar in a ParamSet, perturbs it by +/- eps,
and compares the central difference against the gradient produced by
backward(). Relative error uses a floored denominator so that very small
gradients are judged on an absolute scale instead of blowing up.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .autodiff import no_grad


@dataclass
class GradReport:
    eps: float
    tol: float
    per_param: dict = field(default_factory=dict)  # name -> max relative error
    failures: dict = field(default_factory=dict)  # name -> diagnostic note

    @property
    def passed(self):
        return not self.failures and all(e <= self.tol for e in self.per_param.values())

    def failing_params(self):
        bad = [n for n, e in self.per_param.items() if e > self.tol]
        bad.extend(n for n in self.failures if n not in bad)
        return bad

    def max_error(self):
        return max(self.per_param.values(), default=0.0)

    def summary(self):
        status = "PASS" if self.passed else "FAIL"
        lines = [f"grad_check {status} (eps={self.eps}, tol={self.tol}, max_rel={self.max_error():.3e})"]
        for name in self.failing_params():
            note = self.failures.get(name, f"rel error {self.per_param.get(name, float('nan')):.3e}")
            lines.append(f"  {name}: {note}")
        return "\n".join(lines)


def grad_check(loss_fn, params, eps=1e-4, tol=1e-3, rel_floor=1e-2):
    """Compare analytic gradients of ``loss_fn(params)`` with central differences.

    ``loss_fn`` must be deterministic (dropout off) and return a scalar tensor.
    ``rel_floor`` is the denominator floor: components whose gradients are
    below it are effectively held to an absolute tolerance of tol*rel_floor.
    """
    report = GradReport(eps=eps, tol=tol)

    params.zero_grad()
    loss = loss_fn(params)
    base = float(np.asarray(loss.data).reshape(()))
    if not math.isfinite(base):
        report.failures["<loss>"] = f"non-finite loss {base}"
        return report
    loss.backward()
    analytic = {
        name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in params.items()
    }

    for name, t in params.items():
        flat = t.data.reshape(-1)
        aflat = analytic[name].reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            with no_grad():
                fp = float(np.asarray(loss_fn(params).data).reshape(()))
            flat[i] = orig - eps
            with no_grad():
                fm = float(np.asarray(loss_fn(params).data).reshape(()))
            flat[i] = orig
            if not (math.isfinite(fp) and math.isfinite(fm)):
                report.failures[name] = f"non-finite loss at element {i}"
                break
            numeric = (fp - fm) / (2.0 * eps)
            denom = max(abs(aflat[i]), abs(numeric), rel_floor)
            worst = max(worst, abs(aflat[i] - numeric) / denom)
        report.per_param[name] = worst
    return report
