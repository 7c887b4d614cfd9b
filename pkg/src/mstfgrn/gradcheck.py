"""Central finite-difference checks for tape gradients.

The check is directional: for a random unit direction ``v`` over the inputs, the
tape's ``<grad, v>`` is compared with ``(f(x + h v) - f(x - h v)) / 2h``.
Function evaluations run with gradient recording disabled, so the numerical
side never touches the tape. By default the perturbed evaluations run in
float64 whatever the precision of the tape under test: with single precision
the round-off of ``f`` divided by ``2h`` would otherwise dominate small
directional derivatives. Pass ``oracle_dtype=None`` to difference in the
inputs' own precision.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .tensor import Tensor, no_grad, precision

STEP = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-6}
RTOL = {np.dtype(np.float32): 1e-3, np.dtype(np.float64): 1e-5}


@dataclass
class CheckResult:
    analytic: float
    numeric: float

    @property
    def rel_err(self) -> float:
        scale = max(abs(self.analytic), abs(self.numeric))
        if scale == 0.0:
            return 0.0
        return abs(self.analytic - self.numeric) / scale


def directional_check(
    fn: Callable[[], Tensor],
    inputs: Sequence[Tensor],
    rng: np.random.Generator,
    h: float | None = None,
    oracle_dtype=np.float64,
) -> CheckResult:
    """Compare tape and finite-difference directional derivatives of ``fn``.

    ``fn`` closes over ``inputs`` and returns a scalar tensor. Inputs are
    perturbed in place and restored afterwards.
    """
    dtype = inputs[0].dtype
    if h is None:
        h = STEP[np.dtype(dtype)]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    loss = fn()
    loss.backward()
    dirs = [rng.standard_normal(t.shape) for t in inputs]
    norm = np.sqrt(sum(float(np.sum(d * d)) for d in dirs))
    # unit-length direction: h is then the actual step length in input space
    dirs = [(d / norm).astype(t.dtype) for d, t in zip(dirs, inputs)]
    analytic = float(sum(np.sum(t.grad.astype(np.float64) * d) for t, d in zip(inputs, dirs)))

    originals = [t.data.copy() for t in inputs]
    work = np.dtype(oracle_dtype or dtype)
    prec = "f64" if work == np.float64 else "f32"
    with no_grad(), precision(prec):
        for t, d, x0 in zip(inputs, dirs, originals):
            t.data = x0.astype(work) + work.type(h) * d.astype(work)
        f_plus = float(fn().data)
        for t, d, x0 in zip(inputs, dirs, originals):
            t.data = x0.astype(work) - work.type(h) * d.astype(work)
        f_minus = float(fn().data)
    for t, x0 in zip(inputs, originals):
        t.data = x0
    return CheckResult(analytic, (f_plus - f_minus) / (2 * h))


def elementwise_numeric_grad(fn: Callable[[], Tensor], t: Tensor, h: float) -> np.ndarray:
    """Full numerical gradient of ``fn`` w.r.t. ``t`` by per-entry central differences."""
    out = np.zeros(t.shape, dtype=np.float64)
    flat = t.data.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            old = flat[i]
            flat[i] = old + h
            fp = float(fn().data)
            flat[i] = old - h
            fm = float(fn().data)
            flat[i] = old
            out.reshape(-1)[i] = (fp - fm) / (2 * h)
    return out
