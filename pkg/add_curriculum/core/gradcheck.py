from __future__ import annotations

from typing import Callable

import numpy as np

from add_curriculum.core.tensor import ContractError, Tape, Tensor, backward, precision


def finite_diff_check(f: Callable[[Tensor], Tensor], x: Tensor, step: float = 1e-3) -> float:
    """Worst coordinate-wise relative error between backward() and central differences.

    The denominator is ``max(|analytic|, |numeric|, 1e-8)``. Both sides are evaluated
    in float64 so that float32 rounding does not swamp the comparison.
    """
    if step <= 0:
        raise ContractError("step must be positive")
    with precision(np.float64):
        base = np.array(x.data, dtype=np.float64)
        tape = Tape()
        leaf = tape.watch(base)
        (analytic,) = backward(tape, f(leaf), [leaf])

        numeric = np.zeros_like(base)
        for index in np.ndindex(base.shape):
            shifted = base.copy()
            shifted[index] = base[index] + step
            upper = f(Tensor(shifted)).item()
            shifted[index] = base[index] - step
            lower = f(Tensor(shifted)).item()
            numeric[index] = (upper - lower) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    if base.size == 0:
        return 0.0
    return float(np.max(np.abs(analytic - numeric) / denom))
