"""Central finite-difference gradient check."""

import logging
from typing import Callable, Optional, Sequence

import numpy as np

from .tensor import Tape, Tensor

log = logging.getLogger("ipt-lab")


def finite_diff_check(f: Callable[[Tensor], Tensor], point: Tensor, h: float = 1e-5,
                      coords: Optional[Sequence[int]] = None, floor: float = 1e-12) -> float:
    """Largest relative error between the tape gradient of ``f`` at ``point``
    and a central difference with step ``h``.

    The error per coordinate is ``|analytic - numeric| / (|analytic| + floor)``.
    ``coords`` restricts the check to flat indices of ``point``. A
    non-finite function value anywhere is reported as ``inf``; ``point`` is
    restored before returning.
    """
    base = point.data.copy()
    was = point.requires_grad
    point.requires_grad = True
    point.grad = None
    try:
        with Tape() as tape:
            out = f(point)
        if not np.all(np.isfinite(out.data)):
            return float("inf")
        tape.backward(out)
        analytic = np.zeros_like(base) if point.grad is None else point.grad.copy()
    except (ValueError, FloatingPointError) as e:
        log.debug(f"gradient check could not evaluate f: {e}")
        return float("inf")
    finally:
        point.requires_grad = was
        point.grad = None
        point.data = base.copy()

    flat = base.reshape(-1)
    indices = range(flat.size) if coords is None else coords
    worst = 0.0
    for i in indices:
        try:
            up, down = flat.copy(), flat.copy()
            up[i] += h
            down[i] -= h
            point.data = up.reshape(base.shape)
            f_up = float(f(point).data)
            point.data = down.reshape(base.shape)
            f_down = float(f(point).data)
        except (ValueError, FloatingPointError):
            return float("inf")
        finally:
            point.data = base.copy()
        if not (np.isfinite(f_up) and np.isfinite(f_down)):
            return float("inf")
        numeric = (f_up - f_down) / (2 * h)
        a = analytic.reshape(-1)[i]
        worst = max(worst, abs(a - numeric) / (abs(a) + floor))
    return worst
