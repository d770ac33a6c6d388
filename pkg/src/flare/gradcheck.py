"""Central-difference gradient checking against the reverse-mode tape."""

import numpy as np

from .errors import InvalidValueError
from .tensor import Tensor


def _scalar(value):
    arr = np.asarray(value.data if isinstance(value, Tensor) else value)
    if arr.size != 1:
        raise InvalidValueError(f"grad_check: objective must be scalar, got shape {arr.shape}")
    v = float(arr.reshape(()))
    if not np.isfinite(v):
        raise InvalidValueError(f"grad_check: objective returned {v}")
    return v


# symmetric offsets and weights of the central-difference stencils
_STENCILS = {
    2: ((1.0, 0.5),),
    4: ((1.0, 8.0 / 12.0), (2.0, -1.0 / 12.0)),
}


def grad_check(f, params, h=1e-6, floor=1e-8, order=2):
    """Compare analytic gradients of ``f()`` with central differences.

    ``f`` takes no arguments and closes over ``params`` (a list of double
    precision leaf tensors). Returns the max over all entries of
    ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``.

    ``order=2`` is the classic (f(x+h) - f(x-h)) / 2h. ``order=4`` uses the
    five-point stencil, whose O(h^4) truncation error allows a larger step
    and so a much lower rounding-noise floor on tiny gradient entries.
    """
    if order not in _STENCILS:
        raise ValueError(f"order must be one of {sorted(_STENCILS)}")
    stencil = _STENCILS[order]
    for p in params:
        p.requires_grad = True
        p.grad = None
    out = f()
    _scalar(out)
    out.backward()
    worst = 0.0
    for p in params:
        analytic = np.zeros_like(p.data) if p.grad is None else p.grad
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            numeric = 0.0
            for k, weight in stencil:
                flat[i] = orig + k * h
                fp = _scalar(f())
                flat[i] = orig - k * h
                fm = _scalar(f())
                numeric += weight * (fp - fm)
            flat[i] = orig
            numeric /= h
            a = analytic.reshape(-1)[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
