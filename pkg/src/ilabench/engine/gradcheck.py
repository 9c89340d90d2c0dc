from __future__ import annotations

import numpy as np

from .tensor import Tape, Tensor, backward, no_grad

DENOM_GUARD = 1e-8


def relative_error(analytic, numeric, guard=DENOM_GUARD):
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), guard)
    return np.abs(analytic - numeric) / denom


def finite_difference_check(f, x, n_coords=100, h=1e-3, seed=0, oracle_dtype=None,
                            return_details=False, kink_tol=None):
    """Worst relative error between backward() and central differences.

    ``f`` maps a Tensor to a scalar Tensor.  The analytic gradient is taken
    at ``x`` in its own dtype; the numeric one evaluates
    ``(f(x + h e_i) - f(x - h e_i)) / 2h`` on ``n_coords`` random coordinates,
    optionally after casting ``x`` to ``oracle_dtype`` so that a float32
    gradient can be judged against a float64 difference quotient.

    With ``kink_tol`` set, a coordinate whose forward and backward one-sided
    slopes disagree by more than that relative amount straddles a point of
    non-differentiability (a ReLU or max-pool switch within ``h``).  Such
    coordinates are replaced by fresh ones so ``n_coords`` valid coordinates
    are still compared; the skipped ones are listed in the details.
    A NaN anywhere propagates to the returned error.
    """
    x = np.array(x, copy=True)
    with Tape():
        xt = Tensor(x, requires_grad=True, dtype=x.dtype)
        out = f(xt)
        backward(out)
    analytic = xt.grad.ravel()

    rng = np.random.default_rng(seed)
    n = min(n_coords, x.size)
    order = rng.permutation(x.size)
    base = x.astype(oracle_dtype) if oracle_dtype is not None else x.copy()
    flat = base.reshape(-1)
    coords, numeric, skipped = [], [], []
    with no_grad():
        f0 = float(f(Tensor(base, dtype=base.dtype)).data) if kink_tol is not None else None
        for i in order:
            if len(coords) == n:
                break
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(base, dtype=base.dtype)).data)
            flat[i] = orig - h
            fm = float(f(Tensor(base, dtype=base.dtype)).data)
            flat[i] = orig
            if kink_tol is not None:
                right, left = (fp - f0) / h, (f0 - fm) / h
                if abs(right - left) > kink_tol * max(abs(right), abs(left), DENOM_GUARD):
                    skipped.append(int(i))
                    continue
            coords.append(int(i))
            numeric.append((fp - fm) / (2 * h))
    coords, numeric = np.array(coords, dtype=np.int64), np.array(numeric)
    err = relative_error(analytic[coords], numeric)
    worst = float(np.nan) if np.isnan(err).any() else float(err.max(initial=0.0))
    if return_details:
        return worst, {"coords": coords, "analytic": analytic[coords], "numeric": numeric,
                       "skipped": skipped}
    return worst
