"""Dense tensor conventions and the finite-difference gradient oracle.

Tensors are plain numpy arrays in row-major order. Two precisions are
supported per run: "standard" (float32, training) and "high" (float64,
mandatory for every gradient-oracle suite, where finite differences in
float32 would drown in rounding noise).
"""

import numpy as np

from .errors import OracleInvalidError, ValidationError

PRECISIONS = {"standard": np.float32, "high": np.float64}


def dtype_for(precision):
    """Map a precision name to its numpy dtype."""
    try:
        return PRECISIONS[precision]
    except KeyError:
        raise ValidationError(f"unknown precision {precision!r}; expected one of {sorted(PRECISIONS)}")


def precision_of(array):
    """Inverse of dtype_for, for serialization."""
    for name, dt in PRECISIONS.items():
        if array.dtype == dt:
            return name
    raise ValidationError(f"unsupported dtype {array.dtype}")


def as_tensor(data, precision="standard"):
    """Materialize data as a contiguous array of the requested precision."""
    return np.ascontiguousarray(data, dtype=dtype_for(precision))


def ensure_finite(x, what="tensor"):
    """Reject NaN/Inf. Returns x unchanged so it can be used inline."""
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{what} contains non-finite values")
    return x


def max_relative_error(analytic, numeric, floor=1e-8):
    """max over coordinates of |a - n| / max(|a|, |n|, floor).

    Raising the floor turns the comparison absolute for coordinates whose
    true gradient sits below it, which is how checks over deep compositions
    absorb the rounding noise of the difference quotient.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def numerical_gradient(f, params, h=1e-5):
    """Central-difference gradient of scalar f with respect to each named tensor.

    params maps names to float64 arrays; they are perturbed in place and
    restored, so f may close over them directly.
    """
    grads = {}
    for name, p in params.items():
        if p.dtype != np.float64:
            raise OracleInvalidError(f"finite differences require high precision; {name} is {p.dtype}")
        g = np.zeros_like(p)
        flat = p.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = f()
            flat[i] = orig - h
            fm = f()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * h)
        grads[name] = g
    return grads


def grad_check(f, params, analytic_grads, h=1e-5, floor=1e-8):
    """Compare analytic gradients against central finite differences.

    f is a zero-argument callable returning a scalar, deterministic under a
    fixed seed (dropout masks and batchnorm mode must be pinned by the
    caller). Returns a dict name -> max relative error.
    """
    a = float(f())
    b = float(f())
    if a != b:
        raise OracleInvalidError(f"computation is not deterministic ({a!r} != {b!r}); oracle invalid")
    numeric = numerical_gradient(f, params, h=h)
    report = {}
    for name, num in numeric.items():
        if name not in analytic_grads:
            raise ValidationError(f"no analytic gradient supplied for {name!r}")
        report[name] = max_relative_error(analytic_grads[name], num, floor=floor)
    return report
