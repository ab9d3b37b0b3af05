"""Input checks shared by the estimators and the functional API."""

import numbers

import numpy as np
from sklearn.utils.validation import check_array


def check_features(x, n_features: int | None = None, ensure_2d: bool = True) -> np.ndarray:
    arr = check_array(x, dtype=np.float64, ensure_2d=ensure_2d, ensure_all_finite=True)
    if n_features is not None and arr.shape[-1] != n_features:
        raise ValueError(f"expected {n_features} features, got {arr.shape[-1]}")
    return arr


def check_positive_int(value, name: str, minimum: int = 1) -> int:
    if isinstance(value, bool) or not isinstance(value, numbers.Integral) or value < minimum:
        raise ValueError(f"{name} must be an integer >= {minimum}, got {value!r}")
    return int(value)


def check_probability(value, name: str, low_open=False, high_open=False) -> float:
    v = float(value)
    lo_ok = v > 0 if low_open else v >= 0
    hi_ok = v < 1 if high_open else v <= 1
    if not (lo_ok and hi_ok and np.isfinite(v)):
        lo = "(" if low_open else "["
        hi = ")" if high_open else "]"
        raise ValueError(f"{name} must lie in {lo}0, 1{hi}, got {value!r}")
    return v
