"""Central finite-difference gradient estimation.

This is the independent route for verifying every analytic backward
rule: it only ever calls the forward computation, twice per perturbed
element, and never touches the recorded graph.
"""

import numpy as np


def central_difference(f, arr: np.ndarray, h_scale: float = 1e-5,
                       fixed_h: float | None = None) -> np.ndarray:
    """Estimate d f / d arr elementwise by central differences.

    `f` must be a zero-argument callable returning a float and reading
    `arr` by reference; entries are perturbed in place and restored.
    Step size is fixed_h when given, else h_scale * max(1, |x|).
    """
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.reshape(-1)
    for i in range(flat.size):
        x = flat[i]
        h = fixed_h if fixed_h is not None else h_scale * max(1.0, abs(float(x)))
        flat[i] = x + h
        fp = f()
        flat[i] = x - h
        fm = f()
        flat[i] = x
        grad.reshape(-1)[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray,
                  guard: float = 1.0) -> float:
    """Largest |a - n| / max(guard, |a|, |n|) over all entries.

    The guard turns the metric into an absolute comparison for entries
    much smaller than `guard`, where central differences are dominated
    by rounding noise.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(guard, np.maximum(np.abs(a), np.abs(n)))
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))
