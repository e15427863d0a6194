import numpy as np


def mse(truth, estimate) -> float:
    """Mean squared error over the N items."""
    t = np.asarray(truth, dtype=float)
    e = np.asarray(estimate, dtype=float)
    if t.shape != e.shape or t.ndim != 1 or t.size == 0:
        raise ValueError(f"need two equal-length non-empty vectors, got {t.shape} and {e.shape}")
    return float(np.mean((t - e) ** 2))


def squared_l2(truth, estimate) -> float:
    t = np.asarray(truth, dtype=float)
    e = np.asarray(estimate, dtype=float)
    if t.shape != e.shape:
        raise ValueError("length mismatch")
    return float(np.sum((t - e) ** 2))
