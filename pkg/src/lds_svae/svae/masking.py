import numpy as np


def random_mask(rng: np.random.Generator, T: int, fraction: float) -> np.ndarray:
    """Boolean mask (True = observed) hiding one contiguous block of ``round(fraction*T)`` steps."""
    if not 0.0 <= fraction < 1.0:
        raise ValueError(f"mask fraction must lie in [0, 1), got {fraction}")
    mask = np.ones(T, dtype=bool)
    n = int(round(fraction * T))
    if n == 0:
        return mask
    start = int(rng.integers(0, T - n + 1))
    mask[start:start + n] = False
    return mask
