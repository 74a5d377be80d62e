"""Input validation helpers shared by the estimators."""

from __future__ import annotations

import numpy as np


def check_observations(obs, grid_dims) -> np.ndarray:
    """Return ``obs`` as a uint8 batch shaped (B, *grid_dims).

    A single grid is promoted to a batch of one. Raises ``ValueError`` on a
    dimension mismatch or labels outside {0, 1, 2}.
    """
    arr = np.asarray(obs)
    grid_dims = tuple(int(n) for n in grid_dims)
    if arr.ndim == len(grid_dims):
        arr = arr[None]
    if arr.ndim != len(grid_dims) + 1 or tuple(arr.shape[1:]) != grid_dims:
        raise ValueError(f"dimension mismatch: observation shape {np.shape(obs)} vs grid {grid_dims}")
    if arr.dtype != np.uint8:
        if not np.all(np.isin(arr, (0, 1, 2))):
            raise ValueError("observation labels must be 0, 1 or 2")
        arr = arr.astype(np.uint8)
    elif arr.size and arr.max() > 2:
        raise ValueError("observation labels must be 0, 1 or 2")
    return arr
