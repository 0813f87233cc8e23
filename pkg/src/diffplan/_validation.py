"""Input checks shared by the estimators."""

from __future__ import annotations

import numpy as np

from .simkit import HOURS, DayContext, PolicyVector


def as_policy_array(pi, n: int | None = None) -> np.ndarray:
    """Policy input as a finite float array of shape (n, 4)."""
    if isinstance(pi, PolicyVector):
        pi = pi.to_array()
    arr = np.atleast_2d(np.asarray(pi, dtype=float))
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"policy must have 4 components per row, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError("policy contains non-finite values")
    if n is not None and arr.shape[0] == 1 and n > 1:
        arr = np.repeat(arr, n, axis=0)
    return arr


def as_hourly(values, name: str, n: int | None = None) -> np.ndarray:
    arr = np.atleast_2d(np.asarray(values, dtype=float))
    if arr.shape[-1] != HOURS or arr.ndim != 2:
        raise ValueError(f"{name} must have {HOURS} hourly values per row, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    if n is not None and arr.shape[0] == 1 and n > 1:
        arr = np.repeat(arr, n, axis=0)
    return arr


def context_arrays(ctx, n: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """(temperature, base_load) rows from a DayContext, a list of them, or a tuple of arrays."""
    if isinstance(ctx, DayContext):
        temp, base = ctx.temperature, ctx.base_load
    elif isinstance(ctx, (list, tuple)) and ctx and isinstance(ctx[0], DayContext):
        temp = np.array([c.temperature for c in ctx])
        base = np.array([c.base_load for c in ctx])
    else:
        temp, base = ctx
    return as_hourly(temp, "temperature", n), as_hourly(base, "base_load", n)


def broadcast_rows(*arrays: np.ndarray) -> list[np.ndarray]:
    n = max(a.shape[0] for a in arrays)
    out = []
    for a in arrays:
        if a.shape[0] == n:
            out.append(a)
        elif a.shape[0] == 1:
            out.append(np.repeat(a, n, axis=0))
        else:
            raise ValueError(f"row counts disagree: {[x.shape[0] for x in arrays]}")
    return out
