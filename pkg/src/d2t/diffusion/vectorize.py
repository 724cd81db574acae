"""Complex N x M channel <-> real vector of length 2NM (real parts, then imaginary parts)."""

from __future__ import annotations

import numpy as np


def channel_to_vector(H: np.ndarray) -> np.ndarray:
    H = np.asarray(H)
    flat = H.reshape(*H.shape[:-2], -1)
    return np.concatenate([flat.real, flat.imag], axis=-1).astype(np.float64)


def vector_to_channel(x: np.ndarray, N: int, M: int) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != 2 * N * M:
        raise ValueError(f"vector length {x.shape[-1]} does not match 2*N*M = {2 * N * M}")
    half = N * M
    z = x[..., :half] + 1j * x[..., half:]
    return z.reshape(*x.shape[:-1], N, M)
