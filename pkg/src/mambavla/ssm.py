"""Selective SSM kernels: ZOH discretization and linear-recurrence scans.

These are plain-numpy reference kernels (no autodiff): the verified
numerical layer that the benchmark times and the tests oracle against.
The differentiable model path composes the same math from `diffcore`
primitives inside `mamba`.

Shapes follow the per-channel diagonal convention:
  A     [D, N]        diagonal continuous-time state matrix per channel
  B, C  [N] or [L, N] input / output projections (shared across channels)
  delta [D] or [L, D] per-channel step sizes
  x     [L, D]        driving sequence
  h     [D, N]        state

A leading L axis on B/C/delta makes the system time-varying (the selective
case); static and time-varying parameters may be mixed freely.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "discretize_zoh",
    "scan_sequential",
    "scan_parallel",
    "continuous_ode_oracle",
    "ZOH_SERIES_CUTOFF",
]

# below this |delta * A| the exact (exp(z)-1)/z expression switches to its
# Taylor series, which is exact at z = 0
ZOH_SERIES_CUTOFF = 1e-6


def _phi(z: np.ndarray) -> np.ndarray:
    """(exp(z) - 1) / z with a series branch for |z| < ZOH_SERIES_CUTOFF."""
    small = np.abs(z) < ZOH_SERIES_CUTOFF
    # avoid 0/0 in the exact branch; the masked lanes are overwritten
    safe = np.where(small, 1.0, z)
    exact = np.expm1(safe) / safe
    series = 1.0 + z / 2.0 + (z * z) / 6.0
    return np.where(small, series, exact)


def discretize_zoh(A: np.ndarray, B: np.ndarray,
                   delta: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Zero-order-hold discretization of (A, B) under step sizes delta.

        Abar = exp(delta . A)
        Bbar = ((exp(delta . A) - 1) / (delta . A)) . delta . B

    Exact for piecewise-constant input held over each delta window.  Returns
    [D, N] arrays for static parameters or [L, D, N] when delta and/or B
    carry a leading time axis.
    """
    A = np.asarray(A)
    B = np.asarray(B)
    delta = np.asarray(delta)
    if A.ndim != 2:
        raise ValueError(f"discretize_zoh: A must be [D, N], got shape {A.shape}")
    D, N = A.shape
    if delta.ndim not in (1, 2) or delta.shape[-1] != D:
        raise ValueError(f"discretize_zoh: delta must be [D] or [L, D] with D={D}, "
                         f"got {delta.shape}")
    if B.ndim not in (1, 2) or B.shape[-1] != N:
        raise ValueError(f"discretize_zoh: B must be [N] or [L, N] with N={N}, "
                         f"got {B.shape}")
    for name, arr in (("A", A), ("B", B), ("delta", delta)):
        if not np.isfinite(arr).all():
            raise ValueError(f"discretize_zoh: {name} contains non-finite values")

    time_varying = delta.ndim == 2 or B.ndim == 2
    if delta.ndim == 2 and B.ndim == 2 and delta.shape[0] != B.shape[0]:
        raise ValueError(f"discretize_zoh: time axes differ: delta {delta.shape}, "
                         f"B {B.shape}")

    if time_varying:
        L = delta.shape[0] if delta.ndim == 2 else B.shape[0]
        dt = delta if delta.ndim == 2 else np.broadcast_to(delta, (L, D))
        Bt = B if B.ndim == 2 else np.broadcast_to(B, (L, N))
        z = dt[:, :, None] * A[None, :, :]            # [L, D, N]
        Abar = np.exp(z)
        Bbar = _phi(z) * dt[:, :, None] * Bt[:, None, :]
    else:
        z = delta[:, None] * A                        # [D, N]
        Abar = np.exp(z)
        Bbar = _phi(z) * delta[:, None] * B[None, :]
    return Abar, Bbar


def _check_scan_args(Abar, Bbar, C, x):
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"scan: x must be [L, D], got {x.shape}")
    L, D = x.shape
    if L == 0:
        raise ValueError("scan: empty sequence")
    for name, arr, static_rank in (("Abar", Abar, 2), ("Bbar", Bbar, 2), ("C", C, 1)):
        arr = np.asarray(arr)
        if arr.ndim == static_rank + 1 and arr.shape[0] != L:
            raise ValueError(f"scan: {name} time axis {arr.shape[0]} != L={L}")
        if arr.ndim not in (static_rank, static_rank + 1):
            raise ValueError(f"scan: {name} has rank {arr.ndim}, expected "
                             f"{static_rank} or {static_rank + 1}")
    return L, D


def _at(arr: np.ndarray, t: int, static_rank: int) -> np.ndarray:
    return arr[t] if arr.ndim == static_rank + 1 else arr


def scan_sequential(Abar: np.ndarray, Bbar: np.ndarray, C: np.ndarray,
                    x: np.ndarray, h0: np.ndarray | None = None,
                    return_states: bool = False):
    """Reference recurrence h_t = Abar_t h_{t-1} + Bbar_t x_t, y_t = C_t . h_t.

    Returns (y [L, D], h_final [D, N]); with return_states=True appends the
    full state trajectory [L, D, N].
    """
    Abar, Bbar, C, x = map(np.asarray, (Abar, Bbar, C, x))
    L, D = _check_scan_args(Abar, Bbar, C, x)
    N = Abar.shape[-1]
    dtype = np.result_type(Abar, Bbar, C, x)
    h = np.zeros((D, N), dtype=dtype) if h0 is None else np.asarray(h0).astype(dtype)
    y = np.empty((L, D), dtype=dtype)
    states = np.empty((L, D, N), dtype=dtype) if return_states else None
    for t in range(L):
        h = _at(Abar, t, 2) * h + _at(Bbar, t, 2) * x[t][:, None]
        y[t] = h @ _at(C, t, 1)
        if return_states:
            states[t] = h
    return (y, h, states) if return_states else (y, h)


def scan_parallel(Abar: np.ndarray, Bbar: np.ndarray, C: np.ndarray,
                  x: np.ndarray, h0: np.ndarray | None = None,
                  block_size: int = 64, return_states: bool = False):
    """Chunked associative scan over the affine-map monoid.

    Each step is the map h -> a h + b with a = Abar_t, b = Bbar_t x_t; maps
    compose as (a2, b2) o (a1, b1) = (a2 a1, a2 b1 + b2).  Positions inside
    each block are combined with a vectorized Hillis-Steele sweep (log2
    passes); block carries chain sequentially.  Matches scan_sequential to
    reassociation rounding.
    """
    Abar, Bbar, C, x = map(np.asarray, (Abar, Bbar, C, x))
    L, D = _check_scan_args(Abar, Bbar, C, x)
    if block_size < 1:
        raise ValueError(f"scan: block_size must be >= 1, got {block_size}")
    N = Abar.shape[-1]
    dtype = np.result_type(Abar, Bbar, C, x)

    a = np.broadcast_to(Abar, (L, D, N)).astype(dtype, copy=True)
    if Bbar.ndim == 3:
        b = Bbar * x[:, :, None]
    else:
        b = Bbar[None, :, :] * x[:, :, None]
    b = b.astype(dtype, copy=False)

    nb = -(-L // block_size)
    pad = nb * block_size - L
    if pad:
        # identity map elements: a = 1, b = 0
        a = np.concatenate([a, np.ones((pad, D, N), dtype=dtype)], axis=0)
        b = np.concatenate([b, np.zeros((pad, D, N), dtype=dtype)], axis=0)
    a = a.reshape(nb, block_size, D, N)
    b = b.reshape(nb, block_size, D, N).copy()

    # inclusive in-block scan, vectorized across blocks
    s = 1
    while s < block_size:
        b[:, s:] = b[:, s:] + a[:, s:] * b[:, :-s]
        a[:, s:] = a[:, s:] * a[:, :-s]
        s *= 2

    # carry the state across blocks
    h = (np.zeros((D, N), dtype=dtype) if h0 is None
         else np.asarray(h0).astype(dtype))
    states = np.empty((nb, block_size, D, N), dtype=dtype)
    for k in range(nb):
        states[k] = a[k] * h + b[k]
        h = states[k, -1]
    states = states.reshape(nb * block_size, D, N)[:L]
    h_final = states[-1]

    if C.ndim == 2:
        y = np.einsum("ldn,ln->ld", states, C)
    else:
        y = states @ C
    return (y, h_final, states) if return_states else (y, h_final)


def continuous_ode_oracle(A: np.ndarray, B: np.ndarray, C: np.ndarray,
                          x: np.ndarray, delta: float,
                          substeps: int = 100) -> np.ndarray:
    """Integrate h' = A h + B x with fixed-step RK4, x held constant per window.

    Test-only ground truth: ZOH discretization is exact for this piecewise-
    constant input, so the discrete scan must match the integrated system.
    Always runs in float64.  `substeps` RK4 steps per delta window (>= 10).
    """
    if substeps < 10:
        raise ValueError(f"continuous_ode_oracle: substeps must be >= 10, got {substeps}")
    if delta <= 0:
        raise ValueError(f"continuous_ode_oracle: delta must be > 0, got {delta}")
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    C = np.asarray(C, dtype=np.float64)
    x = np.asarray(x, dtype=np.float64)
    L, D = x.shape
    h = np.zeros((D, A.shape[1]))
    dt = delta / substeps
    y = np.empty((L, D))
    for t in range(L):
        u = B[None, :] * x[t][:, None]
        for _ in range(substeps):
            k1 = A * h + u
            k2 = A * (h + 0.5 * dt * k1) + u
            k3 = A * (h + 0.5 * dt * k2) + u
            k4 = A * (h + dt * k3) + u
            h = h + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
        y[t] = h @ C
    return y
