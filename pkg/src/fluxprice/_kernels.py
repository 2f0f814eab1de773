"""Hot numeric kernels, in numba and pure-numpy versions.

Two inner loops dominate runtime: the two-resource dispatch recursion over
large trajectory batches, and the stage maximization of the tagged-consumer
dynamic program (a max over the action axis of a broadcast sum).  Both ship
as ``@njit`` loops and as vectorized numpy code; ``_backend`` picks one at
import time and ``benchmarks/bench_kernels.py`` times them against each
other.
"""

from __future__ import annotations

import numpy as np

from ._backend import using_numba

__all__ = ["dispatch_batch", "stage_max", "dispatch_batch_numpy", "stage_max_numpy"]


def dispatch_batch_numpy(w: np.ndarray, r_b: float, r_d: float):
    """Dispatch recursion and its pairwise surrogate over a trajectory batch.

    ``w`` has shape (batch, T): demand deviations for stages 1..T (the stage-0
    deviation is zero).  Returns per-trajectory arrays: exact cost, surrogate
    cost, a load-shedding flag, and a flag for the error-generating pattern
    (nonpositive deviation followed by two escalating surges).
    """
    w = np.asarray(w, dtype=float)
    m, T = w.shape
    b_prev = np.zeros(m)
    d_prev = np.zeros(m)
    w_prev = np.zeros(m)
    cost = np.zeros(m)
    surr = np.zeros(m)
    shed = np.zeros(m, dtype=bool)
    for t in range(T):
        wt = w[:, t]
        pos = wt > 0.0
        b = np.where(pos, np.minimum(wt, b_prev + r_b), 0.0)
        d = np.where(pos, np.minimum(wt - b, d_prev + r_d), 0.0)
        cost += b * b + 10.0 * d * d
        shed |= pos & (b + d < wt - 1e-12)

        dt = np.minimum(r_d, np.maximum(0.0, wt - np.maximum(w_prev, 0.0) - r_b))
        bt = np.maximum(0.0, wt - dt)
        surr += bt * bt + 10.0 * dt * dt

        b_prev, d_prev, w_prev = b, d, wt

    pattern = np.zeros(m, dtype=bool)
    wp = np.concatenate([np.zeros((m, 1)), w], axis=1)  # prepend the stage-0 zero
    for t in range(1, T):
        pattern |= (wp[:, t - 1] <= 0.0) & (wp[:, t] > r_b) & (wp[:, t + 1] > 2.0 * r_b)
    return cost, surr, shed, pattern


def stage_max_numpy(m_za: np.ndarray, p_pa: np.ndarray) -> np.ndarray:
    """``out[i, j] = max_k m_za[i, k] + p_pa[j, k]`` without materializing the
    full 3-d sum (chunked over the first axis)."""
    Zg = m_za.shape[0]
    Ap = p_pa.shape[0]
    out = np.empty((Zg, Ap))
    chunk = max(1, int(4_000_000 // max(1, p_pa.size)))
    for lo in range(0, Zg, chunk):
        hi = min(Zg, lo + chunk)
        out[lo:hi] = (m_za[lo:hi, None, :] + p_pa[None, :, :]).max(axis=2)
    return out


if using_numba():
    from numba import njit

    @njit(cache=True)
    def _dispatch_batch_nb(w, r_b, r_d):
        m, T = w.shape
        cost = np.zeros(m)
        surr = np.zeros(m)
        shed = np.zeros(m, dtype=np.bool_)
        pattern = np.zeros(m, dtype=np.bool_)
        for i in range(m):
            b_prev = 0.0
            d_prev = 0.0
            w_prev = 0.0
            for t in range(T):
                wt = w[i, t]
                if wt > 0.0:
                    b = min(wt, b_prev + r_b)
                    d = min(wt - b, d_prev + r_d)
                    if b + d < wt - 1e-12:
                        shed[i] = True
                else:
                    b = 0.0
                    d = 0.0
                cost[i] += b * b + 10.0 * d * d

                wp = w_prev if w_prev > 0.0 else 0.0
                dt = wt - wp - r_b
                if dt < 0.0:
                    dt = 0.0
                if dt > r_d:
                    dt = r_d
                bt = wt - dt
                if bt < 0.0:
                    bt = 0.0
                surr[i] += bt * bt + 10.0 * dt * dt

                if t >= 1 and w[i, t - 1] <= 0.0 and wt > r_b and t + 1 < T and w[i, t + 1] > 2.0 * r_b:
                    pattern[i] = True
                if t == 0 and wt > r_b and t + 1 < T and w[i, t + 1] > 2.0 * r_b:
                    pattern[i] = True

                b_prev = b
                d_prev = d
                w_prev = wt
        return cost, surr, shed, pattern

    @njit(cache=True)
    def _stage_max_nb(m_za, p_pa):
        Zg, Ag = m_za.shape
        Ap = p_pa.shape[0]
        out = np.empty((Zg, Ap))
        for i in range(Zg):
            for j in range(Ap):
                best = m_za[i, 0] + p_pa[j, 0]
                for k in range(1, Ag):
                    v = m_za[i, k] + p_pa[j, k]
                    if v > best:
                        best = v
                out[i, j] = best
        return out

    def dispatch_batch(w, r_b, r_d):
        return _dispatch_batch_nb(np.ascontiguousarray(w, dtype=np.float64), float(r_b), float(r_d))

    def stage_max(m_za, p_pa):
        return _stage_max_nb(
            np.ascontiguousarray(m_za, dtype=np.float64),
            np.ascontiguousarray(p_pa, dtype=np.float64),
        )

else:
    dispatch_batch = dispatch_batch_numpy
    stage_max = stage_max_numpy
