"""Compiled fixed-step RK4 loop for linear systems with one constant delay.

The delay ``tau = m * dt`` is an integer number of steps. Stage ``c`` of
step ``k`` evaluates the delayed state at ``t_k + c_c dt - tau``, which is
exactly stage ``c`` of step ``k - m``; those stage states are kept in a ring
buffer. This is RK4 applied to the method-of-steps expansion of the delay
equation, so fourth-order accuracy is kept without interpolation.
"""
import numba
import numpy as np


@numba.njit(cache=True)
def _matvec_add(M, x, out):
    d = M.shape[0]
    for i in range(d):
        acc = 0.0
        for j in range(d):
            acc += M[i, j] * x[j]
        out[i] += acc


@numba.njit(cache=True)
def rk4_delay(A_local, A_remote, b_seq, seg_end, x0, n_steps, m, dt, stride, rec, tail_start, tail, blowup):
    """Integrate ``x' = A_local x(t) + A_remote x(t - m dt) + b``.

    ``b_seq[s]`` is active for steps ``k < seg_end[s]`` (after the previous
    segment). Every ``stride``-th state goes to ``rec``; states from index
    ``tail_start`` on go to ``tail``. Returns -1, or the first step index
    whose state is non-finite or exceeds ``blowup`` in max-norm.
    """
    d = x0.shape[0]
    hist = np.empty((max(m, 1), 4, d))
    for r in range(hist.shape[0]):
        for c in range(4):
            hist[r, c, :] = x0
    x = x0.copy()
    Y = np.empty((4, d))
    K = np.empty((4, d))
    coef = (0.0, 0.5, 0.5, 1.0)
    seg = 0
    rec[0, :] = x
    if tail_start == 0:
        tail[0, :] = x
    for k in range(n_steps):
        while k >= seg_end[seg]:
            seg += 1
        b = b_seq[seg]
        slot = k % m if m > 0 else 0
        for c in range(4):
            for i in range(d):
                Y[c, i] = x[i] if c == 0 else x[i] + coef[c] * dt * K[c - 1, i]
            for i in range(d):
                K[c, i] = b[i]
            _matvec_add(A_local, Y[c], K[c])
            if m > 0:
                _matvec_add(A_remote, hist[slot, c], K[c])
            else:
                _matvec_add(A_remote, Y[c], K[c])
        if m > 0:
            for c in range(4):
                hist[slot, c, :] = Y[c]
        for i in range(d):
            x[i] = x[i] + dt / 6.0 * (K[0, i] + 2.0 * K[1, i] + 2.0 * K[2, i] + K[3, i])
            a = abs(x[i])
            if not a <= blowup:
                return k + 1
        j = k + 1
        if j % stride == 0:
            rec[j // stride, :] = x
        if j >= tail_start:
            tail[j - tail_start, :] = x
    return -1
