"""Pure numpy implementations of the hot kernels.

Every function here has a twin with the same signature in ``_ckernels.pyx``.
Gate layout for the recurrent cells follows the column blocks of ``W``/``U``/``b``:
GRU is ``[update | reset | candidate]``, LSTM is ``[input | forget | cell | output]``.
"""

import numpy as np

NAME = "python"


def _sigmoid(x):
    with np.errstate(over="ignore"):  # exp overflow gives the exact limit 0
        return 1.0 / (1.0 + np.exp(-x))


def gru_forward(x, h, W, U, b):
    """One GRU step. Returns ``(h_new, z, r, n)``; the gates are the backward cache."""
    H = h.shape[1]
    a = x @ W + b
    hu = h @ U[:, : 2 * H]
    z = _sigmoid(a[:, :H] + hu[:, :H])
    r = _sigmoid(a[:, H : 2 * H] + hu[:, H:])
    n = np.tanh(a[:, 2 * H :] + (r * h) @ U[:, 2 * H :])
    h_new = (1.0 - z) * n + z * h
    return h_new, z, r, n


def gru_backward(dh_new, x, h, W, U, z, r, n):
    """Gradients of one GRU step. Returns ``(dx, dh, dW, dU, db)``."""
    H = h.shape[1]
    dn = dh_new * (1.0 - z)
    dz = dh_new * (h - n)
    dh = dh_new * z
    dpre_n = dn * (1.0 - n * n)
    dpre_z = dz * z * (1.0 - z)
    drh = dpre_n @ U[:, 2 * H :].T
    dpre_r = drh * h * r * (1.0 - r)
    dh += drh * r
    dA = np.concatenate([dpre_z, dpre_r, dpre_n], axis=1)
    dh += dA[:, : 2 * H] @ U[:, : 2 * H].T
    dU = np.empty_like(U)
    dU[:, : 2 * H] = h.T @ dA[:, : 2 * H]
    dU[:, 2 * H :] = (r * h).T @ dpre_n
    dW = x.T @ dA
    db = dA.sum(axis=0)
    dx = dA @ W.T
    return dx, dh, dW, dU, db


def lstm_forward(x, h, c, W, U, b):
    """One LSTM step. Returns ``(h_new, c_new, i, f, g, o, tc)``."""
    H = h.shape[1]
    a = x @ W + h @ U + b
    i = _sigmoid(a[:, :H])
    f = _sigmoid(a[:, H : 2 * H])
    g = np.tanh(a[:, 2 * H : 3 * H])
    o = _sigmoid(a[:, 3 * H :])
    c_new = f * c + i * g
    tc = np.tanh(c_new)
    h_new = o * tc
    return h_new, c_new, i, f, g, o, tc


def lstm_backward(dh_new, dc_new, x, h, c, W, U, i, f, g, o, tc):
    """Gradients of one LSTM step. Returns ``(dx, dh, dc, dW, dU, db)``."""
    do = dh_new * tc
    dct = dc_new + dh_new * o * (1.0 - tc * tc)
    dA = np.concatenate(
        [
            dct * g * i * (1.0 - i),
            dct * c * f * (1.0 - f),
            dct * i * (1.0 - g * g),
            do * o * (1.0 - o),
        ],
        axis=1,
    )
    dc = dct * f
    dW = x.T @ dA
    dU = h.T @ dA
    db = dA.sum(axis=0)
    dx = dA @ W.T
    dh = dA @ U.T
    return dx, dh, dc, dW, dU, db


def sos_synthesize(omega, phase, amp, t):
    """Sum of sinusoids ``sum_p amp * exp(j (omega * t + phase))`` per row.

    ``omega``, ``phase``, ``amp`` are ``[R, P]``; ``t`` is ``[n]``.
    Returns real and imaginary parts, each ``[R, n]``.
    """
    arg = omega[:, :, None] * t[None, None, :] + phase[:, :, None]
    re = np.einsum("rp,rpn->rn", amp, np.cos(arg))
    im = np.einsum("rp,rpn->rn", amp, np.sin(arg))
    return re, im


def quad_penalty(theta, anchors, weights, coef):
    """``coef/2 * sum_e sum_i w[e,i] (theta_i - a[e,i])^2`` and its gradient."""
    d = theta[None, :] - anchors
    wd = weights * d
    value = 0.5 * coef * float(np.sum(wd * d))
    grad = coef * wd.sum(axis=0)
    return value, grad
