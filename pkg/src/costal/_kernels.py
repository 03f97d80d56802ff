"""Compiled inner loops of the hat-basis logistic learner."""

import numba
import numpy as np


@numba.njit(cache=True)
def committee_logits(base, knot0, inv_step, hats, coord_w, bias, rows, cols, out):
    """Logits of M members for n pixels.

    base (6, n) raw base features; knot0, inv_step (M, 6) map a raw value to
    its continuous bin coordinate ``(x - knot0) * inv_step``; hats (M, 6, B);
    coord_w (M, 2); bias (M,); rows, cols (n,) pixel coordinates; out (M, n).
    """
    n_members, n_base, n_bins = hats.shape
    top = n_bins - 1
    n = base.shape[1]
    for m in range(n_members):
        for j in range(n):
            z = bias[m] + coord_w[m, 0] * rows[j] + coord_w[m, 1] * cols[j]
            for k in range(n_base):
                u = (base[k, j] - knot0[m, k]) * inv_step[m, k]
                if u <= 0.0:
                    z += hats[m, k, 0]
                elif u >= top:
                    z += hats[m, k, top]
                else:
                    i = int(u)
                    f = u - i
                    z += hats[m, k, i] * (1.0 - f) + hats[m, k, i + 1] * f
            out[m, j] = z


@numba.njit(cache=True)
def sgd_epoch(idx, frac, coords, y, perm, w, b, lr, l2, batch_size):
    """One pass of minibatch SGD on logistic loss with L2 on the weights.

    idx (n, 6) lower-hat flat indices, frac (n, 6) interpolation fractions,
    coords (n, 2), y (n,), perm (n,) visiting order. ``w`` (n_hat + 2,) is
    updated in place; returns the new bias.
    """
    n, n_base = idx.shape
    n_w = w.shape[0]
    n_hat = n_w - 2
    grad = np.zeros(n_w)
    decay = 1.0 - lr * l2
    for start in range(0, n, batch_size):
        stop = min(start + batch_size, n)
        grad[:] = 0.0
        gb = 0.0
        for t in range(start, stop):
            j = perm[t]
            z = b + w[n_hat] * coords[j, 0] + w[n_hat + 1] * coords[j, 1]
            for k in range(n_base):
                i = idx[j, k]
                f = frac[j, k]
                z += w[i] * (1.0 - f) + w[i + 1] * f
            if z >= 0:
                p = 1.0 / (1.0 + np.exp(-z))
            else:
                ez = np.exp(z)
                p = ez / (1.0 + ez)
            e = p - y[j]
            for k in range(n_base):
                i = idx[j, k]
                f = frac[j, k]
                grad[i] += e * (1.0 - f)
                grad[i + 1] += e * f
            grad[n_hat] += e * coords[j, 0]
            grad[n_hat + 1] += e * coords[j, 1]
            gb += e
        step = lr / (stop - start)
        for q in range(n_w):
            w[q] = w[q] * decay - step * grad[q]
        b = b - step * gb
    return b
